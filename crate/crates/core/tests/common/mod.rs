//! Builders shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use mcfilter::cfe::MCFilterSet;
use mcfilter::dataset::ShapesConfig;
use mcfilter::model::{
    binary_activation_map, Architecture, Cnn, FilterActivationMap, PredictionRecord, RECORD_VERSION,
};
use mcfilter::pipeline::{BootstrapConfig, PipelineConfig};
use mcfilter::profile::GlobalFilterSet;
use mcfilter::tensor::Tensor3;
use proptest::prelude::*;

pub fn record(
    id: &str,
    inferred: usize,
    truth: usize,
    confidence: f64,
    gap: Vec<f64>,
) -> PredictionRecord<f64> {
    let activation_map = binary_activation_map(&gap, 0.5).unwrap();
    PredictionRecord {
        record_version: RECORD_VERSION,
        image_id: id.to_string(),
        inferred_class: inferred,
        confidence,
        true_class: Some(truth),
        gap_features: gap,
        activation_map,
    }
}

pub fn mc_set(id: &str, class_label: usize, indices: &[usize], gap: &[f64]) -> MCFilterSet<f64> {
    let mut indices = indices.to_vec();
    indices.sort_unstable();
    indices.dedup();
    MCFilterSet {
        image_id: id.to_string(),
        class_label,
        magnitudes: indices.iter().map(|&k| (k, gap[k])).collect(),
        indices,
        n: gap.len(),
        degenerate: false,
    }
}

pub fn global_set(class_label: usize, bits: Vec<bool>) -> GlobalFilterSet {
    let normalized_freq = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    GlobalFilterSet {
        class_label,
        bits: FilterActivationMap::from_bits(bits),
        normalized_freq,
    }
}

pub fn global_sets(sets: Vec<GlobalFilterSet>) -> BTreeMap<usize, GlobalFilterSet> {
    sets.into_iter().map(|s| (s.class_label, s)).collect()
}

/// One (record, MC set) pair; the set is drawn from the strictly positive
/// features so magnitudes match what the extractor would produce.
#[derive(Debug, Clone)]
pub struct Pair {
    pub record: PredictionRecord<f64>,
    pub mc: MCFilterSet<f64>,
}

pub fn pair_strategy(n: usize, labels: usize) -> impl Strategy<Value = Pair> {
    (
        0..labels,
        0..labels,
        0.0f64..1.0,
        prop::collection::vec(0.0f64..3.0, n),
        prop::collection::vec(any::<bool>(), n),
        any::<u32>(),
    )
        .prop_map(move |(inferred, truth, confidence, gap, pick, tag)| {
            let indices: Vec<usize> = (0..n).filter(|&k| pick[k]).collect();
            let id = format!("img{tag}");
            Pair {
                mc: mc_set(&id, inferred, &indices, &gap),
                record: record(&id, inferred, truth, confidence, gap),
            }
        })
}

pub fn bits_strategy(n: usize) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), n)
}

/// Small random network (one conv layer, no pooling).
pub fn tiny_net(filters: usize, labels: usize, seed: u64) -> Cnn<f64> {
    Cnn::new(Architecture::tiny(2, 4, filters, labels), seed).unwrap()
}

pub fn random_image(channels: usize, side: usize, seed: u64) -> Tensor3<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor3::from_fn(channels, side, side, |_, _, _| rng.random_range(0.0..1.0))
}

/// Full pipeline on 60 training images per class; large enough that every
/// class gets a confident, correct prediction and hence a global set.
pub fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.bootstrap = BootstrapConfig {
        shapes: ShapesConfig {
            train_per_class: 60,
            test_per_class: 10,
            ..ShapesConfig::default()
        },
        epochs: 30,
        ..BootstrapConfig::default()
    };
    cfg.extract.tau = 0.5;
    cfg.debug.tau = 0.5;
    cfg.debug.epochs = 1;
    cfg.report.overlays = 2;
    cfg
}
