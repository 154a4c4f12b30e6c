//! Classifier wrapper: prediction records, the filter mask hook and the thresholded
//! binary filter activation map.

mod cnn;

pub use cnn::{
    global_average_pool, Architecture, Cnn, ConvBlockSpec, ConvLayer, ForwardTrace, Gradients,
    CHECKPOINT_VERSION,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::scalar::{all_finite, argmax, sigmoid, softmax, Scalar};
use crate::tensor::Tensor3;

pub const RECORD_VERSION: u64 = 1;

/// Default sigmoid threshold for the binary activation map.
pub const DEFAULT_ACTIVATION_THRESHOLD: f64 = 0.5;

/// Which final-layer filters are "on" for one prediction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FilterActivationMap {
    #[serde(with = "bits01")]
    bits: Vec<bool>,
}

impl FilterActivationMap {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn from_indices(n: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut bits = vec![false; n];
        for i in indices {
            if i >= n {
                return Err(Error::Usage(format!(
                    "filter index {i} out of range for {n} filters"
                )));
            }
            bits[i] = true;
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_set(&self, k: usize) -> bool {
        self.bits[k]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| i)
    }

    /// 0/1 vector in the scalar type, e.g. for use as a filter mask.
    pub fn as_mask<T: Scalar>(&self) -> Vec<T> {
        self.bits
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect()
    }
}

mod bits01 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bits: &[bool], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(bits.iter().map(|&b| u8::from(b)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!(
                    "activation bit must be 0 or 1, got {other}"
                ))),
            })
            .collect()
    }
}

/// Entry `k` is set iff `sigmoid(g[k]) > t`.
pub fn binary_activation_map<T: Scalar>(gap_features: &[T], t: T) -> Result<FilterActivationMap> {
    if !(t > T::zero() && t < T::one()) {
        return Err(Error::Usage(format!(
            "activation threshold must lie in (0, 1), got {t}"
        )));
    }
    if !all_finite(gap_features) {
        return Err(Error::Numeric("non-finite GAP feature".into()));
    }
    Ok(FilterActivationMap {
        bits: gap_features.iter().map(|&g| sigmoid(g) > t).collect(),
    })
}

/// One inference event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PredictionRecord<T> {
    pub record_version: u64,
    pub image_id: String,
    pub inferred_class: usize,
    pub confidence: T,
    pub true_class: Option<usize>,
    pub gap_features: Vec<T>,
    pub activation_map: FilterActivationMap,
}

impl<T: Scalar> PredictionRecord<T> {
    pub fn is_correct(&self) -> Option<bool> {
        self.true_class.map(|c| c == self.inferred_class)
    }

    pub fn filter_count(&self) -> usize {
        self.gap_features.len()
    }
}

impl<T: Scalar> Cnn<T> {
    pub fn logits(&self, image: &Tensor3<T>) -> Result<Vec<T>> {
        Ok(self.forward(image)?.logits)
    }

    /// Prediction with the default activation threshold.
    pub fn predict(
        &self,
        image_id: &str,
        image: &Tensor3<T>,
        true_class: Option<usize>,
    ) -> Result<PredictionRecord<T>> {
        self.predict_with_threshold(
            image_id,
            image,
            true_class,
            T::lit(DEFAULT_ACTIVATION_THRESHOLD),
        )
    }

    pub fn predict_with_threshold(
        &self,
        image_id: &str,
        image: &Tensor3<T>,
        true_class: Option<usize>,
        t: T,
    ) -> Result<PredictionRecord<T>> {
        if let Some(c) = true_class {
            if c >= self.label_count() {
                return Err(Error::Usage(format!("true class {c} out of range")));
            }
        }
        let trace = self.forward(image)?;
        record_from_trace(image_id, &trace.gap, &trace.logits, true_class, t)
    }
}

pub(crate) fn record_from_trace<T: Scalar>(
    image_id: &str,
    gap: &[T],
    logits: &[T],
    true_class: Option<usize>,
    t: T,
) -> Result<PredictionRecord<T>> {
    if !all_finite(logits) || !all_finite(gap) {
        return Err(Error::Numeric(format!(
            "non-finite activations for image {image_id}"
        )));
    }
    let probs = softmax(logits);
    let inferred_class = argmax(&probs);
    Ok(PredictionRecord {
        record_version: RECORD_VERSION,
        image_id: image_id.to_string(),
        inferred_class,
        confidence: probs[inferred_class],
        true_class,
        gap_features: gap.to_vec(),
        activation_map: binary_activation_map(gap, t)?,
    })
}

pub fn write_records<T: Scalar>(
    path: impl AsRef<Path>,
    records: &[PredictionRecord<T>],
) -> Result<()> {
    jsonl::write(path, records)
}

pub fn read_records<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord<T>>> {
    jsonl::read_versioned(path, "record_version", "prediction record", RECORD_VERSION)
}
