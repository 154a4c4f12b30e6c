//! Retraining with the filter-alignment objective
//! `L_d = L_CE + λ₁·L_MC + λ₂·L_nonMC`, and the cross-entropy-only
//! fine-tuning baseline it is compared against.

mod losses;

pub use losses::{alignment_gradient, loss_ce, loss_d, loss_mc, loss_nonmc, CE_EPSILON};

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfe::{identify_from_features, CfeConfig};
use crate::dataset::{Dataset, Sample};
use crate::detector::agreement_recall;
use crate::error::{Error, Result};
use crate::model::{binary_activation_map, Cnn, ForwardTrace, Gradients, PredictionRecord};
use crate::profile::GlobalFilterSet;
use crate::scalar::{argmax, sigmoid, softmax, Scalar};

/// The eight (λ₁, λ₂) pairs of the reference sweep.
pub const LAMBDA_GRID: [(f64, f64); 8] = [
    (0.0001, 0.00001),
    (0.0002, 0.00002),
    (0.0005, 0.00002),
    (0.0005, 0.00005),
    (0.001, 0.00002),
    (0.002, 0.00002),
    (0.001, 0.00005),
    (0.001, 0.0001),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DebugConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Confidence gate used when the global sets were accumulated.
    pub tau: f64,
    /// Activation threshold of the hard activation map.
    pub t: f64,
    pub freq_threshold: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Use `sigmoid(g)` in the alignment terms instead of the hard map.
    pub soft_activation: bool,
    /// MC extraction settings for the before/after agreement measurement.
    pub cfe: CfeConfig,
}

impl Default for DebugConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.001,
            lambda2: 0.00005,
            tau: crate::profile::DEFAULT_TAU,
            t: crate::model::DEFAULT_ACTIVATION_THRESHOLD,
            freq_threshold: crate::profile::DEFAULT_FREQ_THRESHOLD,
            epochs: 6,
            batch_size: 32,
            learning_rate: 5e-4,
            seed: 1,
            soft_activation: true,
            cfe: CfeConfig::default(),
        }
    }
}

impl DebugConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lambda1) || !finite_nonneg(self.lambda2) {
            return Err(Error::Usage(
                "λ₁ and λ₂ must be finite and non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.tau) || !(self.t > 0.0 && self.t < 1.0) {
            return Err(Error::Usage("τ must lie in [0, 1] and t in (0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Usage(
                "epochs, batch size and learning rate must be positive".into(),
            ));
        }
        self.cfe.validate()
    }

    /// Reads a TOML run file; missing keys take their defaults.
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is TOML-representable")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    beta1_t: T,
    beta2_t: T,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(net: &mut Cnn<T>, lr: f64) -> Self {
        let shapes: Vec<usize> = net.param_slices_mut().iter().map(|s| s.len()).collect();
        Self {
            lr: T::lit(lr),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            beta1_t: T::one(),
            beta2_t: T::one(),
            first: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn step(&mut self, net: &mut Cnn<T>, grads: &Gradients<T>) {
        self.beta1_t *= self.beta1;
        self.beta2_t *= self.beta2;
        let c1 = T::one() - self.beta1_t;
        let c2 = T::one() - self.beta2_t;
        for (((params, g), m), v) in net
            .param_slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for i in 0..params.len() {
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Loss components of one sample plus the gradients `backward` needs.
#[derive(Debug, Clone)]
pub struct SampleLoss<T> {
    pub ce: T,
    pub mc: T,
    pub nonmc: T,
    pub total: T,
    pub dlogits: Vec<T>,
    pub dgap: Option<Vec<T>>,
}

pub trait Objective<T: Scalar>: Sync {
    fn sample_loss(&self, trace: &ForwardTrace<T>, label: usize) -> Result<SampleLoss<T>>;
}

fn cross_entropy_part<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let mut probs = softmax(logits);
    let ce = -losses::clamp_probability(probs[label]).ln();
    probs[label] -= T::one();
    (ce, probs)
}

/// Plain cross-entropy (the fine-tuning baseline).
#[derive(Debug, Clone, Copy, Default)]
pub struct CrossEntropy;

impl<T: Scalar> Objective<T> for CrossEntropy {
    fn sample_loss(&self, trace: &ForwardTrace<T>, label: usize) -> Result<SampleLoss<T>> {
        let (ce, dlogits) = cross_entropy_part(&trace.logits, label);
        Ok(SampleLoss {
            ce,
            mc: T::zero(),
            nonmc: T::zero(),
            total: ce,
            dlogits,
            dgap: None,
        })
    }
}

/// Cross-entropy plus agreement with the true class's frozen global MC set.
#[derive(Debug, Clone)]
pub struct AlignmentObjective<'a> {
    pub global_sets: &'a BTreeMap<usize, GlobalFilterSet>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub soft_activation: bool,
    pub t: f64,
}

impl<T: Scalar> Objective<T> for AlignmentObjective<'_> {
    fn sample_loss(&self, trace: &ForwardTrace<T>, label: usize) -> Result<SampleLoss<T>> {
        let global = self
            .global_sets
            .get(&label)
            .ok_or_else(|| Error::Usage(format!("no global filter set for class {label}")))?;
        let (ce, dlogits) = cross_entropy_part(&trace.logits, label);
        let (l1, l2) = (T::lit(self.lambda1), T::lit(self.lambda2));
        let (f, dgap) = if self.soft_activation {
            let f: Vec<T> = trace.gap.iter().map(|&g| sigmoid(g)).collect();
            let df = alignment_gradient(&global.bits, &f, l1, l2)?;
            let dgap = df
                .iter()
                .zip(&f)
                .map(|(d, s)| *d * *s * (T::one() - *s))
                .collect();
            (f, Some(dgap))
        } else {
            let hard = binary_activation_map(&trace.gap, T::lit(self.t))?;
            (hard.as_mask::<T>(), None)
        };
        let mc = loss_mc(&global.bits, &f)?;
        let nonmc = loss_nonmc(&global.bits, &f)?;
        Ok(SampleLoss {
            ce,
            mc,
            nonmc,
            total: loss_d(ce, mc, nonmc, l1, l2),
            dlogits,
            dgap,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub mc: f64,
    pub nonmc: f64,
    pub total: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainRun<T> {
    pub epochs: Vec<EpochLog>,
    /// Epoch (1-based) with the highest test accuracy and its parameters.
    pub best: Option<(usize, Cnn<T>)>,
}

/// Mini-batch Adam training. Samples are shuffled by a generator seeded with
/// `cfg.seed`; per-sample gradients are summed in batch order, so results do
/// not depend on the thread count.
pub fn train<T: Scalar, O: Objective<T>>(
    net: &mut Cnn<T>,
    train_set: &Dataset<T>,
    test_set: Option<&Dataset<T>>,
    objective: &O,
    cfg: &TrainConfig,
) -> Result<TrainRun<T>> {
    if train_set.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Usage(
            "epochs and batch size must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(net, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Cnn<T>)> = None;
    let mut best_acc = f64::NEG_INFINITY;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ce, mut mc, mut nonmc, mut total) = (0.0, 0.0, 0.0, 0.0);
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let frozen: &Cnn<T> = net;
            let per_sample: Vec<Result<(SampleLoss<T>, Gradients<T>)>> = batch
                .par_iter()
                .map(|&i| {
                    let sample = &train_set.samples[i];
                    let trace = frozen.forward(&sample.image)?;
                    let loss = objective.sample_loss(&trace, sample.label)?;
                    let grads = frozen.backward(&trace, &loss.dlogits, loss.dgap.as_deref());
                    Ok((loss, grads))
                })
                .collect();
            let mut sum = Gradients::zeros_like(net);
            for item in per_sample {
                let (loss, grads) = item?;
                if !(loss.total.is_finite()
                    && loss.ce.is_finite()
                    && loss.mc.is_finite()
                    && loss.nonmc.is_finite())
                {
                    return Err(Error::Numeric(format!(
                        "loss diverged at epoch {epoch}, batch {batch_no}: ce={} mc={} nonmc={}",
                        loss.ce, loss.mc, loss.nonmc
                    )));
                }
                ce += loss.ce.as_f64();
                mc += loss.mc.as_f64();
                nonmc += loss.nonmc.as_f64();
                total += loss.total.as_f64();
                sum.add_assign(&grads);
            }
            sum.scale(T::one() / T::lit(batch.len() as f64));
            adam.step(net, &sum);
        }
        let count = train_set.len() as f64;
        let train_accuracy = evaluate(net, train_set)?;
        let test_accuracy = test_set.map(|t| evaluate(net, t)).transpose()?;
        if let Some(acc) = test_accuracy {
            if acc > best_acc {
                best_acc = acc;
                best = Some((epoch, net.clone()));
            }
        }
        log::info!(
            "epoch {epoch}: loss {:.5} (ce {:.5}, mc {:.4}, nonmc {:.4}) train acc {:.4} test acc {:?}",
            total / count,
            ce / count,
            mc / count,
            nonmc / count,
            train_accuracy,
            test_accuracy
        );
        epochs.push(EpochLog {
            epoch,
            ce: ce / count,
            mc: mc / count,
            nonmc: nonmc / count,
            total: total / count,
            train_accuracy,
            test_accuracy,
        });
    }
    Ok(TrainRun { epochs, best })
}

pub fn evaluate<T: Scalar>(net: &Cnn<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let correct: Vec<Result<bool>> = data
        .samples
        .par_iter()
        .map(|s| Ok(argmax(&net.logits(&s.image)?) == s.label))
        .collect();
    let mut hits = 0usize;
    for c in correct {
        hits += usize::from(c?);
    }
    Ok(hits as f64 / data.len() as f64)
}

pub fn predict_records<T: Scalar>(
    net: &Cnn<T>,
    samples: &[Sample<T>],
    t: f64,
) -> Result<Vec<PredictionRecord<T>>> {
    samples
        .par_iter()
        .map(|s| net.predict_with_threshold(&s.id, &s.image, Some(s.label), T::lit(t)))
        .collect()
}

/// Mean recall of each training image's MC set (for its inferred class)
/// against its true class's global set. Classes without a global set are skipped.
pub fn mean_mc_agreement_recall<T: Scalar>(
    net: &Cnn<T>,
    data: &Dataset<T>,
    global_sets: &BTreeMap<usize, GlobalFilterSet>,
    cfe: &CfeConfig,
) -> Result<f64> {
    let scores: Vec<Result<Option<f64>>> = data
        .samples
        .par_iter()
        .map(|s| {
            let Some(global) = global_sets.get(&s.label) else {
                return Ok(None);
            };
            let trace = net.forward(&s.image)?;
            let inferred = argmax(&trace.logits);
            let (mc, _) = identify_from_features(net, &s.id, &trace.gap, inferred, cfe)?;
            Ok(Some(agreement_recall(&mc.to_bits(), global)?))
        })
        .collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in scores {
        if let Some(v) = s? {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Usage("no samples with a global filter set".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingOutcome {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Accuracies of the best-test-accuracy checkpoint.
    pub final_train_accuracy: f64,
    pub final_test_accuracy: f64,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
    pub mc_recall_before: Option<f64>,
    pub mc_recall_after: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DebugRun<T> {
    pub model: Cnn<T>,
    pub outcome: TrainingOutcome,
}

fn check_global_sets<T: Scalar>(
    train_set: &Dataset<T>,
    global_sets: &BTreeMap<usize, GlobalFilterSet>,
) -> Result<()> {
    for s in &train_set.samples {
        if !global_sets.contains_key(&s.label) {
            return Err(Error::Usage(format!(
                "class {} appears in the training set but has no global filter set",
                s.label
            )));
        }
    }
    Ok(())
}

fn retrain<T: Scalar, O: Objective<T>>(
    base: &Cnn<T>,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    objective: &O,
    cfg: &DebugConfig,
    lambdas: (f64, f64),
    measure: Option<(&BTreeMap<usize, GlobalFilterSet>, Option<f64>)>,
) -> Result<DebugRun<T>> {
    cfg.validate()?;
    let mc_recall_before = match measure {
        Some((_, Some(before))) => Some(before),
        Some((sets, None)) => Some(mean_mc_agreement_recall(base, train_set, sets, &cfg.cfe)?),
        None => None,
    };
    let mut net = base.clone();
    let run = train(
        &mut net,
        train_set,
        Some(test_set),
        objective,
        &cfg.train_config(),
    )?;
    let (best_epoch, model) = run
        .best
        .expect("test set is non-empty, so a best epoch exists");
    let log = &run.epochs[best_epoch - 1];
    let mc_recall_after = measure
        .map(|(sets, _)| mean_mc_agreement_recall(&model, train_set, sets, &cfg.cfe))
        .transpose()?;
    Ok(DebugRun {
        outcome: TrainingOutcome {
            lambda1: lambdas.0,
            lambda2: lambdas.1,
            final_train_accuracy: log.train_accuracy,
            final_test_accuracy: log.test_accuracy.expect("test accuracy is logged"),
            best_epoch,
            epochs: run.epochs,
            mc_recall_before,
            mc_recall_after,
        },
        model,
    })
}

/// Retrains `base` on every training image with the alignment objective and
/// keeps the checkpoint with the best test accuracy.
pub fn debug_train<T: Scalar>(
    base: &Cnn<T>,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    global_sets: &BTreeMap<usize, GlobalFilterSet>,
    cfg: &DebugConfig,
) -> Result<DebugRun<T>> {
    debug_train_with_baseline(base, train_set, test_set, global_sets, cfg, None)
}

/// As [`debug_train`], reusing an already measured pre-training agreement.
pub fn debug_train_with_baseline<T: Scalar>(
    base: &Cnn<T>,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    global_sets: &BTreeMap<usize, GlobalFilterSet>,
    cfg: &DebugConfig,
    mc_recall_before: Option<f64>,
) -> Result<DebugRun<T>> {
    check_global_sets(train_set, global_sets)?;
    let objective = AlignmentObjective {
        global_sets,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        soft_activation: cfg.soft_activation,
        t: cfg.t,
    };
    retrain(
        base,
        train_set,
        test_set,
        &objective,
        cfg,
        (cfg.lambda1, cfg.lambda2),
        Some((global_sets, mc_recall_before)),
    )
}

/// Cross-entropy-only retraining with the same schedule and seed.
pub fn fine_tune<T: Scalar>(
    base: &Cnn<T>,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    cfg: &DebugConfig,
    measure: Option<(&BTreeMap<usize, GlobalFilterSet>, Option<f64>)>,
) -> Result<DebugRun<T>> {
    retrain(
        base,
        train_set,
        test_set,
        &CrossEntropy,
        cfg,
        (0.0, 0.0),
        measure,
    )
}

#[derive(Debug, Clone)]
pub struct GridReport<T> {
    pub base_train_accuracy: f64,
    pub base_test_accuracy: f64,
    pub mc_recall_base: f64,
    pub fine_tuned: TrainingOutcome,
    pub arms: Vec<TrainingOutcome>,
    /// Index into `arms` of the best test accuracy (first on ties).
    pub best_arm: usize,
    pub best_model: Cnn<T>,
    pub fine_tuned_model: Cnn<T>,
}

/// Fine-tuned baseline plus one debug run per (λ₁, λ₂) pair, all sharing `cfg`'s seed.
pub fn run_grid<T: Scalar>(
    base: &Cnn<T>,
    train_set: &Dataset<T>,
    test_set: &Dataset<T>,
    global_sets: &BTreeMap<usize, GlobalFilterSet>,
    cfg: &DebugConfig,
    grid: &[(f64, f64)],
) -> Result<GridReport<T>> {
    if grid.is_empty() {
        return Err(Error::Usage("λ grid is empty".into()));
    }
    check_global_sets(train_set, global_sets)?;
    let mc_recall_base = mean_mc_agreement_recall(base, train_set, global_sets, &cfg.cfe)?;
    let fine = fine_tune(
        base,
        train_set,
        test_set,
        cfg,
        Some((global_sets, Some(mc_recall_base))),
    )?;
    let mut arms = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64, Cnn<T>)> = None;
    for (i, &(l1, l2)) in grid.iter().enumerate() {
        let arm_cfg = DebugConfig {
            lambda1: l1,
            lambda2: l2,
            ..cfg.clone()
        };
        let run = debug_train_with_baseline(
            base,
            train_set,
            test_set,
            global_sets,
            &arm_cfg,
            Some(mc_recall_base),
        )?;
        let acc = run.outcome.final_test_accuracy;
        if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
            best = Some((i, acc, run.model));
        }
        arms.push(run.outcome);
    }
    let (best_arm, _, best_model) = best.expect("grid is non-empty");
    Ok(GridReport {
        base_train_accuracy: evaluate(base, train_set)?,
        base_test_accuracy: evaluate(base, test_set)?,
        mc_recall_base,
        fine_tuned: fine.outcome,
        arms,
        best_arm,
        best_model,
        fine_tuned_model: fine.model,
    })
}

pub fn write_epoch_log(path: impl AsRef<Path>, epochs: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for e in epochs {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
