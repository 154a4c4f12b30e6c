//! Minimum-correct (MC) filter identification.
//!
//! A relaxed per-filter mask `m ∈ [0,1]^n` over the final conv layer is optimized
//! to keep the classifier's output while an L1 penalty pushes filters off. The
//! relaxed mask is binarized at 0.5, then greedily repaired (re-adding the
//! strongest filters) until the inferred class is preserved. When sparsity
//! pressure is on, a discrete pruning pass drops filters that are not needed.
//! [`brute_force_mc_oracle`] enumerates subsets and is the reference for small `n`.

use std::collections::BTreeMap;
use std::path::Path;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::model::{Cnn, FilterActivationMap};
use crate::scalar::{all_finite, argmax, softmax, Scalar};
use crate::tensor::Tensor3;

/// Largest filter count the exhaustive oracle accepts.
pub const ORACLE_MAX_FILTERS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfeConfig {
    /// Weight of the L1 mask penalty.
    pub sparsity_weight: f64,
    /// Preserve the full logit vector (squared distance) instead of the
    /// cross-entropy to the target class.
    pub logits_loss_enabled: bool,
    pub max_iterations: usize,
    pub mask_init: f64,
    pub convergence_tolerance: f64,
    /// Adam step size for the relaxed mask.
    pub learning_rate: f64,
    /// Greedy removal of redundant filters after repair. Only runs when
    /// `sparsity_weight > 0`.
    pub prune: bool,
}

impl Default for CfeConfig {
    fn default() -> Self {
        Self {
            sparsity_weight: 2.0,
            logits_loss_enabled: true,
            max_iterations: 300,
            mask_init: 1.0,
            convergence_tolerance: 1e-5,
            learning_rate: 0.05,
            prune: true,
        }
    }
}

impl CfeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sparsity_weight >= 0.0) || !self.sparsity_weight.is_finite() {
            return Err(Error::Usage(
                "sparsity weight must be finite and non-negative".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::Usage("max_iterations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_init) {
            return Err(Error::Usage("mask_init must lie in [0, 1]".into()));
        }
        if !(self.convergence_tolerance >= 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Usage(
                "tolerance must be >= 0 and learning rate > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Filters sufficient to keep a prediction, with their GAP magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MCFilterSet<T> {
    pub image_id: String,
    pub class_label: usize,
    /// Sorted ascending.
    pub indices: Vec<usize>,
    pub magnitudes: BTreeMap<usize, T>,
    pub n: usize,
    /// Set when no proper subset could be certified and the full active set was returned.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl<T: Scalar> MCFilterSet<T> {
    fn from_indices(
        image_id: &str,
        class_label: usize,
        mut indices: Vec<usize>,
        gap: &[T],
    ) -> Self {
        indices.sort_unstable();
        indices.dedup();
        let magnitudes = indices.iter().map(|&k| (k, gap[k])).collect();
        Self {
            image_id: image_id.to_string(),
            class_label,
            indices,
            magnitudes,
            n: gap.len(),
            degenerate: false,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn to_bits(&self) -> FilterActivationMap {
        FilterActivationMap::from_indices(self.n, self.indices.iter().copied())
            .expect("indices are validated on construction")
    }

    pub fn mask(&self) -> Vec<T> {
        self.to_bits().as_mask()
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.iter().any(|&k| k >= self.n) {
            return Err(Error::Format(format!(
                "MC set for {} has an index outside 0..{}",
                self.image_id, self.n
            )));
        }
        if !self.indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Format(format!(
                "MC set for {} has unsorted indices",
                self.image_id
            )));
        }
        if self.magnitudes.keys().ne(self.indices.iter()) {
            return Err(Error::Format(format!(
                "MC set for {} has magnitudes not matching indices",
                self.image_id
            )));
        }
        Ok(())
    }
}

/// Intermediate states of one identification, for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct CfeTrace<T> {
    pub relaxed_mask: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Active filters whose relaxed mask exceeded 0.5.
    pub thresholded: Vec<usize>,
    /// Filters re-added by repair, in insertion order.
    pub repaired: Vec<usize>,
    /// Filters removed by pruning, in removal order.
    pub pruned: Vec<usize>,
}

/// Logits of the head on `mask ⊙ gap` for a binary mask given as indices.
fn subset_logits<T: Scalar>(net: &Cnn<T>, gap: &[T], subset: &[usize]) -> Vec<T> {
    let mut gated = vec![T::zero(); gap.len()];
    for &k in subset {
        gated[k] = gap[k];
    }
    net.head_logits(&gated)
}

fn margin<T: Scalar>(logits: &[T], target: usize) -> T {
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != target)
        .map(|(_, &v)| v)
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    logits[target] - best_other
}

fn check_target<T: Scalar>(net: &Cnn<T>, logits: &[T], target: usize) -> Result<()> {
    if target >= net.label_count() {
        return Err(Error::Usage(format!("target class {target} out of range")));
    }
    if !all_finite(logits) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let inferred = argmax(logits);
    if inferred != target {
        return Err(Error::Usage(format!(
            "MC filters are defined for the inferred class {inferred}, got target {target}"
        )));
    }
    Ok(())
}

/// Runs the relaxed-mask optimization on GAP features.
fn optimize_mask<T: Scalar>(
    net: &Cnn<T>,
    gap: &[T],
    target: usize,
    cfg: &CfeConfig,
) -> (Vec<T>, usize, bool) {
    let n = gap.len();
    let k_labels = net.label_count();
    let reference = net.head_logits(gap);
    let lambda = T::lit(cfg.sparsity_weight);
    let lr = T::lit(cfg.learning_rate);
    let (beta1, beta2, eps) = (T::lit(0.9), T::lit(0.999), T::lit(1e-8));
    let tol = T::lit(cfg.convergence_tolerance);
    let two = T::lit(2.0);

    let mut mask = vec![T::lit(cfg.mask_init); n];
    let mut m1 = vec![T::zero(); n];
    let mut m2 = vec![T::zero(); n];
    let (mut b1t, mut b2t) = (T::one(), T::one());
    let mut grad = vec![T::zero(); n];

    for iter in 1..=cfg.max_iterations {
        let gated: Vec<T> = mask.iter().zip(gap).map(|(m, g)| *m * *g).collect();
        let logits = net.head_logits(&gated);
        let dlogits: Vec<T> = if cfg.logits_loss_enabled {
            logits
                .iter()
                .zip(&reference)
                .map(|(l, z)| two * (*l - *z))
                .collect()
        } else {
            let mut p = softmax(&logits);
            p[target] -= T::one();
            p
        };
        for k in 0..n {
            let mut acc = T::zero();
            for c in 0..k_labels {
                acc += dlogits[c] * net.head_weight(c, k);
            }
            grad[k] = acc * gap[k] + lambda;
        }
        b1t *= beta1;
        b2t *= beta2;
        let mut max_step = T::zero();
        for k in 0..n {
            m1[k] = beta1 * m1[k] + (T::one() - beta1) * grad[k];
            m2[k] = beta2 * m2[k] + (T::one() - beta2) * grad[k] * grad[k];
            let mhat = m1[k] / (T::one() - b1t);
            let vhat = m2[k] / (T::one() - b2t);
            let next = (mask[k] - lr * mhat / (vhat.sqrt() + eps))
                .max(T::zero())
                .min(T::one());
            let step = (next - mask[k]).abs();
            if step > max_step {
                max_step = step;
            }
            mask[k] = next;
        }
        if max_step <= tol {
            return (mask, iter, true);
        }
    }
    (mask, cfg.max_iterations, false)
}

/// MC filter identification on precomputed GAP features. The returned set is
/// certified against the classifier head; [`identify_mc_filters`] additionally
/// re-checks it with a masked forward pass.
pub fn identify_from_features<T: Scalar>(
    net: &Cnn<T>,
    image_id: &str,
    gap: &[T],
    target: usize,
    cfg: &CfeConfig,
) -> Result<(MCFilterSet<T>, CfeTrace<T>)> {
    cfg.validate()?;
    if gap.len() != net.filter_count() {
        return Err(Error::Usage(format!(
            "GAP vector has length {}, classifier has {} filters",
            gap.len(),
            net.filter_count()
        )));
    }
    if !all_finite(gap) {
        return Err(Error::Numeric("non-finite GAP features".into()));
    }
    let full = net.head_logits(gap);
    check_target(net, &full, target)?;

    let (relaxed, iterations, converged) = optimize_mask(net, gap, target, cfg);
    let half = T::lit(0.5);
    let thresholded: Vec<usize> = (0..gap.len())
        .filter(|&k| relaxed[k] > half && gap[k] > T::zero())
        .collect();

    let preserves = |subset: &[usize]| argmax(&subset_logits(net, gap, subset)) == target;

    // Repair: strongest filters first, active before inactive, ties by index.
    let mut current = thresholded.clone();
    let mut repaired = Vec::new();
    let mut degenerate = false;
    if current.is_empty() || !preserves(&current) {
        let mut candidates: Vec<usize> = (0..gap.len()).filter(|k| !current.contains(k)).collect();
        candidates.sort_by(|&a, &b| {
            gap[b]
                .partial_cmp(&gap[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut it = candidates.into_iter();
        loop {
            if !current.is_empty() && preserves(&current) {
                break;
            }
            match it.next() {
                Some(k) => {
                    current.push(k);
                    repaired.push(k);
                }
                None => {
                    degenerate = true;
                    current = (0..gap.len()).filter(|&k| gap[k] > T::zero()).collect();
                    break;
                }
            }
        }
    }

    let mut pruned = Vec::new();
    if cfg.prune && cfg.sparsity_weight > 0.0 && !degenerate {
        loop {
            if current.len() <= 1 {
                break;
            }
            let mut best: Option<(usize, T)> = None;
            for (pos, _) in current.iter().enumerate() {
                let rest: Vec<usize> = current
                    .iter()
                    .enumerate()
                    .filter(|(p, _)| *p != pos)
                    .map(|(_, &k)| k)
                    .collect();
                let logits = subset_logits(net, gap, &rest);
                if argmax(&logits) != target {
                    continue;
                }
                let m = margin(&logits, target);
                if best.is_none_or(|(_, bm)| m > bm) {
                    best = Some((pos, m));
                }
            }
            match best {
                Some((pos, _)) => pruned.push(current.remove(pos)),
                None => break,
            }
        }
    }

    let mut set = MCFilterSet::from_indices(image_id, target, current, gap);
    set.degenerate = degenerate;
    Ok((
        set,
        CfeTrace {
            relaxed_mask: relaxed,
            iterations,
            converged,
            thresholded,
            repaired,
            pruned,
        },
    ))
}

/// MC filter set of `image` for its inferred class `target`.
pub fn identify_mc_filters<T: Scalar>(
    net: &Cnn<T>,
    image_id: &str,
    image: &Tensor3<T>,
    target: usize,
    cfg: &CfeConfig,
) -> Result<MCFilterSet<T>> {
    identify_mc_filters_traced(net, image_id, image, target, cfg).map(|(s, _)| s)
}

pub fn identify_mc_filters_traced<T: Scalar>(
    net: &Cnn<T>,
    image_id: &str,
    image: &Tensor3<T>,
    target: usize,
    cfg: &CfeConfig,
) -> Result<(MCFilterSet<T>, CfeTrace<T>)> {
    let trace = net.forward(image)?;
    let (set, cfe_trace) = identify_from_features(net, image_id, &trace.gap, target, cfg)?;
    verify_soundness(net, image, &set)?;
    Ok((set, cfe_trace))
}

/// One masked forward pass; errors if the indicator mask changes the argmax.
pub fn verify_soundness<T: Scalar>(
    net: &Cnn<T>,
    image: &Tensor3<T>,
    set: &MCFilterSet<T>,
) -> Result<()> {
    let logits = net.masked_logits(image, &set.mask())?;
    let kept = argmax(&logits);
    if kept != set.class_label {
        return Err(Error::Numeric(format!(
            "MC set for {} moves the prediction from {} to {}",
            set.image_id, set.class_label, kept
        )));
    }
    Ok(())
}

/// Minimum-cardinality filter subset keeping the prediction, by exhaustive search.
/// Ties go to the lexicographically smallest index set.
pub fn brute_force_mc_oracle<T: Scalar>(
    net: &Cnn<T>,
    image_id: &str,
    image: &Tensor3<T>,
    target: usize,
) -> Result<MCFilterSet<T>> {
    let n = net.filter_count();
    if n > ORACLE_MAX_FILTERS {
        return Err(Error::Usage(format!(
            "exhaustive search supports at most {ORACLE_MAX_FILTERS} filters, classifier has {n}"
        )));
    }
    let trace = net.forward(image)?;
    check_target(net, &trace.logits, target)?;
    for size in 0..=n {
        for subset in (0..n).combinations(size) {
            let mut mask = vec![T::zero(); n];
            for &k in &subset {
                mask[k] = T::one();
            }
            let logits = net.masked_logits(image, &mask)?;
            if argmax(&logits) == target {
                return Ok(MCFilterSet::from_indices(
                    image_id, target, subset, &trace.gap,
                ));
            }
        }
    }
    // The full set reproduces the unmasked logits, so the loop always returns.
    unreachable!("full filter set preserves the prediction")
}

pub fn write_mc_sets<T: Scalar>(path: impl AsRef<Path>, sets: &[MCFilterSet<T>]) -> Result<()> {
    jsonl::write(path, sets)
}

pub fn read_mc_sets<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<MCFilterSet<T>>> {
    let sets: Vec<MCFilterSet<T>> = jsonl::read(path)?;
    for s in &sets {
        s.validate()?;
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, ConvLayer};

    /// One conv layer whose filter `k` copies input channel `k` (identity kernel,
    /// ReLU keeps non-negative pixels), so the GAP features equal the per-channel
    /// means of a non-negative image.
    pub(crate) fn passthrough_net(
        n: usize,
        labels: usize,
        head: Vec<f64>,
        bias: Vec<f64>,
    ) -> Cnn<f64> {
        let arch = Architecture::tiny(n, 2, n, labels);
        let mut weights = vec![0.0; n * n * 9];
        for k in 0..n {
            weights[(k * n + k) * 9 + 4] = 1.0;
        }
        let conv = ConvLayer {
            in_channels: n,
            out_channels: n,
            pool: false,
            weights,
            bias: vec![0.0; n],
        };
        Cnn::from_parts(arch, vec![conv], head, bias).unwrap()
    }

    fn constant_image(values: &[f64]) -> Tensor3<f64> {
        Tensor3::from_fn(values.len(), 2, 2, |c, _, _| values[c])
    }

    #[test]
    fn oracle_finds_hand_built_pair() {
        // Class 0 reads filters 2 and 5 only; class 1 reads everything weakly.
        let n = 6;
        let mut head = vec![0.0; 2 * n];
        head[2] = 1.0;
        head[5] = 1.0;
        for k in 0..n {
            head[n + k] = 0.3;
        }
        let net = passthrough_net(n, 2, head, vec![0.0, 0.1]);
        let img = constant_image(&[1.0; 6]);
        // full: class0 = 2, class1 = 1.9; empty: 0 vs 0.1; {2}: 1 vs 0.4.
        let oracle = brute_force_mc_oracle(&net, "a", &img, 0).unwrap();
        assert_eq!(oracle.indices, vec![2]);
        assert!(oracle.indices.iter().all(|k| [2, 5].contains(k)));
    }

    #[test]
    fn oracle_needs_both_filters_when_one_is_not_enough() {
        let n = 6;
        let mut head = vec![0.0; 2 * n];
        head[2] = 1.0;
        head[5] = 1.0;
        let net = passthrough_net(n, 2, head, vec![0.0, 1.5]);
        let img = constant_image(&[1.0; 6]);
        let oracle = brute_force_mc_oracle(&net, "a", &img, 0).unwrap();
        assert_eq!(oracle.indices, vec![2, 5]);
        let found = identify_mc_filters(&net, "a", &img, 0, &CfeConfig::default()).unwrap();
        assert_eq!(found.indices, vec![2, 5]);
        assert_eq!(found.magnitudes[&2], 1.0);
    }

    #[test]
    fn zero_features_give_empty_oracle_set() {
        let net = passthrough_net(3, 2, vec![1.0; 6], vec![0.5, 0.0]);
        let img = constant_image(&[0.0; 3]);
        let oracle = brute_force_mc_oracle(&net, "z", &img, 0).unwrap();
        assert!(oracle.is_empty());
        // The optimizer path still returns a non-empty set.
        let found = identify_mc_filters(&net, "z", &img, 0, &CfeConfig::default()).unwrap();
        assert_eq!(found.len(), 1);
    }

    #[test]
    fn single_filter_forced() {
        let net = passthrough_net(1, 2, vec![1.0, 0.0], vec![0.0, 0.5]);
        let img = constant_image(&[1.0]);
        assert_eq!(
            brute_force_mc_oracle(&net, "s", &img, 0).unwrap().indices,
            vec![0]
        );
        assert_eq!(
            identify_mc_filters(&net, "s", &img, 0, &CfeConfig::default())
                .unwrap()
                .indices,
            vec![0]
        );
    }

    #[test]
    fn no_sparsity_keeps_every_active_filter() {
        let n = 5;
        let head: Vec<f64> = (0..2 * n)
            .map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.4)
            .collect();
        let net = passthrough_net(n, 2, head, vec![0.0, 0.0]);
        let img = constant_image(&[0.5, 1.0, 0.0, 2.0, 0.3]);
        let target = argmax(&net.logits(&img).unwrap());
        let cfg = CfeConfig {
            sparsity_weight: 0.0,
            mask_init: 1.0,
            ..CfeConfig::default()
        };
        let (set, trace) = identify_mc_filters_traced(&net, "i", &img, target, &cfg).unwrap();
        assert_eq!(set.indices, vec![0, 1, 3, 4]);
        assert!(trace.converged);
        assert!(trace.relaxed_mask.iter().all(|m| *m == 1.0));
    }

    #[test]
    fn wrong_target_is_a_usage_error() {
        let net = passthrough_net(2, 2, vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0]);
        let img = constant_image(&[1.0, 1.0]);
        assert!(matches!(
            identify_mc_filters(&net, "w", &img, 1, &CfeConfig::default()),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            brute_force_mc_oracle(&net, "w", &img, 1),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn oracle_rejects_wide_layers() {
        let n = 17;
        let net = passthrough_net(n, 2, vec![0.1; 2 * n], vec![0.0, 0.0]);
        let img = constant_image(&[1.0; 17]);
        assert!(matches!(
            brute_force_mc_oracle(&net, "x", &img, 0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn repair_adds_in_non_increasing_magnitude() {
        // High-init relaxed mask collapses under heavy sparsity; repair rebuilds.
        let n = 6;
        let mut head = vec![0.0; 2 * n];
        for k in 0..n {
            head[k] = 1.0;
        }
        let net = passthrough_net(n, 2, head, vec![0.0, 2.5]);
        let img = constant_image(&[0.9, 0.2, 1.1, 0.4, 0.8, 0.3]);
        let cfg = CfeConfig {
            sparsity_weight: 50.0,
            prune: false,
            ..CfeConfig::default()
        };
        let (set, trace) = identify_mc_filters_traced(&net, "r", &img, 0, &cfg).unwrap();
        let mags: Vec<f64> = trace.repaired.iter().map(|&k| img.get(k, 0, 0)).collect();
        assert!(mags.windows(2).all(|w| w[0] >= w[1]), "{mags:?}");
        assert!(!set.is_empty());
    }

    #[test]
    fn mc_set_json_shape() {
        let set = MCFilterSet::from_indices("img", 3, vec![5, 1], &[0.0, 0.25, 0.0, 0.0, 0.0, 2.0]);
        let json = serde_json::to_value(&set).unwrap();
        assert_eq!(json["indices"], serde_json::json!([1, 5]));
        assert_eq!(json["magnitudes"]["5"], serde_json::json!(2.0));
        assert_eq!(json["n"], 6);
        assert!(json.get("degenerate").is_none());
        let back: MCFilterSet<f64> = serde_json::from_value(json).unwrap();
        assert_eq!(back, set);
    }
}
