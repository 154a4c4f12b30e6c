//! Per-class accumulation of MC filter statistics over confident, correct
//! training predictions, and the frequency-thresholded global MC filter sets.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cfe::MCFilterSet;
use crate::error::{Error, Result};
use crate::model::{FilterActivationMap, PredictionRecord};
use crate::scalar::Scalar;

pub const PROFILE_VERSION: u64 = 1;

/// Default confidence gate for accumulation.
pub const DEFAULT_TAU: f64 = 0.90;
/// Default normalized-frequency threshold for global set membership.
pub const DEFAULT_FREQ_THRESHOLD: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ClassFilterProfile<T> {
    pub class_label: usize,
    pub counts: Vec<u64>,
    pub magnitude_sums: Vec<T>,
    pub samples_accumulated: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccumulateOutcome {
    Accumulated,
    SkippedMisclassified,
    SkippedLowConfidence,
}

impl<T: Scalar> ClassFilterProfile<T> {
    pub fn new(class_label: usize, n: usize) -> Self {
        Self {
            class_label,
            counts: vec![0; n],
            magnitude_sums: vec![T::zero(); n],
            samples_accumulated: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.counts.len()
    }

    /// Adds `mc` if the record is correct and its confidence is strictly above `tau`.
    pub fn accumulate(
        &mut self,
        record: &PredictionRecord<T>,
        mc: &MCFilterSet<T>,
        tau: T,
    ) -> Result<AccumulateOutcome> {
        let true_class = record
            .true_class
            .ok_or_else(|| Error::Usage(format!("record {} has no true class", record.image_id)))?;
        if record.inferred_class != self.class_label {
            return Err(Error::Usage(format!(
                "record {} inferred class {} fed to profile of class {}",
                record.image_id, record.inferred_class, self.class_label
            )));
        }
        if mc.class_label != record.inferred_class {
            return Err(Error::Usage(format!(
                "MC set class {} does not match inferred class {} for {}",
                mc.class_label, record.inferred_class, record.image_id
            )));
        }
        if mc.n != self.n() || mc.indices.iter().any(|&k| k >= self.n()) {
            return Err(Error::Usage(format!(
                "MC set for {} has the wrong filter count",
                record.image_id
            )));
        }
        if record.inferred_class != true_class {
            log::debug!(
                "skip {}: misclassified as {} (true {})",
                record.image_id,
                record.inferred_class,
                true_class
            );
            return Ok(AccumulateOutcome::SkippedMisclassified);
        }
        if !(record.confidence > tau) {
            log::debug!(
                "skip {}: confidence {} not above {}",
                record.image_id,
                record.confidence,
                tau
            );
            return Ok(AccumulateOutcome::SkippedLowConfidence);
        }
        for &k in &mc.indices {
            self.counts[k] += 1;
            self.magnitude_sums[k] += mc.magnitudes.get(&k).copied().unwrap_or_else(T::zero);
        }
        self.samples_accumulated += 1;
        Ok(AccumulateOutcome::Accumulated)
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.class_label != other.class_label || self.n() != other.n() {
            return Err(Error::Usage(format!(
                "cannot merge profile (class {}, n {}) with (class {}, n {})",
                self.class_label,
                self.n(),
                other.class_label,
                other.n()
            )));
        }
        Ok(Self {
            class_label: self.class_label,
            counts: self
                .counts
                .iter()
                .zip(&other.counts)
                .map(|(a, b)| a + b)
                .collect(),
            magnitude_sums: self
                .magnitude_sums
                .iter()
                .zip(&other.magnitude_sums)
                .map(|(a, b)| *a + *b)
                .collect(),
            samples_accumulated: self.samples_accumulated + other.samples_accumulated,
        })
    }

    /// Mean magnitude of filter `k` over the sets it appeared in (0 if never).
    pub fn normalized_magnitude(&self, k: usize) -> T {
        if self.counts[k] == 0 {
            T::zero()
        } else {
            self.magnitude_sums[k] / T::lit(self.counts[k] as f64)
        }
    }

    pub fn derive_global_set(&self, freq_threshold: f64) -> Result<GlobalFilterSet> {
        if !(0.0..=1.0).contains(&freq_threshold) {
            return Err(Error::Usage(format!(
                "frequency threshold {freq_threshold} outside [0, 1]"
            )));
        }
        if self.samples_accumulated == 0 {
            return Err(Error::Usage(format!(
                "profile for class {} is empty",
                self.class_label
            )));
        }
        let max = self.counts.iter().copied().max().unwrap_or(0);
        let normalized_freq: Vec<f64> = self
            .counts
            .iter()
            .map(|&c| if max == 0 { 0.0 } else { c as f64 / max as f64 })
            .collect();
        let bits = normalized_freq
            .iter()
            .map(|&f| f >= freq_threshold)
            .collect();
        Ok(GlobalFilterSet {
            class_label: self.class_label,
            bits: FilterActivationMap::from_bits(bits),
            normalized_freq,
        })
    }

    /// Structural consistency of counts, magnitudes and sample total.
    pub fn check_invariants(&self) -> Result<()> {
        if self.magnitude_sums.len() != self.counts.len() {
            return Err(Error::Format(format!(
                "profile {} has mismatched lengths",
                self.class_label
            )));
        }
        for (k, (&c, m)) in self.counts.iter().zip(&self.magnitude_sums).enumerate() {
            if c > self.samples_accumulated {
                return Err(Error::Format(format!(
                    "profile {}: filter {k} counted {c} times in {} samples",
                    self.class_label, self.samples_accumulated
                )));
            }
            if c == 0 && *m != T::zero() {
                return Err(Error::Format(format!(
                    "profile {}: filter {k} has magnitude without count",
                    self.class_label
                )));
            }
        }
        Ok(())
    }
}

/// Frequency-thresholded class filter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalFilterSet {
    pub class_label: usize,
    pub bits: FilterActivationMap,
    pub normalized_freq: Vec<f64>,
}

/// Profiles for every class, keyed by label.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet<T> {
    pub n: usize,
    pub profiles: BTreeMap<usize, ClassFilterProfile<T>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumulationSummary {
    pub accumulated: usize,
    pub skipped_misclassified: usize,
    pub skipped_low_confidence: usize,
}

impl<T: Scalar> ProfileSet<T> {
    pub fn new(n: usize, label_count: usize) -> Self {
        Self {
            n,
            profiles: (0..label_count)
                .map(|c| (c, ClassFilterProfile::new(c, n)))
                .collect(),
        }
    }

    /// Routes each (record, MC set) pair to the profile of its inferred class.
    pub fn accumulate_all<'a>(
        &mut self,
        pairs: impl IntoIterator<Item = (&'a PredictionRecord<T>, &'a MCFilterSet<T>)>,
        tau: T,
    ) -> Result<AccumulationSummary> {
        let mut summary = AccumulationSummary::default();
        for (record, mc) in pairs {
            let n = self.n;
            let profile = self
                .profiles
                .entry(record.inferred_class)
                .or_insert_with(|| ClassFilterProfile::new(record.inferred_class, n));
            match profile.accumulate(record, mc, tau)? {
                AccumulateOutcome::Accumulated => summary.accumulated += 1,
                AccumulateOutcome::SkippedMisclassified => summary.skipped_misclassified += 1,
                AccumulateOutcome::SkippedLowConfidence => summary.skipped_low_confidence += 1,
            }
        }
        Ok(summary)
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(Error::Usage(
                "profile sets have different filter counts".into(),
            ));
        }
        let mut profiles = self.profiles.clone();
        for (label, p) in &other.profiles {
            let merged = match profiles.get(label) {
                Some(existing) => existing.merge(p)?,
                None => p.clone(),
            };
            profiles.insert(*label, merged);
        }
        Ok(Self {
            n: self.n,
            profiles,
        })
    }

    /// Global sets for every non-empty profile; empty classes are skipped with a warning.
    pub fn derive_global_sets(
        &self,
        freq_threshold: f64,
    ) -> Result<BTreeMap<usize, GlobalFilterSet>> {
        let mut out = BTreeMap::new();
        for (label, p) in &self.profiles {
            if p.samples_accumulated == 0 {
                log::warn!("class {label} has no accumulated samples; no global filter set");
                continue;
            }
            out.insert(*label, p.derive_global_set(freq_threshold)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let map: BTreeMap<String, ProfileEntry<T>> = self
            .profiles
            .iter()
            .map(|(label, p)| {
                (
                    label.to_string(),
                    ProfileEntry {
                        counts: p.counts.clone(),
                        magnitude_sums: p.magnitude_sums.clone(),
                        samples_accumulated: p.samples_accumulated,
                        n: p.n(),
                        profile_version: PROFILE_VERSION,
                    },
                )
            })
            .collect();
        let bytes = serde_json::to_vec_pretty(&map)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let raw: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&bytes)?;
        let mut profiles = BTreeMap::new();
        let mut n = None;
        for (key, value) in raw {
            let version = value
                .get("profile_version")
                .and_then(|v| v.as_u64())
                .unwrap_or(0);
            if version != PROFILE_VERSION {
                return Err(Error::Version {
                    kind: "profile",
                    found: version,
                    expected: PROFILE_VERSION,
                });
            }
            let label: usize = key
                .parse()
                .map_err(|_| Error::Format(format!("profile key {key:?} is not a class label")))?;
            let entry: ProfileEntry<T> = serde_json::from_value(value)?;
            if entry.counts.len() != entry.n || *n.get_or_insert(entry.n) != entry.n {
                return Err(Error::Format(format!(
                    "profile {label} has inconsistent filter count"
                )));
            }
            let profile = ClassFilterProfile {
                class_label: label,
                counts: entry.counts,
                magnitude_sums: entry.magnitude_sums,
                samples_accumulated: entry.samples_accumulated,
            };
            profile.check_invariants()?;
            profiles.insert(label, profile);
        }
        let n = n.ok_or_else(|| Error::Format("profile file has no classes".into()))?;
        Ok(Self { n, profiles })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ProfileEntry<T> {
    counts: Vec<u64>,
    magnitude_sums: Vec<T>,
    samples_accumulated: u64,
    n: usize,
    profile_version: u64,
}
