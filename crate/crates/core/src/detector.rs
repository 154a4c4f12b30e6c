//! Misclassification flagging from the agreement between a prediction's local
//! filters and the global MC filter set of its inferred class.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cfe::MCFilterSet;
use crate::error::{Error, Result};
use crate::model::{FilterActivationMap, PredictionRecord};
use crate::profile::GlobalFilterSet;
use crate::scalar::Scalar;

pub const DEFAULT_SKIP_THRESHOLD: f64 = 0.90;
pub const DEFAULT_RECALL_FLOOR: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    AvgRecall,
    AvgF1,
    RecallFloor,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::AvgRecall, Metric::AvgF1, Metric::RecallFloor];

    /// Label used in the summary table's `Metric` column.
    pub fn table_label(self, recall_floor: f64) -> String {
        match self {
            Metric::AvgRecall => "Avg. Recall".into(),
            Metric::AvgF1 => "Avg. F1 score".into(),
            Metric::RecallFloor => format!("Recall < {recall_floor}"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::AvgRecall => "avg_recall",
            Metric::AvgF1 => "avg_f1",
            Metric::RecallFloor => "recall_floor",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg_recall" => Ok(Metric::AvgRecall),
            "avg_f1" => Ok(Metric::AvgF1),
            "recall_floor" => Ok(Metric::RecallFloor),
            other => Err(Error::Usage(format!(
                "unknown metric {other:?}, expected avg_recall, avg_f1 or recall_floor"
            ))),
        }
    }
}

/// Population the mean score threshold is averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    PerClass,
    Global,
}

/// What counts as the "local" filters of a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalFilters {
    McFilters,
    ActivationMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    /// Predictions more confident than this are trusted. `0` disables skipping.
    pub skip_threshold: f64,
    pub freq_threshold: f64,
    pub metric: Metric,
    pub recall_floor_value: f64,
    pub threshold_source: ThresholdSource,
    pub local_filters: LocalFilters,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            skip_threshold: DEFAULT_SKIP_THRESHOLD,
            freq_threshold: crate::profile::DEFAULT_FREQ_THRESHOLD,
            metric: Metric::AvgRecall,
            recall_floor_value: DEFAULT_RECALL_FLOOR,
            threshold_source: ThresholdSource::PerClass,
            local_filters: LocalFilters::McFilters,
        }
    }
}

impl DetectionConfig {
    /// The three rows of the reference detection table.
    pub fn table_presets() -> Vec<DetectionConfig> {
        vec![
            DetectionConfig::default(),
            DetectionConfig {
                metric: Metric::AvgF1,
                ..DetectionConfig::default()
            },
            DetectionConfig {
                skip_threshold: 0.0,
                freq_threshold: 0.0,
                metric: Metric::RecallFloor,
                ..DetectionConfig::default()
            },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.skip_threshold) {
            return Err(Error::Usage(format!(
                "skip threshold {} outside [0, 1]",
                self.skip_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.freq_threshold) {
            return Err(Error::Usage(format!(
                "frequency threshold {} outside [0, 1]",
                self.freq_threshold
            )));
        }
        if !self.recall_floor_value.is_finite() {
            return Err(Error::Usage("recall floor must be finite".into()));
        }
        Ok(())
    }

    fn skips(&self, confidence: f64) -> bool {
        self.skip_threshold > 0.0 && confidence > self.skip_threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagReason {
    BelowClassMean,
    BelowRecallFloor,
    SkippedHighConfidence,
    NotFlagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub image_id: String,
    pub inferred_class: usize,
    pub true_class: Option<usize>,
    pub confidence: f64,
    pub agreement_score: f64,
    pub flagged: bool,
    pub reason: FlagReason,
}

fn intersection(local: &FilterActivationMap, global: &FilterActivationMap) -> Result<usize> {
    if local.len() != global.len() {
        return Err(Error::Usage(format!(
            "filter maps differ in length ({} vs {})",
            local.len(),
            global.len()
        )));
    }
    Ok(local
        .bits()
        .iter()
        .zip(global.bits())
        .filter(|(a, b)| **a && **b)
        .count())
}

/// `|local ∩ global| / |global|`.
pub fn agreement_recall(local: &FilterActivationMap, global: &GlobalFilterSet) -> Result<f64> {
    let inter = intersection(local, &global.bits)?;
    let size = global.bits.count_ones();
    if size == 0 {
        return Err(Error::Usage(format!(
            "global filter set of class {} is empty",
            global.class_label
        )));
    }
    Ok(inter as f64 / size as f64)
}

/// Harmonic mean of precision and recall; 0 when either set or the
/// intersection is empty.
pub fn agreement_f1(local: &FilterActivationMap, global: &GlobalFilterSet) -> Result<f64> {
    let inter = intersection(local, &global.bits)?;
    let (nl, ng) = (local.count_ones(), global.bits.count_ones());
    if nl == 0 || ng == 0 || inter == 0 {
        return Ok(0.0);
    }
    // 2PR/(P+R) with P = i/nl, R = i/ng reduces to 2i/(nl+ng).
    Ok(2.0 * inter as f64 / (nl + ng) as f64)
}

pub fn agreement_score(
    metric: Metric,
    local: &FilterActivationMap,
    global: &GlobalFilterSet,
) -> Result<f64> {
    match metric {
        Metric::AvgRecall | Metric::RecallFloor => agreement_recall(local, global),
        Metric::AvgF1 => agreement_f1(local, global),
    }
}

fn local_filters<T: Scalar>(
    record: &PredictionRecord<T>,
    mc: Option<&MCFilterSet<T>>,
    source: LocalFilters,
) -> Result<FilterActivationMap> {
    match source {
        LocalFilters::ActivationMap => Ok(record.activation_map.clone()),
        LocalFilters::McFilters => {
            let mc =
                mc.ok_or_else(|| Error::Usage(format!("no MC set for {}", record.image_id)))?;
            if mc.image_id != record.image_id {
                return Err(Error::Usage(format!(
                    "MC set {} paired with record {}",
                    mc.image_id, record.image_id
                )));
            }
            Ok(mc.to_bits())
        }
    }
}

/// One training image's score against its true class's global set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub image_id: String,
    pub class_label: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassThresholds {
    pub metric: Metric,
    pub per_class: BTreeMap<usize, f64>,
    pub global: f64,
}

impl ClassThresholds {
    /// Arithmetic means of a score log, per class and overall.
    pub fn from_scores(metric: Metric, scores: &[ScoreEntry]) -> Self {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for s in scores {
            let e = sums.entry(s.class_label).or_default();
            e.0 += s.score;
            e.1 += 1;
        }
        let per_class = sums.iter().map(|(c, (s, n))| (*c, s / *n as f64)).collect();
        let global = if scores.is_empty() {
            0.0
        } else {
            scores.iter().map(|s| s.score).sum::<f64>() / scores.len() as f64
        };
        Self {
            metric,
            per_class,
            global,
        }
    }

    pub fn threshold_for(&self, class: usize, source: ThresholdSource) -> Result<f64> {
        match source {
            ThresholdSource::Global => Ok(self.global),
            ThresholdSource::PerClass => {
                self.per_class.get(&class).copied().ok_or_else(|| {
                    Error::Usage(format!("no calibrated threshold for class {class}"))
                })
            }
        }
    }
}

/// Scores labeled training predictions against their true class's global set
/// and averages them.
pub fn calibrate_class_thresholds<T: Scalar>(
    samples: &[(&PredictionRecord<T>, Option<&MCFilterSet<T>>)],
    global_sets: &BTreeMap<usize, GlobalFilterSet>,
    cfg: &DetectionConfig,
) -> Result<(ClassThresholds, Vec<ScoreEntry>)> {
    cfg.validate()?;
    let mut scores = Vec::with_capacity(samples.len());
    for (record, mc) in samples {
        let Some(truth) = record.true_class else {
            log::warn!(
                "calibration record {} has no label; ignored",
                record.image_id
            );
            continue;
        };
        let Some(global) = global_sets.get(&truth) else {
            continue;
        };
        let local = local_filters(record, *mc, cfg.local_filters)?;
        scores.push(ScoreEntry {
            image_id: record.image_id.clone(),
            class_label: truth,
            score: agreement_score(cfg.metric, &local, global)?,
        });
    }
    let thresholds = ClassThresholds::from_scores(cfg.metric, &scores);
    for class in global_sets.keys() {
        if !thresholds.per_class.contains_key(class) {
            log::warn!("class {class} has no training records; excluded from calibration");
        }
    }
    Ok((thresholds, scores))
}

pub fn flag<T: Scalar>(
    record: &PredictionRecord<T>,
    mc: Option<&MCFilterSet<T>>,
    global_sets: &BTreeMap<usize, GlobalFilterSet>,
    thresholds: &ClassThresholds,
    cfg: &DetectionConfig,
) -> Result<DetectionResult> {
    let global = global_sets.get(&record.inferred_class).ok_or_else(|| {
        Error::Usage(format!(
            "no global filter set for class {}",
            record.inferred_class
        ))
    })?;
    let confidence = record.confidence.as_f64();
    let local = local_filters(record, mc, cfg.local_filters)?;
    let agreement_score = agreement_score(cfg.metric, &local, global)?;
    let (flagged, reason) = if cfg.skips(confidence) {
        (false, FlagReason::SkippedHighConfidence)
    } else {
        match cfg.metric {
            Metric::RecallFloor => {
                if agreement_score < cfg.recall_floor_value {
                    (true, FlagReason::BelowRecallFloor)
                } else {
                    (false, FlagReason::NotFlagged)
                }
            }
            Metric::AvgRecall | Metric::AvgF1 => {
                if thresholds.metric != cfg.metric {
                    return Err(Error::Usage(format!(
                        "thresholds were calibrated for {}, not {}",
                        thresholds.metric, cfg.metric
                    )));
                }
                let threshold =
                    thresholds.threshold_for(record.inferred_class, cfg.threshold_source)?;
                if agreement_score < threshold {
                    (true, FlagReason::BelowClassMean)
                } else {
                    (false, FlagReason::NotFlagged)
                }
            }
        }
    };
    Ok(DetectionResult {
        image_id: record.image_id.clone(),
        inferred_class: record.inferred_class,
        true_class: record.true_class,
        confidence,
        agreement_score,
        flagged,
        reason,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub evaluated: usize,
    pub total_errors: usize,
    pub flagged: usize,
    pub errors_detected: usize,
    pub new_errors: usize,
}

impl DetectionSummary {
    pub fn detected_percent(&self) -> f64 {
        if self.total_errors == 0 {
            0.0
        } else {
            100.0 * self.errors_detected as f64 / self.total_errors as f64
        }
    }

    /// Fraction of flagged predictions that are real errors.
    pub fn flag_precision(&self) -> Option<f64> {
        (self.flagged > 0).then(|| self.errors_detected as f64 / self.flagged as f64)
    }

    pub fn error_rate(&self) -> Option<f64> {
        (self.evaluated > 0).then(|| self.total_errors as f64 / self.evaluated as f64)
    }
}

/// Counts errors, detected errors and false alarms over labeled results.
pub fn detection_report(results: &[DetectionResult]) -> DetectionSummary {
    let mut s = DetectionSummary::default();
    for r in results {
        let Some(truth) = r.true_class else { continue };
        let wrong = truth != r.inferred_class;
        s.evaluated += 1;
        s.total_errors += usize::from(wrong);
        if r.flagged {
            s.flagged += 1;
            if wrong {
                s.errors_detected += 1;
            } else {
                s.new_errors += 1;
            }
        }
    }
    s
}

pub const TABLE1_HEADER: [&str; 7] = [
    "Model",
    "Total errors",
    "Skip threshold",
    "Freq. threshold",
    "Metric",
    "Errors detected",
    "New errors",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub model: String,
    pub total_errors: usize,
    pub skip_threshold: f64,
    pub freq_threshold: f64,
    pub metric_label: String,
    pub errors_detected: usize,
    pub detected_percent: f64,
    pub new_errors: usize,
}

impl Table1Row {
    pub fn new(model: &str, cfg: &DetectionConfig, summary: &DetectionSummary) -> Self {
        Self {
            model: model.to_string(),
            total_errors: summary.total_errors,
            skip_threshold: cfg.skip_threshold,
            freq_threshold: cfg.freq_threshold,
            metric_label: cfg.metric.table_label(cfg.recall_floor_value),
            errors_detected: summary.errors_detected,
            detected_percent: summary.detected_percent(),
            new_errors: summary.new_errors,
        }
    }

    pub fn cells(&self) -> [String; 7] {
        [
            self.model.clone(),
            self.total_errors.to_string(),
            percent_cell(self.skip_threshold),
            percent_cell(self.freq_threshold),
            self.metric_label.clone(),
            format!("{} ({:.0}%)", self.errors_detected, self.detected_percent),
            self.new_errors.to_string(),
        ]
    }
}

fn percent_cell(fraction: f64) -> String {
    format!("{}%", (fraction * 100.0).round() as i64)
}

pub fn write_table1(path: impl AsRef<Path>, rows: &[Table1Row]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TABLE1_HEADER)?;
    for row in rows {
        w.write_record(row.cells())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_scores(path: impl AsRef<Path>, scores: &[ScoreEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for s in scores {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreEntry>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RECORD_VERSION;

    fn bits(n: usize, idx: &[usize]) -> FilterActivationMap {
        FilterActivationMap::from_indices(n, idx.iter().copied()).unwrap()
    }

    fn global(n: usize, idx: &[usize]) -> GlobalFilterSet {
        GlobalFilterSet {
            class_label: 0,
            bits: bits(n, idx),
            normalized_freq: vec![0.0; n],
        }
    }

    #[test]
    fn recall_examples() {
        let g = global(6, &[1, 2, 3, 4]);
        assert_eq!(agreement_recall(&bits(6, &[1, 2, 3, 4]), &g).unwrap(), 1.0);
        assert_eq!(agreement_recall(&bits(6, &[0, 5]), &g).unwrap(), 0.0);
        assert_eq!(agreement_recall(&bits(6, &[1, 3]), &g).unwrap(), 0.5);
        assert!(matches!(
            agreement_recall(&bits(6, &[1]), &global(6, &[])),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            agreement_recall(&bits(5, &[1]), &g),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn f1_examples() {
        let g = global(4, &[1, 2]);
        assert_eq!(agreement_f1(&bits(4, &[1, 2]), &g).unwrap(), 1.0);
        assert!((agreement_f1(&bits(4, &[1]), &g).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(agreement_f1(&bits(4, &[]), &g).unwrap(), 0.0);
        assert_eq!(agreement_f1(&bits(4, &[1]), &global(4, &[])).unwrap(), 0.0);
    }

    fn rec(conf: f64, inferred: usize, truth: usize, on: &[usize]) -> PredictionRecord<f64> {
        PredictionRecord {
            record_version: RECORD_VERSION,
            image_id: "t".into(),
            inferred_class: inferred,
            confidence: conf,
            true_class: Some(truth),
            gap_features: vec![0.0; 4],
            activation_map: bits(4, on),
        }
    }

    fn sets() -> BTreeMap<usize, GlobalFilterSet> {
        BTreeMap::from([(0, global(4, &[0, 1, 2, 3]))])
    }

    fn thresholds(metric: Metric, value: f64) -> ClassThresholds {
        ClassThresholds {
            metric,
            per_class: BTreeMap::from([(0, value)]),
            global: value,
        }
    }

    fn map_cfg(metric: Metric, skip: f64) -> DetectionConfig {
        DetectionConfig {
            skip_threshold: skip,
            metric,
            local_filters: LocalFilters::ActivationMap,
            ..DetectionConfig::default()
        }
    }

    #[test]
    fn confident_predictions_are_skipped() {
        let r = flag(
            &rec(0.95, 0, 1, &[]),
            None,
            &sets(),
            &thresholds(Metric::AvgRecall, 0.9),
            &map_cfg(Metric::AvgRecall, 0.9),
        )
        .unwrap();
        assert!(!r.flagged);
        assert_eq!(r.reason, FlagReason::SkippedHighConfidence);
    }

    #[test]
    fn recall_floor_flags_with_skipping_disabled() {
        // recall 1/4 = 0.25 < 0.3
        let r = flag(
            &rec(0.97, 0, 0, &[2]),
            None,
            &sets(),
            &thresholds(Metric::AvgRecall, 0.0),
            &DetectionConfig {
                freq_threshold: 0.0,
                ..map_cfg(Metric::RecallFloor, 0.0)
            },
        )
        .unwrap();
        assert_eq!(r.agreement_score, 0.25);
        assert!(r.flagged);
        assert_eq!(r.reason, FlagReason::BelowRecallFloor);
    }

    #[test]
    fn score_equal_to_mean_is_not_flagged() {
        let cfg = map_cfg(Metric::AvgRecall, 0.9);
        let r = flag(
            &rec(0.5, 0, 0, &[0, 1]),
            None,
            &sets(),
            &thresholds(Metric::AvgRecall, 0.5),
            &cfg,
        )
        .unwrap();
        assert!(!r.flagged);
        let r = flag(
            &rec(0.5, 0, 0, &[0]),
            None,
            &sets(),
            &thresholds(Metric::AvgRecall, 0.5),
            &cfg,
        )
        .unwrap();
        assert!(r.flagged);
        assert_eq!(r.reason, FlagReason::BelowClassMean);
    }

    #[test]
    fn missing_global_set_and_mismatched_thresholds() {
        let cfg = map_cfg(Metric::AvgRecall, 0.9);
        assert!(matches!(
            flag(
                &rec(0.5, 1, 1, &[0]),
                None,
                &sets(),
                &thresholds(Metric::AvgRecall, 0.5),
                &cfg
            ),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            flag(
                &rec(0.5, 0, 0, &[0]),
                None,
                &sets(),
                &thresholds(Metric::AvgF1, 0.5),
                &cfg
            ),
            Err(Error::Usage(_))
        ));
        // MC-based detection needs the MC set.
        assert!(matches!(
            flag(
                &rec(0.5, 0, 0, &[0]),
                None,
                &sets(),
                &thresholds(Metric::AvgRecall, 0.5),
                &DetectionConfig::default()
            ),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn calibration_means() {
        let scores = vec![
            ScoreEntry {
                image_id: "a".into(),
                class_label: 0,
                score: 0.6,
            },
            ScoreEntry {
                image_id: "b".into(),
                class_label: 0,
                score: 1.0,
            },
            ScoreEntry {
                image_id: "c".into(),
                class_label: 1,
                score: 0.8,
            },
            ScoreEntry {
                image_id: "d".into(),
                class_label: 1,
                score: 0.8,
            },
        ];
        let t = ClassThresholds::from_scores(Metric::AvgRecall, &scores);
        assert!((t.per_class[&0] - 0.8).abs() < 1e-15);
        assert_eq!(t.per_class[&1], 0.8);
        assert!((t.global - 0.8).abs() < 1e-15);
        assert!(t.threshold_for(7, ThresholdSource::PerClass).is_err());
        assert_eq!(
            t.threshold_for(7, ThresholdSource::Global).unwrap(),
            t.global
        );
    }

    #[test]
    fn report_counts() {
        assert_eq!(detection_report(&[]), DetectionSummary::default());
        let mk = |inferred, truth, flagged| DetectionResult {
            image_id: "x".into(),
            inferred_class: inferred,
            true_class: Some(truth),
            confidence: 0.5,
            agreement_score: 0.5,
            flagged,
            reason: if flagged {
                FlagReason::BelowClassMean
            } else {
                FlagReason::NotFlagged
            },
        };
        let s = detection_report(&[
            mk(0, 1, true),
            mk(0, 0, true),
            mk(1, 2, false),
            mk(2, 2, false),
        ]);
        assert_eq!(s.total_errors, 2);
        assert_eq!(s.errors_detected, 1);
        assert_eq!(s.new_errors, 1);
        assert_eq!(s.flag_precision(), Some(0.5));
        assert_eq!(s.error_rate(), Some(0.5));
    }

    #[test]
    fn table_rows_format_like_the_reference_table() {
        let presets = DetectionConfig::table_presets();
        let counts = [(541, 256), (680, 370), (653, 369)];
        let expected = [
            [
                "VGG-16",
                "1769",
                "90%",
                "15%",
                "Avg. Recall",
                "541 (31%)",
                "256",
            ],
            [
                "VGG-16",
                "1769",
                "90%",
                "15%",
                "Avg. F1 score",
                "680 (38%)",
                "370",
            ],
            [
                "VGG-16",
                "1769",
                "0%",
                "0%",
                "Recall < 0.3",
                "653 (37%)",
                "369",
            ],
        ];
        for ((cfg, (det, new)), want) in presets.iter().zip(counts).zip(expected) {
            let summary = DetectionSummary {
                evaluated: 5764,
                total_errors: 1769,
                flagged: det + new,
                errors_detected: det,
                new_errors: new,
            };
            assert_eq!(
                Table1Row::new("VGG-16", cfg, &summary).cells(),
                want.map(String::from)
            );
        }
    }

    #[test]
    fn metric_parsing() {
        assert_eq!("avg_f1".parse::<Metric>().unwrap(), Metric::AvgF1);
        assert!(matches!(
            "precision".parse::<Metric>(),
            Err(Error::Usage(_))
        ));
    }
}
