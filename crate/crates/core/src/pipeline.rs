//! File-based commands (bootstrap → extract → accumulate → detect → debug → report)
//! and run manifests.
//!
//! Every command reads its inputs from disk, writes its artifacts into one
//! output directory and finishes with a `manifest.json` listing the config,
//! the inputs and a SHA-256 of every artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cfe::{identify_mc_filters, read_mc_sets, write_mc_sets, CfeConfig, MCFilterSet};
use crate::dataset::{generate_shapes, Dataset, ShapesConfig};
use crate::debugger::{
    debug_train, predict_records, run_grid, train, write_epoch_log, CrossEntropy, DebugConfig,
    TrainConfig, LAMBDA_GRID,
};
use crate::detector::{
    calibrate_class_thresholds, detection_report, flag, write_scores, write_table1,
    DetectionConfig, DetectionResult, DetectionSummary, Table1Row,
};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::model::{read_records, write_records, Architecture, Cnn, PredictionRecord};
use crate::profile::{AccumulationSummary, ProfileSet};
use crate::report::{class_recall_delta, saliency_overlay, write_table2};
use crate::scalar::Scalar;

pub const MANIFEST_VERSION: u64 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u64,
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub output_dir: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Output-relative path → SHA-256 hex.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        let version = value
            .get("manifest_version")
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        if version != MANIFEST_VERSION {
            return Err(Error::Version {
                kind: "manifest",
                found: version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    /// Artifacts whose checksum in `other` differs or is missing.
    pub fn mismatches(&self, other: &RunManifest) -> Vec<String> {
        let mut diff: Vec<String> = self
            .artifacts
            .iter()
            .filter(|(k, v)| other.artifacts.get(*k) != Some(*v))
            .map(|(k, _)| k.clone())
            .collect();
        diff.extend(
            other
                .artifacts
                .keys()
                .filter(|k| !self.artifacts.contains_key(*k))
                .cloned(),
        );
        diff
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Checksums every file under `dir` except manifests.
fn checksum_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                let rel = path
                    .strip_prefix(dir)
                    .expect("walk stays under dir")
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert(rel, sha256_file(&path)?);
            }
        }
    }
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn finish_manifest<C: Serialize>(
    command: &str,
    config: &C,
    inputs: &[&Path],
    out_dir: &Path,
    seed: u64,
    started: u64,
) -> Result<RunManifest> {
    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        command: command.to_string(),
        config: serde_json::to_value(config)?,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        output_dir: out_dir.display().to_string(),
        seed,
        started_unix: started,
        finished_unix: now_unix(),
        artifacts: checksum_tree(out_dir)?,
    };
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Reads a TOML config; missing keys take their defaults.
pub fn load_toml_config<C: serde::de::DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------- bootstrap

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub shapes: ShapesConfig,
    pub architecture: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            shapes: ShapesConfig::default(),
            architecture: Architecture::desk(),
            epochs: 40,
            batch_size: 32,
            learning_rate: 0.003,
            seed: 11,
        }
    }
}

/// Writes the generated dataset to `out/data/{train,test}` and trains the base
/// classifier (`out/base_model.json`).
pub fn bootstrap<T: Scalar>(out_dir: &Path, cfg: &BootstrapConfig) -> Result<RunManifest> {
    let started = now_unix();
    create_dir(out_dir)?;
    let (train_set, test_set) = generate_shapes::<T>(&cfg.shapes);
    train_set.save_dir(out_dir.join("data/train"))?;
    test_set.save_dir(out_dir.join("data/test"))?;
    let mut net = Cnn::<T>::new(cfg.architecture.clone(), cfg.seed)?;
    let run = train(
        &mut net,
        &train_set,
        Some(&test_set),
        &CrossEntropy,
        &TrainConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            seed: cfg.seed,
        },
    )?;
    // The base model is the last epoch, not the best-on-test one.
    net.save(out_dir.join("base_model.json"))?;
    write_epoch_log(out_dir.join("base_training.csv"), &run.epochs)?;
    finish_manifest("bootstrap", cfg, &[], out_dir, cfg.seed, started)
}

// ------------------------------------------------------------------ extract

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    pub cfe: CfeConfig,
    /// Activation threshold of the binary map stored in each record.
    pub t: f64,
    pub tau: f64,
    /// Extract MC sets only for confident, correct predictions.
    pub qualifying_only: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            cfe: CfeConfig::default(),
            t: crate::model::DEFAULT_ACTIVATION_THRESHOLD,
            tau: crate::profile::DEFAULT_TAU,
            qualifying_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub image_id: String,
    pub reason: String,
    pub mc_extracted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction<T> {
    pub records: Vec<PredictionRecord<T>>,
    pub mc_sets: Vec<MCFilterSet<T>>,
    pub skipped: Vec<SkipEntry>,
}

fn skip_reason<T: Scalar>(record: &PredictionRecord<T>, tau: f64) -> Option<&'static str> {
    match record.is_correct() {
        Some(false) => Some("misclassified"),
        None => Some("unlabeled"),
        Some(true) if !(record.confidence.as_f64() > tau) => Some("low_confidence"),
        Some(true) => None,
    }
}

/// Predicts every image and extracts MC sets for the inferred classes.
pub fn extract_dataset<T: Scalar>(
    net: &Cnn<T>,
    data: &Dataset<T>,
    cfg: &ExtractConfig,
) -> Result<Extraction<T>> {
    cfg.cfe.validate()?;
    if data.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    let records = predict_records(net, &data.samples, cfg.t)?;
    let outputs: Vec<Result<(Option<MCFilterSet<T>>, Option<SkipEntry>)>> = data
        .samples
        .par_iter()
        .zip(records.par_iter())
        .map(|(sample, record)| {
            let reason = skip_reason(record, cfg.tau);
            let extract = !(cfg.qualifying_only && reason.is_some());
            let mc = if extract {
                Some(identify_mc_filters(
                    net,
                    &sample.id,
                    &sample.image,
                    record.inferred_class,
                    &cfg.cfe,
                )?)
            } else {
                None
            };
            let skip = reason.map(|r| SkipEntry {
                image_id: sample.id.clone(),
                reason: r.to_string(),
                mc_extracted: extract,
            });
            Ok((mc, skip))
        })
        .collect();
    let mut mc_sets = Vec::new();
    let mut skipped = Vec::new();
    for item in outputs {
        let (mc, skip) = item?;
        mc_sets.extend(mc);
        if let Some(s) = skip {
            log::debug!("{}: {}", s.image_id, s.reason);
            skipped.push(s);
        }
    }
    Ok(Extraction {
        records,
        mc_sets,
        skipped,
    })
}

/// Writes `records.jsonl`, `mc_sets.jsonl` and `skipped.jsonl`.
pub fn cmd_extract<T: Scalar>(
    data_dir: &Path,
    model_path: &Path,
    out_dir: &Path,
    cfg: &ExtractConfig,
) -> Result<RunManifest> {
    let started = now_unix();
    let data = Dataset::<T>::load_dir(data_dir)?;
    let net = Cnn::<T>::load(model_path)?;
    let ex = extract_dataset(&net, &data, cfg)?;
    create_dir(out_dir)?;
    write_records(out_dir.join("records.jsonl"), &ex.records)?;
    write_mc_sets(out_dir.join("mc_sets.jsonl"), &ex.mc_sets)?;
    jsonl::write(out_dir.join("skipped.jsonl"), &ex.skipped)?;
    log::info!(
        "extracted {} records, {} MC sets, {} not qualifying",
        ex.records.len(),
        ex.mc_sets.len(),
        ex.skipped.len()
    );
    finish_manifest("extract", cfg, &[data_dir, model_path], out_dir, 0, started)
}

// --------------------------------------------------------------- accumulate

fn index_mc_sets<T: Scalar>(sets: &[MCFilterSet<T>]) -> BTreeMap<&str, &MCFilterSet<T>> {
    sets.iter().map(|s| (s.image_id.as_str(), s)).collect()
}

pub fn accumulate_profiles<T: Scalar>(
    records: &[PredictionRecord<T>],
    mc_sets: &[MCFilterSet<T>],
    n: usize,
    label_count: usize,
    tau: f64,
) -> Result<(ProfileSet<T>, AccumulationSummary)> {
    let by_id = index_mc_sets(mc_sets);
    let mut profiles = ProfileSet::new(n, label_count);
    let pairs: Vec<_> = records
        .iter()
        .filter_map(|r| match by_id.get(r.image_id.as_str()) {
            Some(mc) => Some((r, *mc)),
            None => {
                log::debug!("{}: no MC set, not accumulated", r.image_id);
                None
            }
        })
        .collect();
    let summary = profiles.accumulate_all(pairs, T::lit(tau))?;
    Ok((profiles, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulateConfig {
    pub tau: f64,
    pub label_count: usize,
}

pub fn cmd_accumulate<T: Scalar>(
    extract_dir: &Path,
    out_dir: &Path,
    cfg: &AccumulateConfig,
) -> Result<RunManifest> {
    let started = now_unix();
    let records = read_records::<T>(extract_dir.join("records.jsonl"))?;
    let mc_sets = read_mc_sets::<T>(extract_dir.join("mc_sets.jsonl"))?;
    let n = records
        .first()
        .map(|r| r.filter_count())
        .ok_or_else(|| Error::Input("no prediction records to accumulate".into()))?;
    let (profiles, summary) = accumulate_profiles(&records, &mc_sets, n, cfg.label_count, cfg.tau)?;
    create_dir(out_dir)?;
    profiles.save(out_dir.join("profiles.json"))?;
    write_json(&out_dir.join("accumulation.json"), &summary)?;
    finish_manifest("accumulate", cfg, &[extract_dir], out_dir, 0, started)
}

// ------------------------------------------------------------------- detect

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRun {
    pub config: DetectionConfig,
    pub results: Vec<DetectionResult>,
    pub summary: DetectionSummary,
    pub row: Table1Row,
}

/// Calibrates on the training extraction and flags every test record, once
/// per detection config.
pub fn run_detection<T: Scalar>(
    train_records: &[PredictionRecord<T>],
    train_mc: &[MCFilterSet<T>],
    test_records: &[PredictionRecord<T>],
    test_mc: &[MCFilterSet<T>],
    profiles: &ProfileSet<T>,
    configs: &[DetectionConfig],
    model_name: &str,
    score_log_dir: Option<&Path>,
) -> Result<Vec<DetectionRun>> {
    let train_by_id = index_mc_sets(train_mc);
    let test_by_id = index_mc_sets(test_mc);
    let mut runs = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        cfg.validate()?;
        let global_sets = profiles.derive_global_sets(cfg.freq_threshold)?;
        let samples: Vec<_> = train_records
            .iter()
            .map(|r| (r, train_by_id.get(r.image_id.as_str()).copied()))
            .collect();
        let (thresholds, scores) = calibrate_class_thresholds(&samples, &global_sets, cfg)?;
        if let Some(dir) = score_log_dir {
            write_scores(
                dir.join(format!("train_scores_{i}_{}.csv", cfg.metric)),
                &scores,
            )?;
            write_json(
                &dir.join(format!("thresholds_{i}_{}.json", cfg.metric)),
                &thresholds,
            )?;
        }
        let results = test_records
            .iter()
            .map(|r| {
                flag(
                    r,
                    test_by_id.get(r.image_id.as_str()).copied(),
                    &global_sets,
                    &thresholds,
                    cfg,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let summary = detection_report(&results);
        let row = Table1Row::new(model_name, cfg, &summary);
        runs.push(DetectionRun {
            config: cfg.clone(),
            results,
            summary,
            row,
        });
    }
    Ok(runs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub model_name: String,
    pub rows: Vec<DetectionConfig>,
}

pub fn cmd_detect<T: Scalar>(
    train_extract: &Path,
    test_extract: &Path,
    profiles_path: &Path,
    out_dir: &Path,
    cfg: &DetectConfig,
) -> Result<RunManifest> {
    let started = now_unix();
    let profiles = ProfileSet::<T>::load(profiles_path)?;
    let train_records = read_records::<T>(train_extract.join("records.jsonl"))?;
    let train_mc = read_mc_sets::<T>(train_extract.join("mc_sets.jsonl"))?;
    let test_records = read_records::<T>(test_extract.join("records.jsonl"))?;
    let test_mc = read_mc_sets::<T>(test_extract.join("mc_sets.jsonl"))?;
    create_dir(out_dir)?;
    let runs = run_detection(
        &train_records,
        &train_mc,
        &test_records,
        &test_mc,
        &profiles,
        &cfg.rows,
        &cfg.model_name,
        Some(out_dir),
    )?;
    for (i, run) in runs.iter().enumerate() {
        jsonl::write(
            out_dir.join(format!("detections_{i}_{}.jsonl", run.config.metric)),
            &run.results,
        )?;
    }
    let rows: Vec<Table1Row> = runs.iter().map(|r| r.row.clone()).collect();
    write_table1(out_dir.join("table1.csv"), &rows)?;
    finish_manifest(
        "detect",
        cfg,
        &[train_extract, test_extract, profiles_path],
        out_dir,
        0,
        started,
    )
}

// -------------------------------------------------------------------- debug

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebugCommandConfig {
    pub debug: DebugConfig,
    /// Run the λ sweep (plus the fine-tuned baseline) instead of a single pair.
    pub grid: bool,
}

pub fn cmd_debug<T: Scalar>(
    model_path: &Path,
    train_dir: &Path,
    test_dir: &Path,
    profiles_path: &Path,
    out_dir: &Path,
    cfg: &DebugCommandConfig,
) -> Result<RunManifest> {
    let started = now_unix();
    cfg.debug.validate()?;
    let base = Cnn::<T>::load(model_path)?;
    let train_set = Dataset::<T>::load_dir(train_dir)?;
    let test_set = Dataset::<T>::load_dir(test_dir)?;
    let profiles = ProfileSet::<T>::load(profiles_path)?;
    let global_sets = profiles.derive_global_sets(cfg.debug.freq_threshold)?;
    create_dir(out_dir)?;
    if cfg.grid {
        let grid = run_grid(
            &base,
            &train_set,
            &test_set,
            &global_sets,
            &cfg.debug,
            &LAMBDA_GRID,
        )?;
        write_table2(out_dir.join("table2.csv"), &grid)?;
        grid.best_model.save(out_dir.join("debugged_model.json"))?;
        grid.fine_tuned_model
            .save(out_dir.join("fine_tuned_model.json"))?;
        write_epoch_log(
            out_dir.join("metrics_fine_tuned.csv"),
            &grid.fine_tuned.epochs,
        )?;
        for (i, arm) in grid.arms.iter().enumerate() {
            write_epoch_log(out_dir.join(format!("metrics_arm{i}.csv")), &arm.epochs)?;
        }
        #[derive(Serialize)]
        struct GridSummary<'a> {
            base_train_accuracy: f64,
            base_test_accuracy: f64,
            mc_recall_base: f64,
            best_arm: usize,
            fine_tuned: &'a crate::debugger::TrainingOutcome,
            arms: &'a [crate::debugger::TrainingOutcome],
        }
        write_json(
            &out_dir.join("outcome.json"),
            &GridSummary {
                base_train_accuracy: grid.base_train_accuracy,
                base_test_accuracy: grid.base_test_accuracy,
                mc_recall_base: grid.mc_recall_base,
                best_arm: grid.best_arm,
                fine_tuned: &grid.fine_tuned,
                arms: &grid.arms,
            },
        )?;
    } else {
        let run = debug_train(&base, &train_set, &test_set, &global_sets, &cfg.debug)?;
        run.model.save(out_dir.join("debugged_model.json"))?;
        write_epoch_log(out_dir.join("metrics.csv"), &run.outcome.epochs)?;
        write_json(&out_dir.join("outcome.json"), &run.outcome)?;
    }
    finish_manifest(
        "debug",
        cfg,
        &[model_path, train_dir, test_dir, profiles_path],
        out_dir,
        cfg.debug.seed,
        started,
    )
}

// ------------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub top_k: usize,
    /// Number of test images to render saliency overlays for.
    pub overlays: usize,
    pub alpha: f64,
    pub scale: u32,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            top_k: 3,
            overlays: 6,
            alpha: 0.45,
            scale: 8,
        }
    }
}

/// Class recall changes and Grad-CAM overlays. Overlays go to images whose
/// prediction changed between the two models first.
pub fn cmd_report<T: Scalar>(
    base_path: &Path,
    debugged_path: &Path,
    test_dir: &Path,
    out_dir: &Path,
    cfg: &ReportConfig,
) -> Result<RunManifest> {
    let started = now_unix();
    let base = Cnn::<T>::load(base_path)?;
    let debugged = Cnn::<T>::load(debugged_path)?;
    let test_set = Dataset::<T>::load_dir(test_dir)?;
    let t = crate::model::DEFAULT_ACTIVATION_THRESHOLD;
    let base_records = predict_records(&base, &test_set.samples, t)?;
    let debugged_records = predict_records(&debugged, &test_set.samples, t)?;
    let table = class_recall_delta(&base_records, &debugged_records, &test_set.class_names)?;
    create_dir(out_dir)?;
    table.write_sections(out_dir.join("table3.csv"), cfg.top_k)?;
    table.write_ranked(out_dir.join("class_recall.csv"))?;
    write_records(out_dir.join("base_test_records.jsonl"), &base_records)?;
    write_records(
        out_dir.join("debugged_test_records.jsonl"),
        &debugged_records,
    )?;

    let mut order: Vec<usize> = (0..test_set.len()).collect();
    order.sort_by_key(|&i| {
        (
            base_records[i].inferred_class == debugged_records[i].inferred_class,
            i,
        )
    });
    let overlay_dir = out_dir.join("overlays");
    create_dir(&overlay_dir)?;
    for &i in order.iter().take(cfg.overlays) {
        let s = &test_set.samples[i];
        let stem = s.id.replace(['/', '.'], "_");
        for (tag, net, rec) in [
            ("base", &base, &base_records[i]),
            ("debugged", &debugged, &debugged_records[i]),
        ] {
            saliency_overlay(
                net,
                &s.image,
                rec.inferred_class,
                overlay_dir.join(format!("{stem}_{tag}_pred{}.png", rec.inferred_class)),
                cfg.alpha,
                cfg.scale,
            )?;
        }
    }
    finish_manifest(
        "report",
        cfg,
        &[base_path, debugged_path, test_dir],
        out_dir,
        0,
        started,
    )
}

// ----------------------------------------------------------------- pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub bootstrap: BootstrapConfig,
    pub extract: ExtractConfig,
    pub detection: Vec<DetectionConfig>,
    pub debug: DebugConfig,
    pub grid: bool,
    pub report: ReportConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bootstrap: BootstrapConfig::default(),
            extract: ExtractConfig::default(),
            detection: DetectionConfig::table_presets(),
            debug: DebugConfig::default(),
            grid: true,
            report: ReportConfig::default(),
        }
    }
}

/// Runs every stage into sub-directories of `out_dir` and writes a top-level
/// manifest covering all artifacts.
pub fn run_pipeline<T: Scalar>(out_dir: &Path, cfg: &PipelineConfig) -> Result<RunManifest> {
    let started = now_unix();
    create_dir(out_dir)?;
    let p = |s: &str| -> PathBuf { out_dir.join(s) };
    bootstrap::<T>(&p("bootstrap"), &cfg.bootstrap)?;
    let model = p("bootstrap/base_model.json");
    let label_count = cfg.bootstrap.architecture.label_count;
    cmd_extract::<T>(
        &p("bootstrap/data/train"),
        &model,
        &p("extract_train"),
        &cfg.extract,
    )?;
    cmd_extract::<T>(
        &p("bootstrap/data/test"),
        &model,
        &p("extract_test"),
        &cfg.extract,
    )?;
    cmd_accumulate::<T>(
        &p("extract_train"),
        &p("profiles"),
        &AccumulateConfig {
            tau: cfg.extract.tau,
            label_count,
        },
    )?;
    cmd_detect::<T>(
        &p("extract_train"),
        &p("extract_test"),
        &p("profiles/profiles.json"),
        &p("detect"),
        &DetectConfig {
            model_name: "base".into(),
            rows: cfg.detection.clone(),
        },
    )?;
    cmd_debug::<T>(
        &model,
        &p("bootstrap/data/train"),
        &p("bootstrap/data/test"),
        &p("profiles/profiles.json"),
        &p("debug"),
        &DebugCommandConfig {
            debug: cfg.debug.clone(),
            grid: cfg.grid,
        },
    )?;
    cmd_report::<T>(
        &model,
        &p("debug/debugged_model.json"),
        &p("bootstrap/data/test"),
        &p("report"),
        &cfg.report,
    )?;
    finish_manifest("pipeline", cfg, &[], out_dir, cfg.bootstrap.seed, started)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub original: RunManifest,
    pub replayed: RunManifest,
    pub mismatched: Vec<String>,
}

/// Re-executes a pipeline manifest into `out_dir` and compares checksums.
pub fn replay_pipeline<T: Scalar>(manifest_path: &Path, out_dir: &Path) -> Result<ReplayOutcome> {
    let original = RunManifest::load(manifest_path)?;
    if original.command != "pipeline" {
        return Err(Error::Usage(format!(
            "replay expects a pipeline manifest, got {:?}",
            original.command
        )));
    }
    let cfg: PipelineConfig = serde_json::from_value(original.config.clone())?;
    let replayed = run_pipeline::<T>(out_dir, &cfg)?;
    let mismatched = original.mismatches(&replayed);
    Ok(ReplayOutcome {
        original,
        replayed,
        mismatched,
    })
}
