//! Seeded experiment protocol: split, train, evaluate and aggregate, once
//! per seed and once per study setting.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use adformer_core::evaluation::{
    aggregate, evaluate, split_subjects, subject_labels, AggregateMetrics, MetricsReport, Split, SplitPlan,
};
use adformer_core::model::{load_checkpoint, save_checkpoint, Ablation, AdFormer, ModelConfig};
use adformer_core::numerics::Tensor;
use adformer_core::signal::{manifest_text, preprocess_all, read_dataset, synth_generate, Recording, Segment, MANIFEST};
use adformer_core::training::{history_tsv, train_with, EpochRecord};
use adformer_core::Scalar;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{parse_text, DataSource, ExperimentConfig, Precision, Resolved, Study, Task};
use crate::error::{LabError, Result};

pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_ECHO: &str = "config.txt";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const SPLIT_FILE: &str = "split.json";

/// Recordings after task filtering, with the provenance hash of the
/// manifest they came from.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub recordings: Vec<Recording<T>>,
    pub source: String,
    pub manifest_sha256: String,
    pub channels: usize,
    pub classes: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Keeps the two designated classes and relabels them control → 0,
/// patient → 1.
pub fn binary_filter<T: Scalar>(recs: Vec<Recording<T>>, hc: usize, ad: usize) -> Vec<Recording<T>> {
    recs.into_iter()
        .filter_map(|mut r| {
            r.label = match r.label {
                l if l == hc => 0,
                l if l == ad => 1,
                _ => return None,
            };
            Some(r)
        })
        .collect()
}

pub fn load_dataset<T: Scalar>(cfg: &ExperimentConfig) -> Result<Dataset<T>> {
    let (recs, source, manifest) = match &cfg.data {
        DataSource::Synthetic(spec) => {
            let recs = synth_generate::<T>(spec)?;
            let manifest = manifest_text(&recs).into_bytes();
            (recs, "synthetic".to_string(), manifest)
        }
        DataSource::Directory(dir) => {
            let manifest = fs::read(dir.join(MANIFEST)).map_err(|e| LabError::io(&dir.join(MANIFEST), e))?;
            (read_dataset::<T>(dir)?, dir.display().to_string(), manifest)
        }
    };
    let (recs, classes) = match cfg.task {
        Task::Multiclass => {
            let k = recs.iter().map(|r| r.label + 1).max().unwrap_or(0);
            (recs, k)
        }
        Task::BinaryAdHc => (binary_filter(recs, cfg.hc_label, cfg.ad_label), 2),
    };
    if recs.is_empty() {
        return Err(LabError::Report(format!("dataset {source} has no usable recordings")));
    }
    let channels = recs[0].channels();
    if let Some(r) = recs.iter().find(|r| r.channels() != channels) {
        return Err(LabError::Report(format!(
            "recording {} has {} channels, expected {channels}",
            r.subject_id,
            r.channels()
        )));
    }
    let present: BTreeSet<usize> = recs.iter().map(|r| r.label).collect();
    if present.len() < classes {
        log::warn!("only {} of {classes} classes present in {source}", present.len());
    }
    Ok(Dataset {
        recordings: recs,
        source,
        manifest_sha256: sha256_hex(&manifest),
        channels,
        classes,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub source: String,
    pub manifest_sha256: String,
    pub recordings: usize,
    pub channels: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub metrics: Option<MetricsReport>,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub stopped_early: bool,
    /// Segment counts of the train, validation and test splits.
    pub split_segments: [usize; 3],
    pub stratified: bool,
    pub directory: String,
}

impl SeedRun {
    fn failed(seed: u64, dir: &Path, error: String) -> Self {
        SeedRun {
            seed,
            status: RunStatus::Failed,
            error: Some(error),
            metrics: None,
            epochs: 0,
            best_epoch: 0,
            best_val_f1: f64::NAN,
            stopped_early: false,
            split_segments: [0; 3],
            stratified: false,
            directory: dir.display().to_string(),
        }
    }
}

/// Results for one setting of the study variable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block {
    pub label: String,
    pub variable: Option<String>,
    pub value: serde_json::Value,
    pub config: Resolved,
    pub segments: usize,
    /// Subjects whose recording yields no full window at this setting.
    pub too_short: Vec<String>,
    pub runs: Vec<SeedRun>,
    pub aggregate: Option<AggregateMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub tool: String,
    pub version: String,
    pub study: Option<Study>,
    pub config: Resolved,
    pub dataset: DatasetInfo,
    pub blocks: Vec<Block>,
    pub failures: usize,
}

impl ExperimentReport {
    pub fn succeeded(&self) -> bool {
        self.failures == 0
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One configuration per setting of the study variable, in configured order.
pub fn study_variants(cfg: &ExperimentConfig) -> Result<Vec<(String, Option<String>, serde_json::Value, ExperimentConfig)>> {
    let Some(study) = cfg.study else {
        return Ok(vec![("baseline".into(), None, serde_json::Value::Null, cfg.clone())]);
    };
    let mut out = Vec::new();
    match study {
        Study::Lengths => {
            for &t in &cfg.study_lengths {
                let v = cfg.with("window_len", t.to_string())?;
                out.push((format!("window_len={t}"), Some("window_len".into()), t.into(), v));
            }
        }
        Study::Overlaps => {
            for &r in &cfg.study_overlaps {
                let v = cfg.with("overlap_ratio", r.to_string())?;
                out.push((format!("overlap_ratio={r}"), Some("overlap_ratio".into()), r.into(), v));
            }
        }
        Study::Ablations => {
            for a in Ablation::ALL {
                let v = cfg.with("ablation", a.name())?;
                out.push((a.name().to_string(), Some("ablation".into()), a.name().into(), v));
            }
        }
    }
    Ok(out)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| LabError::io(path, e))
}

/// Split → train → evaluate for one seed, writing its artefacts into `dir`.
fn run_seed<T: Scalar>(
    cfg: &ExperimentConfig,
    model_config: &ModelConfig,
    segments: &[Segment<T>],
    seed: u64,
    dir: &Path,
) -> Result<SeedRun> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    write(&dir.join(CONFIG_ECHO), cfg.resolved.to_string())?;
    let plan = split_subjects(&subject_labels(segments)?, seed)?;
    plan.check_disjoint()?;
    write(&dir.join(SPLIT_FILE), serde_json::to_string_pretty(&plan)?)?;
    let train = plan.select(segments, Split::Train);
    let val = plan.select(segments, Split::Val);
    let test = plan.select(segments, Split::Test);
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    let history_path = dir.join("history.tsv");
    let mut history: Vec<EpochRecord> = Vec::new();
    let outcome = train_with(model_config, &tc, &train, &val, |rec| {
        history.push(rec.clone());
        // keep the log current so long runs can be followed
        let _ = fs::write(&history_path, history_tsv(&history));
    })?;
    write(&history_path, history_tsv(&outcome.history))?;
    save_checkpoint(&outcome.model, &dir.join(CHECKPOINT))?;
    let metrics = evaluate(&outcome.model, &plan, &test)?;
    write(&dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    log::info!(
        "seed {seed}: sample F1 {:.4}, subject F1 {:.4}",
        metrics.sample_f1_macro,
        metrics.subject_f1_macro
    );
    Ok(SeedRun {
        seed,
        status: RunStatus::Ok,
        error: None,
        metrics: Some(metrics),
        epochs: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_val_f1: outcome.best_val_f1,
        stopped_early: outcome.stopped_early,
        split_segments: [train.len(), val.len(), test.len()],
        stratified: plan.stratified,
        directory: dir.display().to_string(),
    })
}

/// Runs `seeds` on up to `jobs` worker threads; results come back in seed
/// order. Errors and panics become failure records.
fn run_seeds<T: Scalar>(
    cfg: &ExperimentConfig,
    model_config: &ModelConfig,
    segments: &[Segment<T>],
    root: &Path,
) -> Vec<SeedRun> {
    let seeds = &cfg.seeds;
    let slots: Mutex<Vec<Option<SeedRun>>> = Mutex::new(vec![None; seeds.len()]);
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&seed) = seeds.get(i) else { break };
        let dir = root.join(format!("seed-{seed}"));
        let run = catch_unwind(AssertUnwindSafe(|| run_seed(cfg, model_config, segments, seed, &dir)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(LabError::Report(format!("panicked: {msg}")))
            })
            .unwrap_or_else(|e| {
                log::error!("seed {seed} failed: {e}");
                SeedRun::failed(seed, &dir, e.to_string())
            });
        slots.lock().expect("no panics while holding the lock")[i] = Some(run);
    };
    std::thread::scope(|s| {
        for _ in 1..cfg.jobs.min(seeds.len()) {
            s.spawn(work);
        }
        work();
    });
    slots.into_inner().expect("workers finished").into_iter().flatten().collect()
}

fn dir_name(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '-' }).collect()
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let data = load_dataset::<T>(cfg)?;
    let root = &cfg.output;
    fs::create_dir_all(root).map_err(|e| LabError::io(root, e))?;
    let mut blocks = Vec::new();
    for (label, variable, value, variant) in study_variants(cfg)? {
        log::info!("block {label}");
        let block_dir = root.join(dir_name(&label));
        let pre = preprocess_all(&data.recordings, &variant.segmentation)?;
        let mc = variant.model.build(
            data.channels,
            variant.segmentation.window_len,
            data.classes,
            variant.augmentation.clone(),
        );
        let runs = match mc.validate() {
            Ok(()) => run_seeds(&variant, &mc, &pre.segments, &block_dir),
            Err(e) => variant
                .seeds
                .iter()
                .map(|&s| SeedRun::failed(s, &block_dir.join(format!("seed-{s}")), e.to_string()))
                .collect(),
        };
        let done: Vec<MetricsReport> = runs.iter().filter_map(|r| r.metrics.clone()).collect();
        blocks.push(Block {
            label,
            variable,
            value,
            config: variant.resolved.clone(),
            segments: pre.segments.len(),
            too_short: pre.too_short,
            aggregate: (!done.is_empty()).then(|| aggregate(&done)),
            runs,
        });
    }
    let failures = blocks
        .iter()
        .flat_map(|b| &b.runs)
        .filter(|r| r.status == RunStatus::Failed)
        .count();
    let report = ExperimentReport {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        study: cfg.study,
        config: cfg.resolved.clone(),
        dataset: DatasetInfo {
            source: data.source,
            manifest_sha256: data.manifest_sha256,
            recordings: data.recordings.len(),
            channels: data.channels,
            classes: data.classes,
        },
        blocks,
        failures,
    };
    write(&root.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Runs every configured seed (for every study setting) and writes
/// `report.json` under the output directory. Per-seed failures are recorded
/// in the report rather than aborting the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    match cfg.precision {
        Precision::F64 => run_typed::<f64>(cfg),
        Precision::F32 => run_typed::<f32>(cfg),
    }
}

fn evaluate_typed<T: Scalar>(run_dir: &Path, overrides: &[(String, String)]) -> Result<MetricsReport> {
    let echo = run_dir.join(CONFIG_ECHO);
    let text = fs::read_to_string(&echo).map_err(|e| LabError::io(&echo, e))?;
    let mut resolved = parse_text(&text, Resolved::defaults())?;
    for (k, v) in overrides {
        resolved.set(k, v.as_str())?;
    }
    let cfg = ExperimentConfig::from_resolved(resolved)?;
    let split = run_dir.join(SPLIT_FILE);
    let plan: SplitPlan = serde_json::from_str(&fs::read_to_string(&split).map_err(|e| LabError::io(&split, e))?)?;
    let model: AdFormer<T> = load_checkpoint(&run_dir.join(CHECKPOINT))?;
    let data = load_dataset::<T>(&cfg)?;
    let pre = preprocess_all(&data.recordings, &cfg.segmentation)?;
    let test = plan.select(&pre.segments, Split::Test);
    Ok(evaluate(&model, &plan, &test)?)
}

/// Re-evaluates a saved seed directory on its own test split.
pub fn evaluate_run(run_dir: &Path, overrides: &[(String, String)]) -> Result<MetricsReport> {
    let echo = run_dir.join(CONFIG_ECHO);
    let text = fs::read_to_string(&echo).map_err(|e| LabError::io(&echo, e))?;
    let precision = parse_text(&text, Resolved::defaults())?.get("precision").unwrap_or("f64").to_string();
    if precision == "f32" {
        evaluate_typed::<f32>(run_dir, overrides)
    } else {
        evaluate_typed::<f64>(run_dir, overrides)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub parameters: usize,
}

/// Central-difference check of the configured model's loss gradient on the
/// first preprocessed window of the configured data, in double precision
/// with augmentation off.
pub fn gradcheck(cfg: &ExperimentConfig, samples: usize, eps: f64, tolerance: f64) -> Result<GradcheckReport> {
    let data = load_dataset::<f64>(cfg)?;
    let pre = preprocess_all(&data.recordings, &cfg.segmentation)?;
    let (x, label) = match pre.segments.first() {
        Some(s) => (s.data.clone(), s.label),
        None => (Tensor::zeros(&[cfg.segmentation.window_len, data.channels]), 0),
    };
    let mut aug = cfg.augmentation.clone();
    aug.kinds.clear();
    let mc = cfg.model.build(data.channels, cfg.segmentation.window_len, data.classes.max(2), aug);
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let model = AdFormer::<f64>::new(mc, seed)?;
    let check = model.gradient_check(&x, label, samples, eps, seed)?;
    Ok(GradcheckReport {
        coordinates: check.coordinates,
        max_rel_error: check.max_rel_error,
        tolerance,
        passed: check.passes(tolerance),
        parameters: model.parameter_count(),
    })
}

/// Output directory of a seed inside a block.
pub fn seed_dir(root: &Path, block_label: &str, seed: u64) -> PathBuf {
    root.join(dir_name(block_label)).join(format!("seed-{seed}"))
}
