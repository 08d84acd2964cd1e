//! Experiment configuration: a flat `key = value` text format grouped under
//! `[section]` headers. Every key has a default, and any key can be
//! overridden from the command line with `--key value`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use adformer_core::augment::{parse_kinds, AugmentationConfig};
use adformer_core::embedding::GranularitySpec;
use adformer_core::evaluation::F1Average;
use adformer_core::model::{Ablation, ModelConfig, Pooling};
use adformer_core::signal::{SegmentationPolicy, SynthSpec, ZScoreScope};
use adformer_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Environment variable naming the default dataset directory.
pub const DATA_ENV: &str = "ADFORMER_LAB_DATA";

struct KeySpec {
    section: &'static str,
    key: &'static str,
    default: &'static str,
    constraint: &'static str,
}

const fn k(section: &'static str, key: &'static str, default: &'static str, constraint: &'static str) -> KeySpec {
    KeySpec {
        section,
        key,
        default,
        constraint,
    }
}

const KEYS: &[KeySpec] = &[
    k("data", "dataset", "", "directory containing manifest.tsv, or empty for synthetic data"),
    k("data", "task", "multiclass", "one of multiclass, binary_ad_hc"),
    k("data", "hc_label", "0", "class index of the control group"),
    k("data", "ad_label", "1", "class index of the patient group, distinct from hc_label"),
    k("data", "synth_subjects", "20", "positive integer"),
    k("data", "synth_classes", "2", "positive integer"),
    k("data", "synth_channels", "4", "positive integer"),
    k("data", "synth_rate_hz", "128", "positive real"),
    k("data", "synth_duration_s", "10", "positive real"),
    k("data", "synth_noise", "0.5", "non-negative real"),
    k("data", "synth_seed", "41", "unsigned integer"),
    k("segmentation", "window_len", "128", "positive integer"),
    k("segmentation", "overlap_ratio", "0.5", "real in [0, 1) with round(T(1-r)) >= 1"),
    k("segmentation", "target_rate_hz", "128", "positive real"),
    k("segmentation", "bandpass", "0.5,45", "low,high in Hz with 0 < low < high, or none"),
    k("segmentation", "zscore", "joint", "one of joint, per_channel"),
    k("model", "layers", "4", "positive integer"),
    k("model", "d_model", "64", "positive integer divisible by heads"),
    k("model", "heads", "8", "positive integer"),
    k("model", "d_ff", "128", "positive integer"),
    k("model", "patch_lengths", "2,4,8", "comma-separated positive integers"),
    k("model", "channel_factors", "1,2,4", "comma-separated positive multiples of the channel count"),
    k("model", "ablation", "full", "one of full, no_inter, no_temporal, no_spatial"),
    k("model", "pooling", "flatten", "one of flatten, mean"),
    k("model", "norm_eps", "1e-5", "positive real"),
    k("model", "precision", "f64", "one of f32, f64"),
    k("augmentation", "augmentations", "flip,jitter", "comma-separated subset of flip, mask_time, mask_freq, mask_channel, jitter, dropout, or none"),
    k("augmentation", "aug_prob", "0.5", "real in [0, 1]"),
    k("augmentation", "aug_ratio", "0.1", "real in [0, 1)"),
    k("augmentation", "aug_scale", "0.1", "positive real"),
    k("augmentation", "aug_seed", "0", "unsigned integer"),
    k("augmentation", "aug_shared_draw", "false", "true or false"),
    k("train", "max_epochs", "200", "positive integer"),
    k("train", "patience", "15", "integer below max_epochs"),
    k("train", "batch_size", "64", "positive integer"),
    k("train", "lr_max", "1e-4", "positive real"),
    k("train", "lr_min", "0", "real in [0, lr_max]"),
    k("train", "weight_decay", "0.01", "non-negative real"),
    k("train", "beta1", "0.9", "real in [0, 1)"),
    k("train", "beta2", "0.999", "real in [0, 1)"),
    k("train", "adam_eps", "1e-8", "positive real"),
    k("train", "grad_clip", "none", "positive real, or none"),
    k("train", "selection", "macro", "one of macro, weighted"),
    k("experiment", "seeds", "41,42,43,44,45", "comma-separated unsigned integers"),
    k("experiment", "study", "none", "one of none, lengths, overlaps, ablations"),
    k("experiment", "study_lengths", "128,256,512,1024", "comma-separated positive integers"),
    k("experiment", "study_overlaps", "0,0.2,0.5,0.8", "comma-separated reals in [0, 1)"),
    k("experiment", "output", "runs", "output directory"),
    k("experiment", "jobs", "1", "positive integer"),
];

const SECTIONS: &[&str] = &["data", "segmentation", "model", "augmentation", "train", "experiment"];

fn spec_of(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|s| s.key == key)
}

/// Closest known key, if any is near enough to be a plausible typo.
pub fn suggest(key: &str) -> Option<&'static str> {
    KEYS.iter()
        .map(|s| (strsim::damerau_levenshtein(key, s.key), s.key))
        .filter(|&(d, cand)| d <= 2.max(cand.len() / 4))
        .min_by_key(|&(d, _)| d)
        .map(|(_, cand)| cand)
}

fn unknown(key: &str) -> LabError {
    LabError::UnknownKey {
        key: key.to_string(),
        suggestion: suggest(key).map(str::to_string),
    }
}

/// Every key with its final textual value, grouped by section. This is what
/// reports echo for provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolved(pub BTreeMap<String, BTreeMap<String, String>>);

impl Resolved {
    pub fn defaults() -> Self {
        let mut map: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for s in KEYS {
            map.entry(s.section.to_string())
                .or_default()
                .insert(s.key.to_string(), s.default.to_string());
        }
        Resolved(map)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        let s = spec_of(key)?;
        self.0.get(s.section)?.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        let s = spec_of(key).ok_or_else(|| unknown(key))?;
        self.0
            .get_mut(s.section)
            .expect("every section is seeded by defaults")
            .insert(key.to_string(), value.into().trim().to_string());
        Ok(())
    }
}

/// Renders the resolved values back into the text format; parsing the
/// result reproduces the same configuration.
impl fmt::Display for Resolved {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, section) in SECTIONS.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            writeln!(f, "[{section}]")?;
            for s in KEYS.iter().filter(|s| s.section == *section) {
                writeln!(f, "{} = {}", s.key, self.get(s.key).unwrap_or(""))?;
            }
        }
        Ok(())
    }
}

/// Applies `key = value` lines from `text` on top of `base`.
pub fn parse_text(text: &str, base: Resolved) -> Result<Resolved> {
    let mut out = base;
    let mut section: Option<String> = None;
    let mut seen = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.trim();
            if !SECTIONS.contains(&name) {
                return Err(LabError::Syntax {
                    line: line_no,
                    message: format!("unknown section [{name}]; expected one of {}", SECTIONS.join(", ")),
                });
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| LabError::Syntax {
            line: line_no,
            message: format!("expected `key = value`, found {line:?}"),
        })?;
        let key = key.trim();
        let spec = spec_of(key).ok_or_else(|| unknown(key))?;
        if let Some(sec) = &section {
            if sec != spec.section {
                return Err(LabError::Syntax {
                    line: line_no,
                    message: format!("key {key} belongs in [{}], not [{sec}]", spec.section),
                });
            }
        }
        if let Some(prev) = seen.insert(key.to_string(), line_no) {
            return Err(LabError::Syntax {
                line: line_no,
                message: format!("key {key} already set on line {prev}"),
            });
        }
        out.set(key, value)?;
    }
    Ok(out)
}

/// Reads a config file (if any), then applies `--key value` overrides.
pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Resolved> {
    let mut r = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| LabError::Io {
                path: p.display().to_string(),
                source: e,
            })?;
            parse_text(&text, Resolved::defaults())?
        }
        None => Resolved::defaults(),
    };
    for (key, value) in overrides {
        r.set(key, value.as_str())?;
    }
    Ok(r)
}

/// Splits `--key value` / `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let body = a.strip_prefix("--").ok_or_else(|| LabError::Usage(format!("expected --key, found {a:?}")))?;
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| LabError::Usage(format!("--{body} needs a value")))?;
                (body.to_string(), v.clone())
            }
        };
        let key = key.replace('-', "_");
        if spec_of(&key).is_none() {
            return Err(unknown(&key));
        }
        out.push((key, value));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Multiclass,
    BinaryAdHc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    Lengths,
    Overlaps,
    Ablations,
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::Lengths => "lengths",
            Study::Overlaps => "overlaps",
            Study::Ablations => "ablations",
        }
    }
}

impl FromStr for Study {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lengths" => Ok(Study::Lengths),
            "overlaps" => Ok(Study::Overlaps),
            "ablations" => Ok(Study::Ablations),
            _ => Err(invalid("study", s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthSpec),
    Directory(PathBuf),
}

/// Model hyperparameters that do not depend on the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub patch_lengths: Vec<usize>,
    pub channel_factors: Vec<usize>,
    pub ablation: Ablation,
    pub pooling: Pooling,
    pub norm_eps: f64,
}

impl ModelSettings {
    pub fn build(&self, channels: usize, seq_len: usize, classes: usize, augmentation: AugmentationConfig) -> ModelConfig {
        let scaled = self.channel_factors.iter().map(|f| f * channels).collect();
        ModelConfig {
            spec: GranularitySpec::new(self.patch_lengths.clone(), scaled, self.d_model, seq_len),
            in_channels: channels,
            seq_len,
            layers: self.layers,
            heads: self.heads,
            d_ff: self.d_ff,
            classes,
            ablation: self.ablation,
            pooling: self.pooling,
            augmentation,
            norm_eps: self.norm_eps,
        }
    }
}

/// Fully validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub task: Task,
    pub hc_label: usize,
    pub ad_label: usize,
    pub segmentation: SegmentationPolicy,
    pub model: ModelSettings,
    pub precision: Precision,
    pub augmentation: AugmentationConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub study: Option<Study>,
    pub study_lengths: Vec<usize>,
    pub study_overlaps: Vec<f64>,
    pub output: PathBuf,
    pub jobs: usize,
    /// The textual values this configuration was built from.
    pub resolved: Resolved,
}

fn invalid(key: &str, value: &str) -> LabError {
    let constraint = spec_of(key).map_or("", |s| s.constraint);
    LabError::Invalid {
        key: key.to_string(),
        value: value.to_string(),
        constraint: constraint.to_string(),
    }
}

struct Reader<'a>(&'a Resolved);

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        self.0.get(key).expect("key is listed in KEYS")
    }

    fn parse<V: FromStr>(&self, key: &str) -> Result<V> {
        let v = self.raw(key);
        v.parse().map_err(|_| invalid(key, v))
    }

    fn check<V: FromStr>(&self, key: &str, ok: impl Fn(&V) -> bool) -> Result<V> {
        let v: V = self.parse(key)?;
        if ok(&v) {
            Ok(v)
        } else {
            Err(invalid(key, self.raw(key)))
        }
    }

    fn positive(&self, key: &str) -> Result<usize> {
        self.check(key, |&v: &usize| v > 0)
    }

    fn positive_real(&self, key: &str) -> Result<f64> {
        self.check(key, |&v: &f64| v > 0.0 && v.is_finite())
    }

    fn list<V: FromStr>(&self, key: &str, ok: impl Fn(&V) -> bool) -> Result<Vec<V>> {
        let raw = self.raw(key);
        let items: Vec<V> = raw
            .split(',')
            .map(|s| s.trim().parse::<V>().ok().filter(|v| ok(v)))
            .collect::<Option<_>>()
            .ok_or_else(|| invalid(key, raw))?;
        if items.is_empty() {
            return Err(invalid(key, raw));
        }
        Ok(items)
    }
}

fn unit_open(v: &f64) -> bool {
    (0.0..1.0).contains(v)
}

fn stride_ok(window: usize, r: f64) -> bool {
    unit_open(&r) && (window as f64 * (1.0 - r)).round() >= 1.0
}

impl ExperimentConfig {
    pub fn from_resolved(resolved: Resolved) -> Result<Self> {
        let r = Reader(&resolved);
        let dataset = r.raw("dataset").to_string();
        let data = if !dataset.is_empty() {
            DataSource::Directory(PathBuf::from(dataset))
        } else if let Some(root) = std::env::var_os(DATA_ENV).filter(|v| !v.is_empty()) {
            DataSource::Directory(PathBuf::from(root))
        } else {
            DataSource::Synthetic(SynthSpec {
                subjects: r.positive("synth_subjects")?,
                classes: r.positive("synth_classes")?,
                channels: r.positive("synth_channels")?,
                rate_hz: r.positive_real("synth_rate_hz")?,
                duration_s: r.positive_real("synth_duration_s")?,
                noise_std: r.check("synth_noise", |&v: &f64| v >= 0.0 && v.is_finite())?,
                seed: r.parse("synth_seed")?,
            })
        };
        let task = match r.raw("task") {
            "multiclass" => Task::Multiclass,
            "binary_ad_hc" => Task::BinaryAdHc,
            other => return Err(invalid("task", other)),
        };
        let hc_label: usize = r.parse("hc_label")?;
        let ad_label: usize = r.check("ad_label", |&v: &usize| v != hc_label)?;

        let window_len = r.positive("window_len")?;
        let overlap_ratio = r.check("overlap_ratio", |&v: &f64| stride_ok(window_len, v))?;
        let bandpass = match r.raw("bandpass") {
            "none" | "" => None,
            raw => {
                let b = r.list("bandpass", |&v: &f64| v > 0.0 && v.is_finite())?;
                if b.len() != 2 || b[0] >= b[1] {
                    return Err(invalid("bandpass", raw));
                }
                Some((b[0], b[1]))
            }
        };
        let zscore = match r.raw("zscore") {
            "joint" => ZScoreScope::Joint,
            "per_channel" => ZScoreScope::PerChannel,
            other => return Err(invalid("zscore", other)),
        };
        let segmentation = SegmentationPolicy {
            window_len,
            overlap_ratio,
            target_rate_hz: r.positive_real("target_rate_hz")?,
            bandpass,
            zscore,
        };

        let heads = r.positive("heads")?;
        let model = ModelSettings {
            layers: r.positive("layers")?,
            d_model: r.check("d_model", |&d: &usize| d > 0 && d % heads == 0)?,
            heads,
            d_ff: r.positive("d_ff")?,
            patch_lengths: r.list("patch_lengths", |&v: &usize| v > 0)?,
            channel_factors: r.list("channel_factors", |&v: &usize| v > 0)?,
            ablation: r.parse("ablation")?,
            pooling: match r.raw("pooling") {
                "flatten" => Pooling::Flatten,
                "mean" => Pooling::Mean,
                other => return Err(invalid("pooling", other)),
            },
            norm_eps: r.positive_real("norm_eps")?,
        };
        let precision = match r.raw("precision") {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => return Err(invalid("precision", other)),
        };

        let augmentation = AugmentationConfig {
            kinds: parse_kinds(r.raw("augmentations")).map_err(|_| invalid("augmentations", r.raw("augmentations")))?,
            prob: r.check("aug_prob", |v: &f64| (0.0..=1.0).contains(v))?,
            ratio: r.check("aug_ratio", unit_open)?,
            scale: r.positive_real("aug_scale")?,
            rng_seed: r.parse("aug_seed")?,
            shared_draw: r.parse("aug_shared_draw")?,
        };

        let max_epochs = r.positive("max_epochs")?;
        let lr_max = r.positive_real("lr_max")?;
        let train = TrainConfig {
            max_epochs,
            patience: r.check("patience", |&p: &usize| p < max_epochs)?,
            batch_size: r.positive("batch_size")?,
            lr_max,
            lr_min: r.check("lr_min", |&v: &f64| (0.0..=lr_max).contains(&v))?,
            weight_decay: r.check("weight_decay", |&v: &f64| v >= 0.0 && v.is_finite())?,
            beta1: r.check("beta1", unit_open)?,
            beta2: r.check("beta2", unit_open)?,
            eps: r.positive_real("adam_eps")?,
            seed: 0,
            grad_clip: match r.raw("grad_clip") {
                "none" => None,
                _ => Some(r.positive_real("grad_clip")?),
            },
            selection: r.parse::<F1Average>("selection")?,
        };

        let seeds = r.list("seeds", |_: &u64| true)?;
        let study = match r.raw("study") {
            "none" => None,
            s => Some(s.parse()?),
        };
        let study_lengths = r.list("study_lengths", |&v: &usize| v > 0)?;
        let study_overlaps = r.list("study_overlaps", unit_open)?;
        if let Some(&bad) = study_overlaps.iter().find(|&&o| !stride_ok(window_len, o)) {
            return Err(invalid("study_overlaps", &bad.to_string()));
        }
        Ok(ExperimentConfig {
            data,
            task,
            hc_label,
            ad_label,
            segmentation,
            model,
            precision,
            augmentation,
            train,
            seeds,
            study,
            study_lengths,
            study_overlaps,
            output: PathBuf::from(r.raw("output")),
            jobs: r.positive("jobs")?,
            resolved,
        })
    }

    /// Loads `file` (optional) with overrides and validates the result.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        Self::from_resolved(resolve(file, overrides)?)
    }

    /// Copy with one key replaced and everything revalidated, so the echoed
    /// values stay in step with the typed ones.
    pub fn with(&self, key: &str, value: impl Into<String>) -> Result<Self> {
        let mut r = self.resolved.clone();
        r.set(key, value)?;
        Self::from_resolved(r)
    }
}
