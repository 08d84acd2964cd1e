use std::path::PathBuf;
use std::process::ExitCode;

use adformer_core::signal::{manifest_text, synth_generate, write_dataset, SynthSpec};
use adformer_lab::config::{parse_overrides, DataSource, Study};
use adformer_lab::plot::emit_plots;
use adformer_lab::runner::{evaluate_run, gradcheck, sha256_hex, REPORT_FILE};
use adformer_lab::{run_experiment, ExperimentConfig, ExperimentReport, LabError, Result};
use clap::{Args, Parser, Subcommand};

/// Experiment runner for the multi-granularity transformer.
///
/// Every configuration key can be given after the named options as
/// `--key value`, overriding the config file.
#[derive(Parser)]
#[command(name = "adformer-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (`key = value` lines under `[section]` headers).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Config overrides, `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

impl Common {
    /// Removes `--name value` from the overrides. Named options written
    /// after the first override land there because overrides are free-form.
    fn take(&mut self, name: &str) -> Result<Option<String>> {
        let flag = format!("--{name}");
        let Some(i) = self
            .overrides
            .iter()
            .position(|a| *a == flag || a.starts_with(&format!("{flag}=")))
        else {
            return Ok(None);
        };
        let arg = self.overrides.remove(i);
        if let Some((_, v)) = arg.split_once('=') {
            return Ok(Some(v.to_string()));
        }
        if i < self.overrides.len() {
            Ok(Some(self.overrides.remove(i)))
        } else {
            Err(LabError::Usage(format!("{flag} needs a value")))
        }
    }

    fn take_parsed<V: std::str::FromStr>(&mut self, name: &str, current: V) -> Result<V> {
        match self.take(name)? {
            Some(v) => v
                .parse()
                .map_err(|_| LabError::Usage(format!("invalid value {v:?} for --{name}"))),
            None => Ok(current),
        }
    }

    fn load(mut self) -> Result<ExperimentConfig> {
        if let Some(c) = self.take("config")? {
            self.config = Some(PathBuf::from(c));
        }
        let cfg = ExperimentConfig::load(self.config.as_deref(), &parse_overrides(&self.overrides)?)?;
        log::info!("resolved configuration:\n{}", cfg.resolved);
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus in the on-disk dataset format.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate every configured seed.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Re-evaluate a saved seed directory on its test split.
    Evaluate {
        /// Directory holding checkpoint.bin, split.json and config.txt.
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run one study: lengths, overlaps or ablations.
    Study {
        kind: String,
        #[command(flatten)]
        common: Common,
    },
    /// Draw SVG charts from a report.
    Plot {
        #[arg(long)]
        report: PathBuf,
        /// Output directory; defaults to the report's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the configured model's gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[command(flatten)]
        common: Common,
    },
}

fn finish(report: &ExperimentReport, cfg: &ExperimentConfig) -> Result<bool> {
    println!("{}", cfg.output.join(REPORT_FILE).display());
    for b in &report.blocks {
        match &b.aggregate {
            Some(a) => println!(
                "{}\tsample_f1 {:.4} ± {:.4}\tsubject_f1 {:.4} ± {:.4}\t({} seeds)",
                b.label, a.sample_f1_macro.mean, a.sample_f1_macro.std, a.subject_f1_macro.mean, a.subject_f1_macro.std, a.seeds
            ),
            None => println!("{}\tno completed seeds", b.label),
        }
    }
    if !report.succeeded() {
        eprintln!("{} seed run(s) failed; see the report", report.failures);
    }
    Ok(report.succeeded())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { out, common } => {
            let cfg = common.load()?;
            let spec = match cfg.data {
                DataSource::Synthetic(s) => s,
                DataSource::Directory(_) => {
                    let mut r = cfg.resolved.clone();
                    r.set("dataset", "")?;
                    match ExperimentConfig::from_resolved(r)?.data {
                        DataSource::Synthetic(s) => s,
                        DataSource::Directory(_) => SynthSpec::default(),
                    }
                }
            };
            let recs = synth_generate::<f64>(&spec)?;
            write_dataset(&out, &recs)?;
            println!("{}\t{} recordings\tmanifest sha256 {}", out.display(), recs.len(), sha256_hex(manifest_text(&recs).as_bytes()));
            Ok(true)
        }
        Command::Train { common } => {
            let cfg = common.load()?;
            let report = run_experiment(&cfg)?;
            finish(&report, &cfg)
        }
        Command::Study { kind, common } => {
            let study: Study = kind.parse()?;
            let cfg = common.load()?.with("study", study.name())?;
            let report = run_experiment(&cfg)?;
            finish(&report, &cfg)
        }
        Command::Evaluate { run, mut common } => {
            if common.config.is_some() || common.take("config")?.is_some() {
                return Err(LabError::Usage("evaluate reads config.txt from the run directory".into()));
            }
            let metrics = evaluate_run(&run, &parse_overrides(&common.overrides)?)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            Ok(true)
        }
        Command::Plot { report, out } => {
            let r = ExperimentReport::read(&report)?;
            let dir = out.unwrap_or_else(|| report.parent().map(PathBuf::from).unwrap_or_default());
            for p in emit_plots(&r, &dir)? {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Command::Gradcheck {
            samples,
            eps,
            tol,
            mut common,
        } => {
            let samples = common.take_parsed("samples", samples)?;
            let eps = common.take_parsed("eps", eps)?;
            let tol = common.take_parsed("tol", tol)?;
            let cfg = common.load()?;
            let report = gradcheck(&cfg, samples, eps, tol)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(report.passed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
