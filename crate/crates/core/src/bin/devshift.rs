use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use devshift::classifier::{self, ClassifierConfig, ClassifierModel};
use devshift::conversion::{self, ConversionPlan};
use devshift::features::{self, io, AugmentationConfig, LogMelConfig};
use devshift::fhvae::{self, FhvaeConfig, FhvaeModel};
use devshift::latents;
use devshift::pipeline::{self, ExperimentConfig, Mode, Seeds};
use devshift::synthbench::{Benchmark, BenchmarkConfig, SpecFile};
use devshift::Error;

/// Device-mismatch compensation for acoustic scene classification.
///
/// Every verb that takes `--config` reads a TOML file whose keys override
/// the corresponding flags.
#[derive(Parser)]
#[command(name = "devshift", version)]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Extract log-mel features from a manifest of WAV files.
    Features(FeaturesArgs),
    /// Add noisy copies of a feature corpus at the given SNRs.
    Augment(AugmentArgs),
    /// Train an FHVAE on a feature corpus (labels are ignored).
    FhvaeTrain(FhvaeTrainArgs),
    /// Estimate a domain mu2 and write a conversion plan.
    Mu2(Mu2Args),
    /// Convert a corpus toward a plan's target, or extract z1 features.
    Convert(ConvertArgs),
    /// Train the scene classifier.
    ClfTrain(ClfTrainArgs),
    /// Evaluate a classifier; writes report.txt and report.csv.
    Eval(EvalArgs),
    /// Generate the synthetic multi-device benchmark.
    SynthGen(SynthGenArgs),
    /// Write per-segment latents with 2-D projections as CSV.
    ExportLatents(ExportLatentsArgs),
    /// Run one experiment mode end to end.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct FeaturesArgs {
    /// Manifest whose paths are mono WAV files.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for feature caches and manifest.csv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Mel bands.
    #[arg(long, default_value_t = 40)]
    n_mels: usize,
    /// Frame length in seconds.
    #[arg(long, default_value_t = 0.04)]
    frame_len: f64,
    /// Hop in seconds.
    #[arg(long, default_value_t = 0.02)]
    hop: f64,
    /// LogMelConfig TOML.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentArgs {
    /// Feature-cache manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// SNR levels in dB, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [10.0, 15.0])]
    snr: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// AugmentationConfig TOML.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FhvaeTrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output checkpoint (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Optional training log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training steps [default: 3000].
    #[arg(long)]
    steps: Option<usize>,
    /// Learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// Segments per batch [default: 64].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Discriminative weight alpha [default: 10].
    #[arg(long)]
    disc_weight: Option<f64>,
    /// FhvaeConfig TOML.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Mu2Args {
    /// FHVAE checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Corpus defining the domain.
    #[arg(long)]
    manifest: PathBuf,
    /// Keep only these devices (comma separated); all when absent.
    #[arg(long, value_delimiter = ',')]
    devices: Vec<String>,
    /// Name stored in the plan.
    #[arg(long, default_value = "target")]
    name: String,
    /// Output plan file (TOML).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    model: PathBuf,
    /// Conversion plan; required unless --z1.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Write z1 posterior means instead of converted features.
    #[arg(long)]
    z1: bool,
}

#[derive(Args)]
struct ClfTrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Epochs [default: 200].
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// Windows per batch [default: 256].
    #[arg(long)]
    batch_size: Option<usize>,
    /// ClassifierConfig TOML.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "A")]
    source: String,
    #[arg(long, value_delimiter = ',', default_values_t = ["B".to_string(), "C".to_string()])]
    targets: Vec<String>,
    /// Row title in the table.
    #[arg(long, default_value = "model")]
    title: String,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthGenArgs {
    /// Writes train/, test/, external/ and spec.toml here.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene/device spec TOML; built-in specs when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Frames per sequence [default: 100].
    #[arg(long)]
    frames: Option<usize>,
    /// BenchmarkConfig TOML.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ExportLatentsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// ExperimentConfig TOML; its keys override the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One of baseline, z1-features, shift-to-sourceA, shift-to-targetBC,
    /// shift-to-external.
    #[arg(long, default_value = "baseline")]
    mode: String,
    /// Run directory [default: $DEVSHIFT_RUN_ROOT/<name>].
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Derive all seeds from this number.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "experiment")]
    name: String,
}

/// Serializes `flags`, overlays the keys of `file` and deserializes back.
fn merged<T: Serialize + DeserializeOwned>(flags: &T, file: Option<&Path>) -> devshift::Result<T> {
    let mut base = toml::Value::try_from(flags).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let over: toml::Value = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        overlay(&mut base, over);
    }
    base.try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn overlay(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn run(cli: Cli) -> devshift::Result<()> {
    match cli.cmd {
        Cmd::Features(a) => {
            let flags = LogMelConfig {
                n_mels: a.n_mels,
                frame_len: a.frame_len,
                hop: a.hop,
                ..Default::default()
            };
            let cfg: LogMelConfig = merged(&flags, a.config.as_deref())?;
            let seqs = pipeline::load_manifest_corpus(&a.manifest, &cfg)?;
            let m = io::save_corpus(&a.out_dir, &seqs)?;
            println!("{} sequences -> {}", seqs.len(), m.display());
        }
        Cmd::Augment(a) => {
            let flags = AugmentationConfig {
                snr_levels_db: a.snr,
                ..Default::default()
            };
            let cfg: AugmentationConfig = merged(&flags, a.config.as_deref())?;
            let seqs = io::load_corpus(&a.manifest)?;
            let out = features::build_augmented_corpus(&seqs, &cfg, a.seed)?;
            let m = io::save_corpus(&a.out_dir, &out)?;
            println!("{} -> {} sequences -> {}", seqs.len(), out.len(), m.display());
        }
        Cmd::FhvaeTrain(a) => {
            let mut flags = FhvaeConfig::default();
            if let Some(v) = a.steps {
                flags.steps = v;
            }
            if let Some(v) = a.lr {
                flags.lr = v;
            }
            if let Some(v) = a.batch_size {
                flags.batch_size = v;
            }
            if let Some(v) = a.disc_weight {
                flags.disc_weight = v;
            }
            let cfg: FhvaeConfig = merged(&flags, a.config.as_deref())?;
            let seqs = io::load_corpus(&a.manifest)?;
            let (model, log) = fhvae::train_fhvae(&seqs, &cfg, a.seed)?;
            model.save(&a.out)?;
            if let Some(p) = a.log {
                log.write_csv(&p)?;
            }
            let (first, last) = log.smoothed_ends(100);
            println!("elbo {first:.3} -> {last:.3}; saved {}", a.out.display());
        }
        Cmd::Mu2(a) => {
            let model = FhvaeModel::load(&a.model)?;
            let seqs: Vec<_> = io::load_corpus(&a.manifest)?
                .into_iter()
                .filter(|s| a.devices.is_empty() || a.devices.contains(&s.device_id))
                .collect();
            let plan = ConversionPlan::new(a.name, fhvae::infer_mu2_domain(&seqs, &model)?)?;
            plan.save(&a.out)?;
            println!("mu2 from {} sequences -> {}", seqs.len(), a.out.display());
        }
        Cmd::Convert(a) => {
            let model = FhvaeModel::load(&a.model)?;
            let seqs = io::load_corpus(&a.manifest)?;
            let out = if a.z1 {
                conversion::extract_z1_corpus(&seqs, &model)?
            } else {
                let path = a
                    .plan
                    .ok_or_else(|| Error::Config("--plan is required unless --z1".into()))?;
                conversion::convert_corpus(&seqs, &model, &ConversionPlan::load(&path)?)?
            };
            let m = io::save_corpus(&a.out_dir, &out)?;
            println!("{} sequences -> {}", out.len(), m.display());
        }
        Cmd::ClfTrain(a) => {
            let mut flags = ClassifierConfig::default();
            if let Some(v) = a.epochs {
                flags.epochs = v;
            }
            if let Some(v) = a.lr {
                flags.lr = v;
            }
            if let Some(v) = a.batch_size {
                flags.batch_size = v;
            }
            let cfg: ClassifierConfig = merged(&flags, a.config.as_deref())?;
            let seqs = io::load_corpus(&a.manifest)?;
            let (model, losses) = classifier::train_classifier(&seqs, &cfg, a.seed)?;
            model.save(&a.out)?;
            println!(
                "loss {:.4} -> {:.4}; saved {}",
                losses.first().copied().unwrap_or(f64::NAN),
                losses.last().copied().unwrap_or(f64::NAN),
                a.out.display()
            );
        }
        Cmd::Eval(a) => {
            let model = ClassifierModel::load(&a.model)?;
            let seqs = io::load_corpus(&a.manifest)?;
            let report = classifier::evaluate(&model, &seqs, &a.source, &a.targets)?;
            std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
                path: a.out_dir.clone(),
                source: e,
            })?;
            let table = report.to_table(&a.title);
            for (name, body) in [("report.txt", &table), ("report.csv", &report.to_csv())] {
                let p = a.out_dir.join(name);
                std::fs::write(&p, body).map_err(|e| Error::Io { path: p, source: e })?;
            }
            print!("{table}");
        }
        Cmd::SynthGen(a) => {
            let mut flags = BenchmarkConfig::default();
            if let Some(v) = a.frames {
                flags.frames = v;
            }
            let cfg: BenchmarkConfig = merged(&flags, a.config.as_deref())?;
            let bench = match &a.spec {
                Some(p) => Benchmark::from_specs(SpecFile::load(p)?, &cfg, a.seed)?,
                None => Benchmark::generate(&cfg, a.seed)?,
            };
            for (name, seqs) in [
                ("train", &bench.train),
                ("test", &bench.test),
                ("external", &bench.external),
            ] {
                io::save_corpus(&a.out_dir.join(name), seqs)?;
            }
            bench.specs.save(&a.out_dir.join("spec.toml"))?;
            println!(
                "train {} / test {} / external {} sequences -> {}",
                bench.train.len(),
                bench.test.len(),
                bench.external.len(),
                a.out_dir.display()
            );
        }
        Cmd::ExportLatents(a) => {
            let model = FhvaeModel::load(&a.model)?;
            let seqs = io::load_corpus(&a.manifest)?;
            let n = latents::export_latents(&model, &seqs, &a.out)?;
            println!("{n} rows -> {}", a.out.display());
        }
        Cmd::Pipeline(a) => {
            let mut flags = ExperimentConfig {
                name: a.name,
                mode: a.mode.parse::<Mode>()?,
                run_dir: a.run_dir,
                ..Default::default()
            };
            if let Some(s) = a.seed {
                flags.seeds = Seeds::from_master(s);
            }
            let cfg: ExperimentConfig = merged(&flags, a.config.as_deref())?;
            let out = pipeline::run_pipeline(&cfg)?;
            print!("{}", out.report.to_table(cfg.mode.as_str()));
            println!("reports in {}", out.report_dir.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Stage { stage, source } if *stage == "config" => exit_code(source),
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
