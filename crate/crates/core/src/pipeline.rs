//! End-to-end experiment runner: data, optional augmentation, FHVAE,
//! per-mode feature transform, classifier, evaluation. Expensive stages are
//! cached under the run directory, keyed by a content hash of their inputs
//! and configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{self, ClassifierConfig, ClassifierModel, EvalReport};
use crate::conversion::{self, ConversionPlan};
use crate::error::{Error, Result};
use crate::features::{
    self, build_augmented_corpus, extract_logmel, io, AugmentationConfig, FeatureSequence,
    LogMelConfig,
};
use crate::fhvae::{self, checkpoint, FhvaeConfig, FhvaeModel};
use crate::seed;
use crate::synthbench::{Benchmark, BenchmarkConfig, SpecFile};

/// Environment variable naming the directory under which runs are created
/// when the config has no explicit `run_dir`.
pub const RUN_ROOT_ENV: &str = "DEVSHIFT_RUN_ROOT";
pub const DEFAULT_RUN_ROOT: &str = "runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "z1-features")]
    Z1Features,
    #[serde(rename = "shift-to-sourceA")]
    ShiftToSource,
    #[serde(rename = "shift-to-targetBC")]
    ShiftToTargets,
    #[serde(rename = "shift-to-external")]
    ShiftToExternal,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Baseline,
        Mode::Z1Features,
        Mode::ShiftToSource,
        Mode::ShiftToTargets,
        Mode::ShiftToExternal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Z1Features => "z1-features",
            Mode::ShiftToSource => "shift-to-sourceA",
            Mode::ShiftToTargets => "shift-to-targetBC",
            Mode::ShiftToExternal => "shift-to-external",
        }
    }

    pub fn uses_fhvae(self) -> bool {
        self != Mode::Baseline
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    /// Manifests listing feature caches (`.fcache`) or mono WAV files.
    Manifests {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        external: Option<PathBuf>,
    },
    /// Generated synthetic benchmark.
    Synthetic {
        #[serde(default)]
        benchmark: BenchmarkConfig,
        /// Scene/device spec file; built-in specs when absent.
        #[serde(default)]
        spec_file: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            benchmark: BenchmarkConfig::default(),
            spec_file: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub data: u64,
    pub augment: u64,
    pub fhvae: u64,
    pub classifier: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 0,
            augment: 1,
            fhvae: 2,
            classifier: 3,
        }
    }
}

impl Seeds {
    /// All four seeds derived from one number. They are kept below 2^63 so
    /// the config still fits TOML's signed integers.
    pub fn from_master(master: u64) -> Self {
        let d = |i| seed::derive(master, &[i]) >> 1;
        Seeds {
            data: d(0),
            augment: d(1),
            fhvae: d(2),
            classifier: d(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub mode: Mode,
    /// Run directory; `$DEVSHIFT_RUN_ROOT/<name>` when absent.
    pub run_dir: Option<PathBuf>,
    pub data: DataSource,
    pub source_device: String,
    pub target_devices: Vec<String>,
    pub seeds: Seeds,
    /// Noise augmentation of the training corpus; off when absent.
    pub augmentation: Option<AugmentationConfig>,
    /// Front end for WAV manifests.
    pub features: LogMelConfig,
    pub fhvae: FhvaeConfig,
    pub classifier: ClassifierConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            mode: Mode::Baseline,
            run_dir: None,
            data: DataSource::default(),
            source_device: "A".into(),
            target_devices: vec!["B".into(), "C".into()],
            seeds: Seeds::default(),
            augmentation: None,
            features: LogMelConfig::default(),
            fhvae: FhvaeConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        if self.source_device.is_empty() || self.target_devices.is_empty() {
            return Err(Error::Config("source and target devices are required".into()));
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        if self.mode.uses_fhvae() {
            self.fhvae.validate()?;
        }
        if let DataSource::Manifests { train, test, external } = &self.data {
            for p in [Some(train), Some(test), external.as_ref()].into_iter().flatten() {
                if !p.exists() {
                    return Err(Error::Config(format!("manifest {} does not exist", p.display())));
                }
            }
            if self.mode == Mode::ShiftToExternal && external.is_none() {
                return Err(Error::Config("mode shift-to-external needs an external manifest".into()));
            }
        }
        Ok(())
    }

    pub fn resolved_run_dir(&self) -> PathBuf {
        match &self.run_dir {
            Some(p) => p.clone(),
            None => std::env::var_os(RUN_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT))
                .join(&self.name),
        }
    }
}

/// Everything needed to re-derive a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub run_dir: PathBuf,
    pub corpus_hashes: Vec<(String, String)>,
    pub stage_keys: Vec<(String, String)>,
    pub checkpoints: Vec<(String, String)>,
    pub target_name: Option<String>,
    pub target_mu2: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: EvalReport,
    pub provenance: Provenance,
    pub report_dir: PathBuf,
}

pub struct Corpora {
    pub train: Vec<FeatureSequence>,
    pub test: Vec<FeatureSequence>,
    pub external: Vec<FeatureSequence>,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

/// SHA-256 over ids, labels and frame bytes.
pub fn corpus_hash(seqs: &[FeatureSequence]) -> String {
    let mut h = Sha256::new();
    for s in seqs {
        for field in [&s.seq_id, &s.scene_label, &s.device_id] {
            h.update((field.len() as u64).to_le_bytes());
            h.update(field.as_bytes());
        }
        let (t, d) = s.frames.dim();
        h.update((t as u64).to_le_bytes());
        h.update((d as u64).to_le_bytes());
        for v in s.frames.iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn key_of(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())[..16].to_string()
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config serializes")
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Loads a manifest whose entries are feature caches or WAV files.
pub fn load_manifest_corpus(manifest: &Path, front_end: &LogMelConfig) -> Result<Vec<FeatureSequence>> {
    io::read_manifest(manifest)?
        .into_iter()
        .map(|row| {
            let path = io::resolve(manifest, &row.path);
            let is_wav = path
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
            let frames = if is_wav {
                extract_logmel(&io::read_wav(&path)?, front_end)?
            } else {
                io::read_feature_cache(&path)?
            };
            FeatureSequence::new(frames, row.seq_id, row.scene_label, row.device_id)
        })
        .collect()
}

pub fn load_corpora(cfg: &ExperimentConfig) -> Result<Corpora> {
    match &cfg.data {
        DataSource::Manifests { train, test, external } => Ok(Corpora {
            train: load_manifest_corpus(train, &cfg.features)?,
            test: load_manifest_corpus(test, &cfg.features)?,
            external: match external {
                Some(p) => load_manifest_corpus(p, &cfg.features)?,
                None => Vec::new(),
            },
        }),
        DataSource::Synthetic { benchmark, spec_file } => {
            let bench = match spec_file {
                Some(p) => Benchmark::from_specs(SpecFile::load(p)?, benchmark, cfg.seeds.data)?,
                None => Benchmark::generate(benchmark, cfg.seeds.data)?,
            };
            Ok(Corpora {
                train: bench.train,
                test: bench.test,
                external: bench.external,
            })
        }
    }
}

/// Copies with scene and device labels blanked, so the FHVAE stage cannot
/// see them.
fn strip_labels(seqs: &[FeatureSequence]) -> Vec<FeatureSequence> {
    seqs.iter()
        .map(|s| {
            let mut c = s.clone();
            c.scene_label.clear();
            c.device_id.clear();
            c
        })
        .collect()
}

/// Trains the FHVAE or loads it from the stage cache.
pub fn fhvae_stage(
    run_dir: &Path,
    corpus: &[FeatureSequence],
    cfg: &FhvaeConfig,
    seed_value: u64,
) -> Result<(PathBuf, FhvaeModel, String)> {
    let blind = strip_labels(corpus);
    let key = key_of(&["fhvae", &json(cfg), &seed_value.to_string(), &corpus_hash(&blind)]);
    let dir = run_dir.join("fhvae").join(&key);
    let path = dir.join("model.json");
    if path.exists() {
        if let Ok(m) = FhvaeModel::load(&path) {
            log::info!("fhvae: reusing {}", path.display());
            return Ok((path, m, key));
        }
    }
    log::info!("fhvae: training on {} sequences", blind.len());
    let (model, log) = fhvae::train_fhvae(&blind, cfg, seed_value)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    log.write_csv(&dir.join("train_log.csv"))?;
    model.save(&path)?;
    Ok((path, model, key))
}

/// Trains the classifier or loads it from the stage cache.
pub fn classifier_stage(
    run_dir: &Path,
    train: &[FeatureSequence],
    cfg: &ClassifierConfig,
    seed_value: u64,
) -> Result<(PathBuf, ClassifierModel, String)> {
    let key = key_of(&["classifier", &json(cfg), &seed_value.to_string(), &corpus_hash(train)]);
    let dir = run_dir.join("classifier").join(&key);
    let path = dir.join("model.json");
    if path.exists() {
        if let Ok(m) = ClassifierModel::load(&path) {
            log::info!("classifier: reusing {}", path.display());
            return Ok((path, m, key));
        }
    }
    log::info!("classifier: training on {} sequences", train.len());
    let (model, losses) = classifier::train_classifier(train, cfg, seed_value)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let text: String = losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i},{l}\n"))
        .collect();
    write_file(&dir.join("losses.csv"), format!("epoch,loss\n{text}").as_bytes())?;
    model.save(&path)?;
    Ok((path, model, key))
}

fn subset(seqs: &[FeatureSequence], devices: &[&str]) -> Vec<FeatureSequence> {
    seqs.iter()
        .filter(|s| devices.contains(&s.device_id.as_str()))
        .cloned()
        .collect()
}

/// Target mu2 for a shift mode. Device labels select the corpus only.
pub fn target_plan(
    mode: Mode,
    cfg: &ExperimentConfig,
    model: &FhvaeModel,
    train: &[FeatureSequence],
    external: &[FeatureSequence],
) -> Result<ConversionPlan> {
    let (name, seqs) = match mode {
        Mode::ShiftToSource => (
            format!("device{}", cfg.source_device),
            subset(train, &[cfg.source_device.as_str()]),
        ),
        Mode::ShiftToTargets => {
            let t: Vec<&str> = cfg.target_devices.iter().map(String::as_str).collect();
            (format!("device{}", cfg.target_devices.join("")), subset(train, &t))
        }
        Mode::ShiftToExternal => ("external".to_string(), external.to_vec()),
        Mode::Baseline | Mode::Z1Features => {
            return Err(Error::InvalidArgument(format!("mode {mode} has no target")))
        }
    };
    if seqs.is_empty() {
        return Err(Error::Empty("target-domain corpus"));
    }
    ConversionPlan::new(name, fhvae::infer_mu2_domain(&seqs, model)?)
}

/// Runs one mode end to end and writes `report.txt`, `report.csv`,
/// `report.json` and `provenance.json` under `<run_dir>/<mode>/`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunOutput> {
    stage("config", cfg.validate())?;
    let run_dir = cfg.resolved_run_dir();
    stage(
        "config",
        fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e)),
    )?;
    let mode = cfg.mode;
    let mut prov = Provenance {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        run_dir: run_dir.clone(),
        corpus_hashes: Vec::new(),
        stage_keys: Vec::new(),
        checkpoints: Vec::new(),
        target_name: None,
        target_mu2: None,
    };

    let data = stage("data", load_corpora(cfg))?;
    let train = match &cfg.augmentation {
        Some(a) => stage(
            "augment",
            build_augmented_corpus(&data.train, a, cfg.seeds.augment),
        )?,
        None => data.train.clone(),
    };
    prov.corpus_hashes.push(("train".into(), corpus_hash(&train)));
    prov.corpus_hashes.push(("test".into(), corpus_hash(&data.test)));
    if !data.external.is_empty() {
        prov.corpus_hashes.push(("external".into(), corpus_hash(&data.external)));
    }

    let (clf_train, clf_test) = if mode.uses_fhvae() {
        let mut fh_corpus = train.clone();
        if mode == Mode::ShiftToExternal {
            if data.external.is_empty() {
                return Err(Error::Stage {
                    stage: "data",
                    source: Box::new(Error::Empty("external corpus")),
                });
            }
            fh_corpus.extend(data.external.iter().cloned());
        }
        let (path, model, key) = stage(
            "fhvae",
            fhvae_stage(&run_dir, &fh_corpus, &cfg.fhvae, cfg.seeds.fhvae),
        )?;
        prov.stage_keys.push(("fhvae".into(), key));
        prov.checkpoints
            .push(("fhvae".into(), stage("fhvae", checkpoint::file_sha256(&path))?));
        if mode == Mode::Z1Features {
            stage(
                "z1-features",
                (|| {
                    Ok((
                        conversion::extract_z1_corpus(&train, &model)?,
                        conversion::extract_z1_corpus(&data.test, &model)?,
                    ))
                })(),
            )?
        } else {
            stage(
                "convert",
                (|| {
                    let plan = target_plan(mode, cfg, &model, &train, &data.external)?;
                    let dir = run_dir.join(mode.as_str());
                    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    plan.save(&dir.join("plan.toml"))?;
                    prov.target_name = Some(plan.target_name.clone());
                    prov.target_mu2 = Some(plan.target_mu2.clone());
                    Ok((
                        conversion::convert_corpus(&train, &model, &plan)?,
                        conversion::convert_corpus(&data.test, &model, &plan)?,
                    ))
                })(),
            )?
        }
    } else {
        (train, data.test)
    };

    let (path, clf, key) = stage(
        "classifier",
        classifier_stage(&run_dir, &clf_train, &cfg.classifier, cfg.seeds.classifier),
    )?;
    prov.stage_keys.push(("classifier".into(), key));
    prov.checkpoints.push((
        "classifier".into(),
        stage("classifier", checkpoint::file_sha256(&path))?,
    ));

    let report = stage(
        "evaluate",
        classifier::evaluate(&clf, &clf_test, &cfg.source_device, &cfg.target_devices),
    )?;

    let report_dir = run_dir.join(mode.as_str());
    stage(
        "report",
        (|| {
            write_file(&report_dir.join("report.txt"), report.to_table(mode.as_str()).as_bytes())?;
            write_file(&report_dir.join("report.csv"), report.to_csv().as_bytes())?;
            write_file(
                &report_dir.join("report.json"),
                serde_json::to_string_pretty(&report)?.as_bytes(),
            )?;
            write_file(
                &report_dir.join("provenance.json"),
                serde_json::to_string_pretty(&prov)?.as_bytes(),
            )
        })(),
    )?;
    Ok(RunOutput {
        report,
        provenance: prov,
        report_dir,
    })
}

/// Writes a corpus in the standard manifest + feature-cache layout.
pub fn save_corpus(dir: &Path, seqs: &[FeatureSequence]) -> Result<PathBuf> {
    features::io::save_corpus(dir, seqs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_roundtrip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            let v: toml::Value = toml::Value::try_from(std::collections::BTreeMap::from([("m", m)])).unwrap();
            assert_eq!(v["m"].as_str(), Some(m.as_str()));
        }
        assert!("shift".parse::<Mode>().is_err());
    }

    #[test]
    fn config_toml_roundtrip() {
        let cfg = ExperimentConfig {
            mode: Mode::ShiftToExternal,
            augmentation: Some(AugmentationConfig::default()),
            ..Default::default()
        };
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn missing_manifest_is_config_error() {
        let cfg = ExperimentConfig {
            data: DataSource::Manifests {
                train: "/nonexistent/train.csv".into(),
                test: "/nonexistent/test.csv".into(),
                external: None,
            },
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn corpus_hash_sensitive_to_labels() {
        let f = FeatureSequence::new(ndarray::Array2::zeros((2, 2)), "a", "s", "A").unwrap();
        let mut g = f.clone();
        g.device_id = "B".into();
        assert_ne!(corpus_hash(&[f.clone()]), corpus_hash(&[g]));
        assert_eq!(corpus_hash(&[f.clone()]), corpus_hash(&[f]));
    }
}
