//! Synthetic channel-mismatch benchmark.
//!
//! Sequences are built directly in the log-energy domain from two known
//! factors: a scene (spectral prototype, periodic band modulation, transient
//! bursts) and a recording device (per-band gain, additive noise floor,
//! observation noise). Scene identity is carried both by the sequence-level
//! spectrum and by segment-level dynamics; the device only touches the
//! sequence-level spectrum.

use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classifier::EvalReport;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::probe::{linear_probe_cv, ProbeConfig};
use crate::seed::{self, Rng};

/// Frames per second assumed when converting event rates to frame
/// probabilities (20 ms hop).
pub const FRAME_RATE: f64 = 50.0;

/// A transient sound: fires at random onsets and decays exponentially.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    /// Onsets per second.
    pub rate: f64,
    /// Log-energy added per band at onset.
    pub profile: Vec<f64>,
    /// Length in frames.
    pub len: usize,
    /// Constant envelope for `len` frames instead of a decay.
    #[serde(default)]
    pub sustained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub class_id: String,
    /// Mean log-energy per band.
    pub prototype: Vec<f64>,
    pub mod_amplitude: Vec<f64>,
    /// Modulation period per band, in frames.
    pub mod_period: Vec<f64>,
    pub events: Vec<EventSpec>,
    /// Std of a per-recording level offset.
    pub level_jitter: f64,
}

impl SceneSpec {
    /// Total event onsets per second.
    pub fn event_rate(&self) -> f64 {
        self.events.iter().map(|e| e.rate).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub device_id: String,
    /// Per-band offset in the log domain.
    pub band_gain: Vec<f64>,
    /// Per-band additive floor in the linear-energy domain.
    pub noise_floor: Vec<f64>,
    /// Std of white observation noise in the log domain.
    pub noise_std: f64,
    /// Std of the amplitude of per-recording random response bumps (three
    /// smooth bumps at random band positions, drawn once per recording).
    #[serde(default)]
    pub gain_jitter: f64,
}

impl SceneSpec {
    fn validate(&self, d: usize) -> Result<()> {
        let lens = [
            self.prototype.len(),
            self.mod_amplitude.len(),
            self.mod_period.len(),
        ];
        if lens.iter().any(|&l| l != d) {
            return Err(Error::Config(format!(
                "scene `{}`: per-band vectors must have {d} entries",
                self.class_id
            )));
        }
        let finite = self
            .prototype
            .iter()
            .chain(&self.mod_amplitude)
            .all(|v| v.is_finite());
        let events_ok = self.events.iter().all(|e| {
            e.profile.len() == d && e.profile.iter().all(|v| v.is_finite()) && e.rate >= 0.0
        });
        if !finite
            || !events_ok
            || self.mod_period.iter().any(|p| !(*p > 0.0))
            || !(self.level_jitter >= 0.0)
        {
            return Err(Error::Config(format!("scene `{}`: bad values", self.class_id)));
        }
        Ok(())
    }
}

impl DeviceSpec {
    fn validate(&self, d: usize) -> Result<()> {
        if self.band_gain.len() != d || self.noise_floor.len() != d {
            return Err(Error::Config(format!(
                "device `{}`: per-band vectors must have {d} entries",
                self.device_id
            )));
        }
        if self.band_gain.iter().any(|v| !v.is_finite())
            || self.noise_floor.iter().any(|v| !(*v >= 0.0))
            || !(self.noise_std >= 0.0)
            || !(self.gain_jitter >= 0.0)
        {
            return Err(Error::Config(format!("device `{}`: bad values", self.device_id)));
        }
        Ok(())
    }

    /// A device that leaves the scene signal untouched.
    pub fn identity(device_id: impl Into<String>, d: usize) -> Self {
        DeviceSpec {
            device_id: device_id.into(),
            band_gain: vec![0.0; d],
            noise_floor: vec![0.0; d],
            noise_std: 0.0,
            gain_jitter: 0.0,
        }
    }
}

/// Clean scene log-energies `[frames x D]` for one recording.
pub fn scene_signal(scene: &SceneSpec, frames: usize, rng: &mut Rng) -> Array2<f64> {
    let d = scene.prototype.len();
    let level = if scene.level_jitter > 0.0 {
        Normal::new(0.0, scene.level_jitter).unwrap().sample(rng)
    } else {
        0.0
    };
    let phase: Vec<f64> = (0..d)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let mut x = Array2::from_shape_fn((frames, d), |(t, b)| {
        scene.prototype[b]
            + level
            + scene.mod_amplitude[b]
                * (std::f64::consts::TAU * t as f64 / scene.mod_period[b] + phase[b]).sin()
    });
    for ev in &scene.events {
        let p_onset = (ev.rate / FRAME_RATE).min(1.0);
        let tau = (ev.len as f64 / 3.0).max(1e-9);
        let envelope = |k: usize| if ev.sustained { 1.0 } else { (-(k as f64) / tau).exp() };
        for t in 0..frames {
            if rng.random::<f64>() < p_onset {
                for k in 0..ev.len.min(frames - t) {
                    let env = envelope(k);
                    for b in 0..d {
                        x[[t + k, b]] += ev.profile[b] * env;
                    }
                }
            }
        }
    }
    x
}

/// Passes a clean scene signal through a device.
pub fn apply_device(signal: &Array2<f64>, device: &DeviceSpec, rng: &mut Rng) -> Array2<f64> {
    let d = device.band_gain.len();
    let mut gain = device.band_gain.clone();
    if device.gain_jitter > 0.0 {
        let amp = Normal::new(0.0, device.gain_jitter).unwrap();
        for _ in 0..3 {
            let c = rng.random_range(0.0..d as f64);
            let a = amp.sample(rng);
            let bump = smooth_bump(d, c, d as f64 / 10.0);
            gain.iter_mut().zip(&bump).for_each(|(g, u)| *g += a * u);
        }
    }
    let noise = (device.noise_std > 0.0).then(|| Normal::new(0.0, device.noise_std).unwrap());
    let mut out = signal.clone();
    for mut row in out.rows_mut() {
        for (b, v) in row.iter_mut().enumerate() {
            let mut y = *v + gain[b];
            if device.noise_floor[b] > 0.0 {
                y = (y.exp() + device.noise_floor[b]).ln();
            }
            if let Some(n) = &noise {
                y += n.sample(rng);
            }
            *v = y;
        }
    }
    out
}

/// Generates `counts[device][scene]` recordings of `frames` frames for every
/// (scene, device) pair. Ids are `{prefix}-{device}-{scene}-{i}`.
pub fn generate_corpus(
    scenes: &[SceneSpec],
    devices: &[DeviceSpec],
    counts: &[Vec<usize>],
    frames: usize,
    seed_value: u64,
    prefix: &str,
) -> Result<Vec<FeatureSequence>> {
    let first = scenes.first().ok_or(Error::Empty("scene specs"))?;
    if devices.is_empty() {
        return Err(Error::Empty("device specs"));
    }
    let d = first.prototype.len();
    scenes.iter().try_for_each(|s| s.validate(d))?;
    devices.iter().try_for_each(|s| s.validate(d))?;
    if counts.len() != devices.len() || counts.iter().any(|c| c.len() != scenes.len()) {
        return Err(Error::Config("counts must be [device][scene]".into()));
    }
    let mut out = Vec::new();
    for (di, dev) in devices.iter().enumerate() {
        for (si, scene) in scenes.iter().enumerate() {
            for i in 0..counts[di][si] {
                let mut rng = seed::rng(seed::derive(seed_value, &[di as u64, si as u64, i as u64]));
                let clean = scene_signal(scene, frames, &mut rng);
                let frames = apply_device(&clean, dev, &mut rng);
                out.push(FeatureSequence::new(
                    frames,
                    format!("{prefix}-{}-{}-{i:04}", dev.device_id, scene.class_id),
                    scene.class_id.clone(),
                    dev.device_id.clone(),
                )?);
            }
        }
    }
    Ok(out)
}

/// Scene and device specs, stored together as a TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecFile {
    pub scenes: Vec<SceneSpec>,
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub external_devices: Vec<DeviceSpec>,
}

impl SpecFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub n_bands: usize,
    pub frames: usize,
    pub n_scenes: usize,
    /// Training recordings per device, spread round-robin over scenes.
    pub train_counts: Vec<(String, usize)>,
    pub test_counts: Vec<(String, usize)>,
    /// Recordings per external device.
    pub external_count: usize,
    pub source_device: String,
    pub target_devices: Vec<String>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            n_bands: 40,
            frames: 100,
            n_scenes: 3,
            train_counts: vec![("A".into(), 200), ("B".into(), 20), ("C".into(), 20)],
            test_counts: vec![("A".into(), 150), ("B".into(), 150), ("C".into(), 150)],
            external_count: 30,
            source_device: "A".into(),
            target_devices: vec!["B".into(), "C".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub specs: SpecFile,
    pub train: Vec<FeatureSequence>,
    pub test: Vec<FeatureSequence>,
    /// Recordings from devices absent from train and test.
    pub external: Vec<FeatureSequence>,
    pub source_device: String,
    pub target_devices: Vec<String>,
}

fn smooth_bump(d: usize, center: f64, width: f64) -> Vec<f64> {
    (0..d)
        .map(|b| (-((b as f64 - center) / width).powi(2)).exp())
        .collect()
}

/// Default scene set. Every scene has a mild spectral bump of its own, a
/// band region modulated at a scene-specific period and a transient event
/// type in its own band region.
pub fn default_scenes(n_scenes: usize, d: usize) -> Vec<SceneSpec> {
    let df = d as f64;
    (0..n_scenes)
        .map(|k| {
            let c = df * (k as f64 + 0.5) / n_scenes as f64;
            let bump = smooth_bump(d, c, df / 10.0);
            let mod_region = smooth_bump(d, df - c, df / 10.0);
            let burst = smooth_bump(d, (c + df / 2.0) % df, df / 12.0);
            SceneSpec {
                class_id: format!("scene{k}"),
                prototype: (0..d)
                    .map(|b| -1.0 - 2.0 * b as f64 / df + 1.8 * bump[b])
                    .collect(),
                mod_amplitude: mod_region.iter().map(|v| 0.48 * v).collect(),
                mod_period: vec![4.0 + 6.0 * k as f64; d],
                events: vec![EventSpec {
                    rate: 2.0 + 3.0 * k as f64,
                    profile: burst.iter().map(|v| 0.8 * v).collect(),
                    len: 6,
                    sustained: false,
                }],
                level_jitter: 0.3,
            }
        })
        .collect()
}

/// Default device set: `A` is flat. `B` and `C` each raise the spectral
/// bump of one scene and lower another's, so their recordings mimic the
/// wrong scene at the sequence level. `X1`, `X2` are the external devices.
pub fn default_devices(d: usize) -> (Vec<DeviceSpec>, Vec<DeviceSpec>) {
    let df = d as f64;
    let dev = |id: &str, gain: Vec<f64>, floor: f64| DeviceSpec {
        device_id: id.into(),
        band_gain: gain,
        noise_floor: vec![floor; d],
        noise_std: 0.2,
        gain_jitter: 0.0,
    };
    let ramp = |a: f64, b: f64| (0..d).map(|i| a + (b - a) * i as f64 / (df - 1.0)).collect();
    let swap = |up: f64, down: f64, h: f64| -> Vec<f64> {
        let u = smooth_bump(d, up, df / 10.0);
        let w = smooth_bump(d, down, df / 10.0);
        u.iter().zip(&w).map(|(a, b)| h * (a - b)).collect()
    };
    let main = vec![
        dev("A", vec![0.0; d], 1e-3),
        dev("B", swap(df / 2.0, df / 6.0, 1.8), 1e-3),
        dev("C", swap(df * 5.0 / 6.0, df / 2.0, 1.8), 2e-3),
    ];
    let external = vec![
        dev("X1", ramp(-0.8, 0.8), 1e-3),
        dev("X2", smooth_bump(d, df * 0.25, df / 6.0), 1e-3),
    ];
    (main, external)
}

fn spread(total: usize, n: usize) -> Vec<usize> {
    (0..n).map(|k| total / n + usize::from(k < total % n)).collect()
}

impl Benchmark {
    pub fn generate(cfg: &BenchmarkConfig, seed_value: u64) -> Result<Self> {
        let scenes = default_scenes(cfg.n_scenes, cfg.n_bands);
        let (devices, external_devices) = default_devices(cfg.n_bands);
        let specs = SpecFile {
            scenes,
            devices,
            external_devices,
        };
        Benchmark::from_specs(specs, cfg, seed_value)
    }

    pub fn from_specs(specs: SpecFile, cfg: &BenchmarkConfig, seed_value: u64) -> Result<Self> {
        let n_scenes = specs.scenes.len();
        let split = |counts: &[(String, usize)], tag: u64, prefix: &str| -> Result<Vec<FeatureSequence>> {
            let mut devs = Vec::new();
            let mut cnt = Vec::new();
            for (id, total) in counts {
                let dev = specs
                    .devices
                    .iter()
                    .find(|d| &d.device_id == id)
                    .ok_or_else(|| Error::Config(format!("unknown device `{id}`")))?;
                devs.push(dev.clone());
                cnt.push(spread(*total, n_scenes));
            }
            generate_corpus(
                &specs.scenes,
                &devs,
                &cnt,
                cfg.frames,
                seed::derive(seed_value, &[tag]),
                prefix,
            )
        };
        let train = split(&cfg.train_counts, 1, "train")?;
        let test = split(&cfg.test_counts, 2, "test")?;
        let external = if specs.external_devices.is_empty() || cfg.external_count == 0 {
            Vec::new()
        } else {
            let cnt = vec![spread(cfg.external_count, n_scenes); specs.external_devices.len()];
            generate_corpus(
                &specs.scenes,
                &specs.external_devices,
                &cnt,
                cfg.frames,
                seed::derive(seed_value, &[3]),
                "ext",
            )?
        };
        Ok(Benchmark {
            specs,
            train,
            test,
            external,
            source_device: cfg.source_device.clone(),
            target_devices: cfg.target_devices.clone(),
        })
    }
}

/// Cross-validated, class-balanced accuracy of a linear probe predicting the
/// device from latent rows.
pub fn device_probe(latents: &Array2<f64>, labels: &[String]) -> Result<f64> {
    linear_probe_cv(latents, labels, &ProbeConfig::default())
}

/// Source-device accuracy minus combined target-device accuracy.
pub fn domain_gap(report: &EvalReport) -> Result<f64> {
    let source = report
        .per_device
        .get(&report.source_device)
        .ok_or_else(|| Error::MissingDevice(report.source_device.clone()))?;
    let target = report
        .combined_target_acc
        .ok_or_else(|| Error::MissingDevice(report.target_devices.join("+")))?;
    Ok(source.class_avg_acc - target)
}
