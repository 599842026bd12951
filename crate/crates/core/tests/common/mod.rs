//! Small benchmark and FHVAE shared by the integration tests.
#![allow(dead_code)]

use std::sync::OnceLock;

use devshift::features::FeatureSequence;
use devshift::fhvae::{self, FhvaeConfig, FhvaeModel, TrainingLog};
use devshift::synthbench::{default_devices, default_scenes, Benchmark, BenchmarkConfig, SpecFile};

/// 8 bands, 3 scenes, 60 frames; B and C are less scarce than in the
/// default benchmark so a few seconds of training separate the factors.
pub fn toy_bench_config() -> BenchmarkConfig {
    BenchmarkConfig {
        n_bands: 8,
        frames: 60,
        n_scenes: 3,
        train_counts: vec![("A".into(), 60), ("B".into(), 30), ("C".into(), 30)],
        test_counts: vec![("A".into(), 20), ("B".into(), 20), ("C".into(), 20)],
        external_count: 10,
        ..Default::default()
    }
}

/// The built-in scenes without their static bump and with 2.5 times the
/// dynamics, recorded by the built-in devices: scene lives mostly in the
/// segments, device in the sequence, which is the easy case for an FHVAE.
pub fn toy_specs() -> SpecFile {
    let d = 8;
    let mut scenes = default_scenes(3, d);
    for s in &mut scenes {
        for (b, p) in s.prototype.iter_mut().enumerate() {
            *p = -1.0 - 2.0 * b as f64 / d as f64;
        }
        s.mod_amplitude.iter_mut().for_each(|v| *v *= 2.5);
        for e in &mut s.events {
            e.profile.iter_mut().for_each(|v| *v *= 2.5);
        }
    }
    let (devices, external_devices) = default_devices(d);
    SpecFile { scenes, devices, external_devices }
}

pub fn toy_bench() -> Benchmark {
    Benchmark::from_specs(toy_specs(), &toy_bench_config(), 0).unwrap()
}

pub fn toy_fhvae_config() -> FhvaeConfig {
    FhvaeConfig {
        dim_z1: 4,
        dim_z2: 4,
        n_bands: 8,
        seg_len: 10,
        seg_hop: 10,
        hidden: vec![64, 64],
        seq_cache_size: 64,
        steps: 1500,
        steps_per_cache: 200,
        ..Default::default()
    }
}

pub struct Toy {
    pub bench: Benchmark,
    pub model: FhvaeModel,
    pub log: TrainingLog,
}

pub fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let bench = toy_bench();
        let (model, log) = fhvae::train_fhvae(&bench.train, &toy_fhvae_config(), 0).unwrap();
        Toy { bench, model, log }
    })
}

pub fn of_device<'a>(seqs: &'a [FeatureSequence], device: &str) -> Vec<FeatureSequence> {
    seqs.iter().filter(|s| s.device_id == device).cloned().collect()
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn band_means(f: &FeatureSequence) -> Vec<f64> {
    f.frames.mean_axis(ndarray::Axis(0)).unwrap().to_vec()
}
