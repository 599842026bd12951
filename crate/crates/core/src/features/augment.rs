use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureSequence, Waveform, ENERGY_FLOOR};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    #[default]
    WhiteGaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub snr_levels_db: Vec<f64>,
    #[serde(default)]
    pub noise_kind: NoiseKind,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            snr_levels_db: vec![10.0, 15.0],
            noise_kind: NoiseKind::WhiteGaussian,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        // +inf is allowed: it means "no noise".
        if self.snr_levels_db.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return Err(Error::Config("SNR levels must be finite or +inf".into()));
        }
        Ok(())
    }
}

fn noise_gain(signal_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    signal_power / (10f64.powf(snr_db / 10.0) * noise_power)
}

/// `w + g*n` with `n ~ N(0, 1)` i.i.d.; `g` is set from the realised noise
/// power so the output SNR equals `snr_db`. `snr_db = +inf` returns `w`.
pub fn add_noise_snr(w: &Waveform, snr_db: f64, rng_seed: u64) -> Result<Waveform> {
    w.validate()?;
    if snr_db == f64::INFINITY {
        return Ok(w.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr_db = {snr_db}")));
    }
    let p_signal = w.power();
    if p_signal <= 0.0 {
        return Err(Error::UndefinedSnr);
    }
    let mut rng = seed::rng(rng_seed);
    let noise: Vec<f64> = (0..w.samples.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let p_noise = noise.iter().map(|n| n * n).sum::<f64>() / noise.len() as f64;
    let g = noise_gain(p_signal, p_noise, snr_db).sqrt();
    let samples = w.samples.iter().zip(&noise).map(|(s, n)| s + g * n).collect();
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

/// 10*log10(P(clean) / P(noisy - clean)).
pub fn measured_snr_db(clean: &Waveform, noisy: &Waveform) -> f64 {
    let p_noise = clean
        .samples
        .iter()
        .zip(&noisy.samples)
        .map(|(c, n)| (n - c).powi(2))
        .sum::<f64>()
        / clean.samples.len() as f64;
    10.0 * (clean.power() / p_noise).log10()
}

/// Feature-domain counterpart of [`add_noise_snr`] for sequences that have no
/// waveform: white-noise periodogram energy (scaled chi-square, one degree of
/// freedom per cell) is added to the linear band energies before the log.
pub fn add_noise_snr_features(
    frames: &Array2<f64>,
    snr_db: f64,
    rng_seed: u64,
) -> Result<Array2<f64>> {
    if snr_db == f64::INFINITY {
        return Ok(frames.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr_db = {snr_db}")));
    }
    let energy = frames.mapv(f64::exp);
    let p_signal = energy.mean().unwrap_or(0.0);
    if p_signal <= 0.0 {
        return Err(Error::UndefinedSnr);
    }
    let mut rng = seed::rng(rng_seed);
    let noise = Array2::from_shape_simple_fn(frames.raw_dim(), || {
        let n: f64 = StandardNormal.sample(&mut rng);
        n * n
    });
    let p_noise = noise.mean().unwrap_or(0.0);
    if p_noise <= 0.0 {
        return Err(Error::NumericalFailure { part: "noise power" });
    }
    let g = noise_gain(p_signal, p_noise, snr_db);
    Ok(ndarray::Zip::from(&energy)
        .and(&noise)
        .map_collect(|e, n| (e + g * n).max(ENERGY_FLOOR).ln()))
}

/// SNR of a feature-domain perturbation, measured on linear energies.
pub fn measured_snr_db_features(clean: &Array2<f64>, noisy: &Array2<f64>) -> f64 {
    let e_clean = clean.mapv(f64::exp);
    let e_noise = ndarray::Zip::from(clean)
        .and(noisy)
        .map_collect(|c, n| n.exp() - c.exp());
    10.0 * (e_clean.mean().unwrap() / e_noise.mean().unwrap()).log10()
}

/// Originals followed by one noisy copy of every sequence per SNR level.
///
/// Copies keep their labels; their ids get a `__snr<level>` suffix.
pub fn build_augmented_corpus(
    seqs: &[FeatureSequence],
    cfg: &AugmentationConfig,
    base_seed: u64,
) -> Result<Vec<FeatureSequence>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(seqs.len() * (1 + cfg.snr_levels_db.len()));
    out.extend(seqs.iter().cloned());
    for (li, &snr) in cfg.snr_levels_db.iter().enumerate() {
        for (si, s) in seqs.iter().enumerate() {
            let seed = seed::derive(base_seed, &[li as u64, si as u64]);
            let frames = add_noise_snr_features(&s.frames, snr, seed)?;
            let mut copy = s.with_frames(frames);
            copy.seq_id = format!("{}__snr{}", s.seq_id, snr);
            out.push(copy);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_power_signal(n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| std::f64::consts::SQRT_2 * (0.05 * i as f64).sin())
            .collect();
        Waveform::new(s, 16_000).unwrap()
    }

    fn seqs(n: usize) -> Vec<FeatureSequence> {
        (0..n)
            .map(|i| {
                let f = Array2::from_shape_fn((30, 8), |(t, d)| {
                    -1.0 + 0.1 * ((t * 7 + d * 3 + i) % 11) as f64
                });
                FeatureSequence::new(f, format!("s{i}"), "bus", "a").unwrap()
            })
            .collect()
    }

    #[test]
    fn infinite_snr_is_identity() {
        let w = unit_power_signal(1000);
        assert_eq!(add_noise_snr(&w, f64::INFINITY, 1).unwrap(), w);
    }

    #[test]
    fn zero_db_on_unit_power() {
        let w = unit_power_signal(10_000);
        assert!((w.power() - 1.0).abs() < 0.01);
        let noisy = add_noise_snr(&w, 0.0, 3).unwrap();
        let p_noise = w
            .samples
            .iter()
            .zip(&noisy.samples)
            .map(|(a, b)| (b - a).powi(2))
            .sum::<f64>()
            / 10_000.0;
        assert!((p_noise - w.power()).abs() < 0.05 * w.power(), "{p_noise}");
    }

    #[test]
    fn ten_db() {
        let w = unit_power_signal(10_000);
        let noisy = add_noise_snr(&w, 10.0, 4).unwrap();
        let snr = measured_snr_db(&w, &noisy);
        assert!((9.5..=10.5).contains(&snr), "{snr}");
    }

    #[test]
    fn zero_power_is_undefined() {
        let w = Waveform::new(vec![0.0; 100], 8000).unwrap();
        assert!(matches!(add_noise_snr(&w, 10.0, 0), Err(Error::UndefinedSnr)));
    }

    #[test]
    fn seeds() {
        let w = unit_power_signal(500);
        let a = add_noise_snr(&w, 5.0, 9).unwrap();
        let b = add_noise_snr(&w, 5.0, 9).unwrap();
        let c = add_noise_snr(&w, 5.0, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn corpus_triples() {
        let input = seqs(100);
        let out = build_augmented_corpus(&input, &AugmentationConfig::default(), 0).unwrap();
        assert_eq!(out.len(), 300);
        assert_eq!(&out[..100], &input[..]);
        for (i, s) in out[100..].iter().enumerate() {
            let orig = &input[i % 100];
            assert_eq!(s.scene_label, orig.scene_label);
            assert_eq!(s.device_id, orig.device_id);
            assert_ne!(s.seq_id, orig.seq_id);
            let snr = measured_snr_db_features(&orig.frames, &s.frames);
            let want = if i < 100 { 10.0 } else { 15.0 };
            assert!((snr - want).abs() < 0.5, "{snr}");
        }
    }

    #[test]
    fn empty_snr_list_is_identity() {
        let input = seqs(4);
        let cfg = AugmentationConfig {
            snr_levels_db: vec![],
            ..Default::default()
        };
        assert_eq!(build_augmented_corpus(&input, &cfg, 1).unwrap(), input);
    }

    #[test]
    fn single_zero_db_copy_differs() {
        let input = seqs(1);
        let cfg = AugmentationConfig {
            snr_levels_db: vec![0.0],
            ..Default::default()
        };
        let out = build_augmented_corpus(&input, &cfg, 1).unwrap();
        assert_eq!(out.len(), 2);
        assert_ne!(out[1].frames, out[0].frames);
    }

    proptest! {
        #[test]
        fn waveform_snr_is_hit(snr in -5.0f64..30.0, seed in any::<u64>()) {
            let w = unit_power_signal(2000);
            let noisy = add_noise_snr(&w, snr, seed).unwrap();
            prop_assert!((measured_snr_db(&w, &noisy) - snr).abs() < 1e-6);
        }
    }
}
