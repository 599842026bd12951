use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{Waveform, ENERGY_FLOOR};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMelConfig {
    pub n_mels: usize,
    /// Frame length in seconds.
    pub frame_len: f64,
    /// Frame hop in seconds.
    pub hop: f64,
    pub f_min: f64,
    /// Upper band edge; `None` means Nyquist.
    pub f_max: Option<f64>,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        LogMelConfig {
            n_mels: 40,
            frame_len: 0.04,
            hop: 0.02,
            f_min: 0.0,
            f_max: None,
        }
    }
}

impl LogMelConfig {
    fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be >= 1".into()));
        }
        if !(self.hop > 0.0 && self.frame_len > self.hop) {
            return Err(Error::Config("require frame_len > hop > 0".into()));
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank, `[n_mels x (n_fft/2 + 1)]`.
pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_mels, n_bins));
    for b in 0..n_mels {
        let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[[b, k]] = w;
        }
    }
    fb
}

/// Log mel-band energies of `w`, one row per frame.
///
/// Frames are Hann-windowed and zero-padded to the next power of two; band
/// energies are clamped at [`ENERGY_FLOOR`] before the natural log.
pub fn extract_logmel(w: &Waveform, cfg: &LogMelConfig) -> Result<Array2<f64>> {
    w.validate()?;
    cfg.validate()?;
    let sr = w.sample_rate as f64;
    let frame = (cfg.frame_len * sr).round() as usize;
    let hop = ((cfg.hop * sr).round() as usize).max(1);
    if w.samples.len() < frame || frame == 0 {
        return Err(Error::InputTooShort {
            samples: w.samples.len(),
            frame,
        });
    }
    let n_frames = (w.samples.len() - frame) / hop + 1;
    let n_fft = frame.next_power_of_two();
    let f_max = cfg.f_max.unwrap_or(sr / 2.0).min(sr / 2.0);
    let fb = mel_filterbank(cfg.n_mels, n_fft, w.sample_rate, cfg.f_min, f_max);
    let window: Vec<f64> = (0..frame)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / frame as f64).cos())
        .collect();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    let mut out = Array2::zeros((n_frames, cfg.n_mels));
    for t in 0..n_frames {
        let start = t * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < frame {
                Complex::new(w.samples[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for b in 0..cfg.n_mels {
            let e: f64 = fb.row(b).iter().zip(&power).map(|(w, p)| w * p).sum();
            out[[t, b]] = e.max(ENERGY_FLOOR).ln();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, sr: u32, secs: f64) -> Waveform {
        let n = (sr as f64 * secs) as usize;
        let samples = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        Waveform::new(samples, sr).unwrap()
    }

    #[test]
    fn ten_seconds_at_48k_gives_499_frames() {
        let w = Waveform::new(vec![0.1; 480_000], 48_000).unwrap();
        let f = extract_logmel(&w, &LogMelConfig::default()).unwrap();
        assert_eq!(f.dim(), (499, 40));
    }

    #[test]
    fn frame_count_formula() {
        for (n, sr) in [(1000usize, 8000u32), (16_000, 16_000), (3_333, 22_050)] {
            let w = Waveform::new(vec![0.5; n], sr).unwrap();
            let cfg = LogMelConfig {
                n_mels: 8,
                ..Default::default()
            };
            let frame = (cfg.frame_len * sr as f64).round() as usize;
            let hop = (cfg.hop * sr as f64).round() as usize;
            let f = extract_logmel(&w, &cfg).unwrap();
            assert_eq!(f.nrows(), (n - frame) / hop + 1);
        }
    }

    #[test]
    fn silence_hits_floor() {
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let f = extract_logmel(&w, &LogMelConfig::default()).unwrap();
        let floor = ENERGY_FLOOR.ln();
        assert!(f.iter().all(|&v| v == floor));
    }

    #[test]
    fn too_short() {
        let w = Waveform::new(vec![0.0; 100], 16_000).unwrap();
        let err = extract_logmel(&w, &LogMelConfig::default()).unwrap_err();
        assert!(err.to_string().contains("input too short"));
    }

    #[test]
    fn bad_config() {
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let cfg = LogMelConfig {
            frame_len: 0.01,
            hop: 0.02,
            ..Default::default()
        };
        assert!(matches!(extract_logmel(&w, &cfg), Err(Error::Config(_))));
    }

    // Oracle: the triangle heights at 1 kHz, computed straight from the mel
    // edge formula without building the filterbank matrix.
    fn band_weight_at(freq: f64, n_mels: usize, f_max: f64) -> Vec<f64> {
        let mel = |f: f64| 1127.0 * (1.0 + f / 700.0).ln();
        let inv = |m: f64| 700.0 * ((m / 1127.0).exp() - 1.0);
        let top = mel(f_max);
        (0..n_mels)
            .map(|b| {
                let lo = inv(top * b as f64 / (n_mels + 1) as f64);
                let mid = inv(top * (b + 1) as f64 / (n_mels + 1) as f64);
                let hi = inv(top * (b + 2) as f64 / (n_mels + 1) as f64);
                if freq <= lo || freq >= hi {
                    0.0
                } else if freq <= mid {
                    (freq - lo) / (mid - lo)
                } else {
                    (hi - freq) / (hi - mid)
                }
            })
            .collect()
    }

    #[test]
    fn sine_energy_lands_in_expected_band() {
        let sr = 16_000;
        let w = sine(1000.0, sr, 1.0);
        let f = extract_logmel(&w, &LogMelConfig::default()).unwrap();
        let oracle = band_weight_at(1000.0, 40, sr as f64 / 2.0);
        let expected = oracle
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        for row in f.rows() {
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(arg, expected);
        }
    }
}
