//! Feature front end: log-mel extraction, segmentation, and noise augmentation.
//!
//! A recording enters as a [`Waveform`] (or, for synthetic data, directly as
//! log-energies) and leaves as a [`FeatureSequence`], a `T x D` matrix of
//! natural-log mel band energies carrying its scene and device labels.

mod augment;
pub mod io;
mod logmel;
mod segment;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{
    add_noise_snr, add_noise_snr_features, build_augmented_corpus, measured_snr_db,
    measured_snr_db_features, AugmentationConfig, NoiseKind,
};
pub use logmel::{extract_logmel, hz_to_mel, mel_filterbank, mel_to_hz, LogMelConfig};
pub use segment::{segment_sequence, Segment};

/// Energies are clamped to this value before taking the log.
pub const ENERGY_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let w = Waveform {
            samples,
            sample_rate,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::InvalidArgument("sample_rate must be > 0".into()));
        }
        if self.samples.is_empty() {
            return Err(Error::Empty("waveform samples"));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("non-finite sample".into()));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn power(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }
}

/// One recording as log-mel frames plus its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    /// `[T x D]`, row-major, one row per frame.
    pub frames: Array2<f64>,
    pub seq_id: String,
    pub scene_label: String,
    pub device_id: String,
}

impl FeatureSequence {
    pub fn new(
        frames: Array2<f64>,
        seq_id: impl Into<String>,
        scene_label: impl Into<String>,
        device_id: impl Into<String>,
    ) -> Result<Self> {
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
        Ok(FeatureSequence {
            frames,
            seq_id: seq_id.into(),
            scene_label: scene_label.into(),
            device_id: device_id.into(),
        })
    }

    pub fn from_waveform(
        w: &Waveform,
        cfg: &LogMelConfig,
        seq_id: impl Into<String>,
        scene_label: impl Into<String>,
        device_id: impl Into<String>,
    ) -> Result<Self> {
        let frames = extract_logmel(w, cfg)?;
        FeatureSequence::new(frames, seq_id, scene_label, device_id)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Same labels and id, new frames.
    pub fn with_frames(&self, frames: Array2<f64>) -> Self {
        FeatureSequence {
            frames,
            seq_id: self.seq_id.clone(),
            scene_label: self.scene_label.clone(),
            device_id: self.device_id.clone(),
        }
    }
}

/// Per-band standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Mean and standard deviation of every band over all frames of `seqs`.
    pub fn compute(seqs: &[FeatureSequence]) -> Result<Self> {
        let first = seqs.first().ok_or(Error::Empty("feature corpus"))?;
        let d = first.dim();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0usize;
        for s in seqs {
            if s.dim() != d {
                return Err(Error::shape(format!("D={d}"), format!("D={}", s.dim())));
            }
            for row in s.frames.rows() {
                for (j, v) in row.iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1;
            }
        }
        let n = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(FeatureStats { mean, std })
    }

    pub fn identity(d: usize) -> Self {
        FeatureStats {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, frames: &Array2<f64>) -> Array2<f64> {
        let mut out = frames.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn denormalize(&self, frames: &Array2<f64>) -> Array2<f64> {
        let mut out = frames.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        out
    }
}
