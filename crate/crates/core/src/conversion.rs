//! Channel conversion: move each segment's z2 by the difference between a
//! target domain mu2 and the sequence's own mu2 estimate, keep z1, decode.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{segment_sequence, FeatureSequence, Segment};
use crate::fhvae::{mu2_posterior_mean, FhvaeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SourceMu2Mode {
    /// mu2 of the source is re-estimated from every input sequence.
    #[default]
    PerSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionPlan {
    pub target_name: String,
    #[serde(default)]
    pub source_mu2_mode: SourceMu2Mode,
    pub target_mu2: Vec<f64>,
}

impl ConversionPlan {
    pub fn new(target_name: impl Into<String>, target_mu2: Vec<f64>) -> Result<Self> {
        let plan = ConversionPlan {
            target_name: target_name.into(),
            source_mu2_mode: SourceMu2Mode::PerSequence,
            target_mu2,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_mu2.is_empty() {
            return Err(Error::Config("target_mu2 is empty".into()));
        }
        if self.target_mu2.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("target_mu2 has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: ConversionPlan =
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Posterior means for all segments of one sequence.
struct Encoded {
    x: Array2<f64>,
    z2: Array2<f64>,
    mu2: Array1<f64>,
}

fn encode(f: &FeatureSequence, model: &FhvaeModel) -> Result<(Vec<Segment>, Encoded)> {
    if f.dim() != model.config.n_bands {
        return Err(Error::shape(
            format!("{} bands", model.config.n_bands),
            format!("{} bands", f.dim()),
        ));
    }
    let cfg = &model.config;
    let segs = segment_sequence(f, cfg.seg_len, cfg.seg_len)?;
    let x = model.segments_to_input(&segs)?;
    let (z2, _) = model.z2_posterior(&x);
    let mu2 = mu2_posterior_mean(&z2, cfg)?;
    Ok((segs, Encoded { x, z2, mu2 }))
}

/// Decodes with `z2 + delta`, z1 taken from q(z1 | x, z2) at the unshifted z2.
fn decode_shifted(
    f: &FeatureSequence,
    model: &FhvaeModel,
    enc: &Encoded,
    delta: &Array1<f64>,
) -> Result<FeatureSequence> {
    let (z1, _) = model.z1_posterior(&enc.x, &enc.z2);
    let z2 = &enc.z2 + &delta.view().insert_axis(Axis(0));
    let (mean, _) = model.decode_batch(&z1, &z2);
    let (l, d) = (model.config.seg_len, model.config.n_bands);
    let mut frames = Array2::zeros((mean.nrows() * l, d));
    for (i, row) in mean.rows().into_iter().enumerate() {
        frames
            .slice_mut(ndarray::s![i * l..(i + 1) * l, ..])
            .assign(&model.output_row_to_frames(row));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure { part: "decoder" });
    }
    Ok(f.with_frames(frames))
}

/// Converts one sequence toward `plan.target_mu2`. The output has
/// `floor(T / seg_len) * seg_len` frames.
pub fn convert_sequence(
    f: &FeatureSequence,
    model: &FhvaeModel,
    plan: &ConversionPlan,
) -> Result<FeatureSequence> {
    if plan.target_mu2.len() != model.config.dim_z2 {
        return Err(Error::shape(
            format!("target_mu2 of length {}", model.config.dim_z2),
            plan.target_mu2.len(),
        ));
    }
    let (_, enc) = encode(f, model)?;
    let delta = Array1::from(plan.target_mu2.clone()) - &enc.mu2;
    decode_shifted(f, model, &enc, &delta)
}

/// Plain encode/decode with posterior means and no shift. Uses the same
/// path as [`convert_sequence`] with a zero shift.
pub fn reconstruct_sequence(f: &FeatureSequence, model: &FhvaeModel) -> Result<FeatureSequence> {
    let (_, enc) = encode(f, model)?;
    let delta = &enc.mu2 - &enc.mu2;
    decode_shifted(f, model, &enc, &delta)
}

pub fn convert_corpus(
    seqs: &[FeatureSequence],
    model: &FhvaeModel,
    plan: &ConversionPlan,
) -> Result<Vec<FeatureSequence>> {
    seqs.iter().map(|f| convert_sequence(f, model, plan)).collect()
}

/// Sequence-level mu2 estimate under non-overlapping segmentation, as used
/// by the converter.
pub fn source_mu2(f: &FeatureSequence, model: &FhvaeModel) -> Result<Vec<f64>> {
    Ok(encode(f, model)?.1.mu2.to_vec())
}

/// One row per segment holding the posterior mean of z1; the decoder is not
/// used.
pub fn extract_z1_features(f: &FeatureSequence, model: &FhvaeModel) -> Result<FeatureSequence> {
    let (_, enc) = encode(f, model)?;
    let (z1, _) = model.z1_posterior(&enc.x, &enc.z2);
    if z1.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure { part: "z1 encoder" });
    }
    Ok(f.with_frames(z1))
}

pub fn extract_z1_corpus(seqs: &[FeatureSequence], model: &FhvaeModel) -> Result<Vec<FeatureSequence>> {
    seqs.iter().map(|f| extract_z1_features(f, model)).collect()
}
