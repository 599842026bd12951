use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::model::{FhvaeConfig, FhvaeModel};
use crate::error::{Error, Result};
use crate::features::{segment_sequence, FeatureSequence, Segment};

/// Per-sequence estimate of the sequence-level latent mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencePosterior {
    pub seq_id: String,
    pub mu2_tilde: Vec<f64>,
    pub n_segments: usize,
}

/// Posterior mode of mu2 given the z2 posterior means of a sequence's
/// segments: `sum_n z2_n / (N + var_z2 / var_mu2)`.
pub fn mu2_posterior_mean(z2_means: &Array2<f64>, cfg: &FhvaeConfig) -> Result<Array1<f64>> {
    let n = z2_means.nrows();
    if n == 0 {
        return Err(Error::Empty("segment list"));
    }
    let denom = n as f64 + cfg.var_z2 / cfg.var_mu2;
    Ok(z2_means.sum_axis(ndarray::Axis(0)) / denom)
}

/// Closed-form mu2 of one sequence from its segments.
pub fn infer_mu2_sequence(segs: &[Segment], model: &FhvaeModel) -> Result<SequencePosterior> {
    let first = segs.first().ok_or(Error::Empty("segment list"))?;
    if let Some(other) = segs.iter().find(|s| s.parent_seq != first.parent_seq) {
        return Err(Error::InvalidArgument(format!(
            "segments from different sequences: `{}` and `{}`",
            first.parent_seq, other.parent_seq
        )));
    }
    let x = model.segments_to_input(segs)?;
    let (m2, _) = model.z2_posterior(&x);
    let mu2 = mu2_posterior_mean(&m2, &model.config)?;
    Ok(SequencePosterior {
        seq_id: first.parent_seq.clone(),
        mu2_tilde: mu2.to_vec(),
        n_segments: segs.len(),
    })
}

/// Segments a sequence with the model's geometry and infers its mu2.
pub fn infer_mu2_for(f: &FeatureSequence, model: &FhvaeModel) -> Result<SequencePosterior> {
    let segs = segment_sequence(f, model.config.seg_len, model.config.seg_hop)?;
    infer_mu2_sequence(&segs, model)
}

/// Unweighted mean of the per-sequence mu2 estimates of a domain corpus.
pub fn infer_mu2_domain(seqs: &[FeatureSequence], model: &FhvaeModel) -> Result<Vec<f64>> {
    if seqs.is_empty() {
        return Err(Error::Empty("domain corpus"));
    }
    let posts = seqs
        .iter()
        .map(|f| infer_mu2_for(f, model))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_of(posts.iter().map(|p| p.mu2_tilde.as_slice())))
}

pub(crate) fn mean_of<'a>(vs: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for v in vs {
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    acc
}
