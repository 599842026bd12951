//! Factorized hierarchical VAE.
//!
//! A sequence of segments shares one sequence-level mean `mu2`; every segment
//! has a segment latent `z1 ~ N(0, var_z1)` and a sequence latent
//! `z2 ~ N(mu2, var_z2)`, and is decoded from `(z1, z2)`. Factors that stay
//! put within a recording (the channel) are pulled into `z2`; factors that
//! move between segments end up in `z1`.

pub mod checkpoint;
mod gaussian;
mod infer;
mod model;
pub mod objective;
mod train;

use std::path::Path;

pub use gaussian::{kl_scalar, log_normal, sample_reparam, sample_with_eps, GaussianDiag};
pub use infer::{
    infer_mu2_domain, infer_mu2_for, infer_mu2_sequence, mu2_posterior_mean, SequencePosterior,
};
pub use model::{prior_logpdf_mu2, FhvaeConfig, FhvaeModel, FhvaeNets, SegmentGaussian};
pub use objective::ElboParts;
pub use train::{segment_elbo, train_fhvae, TrainLogEntry, TrainingLog};

use crate::error::Result;

pub const CHECKPOINT_FORMAT: &str = "devshift-fhvae";

impl FhvaeModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_FORMAT, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: FhvaeModel = checkpoint::load(path, CHECKPOINT_FORMAT)?;
        m.config.validate()?;
        Ok(m)
    }
}
