use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::gaussian::{GaussianDiag, LN_2PI};
use crate::error::{Error, Result};
use crate::features::{FeatureStats, Segment};
use crate::nn::{Activation, Mlp, Params};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FhvaeConfig {
    pub dim_z1: usize,
    pub dim_z2: usize,
    /// Prior variance of z1.
    pub var_z1: f64,
    /// Variance of z2 around its sequence mean.
    pub var_z2: f64,
    /// Prior variance of the sequence mean mu2.
    pub var_mu2: f64,
    /// Weight of the sequence-discriminative term log p(seq | z2).
    pub disc_weight: f64,
    pub n_bands: usize,
    pub seg_len: usize,
    pub seg_hop: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_cache_size: usize,
    pub steps: usize,
    /// Gradient steps per filled sequence cache before it is resampled.
    pub steps_per_cache: usize,
    pub clip_norm: Option<f64>,
}

impl Default for FhvaeConfig {
    fn default() -> Self {
        FhvaeConfig {
            dim_z1: 32,
            dim_z2: 32,
            var_z1: 1.0,
            var_z2: 0.25,
            var_mu2: 1.0,
            disc_weight: 10.0,
            n_bands: 40,
            seg_len: 20,
            seg_hop: 20,
            hidden: vec![256, 256],
            activation: Activation::Tanh,
            lr: 1e-3,
            batch_size: 64,
            seq_cache_size: 256,
            steps: 3000,
            steps_per_cache: 500,
            clip_norm: Some(100.0),
        }
    }
}

impl FhvaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim_z1 == 0 || self.dim_z2 == 0 {
            return bad("latent dims must be >= 1");
        }
        if !(self.var_z1 > 0.0 && self.var_z2 > 0.0 && self.var_mu2 > 0.0) {
            return bad("prior variances must be > 0");
        }
        if !(self.disc_weight >= 0.0) {
            return bad("disc_weight must be >= 0");
        }
        if self.n_bands == 0 || self.seg_len == 0 || self.seg_hop == 0 {
            return bad("n_bands, seg_len and seg_hop must be >= 1");
        }
        if self.batch_size == 0 || self.seq_cache_size == 0 || self.steps_per_cache == 0 {
            return bad("batch_size, seq_cache_size and steps_per_cache must be >= 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        Ok(())
    }

    /// Flattened segment width `L * D`.
    pub fn seg_dim(&self) -> usize {
        self.seg_len * self.n_bands
    }
}

/// The three networks: q(z2|x), q(z1|x,z2) and p(x|z1,z2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FhvaeNets {
    pub enc_z2: Mlp,
    pub enc_z1: Mlp,
    pub dec: Mlp,
}

impl FhvaeNets {
    pub fn new(cfg: &FhvaeConfig, rng: &mut Rng) -> Self {
        let widths = |n_in: usize, n_out: usize| -> Vec<usize> {
            std::iter::once(n_in)
                .chain(cfg.hidden.iter().copied())
                .chain(std::iter::once(n_out))
                .collect()
        };
        let x = cfg.seg_dim();
        FhvaeNets {
            enc_z2: Mlp::new(&widths(x, 2 * cfg.dim_z2), cfg.activation, rng),
            enc_z1: Mlp::new(&widths(x + cfg.dim_z2, 2 * cfg.dim_z1), cfg.activation, rng),
            dec: Mlp::new(&widths(cfg.dim_z1 + cfg.dim_z2, 2 * x), cfg.activation, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        FhvaeNets {
            enc_z2: self.enc_z2.zeros_like(),
            enc_z1: self.enc_z1.zeros_like(),
            dec: self.dec.zeros_like(),
        }
    }
}

impl Params for FhvaeNets {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.enc_z2.param_slices();
        v.extend(self.enc_z1.param_slices());
        v.extend(self.dec.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.enc_z2.param_slices_mut();
        v.extend(self.enc_z1.param_slices_mut());
        v.extend(self.dec.param_slices_mut());
        v
    }
}

/// Decoder output for one segment, in feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentGaussian {
    /// `[L x D]`
    pub mean: Array2<f64>,
    /// `[L x D]`
    pub logvar: Array2<f64>,
}

/// Splits a `[B x 2k]` network output into (mean, logvar) halves.
pub(crate) fn split_halves(out: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let k = out.ncols() / 2;
    (
        out.slice(s![.., ..k]).to_owned(),
        out.slice(s![.., k..]).to_owned(),
    )
}

pub(crate) fn hcat(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[a.view(), b.view()]).expect("row counts agree")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FhvaeModel {
    pub config: FhvaeConfig,
    pub nets: FhvaeNets,
    pub feature_stats: FeatureStats,
    /// Sequence means learned for the training sequences, keyed by seq_id.
    pub mu2_table: BTreeMap<String, Vec<f64>>,
}

impl FhvaeModel {
    /// Untrained model with freshly initialised networks.
    pub fn init(config: FhvaeConfig, feature_stats: FeatureStats, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if feature_stats.dim() != config.n_bands {
            return Err(Error::shape(
                format!("{} bands", config.n_bands),
                format!("{} bands", feature_stats.dim()),
            ));
        }
        Ok(FhvaeModel {
            nets: FhvaeNets::new(&config, rng),
            config,
            feature_stats,
            mu2_table: BTreeMap::new(),
        })
    }

    /// Standardizes and flattens segments into the `[N x L*D]` network input.
    pub fn segments_to_input(&self, segs: &[Segment]) -> Result<Array2<f64>> {
        let (l, d) = (self.config.seg_len, self.config.n_bands);
        let mut x = Array2::zeros((segs.len(), l * d));
        for (i, seg) in segs.iter().enumerate() {
            if seg.data.dim() != (l, d) {
                return Err(Error::shape(
                    format!("segment [{l} x {d}]"),
                    format!("[{} x {}]", seg.len(), seg.dim()),
                ));
            }
            let n = self.feature_stats.normalize(&seg.data);
            x.row_mut(i).assign(&Array1::from_iter(n.iter().copied()));
        }
        Ok(x)
    }

    /// Inverse of [`segments_to_input`](Self::segments_to_input) for one row.
    pub fn output_row_to_frames(&self, row: ndarray::ArrayView1<f64>) -> Array2<f64> {
        let frames = row
            .to_owned()
            .into_shape_with_order((self.config.seg_len, self.config.n_bands))
            .expect("row has L*D entries");
        self.feature_stats.denormalize(&frames)
    }

    /// q(z2|x) for a batch of normalized inputs: (means, logvars).
    pub fn z2_posterior(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        split_halves(&self.nets.enc_z2.predict(x))
    }

    /// q(z1|x, z2) for a batch.
    pub fn z1_posterior(&self, x: &Array2<f64>, z2: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        split_halves(&self.nets.enc_z1.predict(&hcat(x, z2)))
    }

    /// p(x|z1, z2) for a batch, in normalized space.
    pub fn decode_batch(&self, z1: &Array2<f64>, z2: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        split_halves(&self.nets.dec.predict(&hcat(z1, z2)))
    }

    pub fn encode_z2(&self, x: &Segment) -> Result<GaussianDiag> {
        let input = self.segments_to_input(std::slice::from_ref(x))?;
        let (m, lv) = self.z2_posterior(&input);
        GaussianDiag::new(m.row(0).to_owned(), lv.row(0).to_owned())
    }

    pub fn encode_z1(&self, x: &Segment, z2: &[f64]) -> Result<GaussianDiag> {
        self.check_len("z2", z2, self.config.dim_z2)?;
        let input = self.segments_to_input(std::slice::from_ref(x))?;
        let z2 = Array2::from_shape_vec((1, z2.len()), z2.to_vec()).unwrap();
        let (m, lv) = self.z1_posterior(&input, &z2);
        GaussianDiag::new(m.row(0).to_owned(), lv.row(0).to_owned())
    }

    /// Decoder distribution over one segment, mapped back to feature space.
    pub fn decode(&self, z1: &[f64], z2: &[f64]) -> Result<SegmentGaussian> {
        self.check_len("z1", z1, self.config.dim_z1)?;
        self.check_len("z2", z2, self.config.dim_z2)?;
        let z1 = Array2::from_shape_vec((1, z1.len()), z1.to_vec()).unwrap();
        let z2 = Array2::from_shape_vec((1, z2.len()), z2.to_vec()).unwrap();
        let (m, lv) = self.decode_batch(&z1, &z2);
        let mean = self.output_row_to_frames(m.row(0));
        let mut logvar = lv
            .row(0)
            .to_owned()
            .into_shape_with_order((self.config.seg_len, self.config.n_bands))
            .unwrap();
        for mut row in logvar.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += 2.0 * self.feature_stats.std[j].ln();
            }
        }
        Ok(SegmentGaussian { mean, logvar })
    }

    fn check_len(&self, what: &str, v: &[f64], want: usize) -> Result<()> {
        if v.len() != want {
            return Err(Error::shape(format!("{what} of length {want}"), v.len()));
        }
        Ok(())
    }
}

/// `log N(mu2; 0, var_mu2 * I)`.
pub fn prior_logpdf_mu2(mu2: &[f64], cfg: &FhvaeConfig) -> Result<f64> {
    if mu2.len() != cfg.dim_z2 {
        return Err(Error::shape(format!("mu2 of length {}", cfg.dim_z2), mu2.len()));
    }
    let lv = cfg.var_mu2.ln();
    Ok(mu2
        .iter()
        .map(|m| -0.5 * (LN_2PI + lv + m * m / cfg.var_mu2))
        .sum())
}
