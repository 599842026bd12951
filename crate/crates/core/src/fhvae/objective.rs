//! The segment-level variational bound and its gradients.
//!
//! For a segment `x` of a sequence with `N` segments and sequence mean `mu2`:
//!
//! ```text
//! elbo = E_q[log p(x | z1, z2)]
//!        - KL(q(z1 | x, z2) || N(0, var_z1 I))
//!        - KL(q(z2 | x)     || N(mu2, var_z2 I))
//!        + log N(mu2; 0, var_mu2 I) / N
//! ```
//!
//! Training maximizes `elbo + alpha * log p(seq | z2)` where the
//! discriminative term is a softmax over the sequences in the cache:
//! `log N(z2; mu2_seq, var_z2) - logsumexp_j log N(z2; mu2_j, var_z2)`.
//! The reconstruction term uses one reparameterized sample; the caller
//! supplies the noise so the whole computation is deterministic.

use ndarray::{s, Array1, Array2, ArrayView1};
use rand_distr::{Distribution, StandardNormal};

use super::gaussian::{kl_scalar, log_normal, LN_2PI};
use super::model::{hcat, split_halves, FhvaeConfig, FhvaeNets};
use crate::error::{Error, Result};
use crate::nn::log_sum_exp;
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ElboParts {
    pub recon: f64,
    pub kl_z1: f64,
    pub kl_z2: f64,
    pub logp_mu2_scaled: f64,
}

impl ElboParts {
    pub fn elbo(&self) -> f64 {
        self.recon - self.kl_z1 - self.kl_z2 + self.logp_mu2_scaled
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        let parts = [
            ("recon", self.recon),
            ("kl_z1", self.kl_z1),
            ("kl_z2", self.kl_z2),
            ("logp_mu2", self.logp_mu2_scaled),
        ];
        for (name, v) in parts {
            if !v.is_finite() {
                return Err(Error::NumericalFailure { part: name });
            }
        }
        Ok(())
    }
}

/// One mini-batch: normalized segments, which cache entry each belongs to,
/// and the frozen reparameterization noise.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    /// `[B x L*D]`
    pub x: &'a Array2<f64>,
    /// Cache index of every row of `x`.
    pub seq: &'a [usize],
    /// `[K x dim_z2]` sequence means of the cache.
    pub mu2: &'a Array2<f64>,
    /// Segment count of every cache sequence.
    pub n_segments: &'a [usize],
    /// `[B x dim_z1]`
    pub eps_z1: &'a Array2<f64>,
    /// `[B x dim_z2]`
    pub eps_z2: &'a Array2<f64>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

pub fn draw_noise(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Batch averages of the bound and the discriminative term.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    pub parts: ElboParts,
    pub disc: f64,
}

impl BatchStats {
    /// Value being maximized: `elbo + alpha * disc`.
    pub fn objective(&self, alpha: f64) -> f64 {
        self.parts.elbo() + alpha * self.disc
    }
}

/// Gradients of the loss `-(1/B) * sum_b (elbo_b + alpha * disc_b)`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub nets: FhvaeNets,
    /// `[K x dim_z2]`
    pub mu2: Array2<f64>,
}

/// Per-row (mean, logvar) -> sample, with the noise held fixed.
fn reparam(m: &Array2<f64>, lv: &Array2<f64>, eps: &Array2<f64>) -> Array2<f64> {
    ndarray::Zip::from(m)
        .and(lv)
        .and(eps)
        .map_collect(|m, lv, e| m + (0.5 * lv).exp() * e)
}

fn gaussian_log_kernel(z: ArrayView1<f64>, mu: ArrayView1<f64>, var: f64) -> f64 {
    let d = z.len() as f64;
    let sq: f64 = z.iter().zip(mu).map(|(a, b)| (a - b).powi(2)).sum();
    -0.5 * (d * (LN_2PI + var.ln()) + sq / var)
}

/// Evaluates the batch objective; with `want_grad` also returns gradients.
pub fn evaluate(
    nets: &FhvaeNets,
    cfg: &FhvaeConfig,
    batch: &Batch<'_>,
    alpha: f64,
    want_grad: bool,
) -> (BatchStats, Option<Gradients>) {
    let b = batch.len();
    let k = batch.mu2.nrows();
    let x = batch.x;
    let (vz1, vz2, vmu) = (cfg.var_z1, cfg.var_z2, cfg.var_mu2);

    let (o2, tape2) = nets.enc_z2.forward(x);
    let (m2, lv2) = split_halves(&o2);
    let z2 = reparam(&m2, &lv2, batch.eps_z2);
    let in1 = hcat(x, &z2);
    let (o1, tape1) = nets.enc_z1.forward(&in1);
    let (m1, lv1) = split_halves(&o1);
    let z1 = reparam(&m1, &lv1, batch.eps_z1);
    let (od, taped) = nets.dec.forward(&hcat(&z1, &z2));
    let (mx, lvx) = split_halves(&od);

    let mut sums = ElboParts::default();
    let mut disc_sum = 0.0;
    // softmax over cache entries, per row; kept for the backward pass
    let mut disc_probs = Array2::<f64>::zeros((b, k));
    let (lvz1, lvz2) = (vz1.ln(), vz2.ln());
    for r in 0..b {
        let s = batch.seq[r];
        let mu = batch.mu2.row(s);
        let recon: f64 = x
            .row(r)
            .iter()
            .zip(mx.row(r))
            .zip(lvx.row(r))
            .map(|((x, m), lv)| log_normal(*x, *m, *lv))
            .sum();
        let kl1: f64 = m1
            .row(r)
            .iter()
            .zip(lv1.row(r))
            .map(|(m, lv)| kl_scalar(*m, *lv, 0.0, lvz1))
            .sum();
        let kl2: f64 = m2
            .row(r)
            .iter()
            .zip(lv2.row(r))
            .zip(mu)
            .map(|((m, lv), mu)| kl_scalar(*m, *lv, *mu, lvz2))
            .sum();
        let lp_mu: f64 = mu
            .iter()
            .map(|m| -0.5 * (LN_2PI + vmu.ln() + m * m / vmu))
            .sum::<f64>()
            / batch.n_segments[s] as f64;
        sums.recon += recon;
        sums.kl_z1 += kl1;
        sums.kl_z2 += kl2;
        sums.logp_mu2_scaled += lp_mu;

        if alpha > 0.0 && k > 1 {
            let logits: Vec<f64> = (0..k)
                .map(|j| gaussian_log_kernel(z2.row(r), batch.mu2.row(j), vz2))
                .collect();
            let lse = log_sum_exp(logits.iter().copied());
            disc_sum += logits[s] - lse;
            for j in 0..k {
                disc_probs[[r, j]] = (logits[j] - lse).exp();
            }
        }
    }
    let bf = b as f64;
    let stats = BatchStats {
        parts: ElboParts {
            recon: sums.recon / bf,
            kl_z1: sums.kl_z1 / bf,
            kl_z2: sums.kl_z2 / bf,
            logp_mu2_scaled: sums.logp_mu2_scaled / bf,
        },
        disc: disc_sum / bf,
    };
    if !want_grad {
        return (stats, None);
    }

    // d loss / d objective_b
    let c = -1.0 / bf;
    let mut grads = nets.zeros_like();
    let mut gmu2 = Array2::<f64>::zeros(batch.mu2.raw_dim());

    // decoder
    let inv_vx = lvx.mapv(|v| (-v).exp());
    let resid = x - &mx;
    let d_mx = &resid * &inv_vx * c;
    let d_lvx = (&resid * &resid * &inv_vx * 0.5 - 0.5) * c;
    let d_in_dec = nets.dec.backward(&taped, hcat(&d_mx, &d_lvx), &mut grads.dec);
    let dz1 = d_in_dec.slice(s![.., ..cfg.dim_z1]).to_owned();
    let mut dz2 = d_in_dec.slice(s![.., cfg.dim_z1..]).to_owned();

    // q(z1 | x, z2)
    let s1 = lv1.mapv(|v| (0.5 * v).exp());
    let d_m1 = &dz1 + &(m1.mapv(|m| -m / vz1) * c);
    let d_lv1 = &dz1 * &s1 * batch.eps_z1 * 0.5
        + lv1.mapv(|lv| 0.5 * (1.0 - lv.exp() / vz1)) * c;
    let d_in1 = nets.enc_z1.backward(&tape1, hcat(&d_m1, &d_lv1), &mut grads.enc_z1);
    dz2 += &d_in1.slice(s![.., x.ncols()..]);

    // discriminative term
    if alpha > 0.0 && k > 1 {
        for r in 0..b {
            let s = batch.seq[r];
            let zr = z2.row(r);
            let mut dz = Array1::<f64>::zeros(cfg.dim_z2);
            for j in 0..k {
                let p = disc_probs[[r, j]];
                let w = if j == s { 1.0 - p } else { -p };
                if w == 0.0 {
                    continue;
                }
                let diff = &zr - &batch.mu2.row(j);
                // d/d mu_j of (logit_s - lse) = w * (z - mu_j) / var
                gmu2.row_mut(j).scaled_add(c * alpha * w / vz2, &diff);
                // d/dz contribution: -w * (z - mu_j) / var
                dz.scaled_add(-w / vz2, &diff);
            }
            dz2.row_mut(r).scaled_add(c * alpha, &dz);
        }
    }

    // q(z2 | x) and the mu2 prior terms
    let s2 = lv2.mapv(|v| (0.5 * v).exp());
    let mut d_m2 = dz2.clone();
    for r in 0..b {
        let s = batch.seq[r];
        for d in 0..cfg.dim_z2 {
            let diff = m2[[r, d]] - batch.mu2[[s, d]];
            d_m2[[r, d]] += c * (-diff / vz2);
            let n = batch.n_segments[s] as f64;
            gmu2[[s, d]] += c * (diff / vz2 - batch.mu2[[s, d]] / (n * vmu));
        }
    }
    let d_lv2 = &dz2 * &s2 * batch.eps_z2 * 0.5
        + lv2.mapv(|lv| 0.5 * (1.0 - lv.exp() / vz2)) * c;
    nets.enc_z2
        .backward(&tape2, hcat(&d_m2, &d_lv2), &mut grads.enc_z2);

    (
        stats,
        Some(Gradients {
            nets: grads,
            mu2: gmu2,
        }),
    )
}

