use ndarray::Array1;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian stored as mean and log-variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDiag {
    pub mean: Array1<f64>,
    pub logvar: Array1<f64>,
}

impl GaussianDiag {
    pub fn new(mean: Array1<f64>, logvar: Array1<f64>) -> Result<Self> {
        if mean.len() != logvar.len() {
            return Err(Error::shape(
                format!("logvar of length {}", mean.len()),
                logvar.len(),
            ));
        }
        Ok(GaussianDiag { mean, logvar })
    }

    /// Isotropic Gaussian `N(mean, var * I)`.
    pub fn isotropic(mean: Array1<f64>, var: f64) -> Self {
        let logvar = Array1::from_elem(mean.len(), var.ln());
        GaussianDiag { mean, logvar }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.mean.iter().zip(&self.logvar))
            .map(|(x, (m, lv))| log_normal(*x, *m, *lv))
            .sum()
    }

    /// `KL(self || other)` in closed form.
    pub fn kl(&self, other: &GaussianDiag) -> f64 {
        self.mean
            .iter()
            .zip(&self.logvar)
            .zip(other.mean.iter().zip(&other.logvar))
            .map(|((m1, lv1), (m2, lv2))| kl_scalar(*m1, *lv1, *m2, *lv2))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite()) && self.logvar.iter().all(|v| v.is_finite())
    }
}

/// `log N(x; mean, exp(logvar))`.
pub fn log_normal(x: f64, mean: f64, logvar: f64) -> f64 {
    -0.5 * (LN_2PI + logvar + (x - mean).powi(2) * (-logvar).exp())
}

/// Per-coordinate `KL(N(m1, e^lv1) || N(m2, e^lv2))`.
pub fn kl_scalar(m1: f64, lv1: f64, m2: f64, lv2: f64) -> f64 {
    0.5 * (lv2 - lv1 + ((lv1).exp() + (m1 - m2).powi(2)) * (-lv2).exp() - 1.0)
}

/// Reparameterized draw `mean + exp(logvar / 2) * eps`, `eps ~ N(0, I)`.
pub fn sample_reparam(g: &GaussianDiag, seed: u64) -> Array1<f64> {
    let mut rng = seed::rng(seed);
    let eps: Vec<f64> = (0..g.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
    sample_with_eps(g, &eps)
}

pub fn sample_with_eps(g: &GaussianDiag, eps: &[f64]) -> Array1<f64> {
    g.mean
        .iter()
        .zip(&g.logvar)
        .zip(eps)
        .map(|((m, lv), e)| {
            let s = (0.5 * lv).exp();
            if s == 0.0 {
                *m
            } else {
                m + s * e
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn degenerate_sample_is_mean() {
        let g = GaussianDiag::new(
            Array1::from(vec![1.5, -2.0]),
            Array1::from(vec![f64::NEG_INFINITY; 2]),
        )
        .unwrap();
        assert_eq!(sample_reparam(&g, 11), g.mean);
    }

    #[test]
    fn monte_carlo_moments() {
        let g = GaussianDiag::new(
            Array1::from(vec![0.5, -1.0, 3.0]),
            Array1::from(vec![0.0, (0.25f64).ln(), (4.0f64).ln()]),
        )
        .unwrap();
        let n = 100_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for i in 0..n {
            let s = sample_reparam(&g, i as u64);
            for d in 0..3 {
                sum[d] += s[d];
                sq[d] += s[d] * s[d];
            }
        }
        for d in 0..3 {
            let mean = sum[d] / n as f64;
            let var = sq[d] / n as f64 - mean * mean;
            let true_var = g.logvar[d].exp();
            assert!((mean - g.mean[d]).abs() < 3.0 * true_var.sqrt() / (n as f64).sqrt());
            assert!((var - true_var).abs() < 0.05 * true_var);
        }
    }

    #[test]
    fn kl_closed_form_values() {
        let a = GaussianDiag::isotropic(Array1::from(vec![1.0]), 1.0);
        let b = GaussianDiag::isotropic(Array1::from(vec![0.0]), 1.0);
        assert!((a.kl(&b) - 0.5).abs() < 1e-15);
        assert_eq!(a.kl(&a), 0.0);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let q = GaussianDiag::new(
            Array1::from(vec![0.3, -0.7, 1.1]),
            Array1::from(vec![-0.4, 0.2, -1.0]),
        )
        .unwrap();
        let p = GaussianDiag::new(
            Array1::from(vec![0.0, 0.5, 0.4]),
            Array1::from(vec![0.0, -0.3, 0.1]),
        )
        .unwrap();
        let n = 100_000;
        let mut rng = seed::rng(42);
        let mut acc = 0.0;
        for _ in 0..n {
            let eps: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z = sample_with_eps(&q, &eps);
            acc += q.log_pdf(z.as_slice().unwrap()) - p.log_pdf(z.as_slice().unwrap());
        }
        let mc = acc / n as f64;
        let exact = q.kl(&p);
        assert!((mc - exact).abs() < 0.02 * exact, "{mc} vs {exact}");
    }

    proptest! {
        #[test]
        fn kl_is_non_negative_and_zero_only_at_equality(
            m1 in -3.0f64..3.0, lv1 in -3.0f64..3.0, m2 in -3.0f64..3.0, lv2 in -3.0f64..3.0,
        ) {
            let k = kl_scalar(m1, lv1, m2, lv2);
            prop_assert!(k >= -1e-15);
            prop_assert!(kl_scalar(m1, lv1, m1, lv1).abs() < 1e-15);
            if (m1 - m2).abs() > 1e-3 || (lv1 - lv2).abs() > 1e-3 {
                prop_assert!(k > 0.0);
            }
        }
    }
}
