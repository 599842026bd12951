//! Small dense-network toolkit with hand-written backprop, shared by the
//! FHVAE, the scene classifier, and the linear probe.

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::Rng;

/// Anything that owns a flat list of trainable tensors. A gradient container
/// has the same type and the same slice order as the parameters it matches.
pub trait Params {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn zero(&mut self) {
        for s in self.param_slices_mut() {
            s.fill(0.0);
        }
    }

    fn all_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
        }
    }

    /// Derivative expressed through the activated output `h`.
    fn backprop(self, h: &Array2<f64>, dh: &mut Array2<f64>) {
        match self {
            Activation::Tanh => ndarray::Zip::from(dh)
                .and(h)
                .for_each(|d, &h| *d *= 1.0 - h * h),
            Activation::Relu => ndarray::Zip::from(dh)
                .and(h)
                .for_each(|d, &h| {
                    if h <= 0.0 {
                        *d = 0.0
                    }
                }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `[in x out]`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn new(n_in: usize, n_out: usize, gain: f64, rng: &mut Rng) -> Self {
        let a = gain * (6.0 / (n_in + n_out) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((n_in, n_out), || rng.random_range(-a..a));
        Dense {
            w,
            b: Array1::zeros(n_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Dense {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients into `grad`, returns `d/dx`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Dense) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

impl Params for Dense {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![
            self.w.as_slice().expect("standard layout"),
            self.b.as_slice().expect("standard layout"),
        ]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Feed-forward stack; the activation follows every layer except the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

/// Layer inputs saved by [`Mlp::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// `widths = [in, hidden..., out]`.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let gain = match activation {
            Activation::Tanh => 1.0,
            Activation::Relu => std::f64::consts::SQRT_2,
        };
        let layers = widths
            .windows(2)
            .map(|w| Dense::new(w[0], w[1], gain, rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
            activation: self.activation,
        }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().unwrap().n_out()
    }

    pub fn predict(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward(x).0
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpTape) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&h);
            if i < last {
                self.activation.apply(&mut z);
            }
            inputs.push(std::mem::replace(&mut h, z));
        }
        (h, MlpTape { inputs })
    }

    pub fn backward(&self, tape: &MlpTape, dout: Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = dout;
        for i in (0..self.layers.len()).rev() {
            let x = &tape.inputs[i];
            d = self.layers[i].backward(x, &d, &mut grad.layers[i]);
            if i > 0 {
                // tape.inputs[i] is the activated output of layer i - 1
                self.activation.backprop(x, &mut d);
            }
        }
        d
    }
}

impl Params for Mlp {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.param_slices()).collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.param_slices_mut())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Descent step: `params -= lr * adam(grads)`.
    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) {
        self.step_slices(params.param_slices_mut(), grads.param_slices());
    }

    pub fn step_slices(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Scales gradients down so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<P: Params>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads
        .param_slices()
        .iter()
        .flat_map(|s| s.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for sl in grads.param_slices_mut() {
            sl.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn loss(mlp: &Mlp, x: &Array2<f64>) -> f64 {
        mlp.predict(x).mapv(|v| v * v).sum() * 0.5
    }

    fn check_grads(act: Activation) {
        let mut rng = seed::rng(1);
        let mut mlp = Mlp::new(&[3, 5, 4, 2], act, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - 1.5) * 0.3 + j as f64 * 0.2);
        let (out, tape) = mlp.forward(&x);
        let mut g = mlp.zeros_like();
        mlp.backward(&tape, out.clone(), &mut g);
        let analytic: Vec<f64> = g.param_slices().concat();
        let h = 1e-6;
        let mut k = 0;
        for si in 0..mlp.param_slices().len() {
            for i in 0..mlp.param_slices()[si].len() {
                mlp.param_slices_mut()[si][i] += h;
                let up = loss(&mlp, &x);
                mlp.param_slices_mut()[si][i] -= 2.0 * h;
                let down = loss(&mlp, &x);
                mlp.param_slices_mut()[si][i] += h;
                let fd = (up - down) / (2.0 * h);
                assert!(
                    (fd - analytic[k]).abs() <= 1e-6 + 1e-5 * fd.abs(),
                    "{k}: {fd} vs {}",
                    analytic[k]
                );
                k += 1;
            }
        }
    }

    #[test]
    fn mlp_gradients_tanh() {
        check_grads(Activation::Tanh);
    }

    #[test]
    fn mlp_gradients_relu() {
        check_grads(Activation::Relu);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut p = Dense {
            w: Array2::from_elem((1, 1), 5.0),
            b: Array1::from_elem(1, -3.0),
        };
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..500 {
            let g = Dense {
                w: p.w.clone(),
                b: p.b.clone(),
            };
            opt.step(&mut p, &g);
        }
        assert!(p.w[[0, 0]].abs() < 1e-2 && p.b[0].abs() < 1e-2);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = Array2::from_shape_vec((2, 3), vec![1000.0, 0.0, -1000.0, 1.0, 2.0, 3.0]).unwrap();
        let p = softmax_rows(&l);
        for r in p.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }
}
