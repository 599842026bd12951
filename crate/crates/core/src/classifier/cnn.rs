//! Two conv blocks and one hidden dense layer, operating on one
//! `[frames x bands]` window at a time. Activations are stored channel-last as
//! `[H*W x C]` matrices so convolutions reduce to im2col + matmul.

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::nn::{Dense, Params};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: (usize, usize),
    pub pool: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `[kh*kw*c_in x filters]`, rows ordered (dy, dx, c).
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub kernel: (usize, usize),
    pub c_in: usize,
}

impl Conv2d {
    fn new(c_in: usize, spec: &ConvSpec, rng: &mut Rng) -> Self {
        let (kh, kw) = spec.kernel;
        let fan_in = kh * kw * c_in;
        let a = (6.0 / fan_in as f64).sqrt();
        Conv2d {
            w: Array2::from_shape_simple_fn((fan_in, spec.filters), || rng.random_range(-a..a)),
            b: Array1::zeros(spec.filters),
            kernel: spec.kernel,
            c_in,
        }
    }

    fn zeros_like(&self) -> Self {
        Conv2d {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            kernel: self.kernel,
            c_in: self.c_in,
        }
    }

    /// Same-padded patches of an `[h*w x c]` map.
    fn im2col(&self, x: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
        let (kh, kw) = self.kernel;
        let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
        let c = self.c_in;
        let mut cols = Array2::zeros((h * w, kh * kw * c));
        for i in 0..h {
            for j in 0..w {
                let mut row = cols.row_mut(i * w + j);
                for dy in 0..kh {
                    let y = i as isize + dy as isize - pt as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for dx in 0..kw {
                        let xx = j as isize + dx as isize - pl as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let src = x.row(y as usize * w + xx as usize);
                        let base = (dy * kw + dx) * c;
                        for ch in 0..c {
                            row[base + ch] = src[ch];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
        let (kh, kw) = self.kernel;
        let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
        let c = self.c_in;
        let mut dx_map = Array2::zeros((h * w, c));
        for i in 0..h {
            for j in 0..w {
                let row = dcols.row(i * w + j);
                for dy in 0..kh {
                    let y = i as isize + dy as isize - pt as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for dx in 0..kw {
                        let xx = j as isize + dx as isize - pl as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let base = (dy * kw + dx) * c;
                        let mut dst = dx_map.row_mut(y as usize * w + xx as usize);
                        for ch in 0..c {
                            dst[ch] += row[base + ch];
                        }
                    }
                }
            }
        }
        dx_map
    }
}

impl Params for Conv2d {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice().unwrap(), self.b.as_slice().unwrap()]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_slice_mut().unwrap(), self.b.as_slice_mut().unwrap()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cnn {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub fc1: Dense,
    pub fc2: Dense,
    /// Input `(frames, bands)`.
    pub input: (usize, usize),
    pub pool1: (usize, usize),
    pub pool2: (usize, usize),
}

/// Effective pool size and output size of a max-pool over an `h x w` map.
fn pooled(h: usize, w: usize, pool: (usize, usize)) -> ((usize, usize), (usize, usize)) {
    let ph = pool.0.clamp(1, h);
    let pw = pool.1.clamp(1, w);
    ((ph, pw), (h / ph, w / pw))
}

fn relu(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Max-pool `[h*w x c]`; returns the pooled map and the argmax source rows.
fn max_pool(
    x: &Array2<f64>,
    h: usize,
    w: usize,
    pool: (usize, usize),
) -> (Array2<f64>, Vec<usize>, (usize, usize)) {
    let ((ph, pw), (oh, ow)) = pooled(h, w, pool);
    let c = x.ncols();
    let mut out = Array2::zeros((oh * ow, c));
    let mut arg = vec![0usize; oh * ow * c];
    for oi in 0..oh {
        for oj in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_r = 0;
                for di in 0..ph {
                    for dj in 0..pw {
                        let r = (oi * ph + di) * w + oj * pw + dj;
                        if x[[r, ch]] > best {
                            best = x[[r, ch]];
                            best_r = r;
                        }
                    }
                }
                out[[oi * ow + oj, ch]] = best;
                arg[(oi * ow + oj) * c + ch] = best_r;
            }
        }
    }
    (out, arg, (oh, ow))
}

fn unpool(dout: &Array2<f64>, arg: &[usize], rows: usize) -> Array2<f64> {
    let c = dout.ncols();
    let mut dx = Array2::zeros((rows, c));
    for (k, &v) in dout.iter().enumerate() {
        let ch = k % c;
        dx[[arg[k], ch]] += v;
    }
    dx
}

fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut Rng) -> Array2<f64> {
    let keep = 1.0 - rate;
    Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct Trace {
    cols1: Array2<f64>,
    act1: Array2<f64>,
    arg1: Vec<usize>,
    mask1: Option<Array2<f64>>,
    in2: Array2<f64>,
    cols2: Array2<f64>,
    act2: Array2<f64>,
    arg2: Vec<usize>,
    mask2: Option<Array2<f64>>,
    flat: Array2<f64>,
    hidden: Array2<f64>,
    mask3: Option<Array2<f64>>,
    hidden_dropped: Array2<f64>,
    dims1: (usize, usize),
}

impl Cnn {
    pub fn new(
        input: (usize, usize),
        conv1: &ConvSpec,
        conv2: &ConvSpec,
        fc_width: usize,
        n_classes: usize,
        rng: &mut Rng,
    ) -> Self {
        let (_, (h1, w1)) = pooled(input.0, input.1, conv1.pool);
        let (_, (h2, w2)) = pooled(h1, w1, conv2.pool);
        let flat = h2 * w2 * conv2.filters;
        Cnn {
            conv1: Conv2d::new(1, conv1, rng),
            conv2: Conv2d::new(conv1.filters, conv2, rng),
            fc1: Dense::new(flat, fc_width, std::f64::consts::SQRT_2, rng),
            fc2: Dense::new(fc_width, n_classes, 0.1, rng),
            input,
            pool1: conv1.pool,
            pool2: conv2.pool,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Cnn {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
            input: self.input,
            pool1: self.pool1,
            pool2: self.pool2,
        }
    }

    /// Logits `[1 x classes]` for one window `[frames x bands]`. With
    /// `dropout = Some((rate, rng))` masks are drawn (training mode).
    pub(crate) fn forward(
        &self,
        window: &Array2<f64>,
        mut dropout: Option<(f64, &mut Rng)>,
    ) -> (Array2<f64>, Trace) {
        let (h, w) = self.input;
        let x = window
            .to_shape((h * w, 1))
            .expect("window matches input shape")
            .to_owned();
        let mut mask = |shape: (usize, usize)| -> Option<Array2<f64>> {
            match dropout.as_mut() {
                Some((rate, rng)) if *rate > 0.0 => Some(dropout_mask(shape, *rate, rng)),
                _ => None,
            }
        };

        let cols1 = self.conv1.im2col(&x, h, w);
        let mut act1 = cols1.dot(&self.conv1.w) + &self.conv1.b;
        relu(&mut act1);
        let (p1, arg1, dims1) = max_pool(&act1, h, w, self.pool1);
        let mask1 = mask(p1.dim());
        let in2 = match &mask1 {
            Some(m) => &p1 * m,
            None => p1,
        };

        let cols2 = self.conv2.im2col(&in2, dims1.0, dims1.1);
        let mut act2 = cols2.dot(&self.conv2.w) + &self.conv2.b;
        relu(&mut act2);
        let (p2, arg2, _) = max_pool(&act2, dims1.0, dims1.1, self.pool2);
        let mask2 = mask(p2.dim());
        let p2 = match &mask2 {
            Some(m) => &p2 * m,
            None => p2,
        };
        let flat = p2
            .to_shape((1, p2.len()))
            .expect("contiguous")
            .to_owned();

        let mut hidden = self.fc1.forward(&flat);
        relu(&mut hidden);
        let mask3 = mask(hidden.dim());
        let hidden_dropped = match &mask3 {
            Some(m) => &hidden * m,
            None => hidden.clone(),
        };
        let logits = self.fc2.forward(&hidden_dropped);
        (
            logits,
            Trace {
                cols1,
                act1,
                arg1,
                mask1,
                in2,
                cols2,
                act2,
                arg2,
                mask2,
                flat,
                hidden,
                mask3,
                hidden_dropped,
                dims1,
            },
        )
    }

    /// Accumulates parameter gradients for `d loss / d logits`.
    pub(crate) fn backward(&self, t: &Trace, dlogits: &Array2<f64>, g: &mut Cnn) {
        let mut dh = self.fc2.backward(&t.hidden_dropped, dlogits, &mut g.fc2);
        if let Some(m) = &t.mask3 {
            dh *= m;
        }
        ndarray::Zip::from(&mut dh)
            .and(&t.hidden)
            .for_each(|d, &h| {
                if h <= 0.0 {
                    *d = 0.0
                }
            });
        let dflat = self.fc1.backward(&t.flat, &dh, &mut g.fc1);

        let f2 = self.conv2.w.ncols();
        let mut dp2 = dflat
            .to_shape((dflat.len() / f2, f2))
            .expect("contiguous")
            .to_owned();
        if let Some(m) = &t.mask2 {
            dp2 *= m;
        }
        let mut dact2 = unpool(&dp2, &t.arg2, t.act2.nrows());
        ndarray::Zip::from(&mut dact2)
            .and(&t.act2)
            .for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
        g.conv2.w += &t.cols2.t().dot(&dact2);
        g.conv2.b += &dact2.sum_axis(Axis(0));
        let dcols2 = dact2.dot(&self.conv2.w.t());
        let mut dp1 = self.conv2.col2im(&dcols2, t.dims1.0, t.dims1.1);
        if let Some(m) = &t.mask1 {
            dp1 *= m;
        }
        debug_assert_eq!(dp1.dim(), t.in2.dim());
        let mut dact1 = unpool(&dp1, &t.arg1, t.act1.nrows());
        ndarray::Zip::from(&mut dact1)
            .and(&t.act1)
            .for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
        g.conv1.w += &t.cols1.t().dot(&dact1);
        g.conv1.b += &dact1.sum_axis(Axis(0));
    }
}

impl Params for Cnn {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.conv1.param_slices();
        v.extend(self.conv2.param_slices());
        v.extend(self.fc1.param_slices());
        v.extend(self.fc2.param_slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.conv1.param_slices_mut();
        v.extend(self.conv2.param_slices_mut());
        v.extend(self.fc1.param_slices_mut());
        v.extend(self.fc2.param_slices_mut());
        v
    }
}
