//! Linear probes: multinomial logistic regression on frozen latents, scored
//! by stratified k-fold cross-validation.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Adam, AdamConfig, Dense, Params};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub folds: usize,
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
    /// Minimum number of examples per class.
    pub min_per_class: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            folds: 5,
            iterations: 300,
            lr: 0.05,
            l2: 1e-3,
            min_per_class: 10,
        }
    }
}

/// Maps string labels to dense class indices in sorted order.
pub fn encode_labels(labels: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut classes: Vec<String> = labels.to_vec();
    classes.sort();
    classes.dedup();
    let idx = labels
        .iter()
        .map(|l| classes.binary_search(l).unwrap())
        .collect();
    (idx, classes)
}

/// Mean per-class recall over the classes present in `truth`.
pub fn balanced_accuracy(truth: &[usize], pred: &[usize], n_classes: usize) -> f64 {
    let mut hit = vec![0usize; n_classes];
    let mut tot = vec![0usize; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        tot[t] += 1;
        if t == p {
            hit[t] += 1;
        }
    }
    let present: Vec<f64> = tot
        .iter()
        .zip(&hit)
        .filter(|(t, _)| **t > 0)
        .map(|(t, h)| *h as f64 / *t as f64)
        .collect();
    present.iter().sum::<f64>() / present.len().max(1) as f64
}

struct Logistic {
    mean: Array1<f64>,
    std: Array1<f64>,
    layer: Dense,
}

impl Logistic {
    fn fit(x: &Array2<f64>, y: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Self {
        let mean = x.mean_axis(Axis(0)).unwrap();
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-8));
        let xs = (x - &mean) / &std;
        let n = x.nrows();
        // class-balanced example weights
        let mut counts = vec![0usize; n_classes];
        y.iter().for_each(|&c| counts[c] += 1);
        let present = counts.iter().filter(|&&c| c > 0).count() as f64;
        let weights: Vec<f64> = y
            .iter()
            .map(|&c| n as f64 / (present * counts[c] as f64))
            .collect();

        let mut layer = Dense {
            w: Array2::zeros((x.ncols(), n_classes)),
            b: Array1::zeros(n_classes),
        };
        let mut opt = Adam::new(AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        });
        for _ in 0..cfg.iterations {
            let p = softmax_rows(&layer.forward(&xs));
            let mut dlogits = p;
            for (i, &c) in y.iter().enumerate() {
                dlogits[[i, c]] -= 1.0;
                dlogits.row_mut(i).mapv_inplace(|v| v * weights[i] / n as f64);
            }
            let mut grad = layer.zeros_like();
            layer.backward(&xs, &dlogits, &mut grad);
            grad.w.scaled_add(cfg.l2, &layer.w);
            opt.step(&mut layer, &grad);
        }
        debug_assert!(layer.all_finite());
        Logistic { mean, std, layer }
    }

    fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let logits = self.layer.forward(&((x - &self.mean) / &self.std));
        logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0
            })
            .collect()
    }
}

/// Stratified fold assignment: within every class, consecutive items form
/// contiguous blocks so neighbouring rows (e.g. segments of one recording)
/// tend to share a fold.
fn fold_of(y: &[usize], n_classes: usize, folds: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_classes];
    y.iter().for_each(|&c| counts[c] += 1);
    let mut seen = vec![0usize; n_classes];
    y.iter()
        .map(|&c| {
            let f = seen[c] * folds / counts[c];
            seen[c] += 1;
            f
        })
        .collect()
}

/// Cross-validated class-balanced accuracy of a linear probe predicting
/// `labels` from the rows of `latents`. Chance level is `1 / #classes`.
pub fn linear_probe_cv(latents: &Array2<f64>, labels: &[String], cfg: &ProbeConfig) -> Result<f64> {
    if latents.nrows() != labels.len() {
        return Err(Error::shape(
            format!("{} labels", latents.nrows()),
            labels.len(),
        ));
    }
    let (y, classes) = encode_labels(labels);
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(
            "probe needs at least two classes".into(),
        ));
    }
    let mut counts = vec![0usize; classes.len()];
    y.iter().for_each(|&c| counts[c] += 1);
    if let Some((c, n)) = counts
        .iter()
        .enumerate()
        .find(|(_, &n)| n < cfg.min_per_class.max(cfg.folds))
    {
        return Err(Error::InvalidArgument(format!(
            "class `{}` has {n} examples, probe needs {}",
            classes[c],
            cfg.min_per_class.max(cfg.folds)
        )));
    }
    let folds = fold_of(&y, classes.len(), cfg.folds);
    let mut pred = vec![0usize; y.len()];
    for f in 0..cfg.folds {
        let train: Vec<usize> = (0..y.len()).filter(|&i| folds[i] != f).collect();
        let test: Vec<usize> = (0..y.len()).filter(|&i| folds[i] == f).collect();
        let ytr: Vec<usize> = train.iter().map(|&i| y[i]).collect();
        let model = Logistic::fit(&latents.select(Axis(0), &train), &ytr, classes.len(), cfg);
        for (i, p) in test.iter().zip(model.predict(&latents.select(Axis(0), &test))) {
            pred[*i] = p;
        }
    }
    Ok(balanced_accuracy(&y, &pred, classes.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::seq::SliceRandom;
    use rand_distr::{Distribution, StandardNormal};

    fn labels(n_per: usize, k: usize) -> Vec<String> {
        (0..k)
            .flat_map(|c| std::iter::repeat_n(format!("d{c}"), n_per))
            .collect()
    }

    #[test]
    fn separable_1d() {
        let y = labels(20, 3);
        let x = Array2::from_shape_fn((60, 1), |(i, _)| (i / 20) as f64 * 10.0);
        let acc = linear_probe_cv(&x, &y, &ProbeConfig::default()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn shuffled_labels_are_chance() {
        let mut rng = seed::rng(5);
        let mut y = labels(100, 3);
        let x = Array2::from_shape_fn((300, 4), |_| StandardNormal.sample(&mut rng));
        y.shuffle(&mut rng);
        let acc = linear_probe_cv(&x, &y, &ProbeConfig::default()).unwrap();
        assert!((acc - 1.0 / 3.0).abs() < 0.1, "{acc}");
    }

    #[test]
    fn single_class_is_error() {
        let x = Array2::zeros((20, 2));
        assert!(linear_probe_cv(&x, &labels(20, 1), &ProbeConfig::default()).is_err());
    }

    #[test]
    fn balanced_accuracy_arithmetic() {
        // confusion [[9,1],[4,6]]
        let mut t = vec![0; 10];
        t.extend(vec![1; 10]);
        let mut p = vec![0; 9];
        p.push(1);
        p.extend(vec![0; 4]);
        p.extend(vec![1; 6]);
        assert!((balanced_accuracy(&t, &p, 2) - 0.75).abs() < 1e-15);
    }
}
