//! Scene classifier in the style of the DCASE 2018 task 1 baseline: two
//! conv/pool blocks and one hidden dense layer over log-mel windows, plus the
//! class-average accuracy report.

mod cnn;
mod eval;

use std::path::Path;

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use cnn::{Cnn, Conv2d, ConvSpec};
pub use eval::{class_average_accuracy, DeviceReport, EvalReport};

use crate::error::{Error, Result};
use crate::features::{FeatureSequence, FeatureStats};
use crate::fhvae::checkpoint;
use crate::nn::{softmax_rows, Adam, AdamConfig, Params};
use crate::seed;

pub const CHECKPOINT_FORMAT: &str = "devshift-classifier";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Class names; empty means "sorted unique training labels".
    pub classes: Vec<String>,
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub fc_width: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Input window length in frames; `None` uses the shortest training
    /// sequence.
    pub window_frames: Option<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            classes: Vec::new(),
            conv1: ConvSpec {
                filters: 32,
                kernel: (7, 7),
                pool: (5, 5),
            },
            conv2: ConvSpec {
                filters: 64,
                kernel: (7, 7),
                pool: (4, 100),
            },
            fc_width: 100,
            dropout: 0.3,
            lr: 1e-3,
            epochs: 200,
            batch_size: 256,
            window_frames: None,
        }
    }
}

impl ClassifierConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.conv1.filters == 0 || self.conv2.filters == 0 || self.fc_width == 0 {
            return bad("layer widths must be >= 1");
        }
        let k = [self.conv1.kernel, self.conv2.kernel, self.conv1.pool, self.conv2.pool];
        if k.iter().any(|(a, b)| *a == 0 || *b == 0) {
            return bad("kernel and pool sizes must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return bad("batch_size must be >= 1 and lr > 0");
        }
        if self.window_frames == Some(0) {
            return bad("window_frames must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub config: ClassifierConfig,
    pub classes: Vec<String>,
    pub window_frames: usize,
    pub input_dim: usize,
    pub stats: FeatureStats,
    pub net: Cnn,
}

/// Window offsets covering `t` frames: a non-overlapping tiling plus one
/// end-aligned window when `t` is not a multiple of `w`.
fn window_offsets(t: usize, w: usize) -> Vec<usize> {
    let mut offs: Vec<usize> = (0..=t - w).step_by(w).collect();
    if t % w != 0 {
        offs.push(t - w);
    }
    offs
}

impl ClassifierModel {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    fn windows(&self, f: &FeatureSequence) -> Result<Vec<Array2<f64>>> {
        if f.dim() != self.input_dim {
            return Err(Error::shape(
                format!("D={}", self.input_dim),
                format!("D={}", f.dim()),
            ));
        }
        if f.num_frames() < self.window_frames {
            return Err(Error::shape(
                format!("at least {} frames", self.window_frames),
                f.num_frames(),
            ));
        }
        let x = self.stats.normalize(&f.frames);
        Ok(window_offsets(f.num_frames(), self.window_frames)
            .into_iter()
            .map(|o| x.slice(s![o..o + self.window_frames, ..]).to_owned())
            .collect())
    }

    /// Per-window logits, `[windows x classes]`.
    pub fn window_logits(&self, f: &FeatureSequence) -> Result<Array2<f64>> {
        let wins = self.windows(f)?;
        let mut out = Array2::zeros((wins.len(), self.num_classes()));
        for (i, w) in wins.iter().enumerate() {
            let (l, _) = self.net.forward(w, None);
            out.row_mut(i).assign(&l.row(0));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, CHECKPOINT_FORMAT, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(path, CHECKPOINT_FORMAT)
    }
}

/// Normalised class probabilities from raw scores.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let a = Array2::from_shape_vec((1, scores.len()), scores.to_vec()).unwrap();
    softmax_rows(&a).row(0).to_vec()
}

pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Sequence-level class probabilities: the mean of per-window softmax
/// outputs.
pub fn predict(model: &ClassifierModel, f: &FeatureSequence) -> Result<Vec<f64>> {
    let probs = softmax_rows(&model.window_logits(f)?);
    Ok(probs.mean_axis(ndarray::Axis(0)).unwrap().to_vec())
}

/// Trains the classifier; returns the model and the mean training loss of
/// every epoch.
pub fn train_classifier(
    train: &[FeatureSequence],
    cfg: &ClassifierConfig,
    seed_value: u64,
) -> Result<(ClassifierModel, Vec<f64>)> {
    cfg.validate()?;
    let first = train.first().ok_or(Error::Empty("training corpus"))?;
    let d = first.dim();
    if let Some(bad) = train.iter().find(|f| f.dim() != d) {
        return Err(Error::shape(format!("D={d}"), format!("D={}", bad.dim())));
    }
    let classes = if cfg.classes.is_empty() {
        let mut c: Vec<String> = train.iter().map(|f| f.scene_label.clone()).collect();
        c.sort();
        c.dedup();
        c
    } else {
        cfg.classes.clone()
    };
    if classes.len() < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }
    let min_t = train.iter().map(|f| f.num_frames()).min().unwrap();
    let window_frames = cfg.window_frames.unwrap_or(min_t);
    let mut init_rng = seed::rng(seed::derive(seed_value, &[0]));
    let net = Cnn::new(
        (window_frames, d),
        &cfg.conv1,
        &cfg.conv2,
        cfg.fc_width,
        classes.len(),
        &mut init_rng,
    );
    let mut model = ClassifierModel {
        config: cfg.clone(),
        classes,
        window_frames,
        input_dim: d,
        stats: FeatureStats::compute(train)?,
        net,
    };

    let mut examples: Vec<(Array2<f64>, usize)> = Vec::new();
    for f in train {
        let label = model.class_index(&f.scene_label)?;
        for w in model.windows(f)? {
            examples.push((w, label));
        }
    }

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = seed::rng(seed::derive(seed_value, &[1]));
    let mut dropout_rng = seed::rng(seed::derive(seed_value, &[2]));
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad = model.net.zeros_like();
            for &i in chunk {
                let (x, y) = &examples[i];
                let (logits, trace) = model.net.forward(x, Some((cfg.dropout, &mut dropout_rng)));
                let mut d = softmax_rows(&logits);
                total -= d[[0, *y]].max(1e-300).ln();
                d[[0, *y]] -= 1.0;
                d /= chunk.len() as f64;
                model.net.backward(&trace, &d, &mut grad);
            }
            opt.step(&mut model.net, &grad);
        }
        let mean = total / examples.len() as f64;
        if !mean.is_finite() || !model.net.all_finite() {
            return Err(Error::Divergence { step: losses.len() });
        }
        losses.push(mean);
    }
    Ok((model, losses))
}

/// Evaluates on a labelled test corpus; devices with no items are omitted.
pub fn evaluate(
    model: &ClassifierModel,
    test: &[FeatureSequence],
    source_device: &str,
    target_devices: &[String],
) -> Result<EvalReport> {
    let records = test
        .iter()
        .map(|f| {
            let t = model.class_index(&f.scene_label)?;
            let p = argmax(&predict(model, f)?);
            Ok((f.device_id.clone(), t, p))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_predictions(
        &model.classes,
        &records,
        source_device,
        target_devices,
    ))
}

/// Probabilities for a batch of sequences, `[N x classes]`.
pub fn predict_batch(model: &ClassifierModel, seqs: &[FeatureSequence]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((seqs.len(), model.num_classes()));
    for (i, f) in seqs.iter().enumerate() {
        out.row_mut(i).assign(&Array1::from(predict(model, f)?));
    }
    Ok(out)
}
