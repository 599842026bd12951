use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::infer::mu2_posterior_mean;
use super::model::FhvaeModel;
use super::objective::{draw_noise, evaluate, Batch, ElboParts};
use crate::error::{Error, Result};
use crate::features::{segment_sequence, FeatureSequence, FeatureStats, Segment};
use crate::nn::{clip_grad_norm, Adam, AdamConfig};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub elbo: f64,
    pub recon: f64,
    pub kl_z1: f64,
    pub kl_z2: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<TrainLogEntry>,
}

impl TrainingLog {
    /// Mean elbo over the first and last `window` steps.
    pub fn smoothed_ends(&self, window: usize) -> (f64, f64) {
        let n = self.entries.len();
        let w = window.min(n / 2).max(1);
        let avg = |es: &[TrainLogEntry]| es.iter().map(|e| e.elbo).sum::<f64>() / es.len() as f64;
        (avg(&self.entries[..w]), avg(&self.entries[n - w..]))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Flattened training segments grouped by sequence.
struct SegmentTable {
    x: Array2<f64>,
    /// Row range of every sequence.
    ranges: Vec<std::ops::Range<usize>>,
    ids: Vec<String>,
}

impl SegmentTable {
    fn build(model: &FhvaeModel, corpus: &[FeatureSequence]) -> Result<Self> {
        let cfg = &model.config;
        let mut all: Vec<Segment> = Vec::new();
        let mut ranges = Vec::with_capacity(corpus.len());
        for f in corpus {
            let segs = segment_sequence(f, cfg.seg_len, cfg.seg_hop)?;
            let start = all.len();
            all.extend(segs);
            ranges.push(start..all.len());
        }
        Ok(SegmentTable {
            x: model.segments_to_input(&all)?,
            ranges,
            ids: corpus.iter().map(|f| f.seq_id.clone()).collect(),
        })
    }

    fn rows(&self, idx: &[usize]) -> Array2<f64> {
        self.x.select(ndarray::Axis(0), idx)
    }
}

/// Trains an FHVAE on `corpus` with hierarchical sampling.
///
/// The corpus is visited as a shuffled stream of sequences. Each group of
/// `seq_cache_size` sequences forms a cache: its mu2 values are initialised in
/// closed form from the current encoder, then `steps_per_cache` mini-batches
/// of segments drawn from the cache update the networks and the cached mu2
/// jointly. Only frames and seq_ids are read; scene and device labels are
/// never touched.
pub fn train_fhvae(
    corpus: &[FeatureSequence],
    cfg: &super::FhvaeConfig,
    seed_value: u64,
) -> Result<(FhvaeModel, TrainingLog)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let stats = FeatureStats::compute(corpus)?;
    let mut init_rng = seed::rng(seed::derive(seed_value, &[0]));
    let mut model = FhvaeModel::init(cfg.clone(), stats, &mut init_rng)?;
    let table = SegmentTable::build(&model, corpus)?;

    let mut sample_rng = seed::rng(seed::derive(seed_value, &[1]));
    let mut noise_rng = seed::rng(seed::derive(seed_value, &[2]));
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let k = cfg.seq_cache_size.min(corpus.len());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut log = TrainingLog::default();
    let mut step = 0;

    while step < cfg.steps {
        // fill the cache with the next k sequences of the shuffled stream
        let mut cache = Vec::with_capacity(k);
        while cache.len() < k {
            if cursor == order.len() {
                order.shuffle(&mut sample_rng);
                cursor = 0;
            }
            cache.push(order[cursor]);
            cursor += 1;
        }
        let n_segments: Vec<usize> = cache.iter().map(|&s| table.ranges[s].len()).collect();
        let mut mu2 = Array2::<f64>::zeros((k, cfg.dim_z2));
        for (j, &s) in cache.iter().enumerate() {
            let rows: Vec<usize> = table.ranges[s].clone().collect();
            let (m2, _) = model.z2_posterior(&table.rows(&rows));
            mu2.row_mut(j).assign(&mu2_posterior_mean(&m2, cfg)?);
        }
        // (segment row, cache slot) pairs to draw batches from
        let pool: Vec<(usize, usize)> = cache
            .iter()
            .enumerate()
            .flat_map(|(j, &s)| table.ranges[s].clone().map(move |r| (r, j)))
            .collect();
        let mut mu_opt = Adam::new(AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        });

        for _ in 0..cfg.steps_per_cache {
            if step >= cfg.steps {
                break;
            }
            let picks: Vec<(usize, usize)> = (0..cfg.batch_size)
                .map(|_| pool[sample_rng.random_range(0..pool.len())])
                .collect();
            let rows: Vec<usize> = picks.iter().map(|p| p.0).collect();
            let seq: Vec<usize> = picks.iter().map(|p| p.1).collect();
            let x = table.rows(&rows);
            let eps_z1 = draw_noise(&mut noise_rng, rows.len(), cfg.dim_z1);
            let eps_z2 = draw_noise(&mut noise_rng, rows.len(), cfg.dim_z2);
            let batch = Batch {
                x: &x,
                seq: &seq,
                mu2: &mu2,
                n_segments: &n_segments,
                eps_z1: &eps_z1,
                eps_z2: &eps_z2,
            };
            let (stats, grads) = evaluate(&model.nets, cfg, &batch, cfg.disc_weight, true);
            let mut grads = grads.expect("gradients requested");
            if !stats.objective(cfg.disc_weight).is_finite() || !model_grads_finite(&grads) {
                return Err(Error::Divergence { step });
            }
            if let Some(max) = cfg.clip_norm {
                clip_grad_norm(&mut grads.nets, max);
            }
            opt.step(&mut model.nets, &grads.nets);
            mu_opt.step_slices(
                vec![mu2.as_slice_mut().unwrap()],
                vec![grads.mu2.as_slice().unwrap()],
            );
            log.entries.push(TrainLogEntry {
                step,
                elbo: stats.parts.elbo(),
                recon: stats.parts.recon,
                kl_z1: stats.parts.kl_z1,
                kl_z2: stats.parts.kl_z2,
            });
            step += 1;
        }
        for (j, &s) in cache.iter().enumerate() {
            model
                .mu2_table
                .insert(table.ids[s].clone(), mu2.row(j).to_vec());
        }
    }

    // sequences never cached (tiny step budgets) get the closed-form value
    for (s, id) in table.ids.iter().enumerate() {
        if !model.mu2_table.contains_key(id) {
            let rows: Vec<usize> = table.ranges[s].clone().collect();
            let (m2, _) = model.z2_posterior(&table.rows(&rows));
            model
                .mu2_table
                .insert(id.clone(), mu2_posterior_mean(&m2, cfg)?.to_vec());
        }
    }
    if !crate::nn::Params::all_finite(&model.nets) {
        return Err(Error::Divergence { step });
    }
    Ok((model, log))
}

fn model_grads_finite(g: &super::objective::Gradients) -> bool {
    crate::nn::Params::all_finite(&g.nets) && g.mu2.iter().all(|v| v.is_finite())
}

/// Single-sample bound of one segment given its sequence's mu2 and segment
/// count. `seed` drives the reparameterization noise.
pub fn segment_elbo(
    x: &Segment,
    model: &FhvaeModel,
    mu2_tilde: &[f64],
    n_segments: usize,
    seed_value: u64,
) -> Result<(f64, ElboParts)> {
    let cfg = &model.config;
    if mu2_tilde.len() != cfg.dim_z2 {
        return Err(Error::shape(format!("mu2 of length {}", cfg.dim_z2), mu2_tilde.len()));
    }
    if n_segments == 0 {
        return Err(Error::InvalidArgument("n_segments must be >= 1".into()));
    }
    let input = model.segments_to_input(std::slice::from_ref(x))?;
    let mut rng = seed::rng(seed_value);
    let eps_z1 = draw_noise(&mut rng, 1, cfg.dim_z1);
    let eps_z2 = draw_noise(&mut rng, 1, cfg.dim_z2);
    let mu2 = Array1::from(mu2_tilde.to_vec()).insert_axis(ndarray::Axis(0));
    let batch = Batch {
        x: &input,
        seq: &[0],
        mu2: &mu2,
        n_segments: &[n_segments],
        eps_z1: &eps_z1,
        eps_z2: &eps_z2,
    };
    let (stats, _) = evaluate(&model.nets, cfg, &batch, 0.0, false);
    stats.parts.check_finite()?;
    Ok((stats.parts.elbo(), stats.parts))
}
