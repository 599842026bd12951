//! Per-segment latent export with a 2-D principal-component projection of
//! each latent, for plotting.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::features::{segment_sequence, FeatureSequence};
use crate::fhvae::FhvaeModel;

/// Posterior means of every segment of a corpus, row-aligned with the
/// metadata vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTable {
    pub seq_ids: Vec<String>,
    pub scene_labels: Vec<String>,
    pub device_ids: Vec<String>,
    pub z1: Array2<f64>,
    pub z2: Array2<f64>,
}

impl LatentTable {
    pub fn len(&self) -> usize {
        self.seq_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq_ids.is_empty()
    }
}

/// Encodes every segment (training geometry) of `corpus`.
pub fn collect_latents(model: &FhvaeModel, corpus: &[FeatureSequence]) -> Result<LatentTable> {
    let cfg = &model.config;
    let mut t = LatentTable {
        seq_ids: Vec::new(),
        scene_labels: Vec::new(),
        device_ids: Vec::new(),
        z1: Array2::zeros((0, cfg.dim_z1)),
        z2: Array2::zeros((0, cfg.dim_z2)),
    };
    for f in corpus {
        let segs = segment_sequence(f, cfg.seg_len, cfg.seg_hop)?;
        let x = model.segments_to_input(&segs)?;
        let (z2, _) = model.z2_posterior(&x);
        let (z1, _) = model.z1_posterior(&x, &z2);
        for _ in 0..segs.len() {
            t.seq_ids.push(f.seq_id.clone());
            t.scene_labels.push(f.scene_label.clone());
            t.device_ids.push(f.device_id.clone());
        }
        t.z1.append(Axis(0), z1.view()).expect("column counts agree");
        t.z2.append(Axis(0), z2.view()).expect("column counts agree");
    }
    Ok(t)
}

/// Projects the rows of `x` onto their top `k` principal axes. Each axis is
/// signed so that its largest-magnitude loading is positive.
pub fn pca_project(x: &Array2<f64>, k: usize) -> Result<Array2<f64>> {
    let (n, d) = x.dim();
    if n == 0 {
        return Err(Error::Empty("latent rows"));
    }
    if k > d {
        return Err(Error::InvalidArgument(format!("{k} components from {d} dims")));
    }
    let mean = x.mean_axis(Axis(0)).unwrap();
    let centred = x - &mean;
    let cov = centred.t().dot(&centred) / n as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Array2::zeros((d, k));
    for (c, &i) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(i);
        let pivot = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            axes[[r, c]] = sign * v[r];
        }
    }
    // row by row, so equal rows give bit-equal projections
    Ok(Array2::from_shape_fn((n, k), |(i, c)| {
        centred.row(i).iter().zip(axes.column(c)).map(|(a, b)| a * b).sum()
    }))
}

/// Writes `seq_id,scene_label,device_id,z1_0..,z2_0..,z1_pc1,z1_pc2,z2_pc1,z2_pc2`,
/// one row per segment. Returns the number of rows.
pub fn export_latents(model: &FhvaeModel, corpus: &[FeatureSequence], out: &Path) -> Result<usize> {
    let t = collect_latents(model, corpus)?;
    let (p1, p2) = if t.is_empty() {
        (Array2::zeros((0, 2)), Array2::zeros((0, 2)))
    } else {
        (pca_project(&t.z1, 2)?, pca_project(&t.z2, 2)?)
    };
    let mut w = csv::Writer::from_path(out).map_err(|e| Error::format(out, e.to_string()))?;
    let mut header: Vec<String> = vec!["seq_id".into(), "scene_label".into(), "device_id".into()];
    header.extend((0..t.z1.ncols()).map(|i| format!("z1_{i}")));
    header.extend((0..t.z2.ncols()).map(|i| format!("z2_{i}")));
    header.extend(["z1_pc1", "z1_pc2", "z2_pc1", "z2_pc2"].map(String::from));
    w.write_record(&header)?;
    for i in 0..t.len() {
        let mut rec = vec![
            t.seq_ids[i].clone(),
            t.scene_labels[i].clone(),
            t.device_ids[i].clone(),
        ];
        rec.extend(t.z1.row(i).iter().map(|v| v.to_string()));
        rec.extend(t.z2.row(i).iter().map(|v| v.to_string()));
        rec.extend(p1.row(i).iter().chain(p2.row(i).iter()).map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(t.len())
}
