//! Properties of a trained toy FHVAE on a small synthetic benchmark.

mod common;

use common::{band_means, l2, of_device, toy, toy_fhvae_config, toy_specs};
use devshift::classifier::{self, ClassifierConfig, ConvSpec};
use devshift::conversion::{self, ConversionPlan};
use devshift::features::segment_sequence;
use devshift::fhvae::{self, infer_mu2_domain, FhvaeConfig};
use devshift::latents::{collect_latents, pca_project};
use devshift::probe::{linear_probe_cv, ProbeConfig};
use devshift::synthbench::{device_probe, generate_corpus};
use ndarray::{Array2, Axis};

#[test]
fn training_improves_the_bound() {
    let (start, end) = toy().log.smoothed_ends(100);
    assert!(end > start, "elbo {start} -> {end}");
}

#[test]
fn training_without_the_discriminative_term() {
    let t = toy();
    let cfg = FhvaeConfig { disc_weight: 0.0, steps: 400, ..toy_fhvae_config() };
    let (_, log) = fhvae::train_fhvae(&t.bench.train, &cfg, 1).unwrap();
    let (start, end) = log.smoothed_ends(50);
    assert!(end > start, "elbo {start} -> {end}");
}

#[test]
fn training_is_reproducible() {
    let t = toy();
    let cfg = FhvaeConfig { steps: 60, ..toy_fhvae_config() };
    let (a, la) = fhvae::train_fhvae(&t.bench.train, &cfg, 9).unwrap();
    let (b, lb) = fhvae::train_fhvae(&t.bench.train, &cfg, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(la.entries, lb.entries);
    let (c, _) = fhvae::train_fhvae(&t.bench.train, &cfg, 10).unwrap();
    assert_ne!(a.nets, c.nets);
}

#[test]
fn device_domains_are_far_apart_in_mu2() {
    // two devices recording one scene without level jitter, so the device
    // is the only sequence-level factor; 20 segments per sequence keep the
    // mu2 estimates tight
    let mut specs = toy_specs();
    specs.scenes[0].level_jitter = 0.0;
    let corpus =
        generate_corpus(&specs.scenes[..1], &specs.devices[..2], &[vec![30], vec![30]], 200, 5, "two").unwrap();
    let (model, _) = fhvae::train_fhvae(&corpus, &toy_fhvae_config(), 5).unwrap();
    let mu = |dev: &str| -> Vec<Vec<f64>> {
        of_device(&corpus, dev)
            .iter()
            .map(|f| fhvae::infer_mu2_for(f, &model).unwrap().mu2_tilde)
            .collect()
    };
    let (a, b) = (mu("A"), mu("B"));
    let mean = |v: &[Vec<f64>]| -> Vec<f64> {
        (0..v[0].len()).map(|d| v.iter().map(|r| r[d]).sum::<f64>() / v.len() as f64).collect()
    };
    let norm_std = |v: &[Vec<f64>]| -> f64 {
        let n: Vec<f64> = v.iter().map(|r| l2(r, &vec![0.0; r.len()])).collect();
        let m = n.iter().sum::<f64>() / n.len() as f64;
        (n.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n.len() as f64).sqrt()
    };
    let between = l2(&mean(&a), &mean(&b));
    let within = norm_std(&a).max(norm_std(&b));
    assert!(between > 5.0 * within, "between {between:.3} within {within:.3}");
}

#[test]
fn conversion_moves_spectrum_toward_target_device() {
    let t = toy();
    let target = infer_mu2_domain(&of_device(&t.bench.train, "A"), &t.model).unwrap();
    let plan = ConversionPlan::new("deviceA", target.clone()).unwrap();
    let refs = of_device(&t.bench.test, "A");
    let (mut before, mut after) = (0.0, 0.0);
    let (mut closer_mu2, mut n) = (0, 0);
    for f in of_device(&t.bench.test, "B") {
        let same: Vec<_> = refs.iter().filter(|r| r.scene_label == f.scene_label).collect();
        let mut centroid = vec![0.0; f.dim()];
        for r in &same {
            for (c, v) in centroid.iter_mut().zip(band_means(r)) {
                *c += v / same.len() as f64;
            }
        }
        let conv = conversion::convert_sequence(&f, &t.model, &plan).unwrap();
        assert_eq!((conv.seq_id.as_str(), conv.device_id.as_str()), (f.seq_id.as_str(), "B"));
        before += l2(&band_means(&f), &centroid);
        after += l2(&band_means(&conv), &centroid);
        let src = conversion::source_mu2(&f, &t.model).unwrap();
        let re = conversion::source_mu2(&conv, &t.model).unwrap();
        closer_mu2 += usize::from(l2(&re, &target) < l2(&src, &target));
        n += 1;
    }
    assert!(after < before, "spectrum distance {before:.3} -> {after:.3}");
    assert!(closer_mu2 * 10 >= n * 9, "{closer_mu2}/{n} sequences moved toward the target");
}

#[test]
fn shift_composition_moves_toward_second_target() {
    let t = toy();
    let t1 = infer_mu2_domain(&of_device(&t.bench.train, "A"), &t.model).unwrap();
    let t2 = infer_mu2_domain(&of_device(&t.bench.train, "C"), &t.model).unwrap();
    let p1 = ConversionPlan::new("A", t1).unwrap();
    let p2 = ConversionPlan::new("C", t2.clone()).unwrap();
    let (mut d1, mut d2) = (0.0, 0.0);
    for f in of_device(&t.bench.test, "B") {
        let once = conversion::convert_sequence(&f, &t.model, &p1).unwrap();
        let twice = conversion::convert_sequence(&once, &t.model, &p2).unwrap();
        d1 += l2(&conversion::source_mu2(&once, &t.model).unwrap(), &t2);
        d2 += l2(&conversion::source_mu2(&twice, &t.model).unwrap(), &t2);
    }
    assert!(d2 < d1, "{d1:.3} -> {d2:.3}");
}

#[test]
fn conversion_is_deterministic() {
    let t = toy();
    let plan = ConversionPlan::new("x", vec![0.5; 4]).unwrap();
    let a = conversion::convert_corpus(&t.bench.test[..5], &t.model, &plan).unwrap();
    let b = conversion::convert_corpus(&t.bench.test[..5], &t.model, &plan).unwrap();
    assert_eq!(a, b);
}

#[test]
fn z1_features_carry_scene_information() {
    let t = toy();
    let z = conversion::extract_z1_corpus(&t.bench.train, &t.model).unwrap();
    assert!(z.iter().all(|f| f.frames.dim() == (6, 4)));
    let rows: Vec<f64> = z.iter().flat_map(|f| f.frames.iter().copied()).collect();
    let x = Array2::from_shape_vec((rows.len() / 4, 4), rows).unwrap();
    let labels: Vec<String> = z.iter().flat_map(|f| std::iter::repeat_n(f.scene_label.clone(), 6)).collect();
    let acc = linear_probe_cv(&x, &labels, &ProbeConfig::default()).unwrap();
    assert!(acc > 1.0 / 3.0 + 0.05, "scene probe on z1 {acc:.3}");
}

#[test]
fn z2_is_the_device_latent() {
    let t = toy();
    let lat = collect_latents(&t.model, &t.bench.train).unwrap();
    let p1 = device_probe(&lat.z1, &lat.device_ids).unwrap();
    let p2 = device_probe(&lat.z2, &lat.device_ids).unwrap();
    assert!(p2 > p1, "probe z1 {p1:.3} z2 {p2:.3}");

    // between-device centroid spread in the 2-D projections
    let spread = |x: &Array2<f64>| -> f64 {
        let p = pca_project(x, 2).unwrap();
        let cents: Vec<Vec<f64>> = ["A", "B", "C"]
            .iter()
            .map(|d| {
                let idx: Vec<usize> = (0..lat.len()).filter(|&i| lat.device_ids[i] == *d).collect();
                p.select(Axis(0), &idx).mean_axis(Axis(0)).unwrap().to_vec()
            })
            .collect();
        let mut s = 0.0;
        for i in 0..3 {
            for j in i + 1..3 {
                s += l2(&cents[i], &cents[j]);
            }
        }
        s
    };
    let (s1, s2) = (spread(&lat.z1), spread(&lat.z2));
    assert!(s2 > s1, "centroid spread z1 {s1:.3} z2 {s2:.3}");
}

#[test]
fn classifier_fits_the_toy_scenes() {
    let t = toy();
    let cfg = ClassifierConfig {
        conv1: ConvSpec { filters: 4, kernel: (3, 3), pool: (2, 2) },
        conv2: ConvSpec { filters: 8, kernel: (3, 3), pool: (2, 100) },
        fc_width: 16,
        epochs: 100,
        batch_size: 16,
        ..Default::default()
    };
    let (model, losses) = classifier::train_classifier(&t.bench.train, &cfg, 0).unwrap();
    assert!(losses.last() < losses.first());
    let report = classifier::evaluate(&model, &t.bench.train, "A", &["B".into(), "C".into()]).unwrap();
    let hits: u64 = report.per_device.values().map(|d| (0..3).map(|k| d.confusion[k][k]).sum::<u64>()).sum();
    let total: u64 = report.per_device.values().map(|d| d.confusion.iter().flatten().sum::<u64>()).sum();
    assert!(hits as f64 / total as f64 > 0.9, "train accuracy {hits}/{total}");
}

#[test]
fn reconstruction_beats_the_mean_frame() {
    let t = toy();
    let seqs = &t.bench.test;
    let d = seqs[0].dim();
    let mut mean = vec![0.0; d];
    let n: usize = seqs.iter().map(|f| f.frames.nrows()).sum();
    for f in seqs {
        for row in f.frames.rows() {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
        }
    }
    let (mut rec_err, mut mean_err, mut count) = (0.0, 0.0, 0usize);
    for f in seqs {
        let rec = conversion::reconstruct_sequence(f, &t.model).unwrap();
        for (r, x) in rec.frames.rows().into_iter().zip(f.frames.rows()) {
            for ((a, b), m) in r.iter().zip(x).zip(&mean) {
                rec_err += (a - b).powi(2);
                mean_err += (m - b).powi(2);
                count += 1;
            }
        }
    }
    let (rec_err, mean_err) = (rec_err / count as f64, mean_err / count as f64);
    assert!(rec_err < mean_err, "reconstruction mse {rec_err:.4}, mean-frame mse {mean_err:.4}");
}

#[test]
fn z1_encoder_depends_on_z2() {
    let t = toy();
    let seg = &segment_sequence(&t.bench.test[0], 10, 10).unwrap()[0];
    let z2 = t.model.encode_z2(seg).unwrap().mean.to_vec();
    let base = t.model.encode_z1(seg, &z2).unwrap().mean;
    for k in 0..z2.len() {
        let mut moved = z2.clone();
        moved[k] += 1e-3;
        let diff = (&t.model.encode_z1(seg, &moved).unwrap().mean - &base).mapv(f64::abs).sum();
        assert!(diff > 0.0, "z1 posterior ignores z2[{k}]");
    }
}
