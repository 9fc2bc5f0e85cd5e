mod common;

use common::*;
use couple_core::encoder::{EncoderSpec, Identity};
use couple_core::hashmodel::train::{batch_objective, BatchInputs, LossWeights};
use couple_core::hashmodel::{loss_margin, loss_source, loss_target_consistency, ConsistencyForm, HashModel};
use couple_core::matrix::Matrix;
use couple_core::mixup::{loss_manifold, loss_pixel, MixupBatch, MixupPair};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const INSTANCES: usize = 10;
const D: usize = 5;
const C: usize = 3;

fn model(seed: u64, input_dim: usize) -> HashModel {
    HashModel::new(input_dim, 7, 6, C, seed)
}

fn labels(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..C)).collect()
}

fn mix_batch(r: &mut ChaCha8Rng, n: usize, dim: usize) -> MixupBatch {
    MixupBatch {
        pairs: (0..n).map(|i| MixupPair::new(i, i, r.random_range(0.1..2.0))).collect(),
        source_rows: random_matrix(r, n, dim),
        target_rows: random_matrix(r, n, dim),
        source_labels: labels(r, n),
        target_labels: labels(r, n),
    }
}

fn check(name: &str, m: &HashModel, analytic: &[f64], f: impl Fn(&HashModel) -> f64) {
    let fd = finite_difference(m, f);
    let err = relative_error(analytic, &fd);
    assert!(err < TOL, "{name}: relative error {err:e}");
    assert!(fd.iter().any(|&v| v != 0.0), "{name}: zero gradient instance");
}

#[test]
fn source_cross_entropy() {
    let mut r = rng(1);
    for s in 0..INSTANCES as u64 {
        let m = model(s, D);
        let x = random_matrix(&mut r, 6, D);
        let y = labels(&mut r, 6);
        let (_, g) = loss_source(&m, &x, &y).unwrap();
        check("source", &m, &g.flat(), |p| loss_source(p, &x, &y).unwrap().0);
    }
}

#[test]
fn prototype_margin() {
    let mut found = 0;
    let mut s = 0u64;
    while found < INSTANCES {
        s += 1;
        let m = model(100 + s, D);
        let (v, g) = loss_margin(&m).unwrap();
        if v == 0.0 {
            continue;
        }
        check("margin", &m, &g.flat(), |p| loss_margin(p).unwrap().0);
        found += 1;
    }
}

#[test]
fn target_consistency_both_forms() {
    let mut r = rng(3);
    for form in [ConsistencyForm::Anchor, ConsistencyForm::SourcePair] {
        for s in 0..INSTANCES as u64 {
            let m = model(200 + s, D);
            let xs = random_matrix(&mut r, 6, D);
            let ys: Vec<usize> = (0..6).map(|i| i % C).collect();
            let xt = random_matrix(&mut r, 4, D);
            let yt = labels(&mut r, 4);
            let (_, g) = loss_target_consistency(&m, &xs, &ys, &xt, &yt, form).unwrap();
            check("target", &m, &g.flat(), |p| {
                loss_target_consistency(p, &xs, &ys, &xt, &yt, form).unwrap().0
            });
        }
    }
}

#[test]
fn pixel_mixup_through_nonlinear_encoder() {
    let mut r = rng(4);
    for s in 0..INSTANCES as u64 {
        let spec = EncoderSpec::RandomFeatures { dim: 4, seed: s };
        let enc = spec.build(D);
        let m = model(300 + s, 4);
        let b = mix_batch(&mut r, 5, D);
        let (_, g) = loss_pixel(&m, enc.as_ref(), &b).unwrap();
        check("pixel", &m, &g.flat(), |p| loss_pixel(p, enc.as_ref(), &b).unwrap().0);
    }
}

#[test]
fn manifold_mixup() {
    let mut r = rng(5);
    for s in 0..INSTANCES as u64 {
        let m = model(400 + s, D);
        let b = mix_batch(&mut r, 5, D);
        let (_, g) = loss_manifold(&m, &b).unwrap();
        check("manifold", &m, &g.flat(), |p| loss_manifold(p, &b).unwrap().0);
    }
}

#[test]
fn weighted_sum_of_all_terms() {
    let mut r = rng(6);
    for s in 0..INSTANCES as u64 {
        let m = model(500 + s, D);
        let xs = random_matrix(&mut r, 6, D);
        let ys: Vec<usize> = (0..6).map(|i| i % C).collect();
        let xt = random_matrix(&mut r, 4, D);
        let yt = labels(&mut r, 4);
        let raw = mix_batch(&mut r, 4, D);
        let latent = MixupBatch {
            source_rows: random_matrix(&mut r, 4, D),
            target_rows: random_matrix(&mut r, 4, D),
            ..raw.clone()
        };
        let w = LossWeights {
            source: r.random_range(0.5..1.5),
            target: r.random_range(0.5..1.5),
            mix: r.random_range(0.5..1.5),
            margin: r.random_range(0.5..1.5),
        };
        let inputs = BatchInputs {
            source_x: &xs,
            source_labels: &ys,
            target_x: &xt,
            target_pseudo: &yt,
            mix: Some((&raw, &latent)),
        };
        let f = |p: &HashModel| {
            batch_objective(p, &inputs, &w, ConsistencyForm::Anchor, &Identity)
                .unwrap()
                .0
                .total(&w)
        };
        let (_, g) = batch_objective(&m, &inputs, &w, ConsistencyForm::Anchor, &Identity).unwrap();
        check("total", &m, &g.flat(), f);
    }
}

#[test]
fn zero_weights_remove_terms() {
    let mut r = rng(7);
    let m = model(9, D);
    let xs = random_matrix(&mut r, 4, D);
    let ys = vec![0, 1, 2, 0];
    let xt = Matrix::zeros(0, D);
    let w = LossWeights {
        source: 1.0,
        target: 0.0,
        mix: 0.0,
        margin: 0.0,
    };
    let inputs = BatchInputs {
        source_x: &xs,
        source_labels: &ys,
        target_x: &xt,
        target_pseudo: &[],
        mix: None,
    };
    let (_, g) = batch_objective(&m, &inputs, &w, ConsistencyForm::Anchor, &Identity).unwrap();
    let (_, gs) = loss_source(&m, &xs, &ys).unwrap();
    assert_eq!(g.flat(), gs.flat());
}
