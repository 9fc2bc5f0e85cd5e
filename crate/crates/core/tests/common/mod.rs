//! Brute-force reference implementations shared by the oracle suites.
#![allow(dead_code)]

use couple_core::dataset::Domain;
use couple_core::diffusion::DiffusionProblem;
use couple_core::graph::CrossDomainGraph;
use couple_core::hashmodel::HashModel;
use couple_core::matrix::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Diffusion

/// Random weighted graph with `n` nodes, at least one per domain and at
/// least one edge.
pub fn random_graph(rng: &mut ChaCha8Rng, n_min: usize, n_max: usize) -> CrossDomainGraph {
    let n = rng.random_range(n_min..=n_max);
    let mut domains: Vec<Domain> = (0..n)
        .map(|_| if rng.random_bool(0.5) { Domain::Source } else { Domain::Target })
        .collect();
    domains[0] = Domain::Source;
    domains[n - 1] = Domain::Target;
    let p = rng.random_range(0.25..0.7);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random_bool(p) {
                edges.push((u, v, rng.random_range(0.05..2.0)));
            }
        }
    }
    if edges.is_empty() {
        edges.push((0, n - 1, rng.random_range(0.05..2.0)));
    }
    CrossDomainGraph::from_edges(domains, &edges).unwrap()
}

/// Dense Laplacian.
pub fn laplacian(g: &CrossDomainGraph) -> Vec<Vec<f64>> {
    let n = g.num_nodes();
    let mut l = vec![vec![0.0; n]; n];
    for (u, v, w) in g.edges() {
        l[u][u] += w;
        l[v][v] += w;
        l[u][v] -= w;
        l[v][u] -= w;
    }
    l
}

/// Accelerated projected gradient on `min xᵀLx + xᵀ(T − Δ), x ≥ 0` with a
/// dense Laplacian and adaptive restart.
pub fn qp_oracle(problem: &DiffusionProblem<'_>) -> Vec<f64> {
    let g = problem.graph();
    let n = g.num_nodes();
    let l = laplacian(g);
    let c: Vec<f64> = (0..n).map(|i| problem.capacity()[i] - problem.mass()[i]).collect();
    // Gershgorin bound on the Hessian 2L
    let lip = (0..n)
        .map(|i| 2.0 * l[i].iter().map(|v| v.abs()).sum::<f64>())
        .fold(1e-12, f64::max);
    let step = 1.0 / lip;
    let grad = |x: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| 2.0 * (0..n).map(|j| l[i][j] * x[j]).sum::<f64>() + c[i])
            .collect()
    };
    let kkt = |x: &[f64]| -> f64 {
        grad(x)
            .iter()
            .zip(x)
            .map(|(&g, &xi)| if xi > 0.0 { g.abs() } else { (-g).max(0.0) })
            .fold(0.0, f64::max)
    };
    let mut x = vec![0.0; n];
    let mut y = x.clone();
    let mut t = 1.0f64;
    for it in 0..1_000_000 {
        if it % 50 == 0 && kkt(&x) < 1e-13 {
            break;
        }
        let gy = grad(&y);
        let x_new: Vec<f64> = (0..n).map(|i| (y[i] - step * gy[i]).max(0.0)).collect();
        let step_dir: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        if step_dir.iter().all(|&d| d == 0.0) && y == x {
            break;
        }
        // gradient restart: momentum pointing uphill
        let uphill: f64 = (0..n).map(|i| (y[i] - x_new[i]) * step_dir[i]).sum();
        if uphill > 0.0 {
            t = 1.0;
            y = x_new.clone();
        } else {
            let t_new = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            y = (0..n).map(|i| x_new[i] + (t - 1.0) / t_new * step_dir[i]).collect();
            t = t_new;
        }
        x = x_new;
    }
    // least minimizer on components where Σ(T − Δ) = 0
    let comp = components(n, &g.edges());
    for id in 0..n {
        let members: Vec<usize> = (0..n).filter(|&i| comp[i] == id).collect();
        if members.is_empty() {
            continue;
        }
        let slope: f64 = members.iter().map(|&i| c[i]).sum();
        let cap: f64 = members.iter().map(|&i| problem.capacity()[i]).sum();
        if slope.abs() <= 1e-9 * cap {
            let low = members.iter().map(|&i| x[i]).fold(f64::INFINITY, f64::min);
            for &i in &members {
                x[i] -= low;
            }
        }
    }
    x
}

/// Component id per node (smallest member id) by repeated label relaxation.
pub fn components(n: usize, edges: &[(usize, usize, f64)]) -> Vec<usize> {
    let mut label: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for &(u, v, _) in edges {
            let m = label[u].min(label[v]);
            if label[u] != m || label[v] != m {
                label[u] = m;
                label[v] = m;
                changed = true;
            }
        }
        if !changed {
            return label;
        }
    }
}

pub fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Copy of `g` with every weight multiplied by `c`.
pub fn scaled_graph(g: &CrossDomainGraph, c: f64) -> CrossDomainGraph {
    let edges: Vec<(usize, usize, f64)> = g.edges().into_iter().map(|(u, v, w)| (u, v, w * c)).collect();
    CrossDomainGraph::from_edges(g.node_domains().to_vec(), &edges).unwrap()
}

// ---------------------------------------------------------------------------
// Gradients

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` over every model parameter.
pub fn finite_difference(model: &HashModel, f: impl Fn(&HashModel) -> f64) -> Vec<f64> {
    let base = model.flat_params();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut p = base.clone();
    for i in 0..base.len() {
        p[i] = base[i] + FD_STEP;
        probe.set_flat_params(&p);
        let up = f(&probe);
        p[i] = base[i] - FD_STEP;
        probe.set_flat_params(&p);
        let down = f(&probe);
        p[i] = base[i];
        out.push((up - down) / (2.0 * FD_STEP));
    }
    out
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = n(a).max(n(b));
    if scale == 0.0 {
        0.0
    } else {
        n(&diff) / scale
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

// ---------------------------------------------------------------------------
// Metrics

pub fn hits_in_top(rel: &[bool], k: usize) -> usize {
    let mut h = 0;
    for item in rel.iter().take(k) {
        if *item {
            h += 1;
        }
    }
    h
}

/// `AP = (1/R) Σ_k rel_k · P@k` with every `P@k` counted from scratch.
pub fn ap_oracle(rel: &[bool]) -> Option<f64> {
    let total = hits_in_top(rel, rel.len());
    if total == 0 {
        return None;
    }
    let mut sum = 0.0;
    for k in 1..=rel.len() {
        if rel[k - 1] {
            sum += hits_in_top(rel, k) as f64 / k as f64;
        }
    }
    Some(sum / total as f64)
}

pub fn precision_oracle(rel: &[bool], k: usize) -> f64 {
    let k = k.min(rel.len());
    if k == 0 {
        0.0
    } else {
        hits_in_top(rel, k) as f64 / k as f64
    }
}

pub fn recall_oracle(rel: &[bool], k: usize) -> f64 {
    let total = hits_in_top(rel, rel.len());
    if total == 0 {
        0.0
    } else {
        hits_in_top(rel, k.min(rel.len())) as f64 / total as f64
    }
}

pub fn random_ranking(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<bool> {
    let n = rng.random_range(1..=max_len);
    let p = rng.random_range(0.0..1.0);
    (0..n).map(|_| rng.random_bool(p)).collect()
}

// ---------------------------------------------------------------------------
// Retrieval

/// ±1 code matrix.
pub fn random_codes(rng: &mut ChaCha8Rng, n: usize, l: usize) -> Matrix {
    Matrix::from_vec(
        n,
        l,
        (0..n * l).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect(),
    )
}

/// Full ranking by `(L − ⟨q, b⟩) / 2` in floating point, ties to lower row.
pub fn hamming_oracle(db: &Matrix, q: &[f64]) -> Vec<(usize, u32)> {
    let l = db.cols() as f64;
    let mut out: Vec<(usize, u32)> = (0..db.rows())
        .map(|i| {
            let ip: f64 = db.row(i).iter().zip(q).map(|(a, b)| a * b).sum();
            (i, ((l - ip) / 2.0) as u32)
        })
        .collect();
    out.sort_by_key(|&(i, d)| (d, i));
    out
}

// ---------------------------------------------------------------------------
// Graphs

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        d / (na * nb)
    }
}

/// k nearest by cosine via a full sort.
pub fn knn_oracle(query: &Matrix, base: &Matrix, k: usize, exclude_self: bool) -> Vec<Vec<(usize, f64)>> {
    (0..query.rows())
        .map(|qi| {
            let mut all: Vec<(usize, f64)> = (0..base.rows())
                .filter(|&bi| !(exclude_self && bi == qi))
                .map(|bi| (bi, cos(query.row(qi), base.row(bi))))
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            all.truncate(k);
            all
        })
        .collect()
}

/// Edge list `(u, v, w)` with `u < v` of the cross-domain relationship graph.
pub fn mnn_graph_oracle(source: &Matrix, labels: &[usize], target: &Matrix, k: usize) -> Vec<(usize, usize, f64)> {
    let ns = source.rows();
    let nt = target.rows();
    let mut edges = Vec::new();
    let t2s = knn_oracle(target, source, k.min(ns), false);
    let s2t = knn_oracle(source, target, k.min(nt), false);
    for j in 0..nt {
        for &(i, w) in &t2s[j] {
            if s2t[i].iter().any(|&(jj, _)| jj == j) {
                edges.push((i, ns + j, w.max(0.0)));
            }
        }
    }
    for i in 0..ns {
        for j in (i + 1)..ns {
            if labels[i] == labels[j] {
                edges.push((i, j, 1.0));
            }
        }
    }
    if nt > 1 {
        let t2t = knn_oracle(target, target, k.min(nt - 1), true);
        for a in 0..nt {
            for &(b, w) in &t2t[a] {
                if a < b && t2t[b].iter().any(|&(x, _)| x == a) {
                    edges.push((ns + a, ns + b, w.max(0.0)));
                }
            }
        }
    }
    edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    edges
}
