//! Browser demo: diffusion on a small shifted benchmark, a trained session
//! comparing warm-up and adapted retrieval, and Hamming queries against it.
//!
//! The plain Rust API is usable natively; the `wasm_bindgen` exports wrap it
//! and exchange JSON strings with the page.

use couple_core::config::{DataSource, RunConfig};
use couple_core::dataset::{make_synthetic, SyntheticParams};
use couple_core::diffusion::{init_problem, select_confident, solve, DEFAULT_MAX_SWEEPS, DEFAULT_TOLERANCE};
use couple_core::graph::{build_mnn_graph_from, knn};
use couple_core::index::BinaryCodeIndex;
use couple_core::matrix::Matrix;
use couple_core::pipeline::{prepare_data, run};
use couple_core::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Clone, Debug, Serialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub source: bool,
    pub label: usize,
    pub mass: f64,
    pub confident: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiffusionView {
    pub points: Vec<Point>,
    /// Cross-domain edges only.
    pub edges: Vec<(usize, usize, f64)>,
    pub iterations: usize,
    pub confident: usize,
    /// Share of targets whose nearest source carries the right label.
    pub nn_accuracy_all: f64,
    /// The same share inside the confident set.
    pub nn_accuracy_confident: f64,
}

fn centered(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for j in 0..m.cols() {
        let mean = (0..m.rows()).map(|i| m.get(i, j)).sum::<f64>() / m.rows() as f64;
        for i in 0..m.rows() {
            out.set(i, j, m.get(i, j) - mean);
        }
    }
    out
}

/// Leading principal direction by power iteration, deflating `previous`.
fn principal_axis(m: &Matrix, previous: Option<&[f64]>) -> Vec<f64> {
    let d = m.cols();
    let mut v: Vec<f64> = (0..d).map(|j| 1.0 + j as f64 * 0.01).collect();
    for _ in 0..100 {
        let proj: Vec<f64> = m.iter_rows().map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let mut next = vec![0.0; d];
        for (r, p) in m.iter_rows().zip(&proj) {
            for (n, a) in next.iter_mut().zip(r) {
                *n += a * p;
            }
        }
        if let Some(u) = previous {
            let dot: f64 = next.iter().zip(u).map(|(a, b)| a * b).sum();
            next.iter_mut().zip(u).for_each(|(n, b)| *n -= dot * b);
        }
        let norm = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        v = next.into_iter().map(|a| a / norm).collect();
    }
    v
}

/// 2-D PCA coordinates of the stacked rows.
fn project(rows: &Matrix) -> Vec<(f64, f64)> {
    let c = centered(rows);
    let a = principal_axis(&c, None);
    let b = principal_axis(&c, Some(&a));
    c.iter_rows()
        .map(|r| {
            let x = r.iter().zip(&a).map(|(p, q)| p * q).sum();
            let y = r.iter().zip(&b).map(|(p, q)| p * q).sum();
            (x, y)
        })
        .collect()
}

fn stack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut data = a.as_slice().to_vec();
    data.extend_from_slice(b.as_slice());
    Matrix::from_vec(a.rows() + b.rows(), a.cols(), data)
}

/// Builds the relationship graph of a small synthetic pair, runs the flow
/// diffusion and marks the confident targets.
pub fn diffusion_view(seed: u64, n_per_domain: usize, k_mnn: usize, gamma: f64) -> Result<DiffusionView> {
    let pair = make_synthetic(&SyntheticParams {
        seed,
        n_source: n_per_domain,
        n_target: n_per_domain,
        ..SyntheticParams::default()
    })?;
    let labels = pair.source.labels()?;
    let ns = pair.source.len();
    let g = build_mnn_graph_from(&pair.source.features, labels, &pair.target.features, k_mnn)?;
    let problem = init_problem(&g)?;
    let sol = solve(&problem, DEFAULT_TOLERANCE, DEFAULT_MAX_SWEEPS)?;
    let chosen = select_confident(&sol, &g, gamma)?;

    let coords = project(&stack(&pair.source.features, &pair.target.features));
    let points = coords
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| Point {
            x,
            y,
            source: i < ns,
            label: if i < ns { labels[i] } else { pair.hidden_target_labels[i - ns] },
            mass: sol.x[i],
            confident: chosen.contains(i),
        })
        .collect();
    let edges = g
        .edges()
        .into_iter()
        .filter(|&(u, v, _)| (u < ns) != (v < ns))
        .collect();

    let nn = knn(&pair.target.features, &pair.source.features, 1)?;
    let right: Vec<bool> = nn
        .iter()
        .zip(&pair.hidden_target_labels)
        .map(|(n, &y)| labels[n[0].0] == y)
        .collect();
    let share = |ids: &mut dyn Iterator<Item = usize>| {
        let (mut hit, mut all) = (0, 0);
        for j in ids {
            all += 1;
            hit += usize::from(right[j]);
        }
        if all == 0 {
            0.0
        } else {
            hit as f64 / all as f64
        }
    };
    Ok(DiffusionView {
        points,
        edges,
        iterations: sol.iterations,
        confident: chosen.len(),
        nn_accuracy_all: share(&mut (0..right.len())),
        nn_accuracy_confident: share(&mut chosen.member_ids.iter().map(|&i| i - ns)),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SessionSummary {
    pub seed: u64,
    pub outer_rounds: usize,
    pub warmup_map: f64,
    pub adapted_map: f64,
    /// Confident-set size per adaptation round.
    pub confident_per_round: Vec<usize>,
    pub targets: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Hit {
    pub source_index: usize,
    pub label: usize,
    pub distance: u32,
}

#[derive(Clone, Debug, Serialize)]
pub struct QueryResult {
    pub target_index: usize,
    pub true_label: usize,
    pub hits: Vec<Hit>,
    pub precision: f64,
}

/// One trained model with its packed source database.
pub struct Session {
    summary: SessionSummary,
    index: BinaryCodeIndex,
    target_codes: Matrix,
    source_labels: Vec<usize>,
    target_labels: Vec<usize>,
}

impl Session {
    /// Trains on a 200 + 200 synthetic pair, once warm-up only and once with
    /// `outer_rounds` adaptation rounds.
    pub fn train(seed: u64, outer_rounds: usize) -> Result<Self> {
        let mut cfg = RunConfig {
            data: DataSource::Synthetic(SyntheticParams {
                n_source: 200,
                n_target: 200,
                ..SyntheticParams::default()
            }),
            ..RunConfig::default()
        };
        cfg = couple_core::pipeline::seeded(&cfg, seed);
        cfg.train.outer_rounds = outer_rounds;
        cfg.validate()?;
        let data = prepare_data(&cfg)?;
        let adapted = run(&cfg, &data)?;
        let mut warm_cfg = cfg.clone();
        warm_cfg.train.outer_rounds = 0;
        let warm = run(&warm_cfg, &data)?;
        let map = |m: Option<couple_core::eval::MetricsReport>| m.map(|r| r.map).ok_or(Error::Empty("target labels"));
        let target_labels = data.hidden_target_labels.clone().ok_or(Error::Empty("target labels"))?;
        Ok(Self {
            summary: SessionSummary {
                seed,
                outer_rounds,
                warmup_map: map(warm.metrics)?,
                adapted_map: map(adapted.metrics)?,
                confident_per_round: adapted.rounds.iter().map(|r| r.confident_size).collect(),
                targets: data.target.len(),
            },
            index: BinaryCodeIndex::pack(&adapted.source_codes)?,
            target_codes: adapted.target_codes,
            source_labels: data.source.labels()?.to_vec(),
            target_labels,
        })
    }

    pub fn summary(&self) -> &SessionSummary {
        &self.summary
    }

    /// Top-`k` source items for one target code.
    pub fn query(&self, target_index: usize, k: usize) -> Result<QueryResult> {
        if target_index >= self.target_codes.rows() {
            return Err(Error::InvalidArgument(format!(
                "target {target_index} out of range 0..{}",
                self.target_codes.rows()
            )));
        }
        let q = Matrix::from_rows(&[self.target_codes.row(target_index)]);
        let found = self.index.search(&q, k)?;
        let truth = self.target_labels[target_index];
        let hits: Vec<Hit> = found.neighbors[0]
            .iter()
            .map(|nb| Hit {
                source_index: nb.index,
                label: self.source_labels[nb.index],
                distance: nb.distance,
            })
            .collect();
        let right = hits.iter().filter(|h| h.label == truth).count();
        Ok(QueryResult {
            target_index,
            true_label: truth,
            precision: if hits.is_empty() { 0.0 } else { right as f64 / hits.len() as f64 },
            hits,
        })
    }
}

// ---------------------------------------------------------------------------
// WebAssembly exports

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json(v: &impl Serialize) -> std::result::Result<String, JsValue> {
    serde_json::to_string(v).map_err(js_err)
}

#[wasm_bindgen(js_name = diffusionView)]
pub fn diffusion_view_json(seed: u32, n_per_domain: u32, k_mnn: u32, gamma: f64) -> std::result::Result<String, JsValue> {
    let view = diffusion_view(seed as u64, n_per_domain as usize, k_mnn as usize, gamma).map_err(js_err)?;
    to_json(&view)
}

#[wasm_bindgen(js_name = Session)]
pub struct DemoSession(Session);

#[wasm_bindgen(js_class = Session)]
impl DemoSession {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, outer_rounds: u32) -> std::result::Result<DemoSession, JsValue> {
        Session::train(seed as u64, outer_rounds as usize).map(DemoSession).map_err(js_err)
    }

    pub fn summary(&self) -> std::result::Result<String, JsValue> {
        to_json(self.0.summary())
    }

    pub fn query(&self, target_index: u32, k: u32) -> std::result::Result<String, JsValue> {
        to_json(&self.0.query(target_index as usize, k as usize).map_err(js_err)?)
    }
}
