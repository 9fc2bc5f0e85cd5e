//! End-to-end runs: data preparation, training, encoding, evaluation and the
//! γ/k sensitivity sweep.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{DataSource, RunConfig};
use crate::dataset::{self, load_dataset, make_digits, make_synthetic, read_labels, EmbeddingDataset};
use crate::diffusion::{diagnostics, NoiseDiagnostics};
use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::eval::{evaluate_codes, mean_std, EvalOptions, MetricsReport};
use crate::hashmodel::train::{build_selection, train_observed, LossReport, RoundSummary, TrainConfig};
use crate::hashmodel::{pseudo_label, HashModel};
use crate::matrix::Matrix;

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub source: EmbeddingDataset,
    pub target: EmbeddingDataset,
    pub hidden_target_labels: Option<Vec<usize>>,
}

fn round_features(ds: &mut EmbeddingDataset) {
    ds.features.map_inplace(|v| v as f32 as f64);
}

/// Generates or loads the configured datasets. Generated features are
/// rounded to the f32 precision of the `EMB1` format, so a dataset written
/// by `synth` and read back trains identically.
pub fn load_data(source: &DataSource) -> Result<PreparedData> {
    let (mut source, mut target, hidden) = match source {
        DataSource::Synthetic(p) => {
            let pair = make_synthetic(p)?;
            (pair.source, pair.target, Some(pair.hidden_target_labels))
        }
        DataSource::Digits(p) => {
            let pair = make_digits(p)?;
            (pair.source, pair.target, Some(pair.hidden_target_labels))
        }
        DataSource::Files {
            source_manifest,
            target_manifest,
            target_labels,
        } => {
            let s = load_dataset(source_manifest)?;
            let t = load_dataset(target_manifest)?;
            let hidden = match target_labels {
                Some(p) => Some(read_labels(p)?),
                None => t.labels.clone(),
            };
            (s, t, hidden)
        }
    };
    round_features(&mut source);
    round_features(&mut target);
    if let Some(h) = &hidden {
        if h.len() != target.len() {
            return Err(Error::Shape(format!("{} hidden labels for {} targets", h.len(), target.len())));
        }
    }
    // the learner never sees target labels
    target.labels = None;
    Ok(PreparedData {
        source,
        target,
        hidden_target_labels: hidden,
    })
}

/// [`load_data`] followed by optional row normalisation.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let mut data = load_data(&cfg.data)?;
    if cfg.normalize {
        data.source = dataset::l2_normalize(&data.source);
        data.target = dataset::l2_normalize(&data.target);
    }
    Ok(data)
}

/// Binary codes of raw feature rows: encoder, then the hash head.
pub fn encode(model: &HashModel, encoder: EncoderSpec, features: &Matrix) -> Result<Matrix> {
    let latent = encoder.build(features.cols()).encode(features);
    Ok(model.forward(&latent)?.1)
}

/// Target codes query the labelled source database.
pub fn evaluate_model(
    model: &HashModel,
    cfg: &TrainConfig,
    data: &PreparedData,
    opts: &EvalOptions,
) -> Result<Option<MetricsReport>> {
    let Some(hidden) = &data.hidden_target_labels else {
        return Ok(None);
    };
    let db = encode(model, cfg.encoder, &data.source.features)?;
    let q = encode(model, cfg.encoder, &data.target.features)?;
    evaluate_codes(&q, hidden, &db, data.source.labels()?, opts).map(Some)
}

#[derive(Clone, Debug)]
pub struct RunResult {
    /// Parameters rounded to checkpoint precision.
    pub model: HashModel,
    pub history: Vec<LossReport>,
    pub rounds: Vec<RoundSummary>,
    pub source_codes: Matrix,
    pub target_codes: Matrix,
    pub metrics: Option<MetricsReport>,
}

pub fn run(cfg: &RunConfig, data: &PreparedData) -> Result<RunResult> {
    let outcome = train_observed(&data.source, &data.target, &cfg.train, |_, _| Ok(()))?;
    finish(cfg, data, outcome.model, outcome.history, outcome.rounds)
}

fn finish(
    cfg: &RunConfig,
    data: &PreparedData,
    mut model: HashModel,
    history: Vec<LossReport>,
    rounds: Vec<RoundSummary>,
) -> Result<RunResult> {
    model.round_to_f32();
    let source_codes = encode(&model, cfg.train.encoder, &data.source.features)?;
    let target_codes = encode(&model, cfg.train.encoder, &data.target.features)?;
    let metrics = match &data.hidden_target_labels {
        Some(hidden) => Some(evaluate_codes(
            &target_codes,
            hidden,
            &source_codes,
            data.source.labels()?,
            &cfg.eval,
        )?),
        None => None,
    };
    Ok(RunResult {
        model,
        history,
        rounds,
        source_codes,
        target_codes,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub run_id: String,
    pub config_hash: String,
    pub crate_version: String,
}

impl RunMetadata {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            run_id: cfg.run_id(),
            config_hash: cfg.hash(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Metrics report with the resolved config echoed alongside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub config: Value,
    pub run: RunMetadata,
}

impl MetricsDocument {
    pub fn new(metrics: MetricsReport, cfg: &RunConfig) -> Self {
        Self {
            metrics,
            config: cfg.to_value(),
            run: RunMetadata::new(cfg),
        }
    }
}

/// Training log written next to the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub history: Vec<LossReport>,
    pub rounds: Vec<RoundSummary>,
    pub config: Value,
    pub run: RunMetadata,
}

// ---------------------------------------------------------------------------
// Adaptation experiment

/// Warm-up baseline against full training for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainResult {
    pub seed: u64,
    pub baseline_map: f64,
    pub adapted_map: f64,
    /// Diagnostics of the first round's confident set, scored with the
    /// warm-up model's pseudo-labels.
    pub selection: NoiseDiagnostics,
}

impl GainResult {
    pub fn gain(&self) -> f64 {
        self.adapted_map - self.baseline_map
    }
}

/// One training run that also records the warm-up-only baseline (identical
/// to a run with `outer_rounds = 0`) and the selection quality.
pub fn adaptation_gain(cfg: &RunConfig, data: &PreparedData) -> Result<GainResult> {
    let hidden = data
        .hidden_target_labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("adaptation gain needs hidden target labels".into()))?;
    let mut baseline = None;
    let mut selection = None;
    let outcome = train_observed(&data.source, &data.target, &cfg.train, |model, td| {
        let mut warm = model.clone();
        warm.round_to_f32();
        baseline = evaluate_model(&warm, &cfg.train, data, &cfg.eval)?;
        let sel = build_selection(model, td, &cfg.train)?;
        let predicted: Vec<usize> = pseudo_label(model, &td.target_latent)?.iter().map(|p| p.class).collect();
        selection = Some(diagnostics(&sel.confident, &predicted, hidden, &sel.graph)?);
        Ok(())
    })?;
    let adapted = finish(cfg, data, outcome.model, outcome.history, outcome.rounds)?;
    let map_of = |m: Option<MetricsReport>| m.map(|r| r.map).ok_or(Error::Empty("evaluation queries"));
    Ok(GainResult {
        seed: cfg.train.seed,
        baseline_map: map_of(baseline)?,
        adapted_map: map_of(adapted.metrics)?,
        selection: selection.ok_or(Error::Empty("selection"))?,
    })
}

/// Config for one seed: both the model seed and the data generator seed.
pub fn seeded(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.train.seed = seed;
    c.data = c.data.with_seed(seed);
    c
}

// ---------------------------------------------------------------------------
// Sensitivity sweep

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub gamma: f64,
    pub walk_k: usize,
}

/// Varies one parameter at a time around `(base_gamma, base_k)`.
pub fn one_at_a_time(gammas: &[f64], ks: &[usize], base_gamma: f64, base_k: usize) -> Vec<SweepPoint> {
    let mut out: Vec<SweepPoint> = gammas
        .iter()
        .map(|&gamma| SweepPoint { gamma, walk_k: base_k })
        .collect();
    for &walk_k in ks {
        let p = SweepPoint {
            gamma: base_gamma,
            walk_k,
        };
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

pub fn full_grid(gammas: &[f64], ks: &[usize]) -> Vec<SweepPoint> {
    gammas
        .iter()
        .flat_map(|&gamma| ks.iter().map(move |&walk_k| SweepPoint { gamma, walk_k }))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub walk_k: usize,
    pub seeds: Vec<u64>,
    pub maps: Vec<f64>,
    pub mean_map: f64,
    pub std_map: f64,
}

fn sweep_one(cfg: &RunConfig, point: SweepPoint, seed: u64) -> Result<f64> {
    let mut c = seeded(cfg, seed);
    c.train.gamma = point.gamma;
    c.train.walk_k = point.walk_k;
    c.validate()?;
    let data = prepare_data(&c)?;
    run(&c, &data)?
        .metrics
        .map(|m| m.map)
        .ok_or_else(|| Error::InvalidArgument("sweep needs hidden target labels".into()))
}

/// Seed-averaged target mAP at every point.
pub fn sweep(cfg: &RunConfig, points: &[SweepPoint], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let one = |&(p, s): &(usize, u64)| sweep_one(cfg, points[p], s);
    #[cfg(feature = "parallel")]
    let maps: Vec<Result<f64>> = {
        use rayon::prelude::*;
        jobs.par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let maps: Vec<Result<f64>> = jobs.iter().map(one).collect();
    let maps = maps.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(points
        .iter()
        .enumerate()
        .map(|(p, point)| {
            let m: Vec<f64> = maps[p * seeds.len()..(p + 1) * seeds.len()].to_vec();
            let (mean_map, std_map) = mean_std(&m);
            SweepRow {
                gamma: point.gamma,
                walk_k: point.walk_k,
                seeds: seeds.to_vec(),
                maps: m,
                mean_map,
                std_map,
            }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("gamma,walk_k,mean_map,std_map,n_seeds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{}\n",
            r.gamma,
            r.walk_k,
            r.mean_map,
            r.std_map,
            r.seeds.len()
        ));
    }
    out
}

/// Mean mAP of the row matching `(gamma, walk_k)`.
pub fn sweep_lookup(rows: &[SweepRow], gamma: f64, walk_k: usize) -> Option<f64> {
    rows.iter()
        .find(|r| (r.gamma - gamma).abs() < 1e-12 && r.walk_k == walk_k)
        .map(|r| r.mean_map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_at_a_time_shares_the_centre() {
        let pts = one_at_a_time(&[0.3, 0.5, 0.7], &[2, 5, 10], 0.5, 5);
        assert_eq!(pts.len(), 5);
        assert_eq!(full_grid(&[0.3, 0.5], &[2, 3, 4]).len(), 6);
    }

    #[test]
    fn prepared_targets_carry_no_labels() {
        let cfg = RunConfig::default();
        let d = prepare_data(&cfg).unwrap();
        assert!(d.target.labels.is_none());
        assert_eq!(d.hidden_target_labels.as_ref().unwrap().len(), d.target.len());
        let n = crate::matrix::norm(d.source.features.row(0));
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_only_run_matches_gain_baseline() {
        let mut cfg = RunConfig::default();
        if let DataSource::Synthetic(p) = &mut cfg.data {
            p.n_source = 100;
            p.n_target = 100;
        }
        cfg.train.outer_rounds = 2;
        let data = prepare_data(&cfg).unwrap();
        let g = adaptation_gain(&cfg, &data).unwrap();
        let mut base = cfg.clone();
        base.train.outer_rounds = 0;
        let r = run(&base, &data).unwrap();
        assert_eq!(r.metrics.unwrap().map, g.baseline_map);
        let full = run(&cfg, &data).unwrap();
        assert_eq!(full.metrics.unwrap().map, g.adapted_map);
    }
}
