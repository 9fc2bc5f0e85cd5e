//! The full adaptation loop: source warm-up, then repeated rounds of graph
//! construction, diffusion, confident-set selection, walk sampling and
//! mini-batch optimisation of the discriminative and Mixup objectives.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_target_consistency_into, pseudo_label_codes};
use super::{loss_margin, Adam, AdamConfig, ConsistencyForm, Grads, HashModel};
use crate::dataset::{sample_batches, EmbeddingDataset, DEFAULT_BATCH_SIZE};
use crate::diffusion::{
    init_problem_with, select_confident_with, solve, ConfidentSet, DiffusionSolution, InitOptions, QuotaBase, DEFAULT_GAMMA,
    DEFAULT_MASS_BUDGET, DEFAULT_MAX_SWEEPS, DEFAULT_TOLERANCE,
};
use crate::encoder::{Encoder, EncoderSpec};
use crate::error::{Error, Result};
use crate::graph::{build_mnn_graph_from, CrossDomainGraph, DEFAULT_K};
use crate::matrix::Matrix;
use crate::mixup::{
    extract_pairs, fallback_pairs, loss_manifold_into, loss_pixel_into, sample_walks, MixupBatch, MixupPair,
    DEFAULT_WALK_LENGTH,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub source: f64,
    pub target: f64,
    /// Applied to both Mixup terms.
    pub mix: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            source: 1.0,
            target: 1.0,
            mix: 1.0,
            margin: 0.1,
        }
    }
}

/// What the relationship graph is rebuilt from each round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphInput {
    /// Frozen encoder features.
    #[default]
    Features,
    /// The current model's relaxed codes.
    RelaxedCodes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub hidden: usize,
    pub code_length: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub outer_rounds: usize,
    pub k_mnn: usize,
    pub gamma: f64,
    pub quota_base: QuotaBase,
    pub walk_k: usize,
    pub mass_budget: f64,
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub loss_weights: LossWeights,
    pub consistency_form: ConsistencyForm,
    pub graph_input: GraphInput,
    pub encoder: EncoderSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            hidden: super::DEFAULT_HIDDEN,
            code_length: super::DEFAULT_CODE_LENGTH,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: 1e-3,
            warmup_epochs: 5,
            outer_rounds: 20,
            k_mnn: DEFAULT_K,
            gamma: DEFAULT_GAMMA,
            quota_base: QuotaBase::AllTargets,
            walk_k: DEFAULT_WALK_LENGTH,
            mass_budget: DEFAULT_MASS_BUDGET,
            tolerance: DEFAULT_TOLERANCE,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            loss_weights: LossWeights::default(),
            consistency_form: ConsistencyForm::Anchor,
            graph_input: GraphInput::Features,
            encoder: EncoderSpec::Identity,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if self.code_length == 0 || self.hidden == 0 || self.batch_size == 0 {
            return bad("code_length, hidden and batch_size must be positive".into());
        }
        if self.walk_k == 0 || self.k_mnn == 0 {
            return bad("walk_k and k_mnn must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.tolerance > 0.0) {
            return bad("learning_rate and tolerance must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Adapt,
}

/// Per-epoch mean losses and gradient norms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub phase: Phase,
    pub batches: usize,
    pub loss_s: f64,
    pub loss_t: f64,
    pub loss_margin: f64,
    pub loss_pixel: f64,
    pub loss_manifold: f64,
    pub loss_total: f64,
    /// Mean norm of the combined gradient per block: w1, b1, w2, b2, prototypes.
    pub grad_norms: [f64; 5],
}

impl LossReport {
    fn new(epoch: usize, phase: Phase) -> Self {
        Self {
            epoch,
            phase,
            batches: 0,
            loss_s: 0.0,
            loss_t: 0.0,
            loss_margin: 0.0,
            loss_pixel: 0.0,
            loss_manifold: 0.0,
            loss_total: 0.0,
            grad_norms: [0.0; 5],
        }
    }

    fn accumulate(&mut self, parts: &BatchLosses, weights: &LossWeights, grads: &Grads) {
        self.batches += 1;
        self.loss_s += parts.source;
        self.loss_t += parts.target;
        self.loss_margin += parts.margin;
        self.loss_pixel += parts.pixel;
        self.loss_manifold += parts.manifold;
        self.loss_total += parts.total(weights);
        for (acc, n) in self.grad_norms.iter_mut().zip(grads.block_norms()) {
            *acc += n;
        }
    }

    fn finish(mut self) -> Self {
        if self.batches > 0 {
            let n = self.batches as f64;
            for v in [
                &mut self.loss_s,
                &mut self.loss_t,
                &mut self.loss_margin,
                &mut self.loss_pixel,
                &mut self.loss_manifold,
                &mut self.loss_total,
            ] {
                *v /= n;
            }
            self.grad_norms.iter_mut().for_each(|g| *g /= n);
        }
        self
    }
}

/// Unweighted loss terms of one mini-batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLosses {
    pub source: f64,
    pub target: f64,
    pub margin: f64,
    pub pixel: f64,
    pub manifold: f64,
}

impl BatchLosses {
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.source * self.source + w.target * self.target + w.mix * (self.pixel + self.manifold) + w.margin * self.margin
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub graph_edges: usize,
    pub diffusion_sweeps: usize,
    pub kkt_residual: f64,
    pub confident_size: usize,
    pub walks_requested: usize,
    pub walks_accepted: usize,
    pub pairs: usize,
    pub used_fallback_pairs: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: HashModel,
    pub history: Vec<LossReport>,
    pub rounds: Vec<RoundSummary>,
}

/// SplitMix64 finaliser used to derive independent stream seeds.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Frozen inputs shared by every stage of training.
pub struct TrainingData<'a> {
    pub source_raw: &'a Matrix,
    pub source_labels: &'a [usize],
    pub target_raw: &'a Matrix,
    pub source_latent: Matrix,
    pub target_latent: Matrix,
    pub encoder: Box<dyn Encoder + Send + Sync>,
    pub num_classes: usize,
}

impl<'a> TrainingData<'a> {
    pub fn new(source: &'a EmbeddingDataset, target: &'a EmbeddingDataset, encoder: EncoderSpec) -> Result<Self> {
        if source.dim() != target.dim() {
            return Err(Error::Dimension {
                expected: source.dim(),
                got: target.dim(),
            });
        }
        if source.is_empty() {
            return Err(Error::Empty("source dataset"));
        }
        let labels = source.labels()?;
        let enc = encoder.build(source.dim());
        Ok(Self {
            source_raw: &source.features,
            source_labels: labels,
            target_raw: &target.features,
            source_latent: enc.encode(&source.features),
            target_latent: enc.encode(&target.features),
            encoder: enc,
            num_classes: source.num_classes,
        })
    }
}

/// Runs warm-up followed by `outer_rounds` adaptation rounds.
pub fn train(source: &EmbeddingDataset, target: &EmbeddingDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(source, target, cfg, |_, _| Ok(()))
}

/// [`train`] with a callback invoked once, between warm-up and the first
/// adaptation round.
pub fn train_observed(
    source: &EmbeddingDataset,
    target: &EmbeddingDataset,
    cfg: &TrainConfig,
    mut after_warmup: impl FnMut(&HashModel, &TrainingData<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = TrainingData::new(source, target, cfg.encoder)?;
    let mut model = HashModel::new(
        data.source_latent.cols(),
        cfg.hidden,
        cfg.code_length,
        data.num_classes,
        derive_seed(cfg.seed, 0, 0),
    );
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut history = Vec::new();
    for epoch in 0..cfg.warmup_epochs {
        history.push(warmup_epoch(&mut model, &mut adam, &data, cfg, epoch)?);
    }
    after_warmup(&model, &data)?;
    let mut rounds = Vec::new();
    let mut cached: Option<Selection> = None;
    for round in 0..cfg.outer_rounds {
        // feature graphs do not change between rounds
        let selection = match (cfg.graph_input, cached.take()) {
            (GraphInput::Features, Some(s)) => s,
            _ => build_selection(&model, &data, cfg)?,
        };
        let (report, summary) = adapt_round(&mut model, &mut adam, &data, cfg, round, &selection)?;
        cached = Some(selection);
        history.push(report);
        rounds.push(summary);
    }
    Ok(TrainOutcome {
        model,
        history,
        rounds,
    })
}

fn margin_into(model: &HashModel, weight: f64, grads: &mut Grads) -> Result<f64> {
    if model.num_classes() < 2 {
        return Ok(0.0);
    }
    let (v, g) = loss_margin(model)?;
    grads.add_scaled(&g, weight);
    Ok(v)
}

/// One epoch of source cross-entropy plus the prototype margin term.
pub fn warmup_epoch(
    model: &mut HashModel,
    adam: &mut Adam,
    data: &TrainingData<'_>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, epoch as u64));
    let mut order: Vec<usize> = (0..data.source_latent.rows()).collect();
    order.shuffle(&mut rng);
    let mut report = LossReport::new(epoch, super::train::Phase::Warmup);
    let w = cfg.loss_weights;
    for chunk in order.chunks(cfg.batch_size) {
        let mut grads = Grads::zeros_like(model);
        let x = data.source_latent.select_rows(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| data.source_labels[i]).collect();
        let onehot = one_hot(&y, model.num_classes())?;
        let parts = BatchLosses {
            source: model.soft_cross_entropy_into(&x, &onehot, w.source, &mut grads)?,
            margin: margin_into(model, w.margin, &mut grads)?,
            ..BatchLosses::default()
        };
        adam.step(model, &grads)?;
        report.accumulate(&parts, &w, &grads);
    }
    Ok(report.finish())
}

fn one_hot(labels: &[usize], c: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), c);
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::LabelOutOfRange { label: l, num_classes: c });
        }
        m.set(i, l, 1.0);
    }
    Ok(m)
}

/// One adaptation mini-batch with its pseudo-labels held fixed.
pub struct BatchInputs<'a> {
    pub source_x: &'a Matrix,
    pub source_labels: &'a [usize],
    pub target_x: &'a Matrix,
    pub target_pseudo: &'a [usize],
    /// Raw-input and latent Mixup batches over the same pairs.
    pub mix: Option<(&'a MixupBatch, &'a MixupBatch)>,
}

/// Weighted sum of every adaptation loss and its gradient.
pub fn batch_objective(
    model: &HashModel,
    inputs: &BatchInputs<'_>,
    weights: &LossWeights,
    form: ConsistencyForm,
    encoder: &dyn Encoder,
) -> Result<(BatchLosses, Grads)> {
    let mut grads = Grads::zeros_like(model);
    let parts = batch_objective_into(model, inputs, weights, form, encoder, &mut grads)?;
    Ok((parts, grads))
}

fn batch_objective_into(
    model: &HashModel,
    inputs: &BatchInputs<'_>,
    w: &LossWeights,
    form: ConsistencyForm,
    encoder: &dyn Encoder,
    grads: &mut Grads,
) -> Result<BatchLosses> {
    let BatchInputs {
        source_x,
        source_labels,
        target_x,
        target_pseudo,
        mix,
    } = *inputs;
    let mut parts = BatchLosses {
        source: model.soft_cross_entropy_into(source_x, &one_hot(source_labels, model.num_classes())?, w.source, grads)?,
        target: loss_target_consistency_into(model, source_x, source_labels, target_x, target_pseudo, form, w.target, grads)?,
        margin: margin_into(model, w.margin, grads)?,
        ..BatchLosses::default()
    };
    if let Some((raw, latent)) = mix {
        parts.pixel = loss_pixel_into(model, encoder, raw, w.mix, grads)?;
        parts.manifold = loss_manifold_into(model, latent, w.mix, grads)?;
    }
    Ok(parts)
}

/// Graph, diffusion solution and confident set used by one round.
#[derive(Clone, Debug)]
pub struct Selection {
    pub graph: CrossDomainGraph,
    pub solution: DiffusionSolution,
    pub confident: ConfidentSet,
}

/// Builds the round graph from `cfg.graph_input`, solves the diffusion and
/// selects the confident targets.
pub fn build_selection(model: &HashModel, data: &TrainingData<'_>, cfg: &TrainConfig) -> Result<Selection> {
    let (gs, gt) = match cfg.graph_input {
        GraphInput::Features => (data.source_latent.clone(), data.target_latent.clone()),
        GraphInput::RelaxedCodes => (
            model.forward(&data.source_latent)?.0,
            model.forward(&data.target_latent)?.0,
        ),
    };
    let graph = build_mnn_graph_from(&gs, data.source_labels, &gt, cfg.k_mnn)?;
    let problem = init_problem_with(
        &graph,
        InitOptions {
            mass_budget: cfg.mass_budget,
        },
    )?;
    let solution = solve(&problem, cfg.tolerance, cfg.max_sweeps)?;
    let confident = select_confident_with(&solution, &graph, cfg.gamma, cfg.quota_base)?;
    Ok(Selection {
        graph,
        solution,
        confident,
    })
}

/// One adaptation round. Returns the epoch report and the round's graph and
/// diffusion statistics.
pub fn adapt_round(
    model: &mut HashModel,
    adam: &mut Adam,
    data: &TrainingData<'_>,
    cfg: &TrainConfig,
    round: usize,
    selection: &Selection,
) -> Result<(LossReport, RoundSummary)> {
    let graph = &selection.graph;
    let confident = &selection.confident;
    let ns = data.source_latent.rows();
    let epoch = cfg.warmup_epochs + round;
    let mut summary = RoundSummary {
        round,
        graph_edges: graph.edge_count(),
        diffusion_sweeps: selection.solution.iterations,
        kkt_residual: selection.solution.kkt_residual,
        confident_size: confident.len(),
        walks_requested: 0,
        walks_accepted: 0,
        pairs: 0,
        used_fallback_pairs: false,
    };
    let mut report = LossReport::new(epoch, Phase::Adapt);
    if confident.is_empty() {
        return Ok((report, summary));
    }

    let target_pool: Vec<usize> = confident.member_ids.iter().map(|&node| node - ns).collect();
    let source_pool: Vec<usize> = (0..ns).collect();
    let batches = sample_batches(&source_pool, &target_pool, cfg.batch_size, derive_seed(cfg.seed, 2, round as u64))?;

    let walk_count = batches.len() * cfg.batch_size;
    summary.walks_requested = walk_count;
    let mut pairs: Vec<MixupPair> = match sample_walks(graph, confident, cfg.walk_k, walk_count, derive_seed(cfg.seed, 3, round as u64)) {
        Ok(walks) => {
            summary.walks_accepted = walks.len();
            walks.iter().flat_map(|w| extract_pairs(w, graph)).collect()
        }
        Err(Error::NoAcceptedWalks { .. }) => {
            summary.used_fallback_pairs = true;
            fallback_pairs(graph, confident)
        }
        Err(e) => return Err(e),
    };
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 4, round as u64)));
    summary.pairs = pairs.len();

    let w = cfg.loss_weights;
    let protos_for_labels = |m: &HashModel, rows: &Matrix| -> Result<Vec<usize>> {
        let (_, b) = m.forward(rows)?;
        Ok(pseudo_label_codes(&b, &m.relaxed_prototypes()).into_iter().map(|p| p.class).collect())
    };

    for (b, batch) in batches.iter().enumerate() {
        let mut grads = Grads::zeros_like(model);
        let xs = data.source_latent.select_rows(&batch.source_indices);
        let ys: Vec<usize> = batch.source_indices.iter().map(|&i| data.source_labels[i]).collect();
        let xt = data.target_latent.select_rows(&batch.target_indices);
        let pseudo = protos_for_labels(model, &xt)?;

        let mut mix = None;
        if !pairs.is_empty() && w.mix != 0.0 {
            let take = batch.target_indices.len().min(pairs.len());
            let chosen: Vec<MixupPair> = (0..take).map(|i| pairs[(b * cfg.batch_size + i) % pairs.len()]).collect();
            let src: Vec<usize> = chosen.iter().map(|p| p.source).collect();
            let tgt: Vec<usize> = chosen.iter().map(|p| p.target - ns).collect();
            let target_latent = data.target_latent.select_rows(&tgt);
            let mix_pseudo = protos_for_labels(model, &target_latent)?;
            let source_labels: Vec<usize> = src.iter().map(|&i| data.source_labels[i]).collect();
            let raw = MixupBatch {
                pairs: chosen.clone(),
                source_rows: data.source_raw.select_rows(&src),
                target_rows: data.target_raw.select_rows(&tgt),
                source_labels: source_labels.clone(),
                target_labels: mix_pseudo.clone(),
            };
            let latent = MixupBatch {
                pairs: chosen,
                source_rows: data.source_latent.select_rows(&src),
                target_rows: target_latent,
                source_labels,
                target_labels: mix_pseudo,
            };
            mix = Some((raw, latent));
        }
        let inputs = BatchInputs {
            source_x: &xs,
            source_labels: &ys,
            target_x: &xt,
            target_pseudo: &pseudo,
            mix: mix.as_ref().map(|(raw, latent)| (raw, latent)),
        };
        let parts = batch_objective_into(model, &inputs, &w, cfg.consistency_form, data.encoder.as_ref(), &mut grads)?;
        adam.step(model, &grads)?;
        report.accumulate(&parts, &w, &grads);
    }
    Ok((report.finish(), summary))
}
