use std::fs;
use std::path::{Path, PathBuf};

use couple_core::config::{DataSource, RunConfig};
use couple_core::dataset::{load_dataset, make_digits, make_synthetic, read_labels, save_dataset, write_labels};
use couple_core::diffusion::{init_problem_with, select_confident_with, solve, DiffusionReport, InitOptions};
use couple_core::eval::{curves_csv, evaluate_codes};
use couple_core::graph::{build_mnn_graph_from, CrossDomainGraph};
use couple_core::hashmodel::train::TrainingData;
use couple_core::hashmodel::HashModel;
use couple_core::index::{read_ids, speed_test, BinaryCodeIndex};
use couple_core::pipeline::{
    encode, full_grid, one_at_a_time, prepare_data, run, sweep, sweep_csv, MetricsDocument, RunMetadata, TrainLog,
};
use serde_json::{json, Value};

use crate::error::CliError;
use crate::{Cli, Command};

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    fn write_json(&self, name: &str, value: &impl serde::Serialize) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    fn or_default(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.path(name))
    }
}

pub fn dispatch(cli: &Cli) -> Result<Value, CliError> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.set)?;
    for w in cfg.warnings() {
        eprintln!("{}", json!({ "warning": w }));
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.run_dir());
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let ctx = Ctx { cfg, out };
    ctx.write_json("config.json", &ctx.cfg.to_value())?;

    let body = match &cli.command {
        Command::Synth => synth(&ctx)?,
        Command::Graph => graph(&ctx)?,
        Command::Diffuse { graph } => diffuse(&ctx, graph)?,
        Command::Train => train(&ctx)?,
        Command::Encode {
            checkpoint,
            manifest,
            output,
        } => encode_cmd(&ctx, checkpoint, manifest, output)?,
        Command::Index { codes, ids } => index(&ctx, codes, ids.as_deref())?,
        Command::Query { index, ids, queries, k } => query(&ctx, index, ids.as_deref(), queries, *k)?,
        Command::Eval {
            queries,
            query_labels,
            database,
            database_labels,
        } => eval(&ctx, queries, query_labels, database, database_labels)?,
        Command::Speedtest {
            n,
            bits,
            k,
            repetitions,
            seed,
        } => {
            let report = speed_test(*n, *bits, *k, *repetitions, *seed)?;
            let p = ctx.write_json("speedtest.json", &report)?;
            json!({ "report": report, "outputs": [p] })
        }
        Command::Sweep {
            seeds,
            gammas,
            ks,
            full_grid: grid,
        } => sweep_cmd(&ctx, *seeds, gammas, ks, *grid)?,
    };
    Ok(json!({
        "run_id": ctx.cfg.run_id(),
        "out": ctx.out,
        "result": body,
    }))
}

fn synth(ctx: &Ctx) -> Result<Value, CliError> {
    let pair = match &ctx.cfg.data {
        DataSource::Synthetic(p) => make_synthetic(p)?,
        DataSource::Digits(p) => make_digits(p)?,
        DataSource::Files { .. } => {
            return Err(CliError::Usage("synth needs data.kind synthetic or digits".into()));
        }
    };
    let dir = ctx.path("data");
    let s = save_dataset(&pair.source, &dir, "source")?;
    let t = save_dataset(&pair.target, &dir, "target")?;
    let h = dir.join("target_hidden.lbl");
    write_labels(&h, &pair.hidden_target_labels)?;
    Ok(json!({
        "source": { "manifest": s, "rows": pair.source.len(), "dim": pair.source.dim() },
        "target": { "manifest": t, "rows": pair.target.len(), "dim": pair.target.dim() },
        "hidden_target_labels": h,
    }))
}

fn graph(ctx: &Ctx) -> Result<Value, CliError> {
    let data = prepare_data(&ctx.cfg)?;
    let td = TrainingData::new(&data.source, &data.target, ctx.cfg.train.encoder)?;
    let g = build_mnn_graph_from(&td.source_latent, td.source_labels, &td.target_latent, ctx.cfg.train.k_mnn)?;
    let p = ctx.path("graph.json");
    g.save_json(&p)?;
    Ok(json!({
        "nodes": g.num_nodes(),
        "edges": g.edge_count(),
        "outputs": [p],
    }))
}

fn diffuse(ctx: &Ctx, graph: &Option<PathBuf>) -> Result<Value, CliError> {
    let t = &ctx.cfg.train;
    let g = CrossDomainGraph::load_json(ctx.or_default(graph, "graph.json"))?;
    let problem = init_problem_with(
        &g,
        InitOptions {
            mass_budget: t.mass_budget,
        },
    )?;
    let sol = solve(&problem, t.tolerance, t.max_sweeps)?;
    let confident = select_confident_with(&sol, &g, t.gamma, t.quota_base)?;
    let report = DiffusionReport::new(&problem, &sol, &confident);
    let p = ctx.write_json("diffusion.json", &report)?;
    Ok(json!({
        "converged": report.converged,
        "iterations": report.iterations,
        "kkt_residual": report.kkt_residual,
        "confident": report.confident_ids.len(),
        "outputs": [p],
    }))
}

fn train(ctx: &Ctx) -> Result<Value, CliError> {
    let cfg = &ctx.cfg;
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let result = run(cfg, &data)?;
    let mut outputs = Vec::new();

    let ckpt = ctx.path("model.ckpt");
    result.model.save_checkpoint(&ckpt)?;
    outputs.push(ckpt);
    outputs.push(ctx.write_json(
        "train_log.json",
        &TrainLog {
            history: result.history.clone(),
            rounds: result.rounds.clone(),
            config: cfg.to_value(),
            run: RunMetadata::new(cfg),
        },
    )?);
    for (name, codes) in [("source.hsh", &result.source_codes), ("target.hsh", &result.target_codes)] {
        let p = ctx.path(name);
        BinaryCodeIndex::pack(codes)?.save(&p, None)?;
        outputs.push(p);
    }
    let map = match result.metrics {
        Some(m) => {
            outputs.push(ctx.write("curves.csv", curves_csv(&m))?);
            let map = m.map;
            outputs.push(ctx.write_json("metrics.json", &MetricsDocument::new(m, cfg))?);
            Some(map)
        }
        None => None,
    };
    Ok(json!({
        "rounds": result.rounds.len(),
        "map": map,
        "outputs": outputs,
    }))
}

fn encode_cmd(
    ctx: &Ctx,
    checkpoint: &Option<PathBuf>,
    manifest: &Option<PathBuf>,
    output: &Option<PathBuf>,
) -> Result<Value, CliError> {
    let model = HashModel::load_checkpoint(ctx.or_default(checkpoint, "model.ckpt"))?;
    let enc = ctx.cfg.train.encoder;
    let mut outputs = Vec::new();
    match manifest {
        Some(m) => {
            let mut ds = load_dataset(m)?;
            if ctx.cfg.normalize {
                ds = couple_core::dataset::l2_normalize(&ds);
            }
            let codes = encode(&model, enc, &ds.features)?;
            let out = output.clone().unwrap_or_else(|| ctx.path("codes.hsh"));
            BinaryCodeIndex::pack(&codes)?.save(&out, None)?;
            outputs.push(out);
        }
        None => {
            if output.is_some() {
                return Err(CliError::Usage("--output needs --manifest".into()));
            }
            let data = prepare_data(&ctx.cfg)?;
            for (name, ds) in [("source.hsh", &data.source), ("target.hsh", &data.target)] {
                let codes = encode(&model, enc, &ds.features)?;
                let p = ctx.path(name);
                BinaryCodeIndex::pack(&codes)?.save(&p, None)?;
                outputs.push(p);
            }
        }
    }
    Ok(json!({ "code_length": model.code_length(), "outputs": outputs }))
}

fn index(ctx: &Ctx, codes: &Path, ids: Option<&Path>) -> Result<Value, CliError> {
    let mut idx = BinaryCodeIndex::load(codes, None)?;
    if let Some(p) = ids {
        idx = idx.with_ids(read_ids(p)?)?;
    }
    let cp = ctx.path("index.hsh");
    let ip = ctx.path("index.ids");
    idx.save(&cp, Some(&ip))?;
    Ok(json!({
        "size": idx.len(),
        "code_length": idx.code_length(),
        "outputs": [cp, ip],
    }))
}

fn query(ctx: &Ctx, index: &Path, ids: Option<&Path>, queries: &Path, k: usize) -> Result<Value, CliError> {
    let idx = BinaryCodeIndex::load(index, ids)?;
    let q = BinaryCodeIndex::load(queries, None)?;
    let result = idx.search(&q.unpack(), k)?;
    let rows: Vec<Value> = result
        .neighbors
        .iter()
        .map(|nbs| {
            json!(nbs
                .iter()
                .map(|nb| json!({ "id": nb.id, "distance": nb.distance }))
                .collect::<Vec<_>>())
        })
        .collect();
    let p = ctx.write_json("neighbors.json", &json!({ "k": k, "clamped": result.clamped, "neighbors": rows }))?;
    Ok(json!({ "queries": q.len(), "clamped": result.clamped, "outputs": [p] }))
}

fn eval(
    ctx: &Ctx,
    queries: &Option<PathBuf>,
    query_labels: &Option<PathBuf>,
    database: &Option<PathBuf>,
    database_labels: &Option<PathBuf>,
) -> Result<Value, CliError> {
    let q = BinaryCodeIndex::load(&ctx.or_default(queries, "target.hsh"), None)?.unpack();
    let db = BinaryCodeIndex::load(&ctx.or_default(database, "source.hsh"), None)?.unpack();
    let (ql, dl) = match (query_labels, database_labels) {
        (Some(a), Some(b)) => (read_labels(a)?, read_labels(b)?),
        _ => {
            let data = couple_core::pipeline::load_data(&ctx.cfg.data)?;
            let ql = match query_labels {
                Some(p) => read_labels(p)?,
                None => data
                    .hidden_target_labels
                    .ok_or_else(|| CliError::Usage("no target labels configured; pass --query-labels".into()))?,
            };
            let dl = match database_labels {
                Some(p) => read_labels(p)?,
                None => data.source.labels()?.to_vec(),
            };
            (ql, dl)
        }
    };
    let report = evaluate_codes(&q, &ql, &db, &dl, &ctx.cfg.eval)?;
    let curves = ctx.write("curves.csv", curves_csv(&report))?;
    let map = report.map;
    let metrics = ctx.write_json("metrics.json", &MetricsDocument::new(report, &ctx.cfg))?;
    Ok(json!({ "map": map, "outputs": [metrics, curves] }))
}

fn sweep_cmd(ctx: &Ctx, seeds: u64, gammas: &[f64], ks: &[usize], grid: bool) -> Result<Value, CliError> {
    if seeds == 0 || gammas.is_empty() || ks.is_empty() {
        return Err(CliError::Usage("sweep needs at least one seed, gamma and k".into()));
    }
    let t = &ctx.cfg.train;
    let points = if grid {
        full_grid(gammas, ks)
    } else {
        one_at_a_time(gammas, ks, t.gamma, t.walk_k)
    };
    let seeds: Vec<u64> = (0..seeds).map(|s| t.seed + s).collect();
    let rows = sweep(&ctx.cfg, &points, &seeds)?;
    let j = ctx.write_json(
        "sweep.json",
        &json!({ "rows": rows, "config": ctx.cfg.to_value(), "run": RunMetadata::new(&ctx.cfg) }),
    )?;
    let c = ctx.write("sweep.csv", sweep_csv(&rows))?;
    Ok(json!({ "points": rows.len(), "outputs": [j, c] }))
}
