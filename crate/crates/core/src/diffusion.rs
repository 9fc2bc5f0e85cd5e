//! ℓ2-norm flow diffusion over the relationship graph.
//!
//! Source nodes start with mass equal to their weighted degree, every node
//! can hold `T = average_degree / 2`, and the excess spreads along edges. The
//! dual of the flow problem is the nonnegative QP
//!
//! ```text
//! min_x  xᵀ L x + xᵀ (T − Δ)   s.t. x ≥ 0
//! ```
//!
//! solved here by cyclic projected coordinate descent. With this scaling the
//! primal flow on edge (i, j) is `2 w_ij (x_i − x_j)`.

use serde::{Deserialize, Serialize};

use crate::dataset::Domain;
use crate::error::{Error, Result};
use crate::graph::{average_degree, CrossDomainGraph};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_RELAXATION: f64 = 1.95;
pub const DEFAULT_MAX_SWEEPS: usize = 100_000;
pub const DEFAULT_GAMMA: f64 = 0.5;
/// Share of a component's capacity that its initial mass may occupy before it
/// is scaled down (see [`InitOptions::mass_budget`]).
pub const DEFAULT_MASS_BUDGET: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitOptions {
    /// When the total initial mass of a connected component exceeds its total
    /// capacity the QP has no minimizer (mass cannot leave a component). Such
    /// components get their source masses scaled uniformly so that they sum
    /// to `mass_budget` times the component capacity. Components that already
    /// fit are left untouched.
    pub mass_budget: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            mass_budget: DEFAULT_MASS_BUDGET,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiffusionProblem<'g> {
    graph: &'g CrossDomainGraph,
    mass: Vec<f64>,
    capacity: Vec<f64>,
}

impl<'g> DiffusionProblem<'g> {
    /// Custom problem. Fails when a component holds more mass than capacity.
    pub fn new(graph: &'g CrossDomainGraph, mass: Vec<f64>, capacity: Vec<f64>) -> Result<Self> {
        let n = graph.num_nodes();
        if mass.len() != n || capacity.len() != n {
            return Err(Error::Shape(format!(
                "mass/capacity lengths {}/{} for {n} nodes",
                mass.len(),
                capacity.len()
            )));
        }
        if mass.iter().any(|&m| !m.is_finite() || m < 0.0) {
            return Err(Error::InvalidArgument("mass must be finite and nonnegative".into()));
        }
        if capacity.iter().any(|&t| !t.is_finite() || t <= 0.0) {
            return Err(Error::InvalidArgument("capacity must be finite and positive".into()));
        }
        let comp = graph.components();
        let ncomp = comp.iter().max().map_or(0, |&c| c + 1);
        let mut surplus = vec![0.0; ncomp];
        let mut scale = vec![0.0f64; ncomp];
        for i in 0..n {
            surplus[comp[i]] += capacity[i] - mass[i];
            scale[comp[i]] = scale[comp[i]].max(capacity[i]);
        }
        for (c, (&s, &t)) in surplus.iter().zip(&scale).enumerate() {
            if s < -1e-12 * t.max(1.0) * n as f64 {
                return Err(Error::InvalidArgument(format!(
                    "component {c} holds {:.6} more mass than capacity; the problem is unbounded",
                    -s
                )));
            }
        }
        Ok(Self {
            graph,
            mass,
            capacity,
        })
    }

    pub fn graph(&self) -> &'g CrossDomainGraph {
        self.graph
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn capacity(&self) -> &[f64] {
        &self.capacity
    }

    /// Gradient `2 L x + T − Δ`.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..self.graph.num_nodes())
            .map(|i| {
                let lx: f64 = self
                    .graph
                    .neighbors(i)
                    .iter()
                    .map(|&(j, w)| w * (x[i] - x[j]))
                    .sum();
                2.0 * lx + self.capacity[i] - self.mass[i]
            })
            .collect()
    }

    /// Objective `xᵀ L x + xᵀ (T − Δ)`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let quad: f64 = self
            .graph
            .edges()
            .iter()
            .map(|&(u, v, w)| w * (x[u] - x[v]).powi(2))
            .sum();
        let lin: f64 = (0..x.len()).map(|i| x[i] * (self.capacity[i] - self.mass[i])).sum();
        quad + lin
    }

    /// Largest KKT violation: `|g_i|` where `x_i > 0`, `max(0, −g_i)` where `x_i = 0`.
    pub fn kkt_residual(&self, x: &[f64]) -> f64 {
        self.gradient(x)
            .iter()
            .zip(x)
            .map(|(&g, &xi)| if xi > 0.0 { g.abs() } else { (-g).max(0.0) })
            .fold(0.0, f64::max)
    }

    /// Net mass `Δ_i − Σ_j f(i→j)` at each node for potentials `x`.
    pub fn net_mass(&self, x: &[f64]) -> Vec<f64> {
        (0..self.graph.num_nodes())
            .map(|i| {
                let out: f64 = self
                    .graph
                    .neighbors(i)
                    .iter()
                    .map(|&(j, w)| 2.0 * w * (x[i] - x[j]))
                    .sum();
                self.mass[i] - out
            })
            .collect()
    }

    /// `Σ_i min(m_i, T_i)`: mass currently settled within capacity.
    pub fn delivered_mass(&self, x: &[f64]) -> f64 {
        self.net_mass(x)
            .iter()
            .zip(&self.capacity)
            .map(|(&m, &t)| m.min(t))
            .sum()
    }
}

/// Source mass = weighted degree, target mass = 0, uniform capacity of half
/// the average weighted degree.
pub fn init_problem(g: &CrossDomainGraph) -> Result<DiffusionProblem<'_>> {
    init_problem_with(g, InitOptions::default())
}

pub fn init_problem_with(g: &CrossDomainGraph, opts: InitOptions) -> Result<DiffusionProblem<'_>> {
    if g.num_nodes() == 0 {
        return Err(Error::Empty("graph"));
    }
    let avg = average_degree(g)?;
    if avg <= 0.0 {
        return Err(Error::InvalidArgument("graph has zero average degree".into()));
    }
    if !(opts.mass_budget > 0.0 && opts.mass_budget <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mass budget {} outside (0, 1]",
            opts.mass_budget
        )));
    }
    let n = g.num_nodes();
    let t = avg / 2.0;
    let mut mass: Vec<f64> = (0..n)
        .map(|i| match g.domain(i) {
            Domain::Source => g.weighted_degree(i),
            Domain::Target => 0.0,
        })
        .collect();

    let comp = g.components();
    let ncomp = comp.iter().max().map_or(0, |&c| c + 1);
    let mut comp_mass = vec![0.0; ncomp];
    let mut comp_cap = vec![0.0; ncomp];
    for i in 0..n {
        comp_mass[comp[i]] += mass[i];
        comp_cap[comp[i]] += t;
    }
    for i in 0..n {
        let c = comp[i];
        if comp_mass[c] > comp_cap[c] {
            mass[i] *= opts.mass_budget * comp_cap[c] / comp_mass[c];
        }
    }
    DiffusionProblem::new(g, mass, vec![t; n])
}

/// Stepwise projected coordinate descent, exposed so callers can observe
/// intermediate sweeps.
#[derive(Clone, Debug)]
pub struct CoordinateDescent<'p, 'g> {
    problem: &'p DiffusionProblem<'g>,
    x: Vec<f64>,
    sweeps: usize,
    relaxation: f64,
}

impl<'p, 'g> CoordinateDescent<'p, 'g> {
    pub fn new(problem: &'p DiffusionProblem<'g>) -> Self {
        Self {
            problem,
            x: vec![0.0; problem.graph.num_nodes()],
            sweeps: 0,
            relaxation: 1.0,
        }
    }

    /// Over-relaxation factor ω in (0, 2); 1 gives plain coordinate descent.
    pub fn with_relaxation(mut self, omega: f64) -> Result<Self> {
        if !(omega > 0.0 && omega < 2.0) {
            return Err(Error::InvalidArgument(format!("relaxation {omega} outside (0, 2)")));
        }
        self.relaxation = omega;
        Ok(self)
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn sweeps(&self) -> usize {
        self.sweeps
    }

    /// One pass over the nodes in id order.
    pub fn sweep(&mut self) -> Result<()> {
        let p = self.problem;
        for i in 0..self.x.len() {
            let deg = p.graph.weighted_degree(i);
            if deg <= 0.0 {
                // isolated: the gradient is the constant T_i − Δ_i ≥ 0
                self.x[i] = 0.0;
                continue;
            }
            let pull: f64 = p.graph.neighbors(i).iter().map(|&(j, w)| w * self.x[j]).sum();
            let v = (pull - 0.5 * (p.capacity[i] - p.mass[i])) / deg;
            if !v.is_finite() {
                return Err(Error::NonFinite("diffusion sweep"));
            }
            let w = self.relaxation;
            self.x[i] = ((1.0 - w) * self.x[i] + w * v).max(0.0);
        }
        self.sweeps += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub u: usize,
    pub v: usize,
    /// Flow from `u` to `v`; negative values run the other way.
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSolution {
    pub x: Vec<f64>,
    pub flows: Vec<FlowRecord>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Projected over-relaxed coordinate descent with [`DEFAULT_RELAXATION`].
pub fn solve(problem: &DiffusionProblem<'_>, tol: f64, max_iter: usize) -> Result<DiffusionSolution> {
    solve_with(problem, tol, max_iter, DEFAULT_RELAXATION)
}

pub fn solve_with(problem: &DiffusionProblem<'_>, tol: f64, max_iter: usize, omega: f64) -> Result<DiffusionSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance {tol} must be positive")));
    }
    let mut cd = CoordinateDescent::new(problem).with_relaxation(omega)?;
    let mut residual = problem.kkt_residual(cd.x());
    while residual > tol && cd.sweeps() < max_iter {
        cd.sweep()?;
        residual = problem.kkt_residual(cd.x());
        if !residual.is_finite() {
            return Err(Error::NonFinite("diffusion residual"));
        }
        if residual > tol && cd.sweeps() % REFINE_EVERY == 0 {
            if let Some(y) = refine_on_support(problem, cd.x()) {
                let r = problem.kkt_residual(&y);
                if r < residual && problem.objective(&y) <= problem.objective(cd.x()) {
                    cd.x = y;
                    residual = r;
                }
            }
        }
    }
    let mut x = cd.x;
    lower_balanced_components(problem, &mut x);
    residual = problem.kkt_residual(&x);
    let flows = problem
        .graph
        .edges()
        .into_iter()
        .map(|(u, v, w)| FlowRecord {
            u,
            v,
            f: 2.0 * w * (x[u] - x[v]),
        })
        .collect();
    Ok(DiffusionSolution {
        x,
        flows,
        kkt_residual: residual,
        iterations: cd.sweeps,
        converged: residual <= tol,
    })
}

const REFINE_EVERY: usize = 10;

/// In a component whose mass equals its capacity the linear term is
/// orthogonal to the constant vector, so minimizers form a ray `x + t·1`.
/// Such components are shifted down to the least minimizer, `min x = 0`.
fn lower_balanced_components(problem: &DiffusionProblem<'_>, x: &mut [f64]) {
    let comp = problem.graph.components();
    let ncomp = comp.iter().max().map_or(0, |&c| c + 1);
    let mut slope = vec![0.0; ncomp];
    let mut cap = vec![0.0; ncomp];
    let mut low = vec![f64::INFINITY; ncomp];
    for (i, &c) in comp.iter().enumerate() {
        slope[c] += problem.capacity[i] - problem.mass[i];
        cap[c] += problem.capacity[i];
        low[c] = low[c].min(x[i]);
    }
    for (i, &c) in comp.iter().enumerate() {
        if slope[c].abs() <= 1e-9 * cap[c] && low[c] > 0.0 {
            x[i] = (x[i] - low[c]).max(0.0);
        }
    }
}

/// Solves the stationarity system on the current support `S = {x_i > 0}`,
/// `L_SS x_S = (Δ_S − T_S) / 2`, by Jacobi-preconditioned conjugate
/// gradients, then clips at zero. Support pieces without a zero neighbour
/// are left as they are. `None` when nothing is refined or the iteration
/// breaks down.
fn refine_on_support(problem: &DiffusionProblem<'_>, x: &[f64]) -> Option<Vec<f64>> {
    let g = problem.graph;
    let n = x.len();
    // support pieces with no zero neighbour have a singular system; keep them
    let mut piece = vec![usize::MAX; n];
    let mut keep = vec![false; n];
    for s in 0..n {
        if x[s] <= 0.0 || piece[s] != usize::MAX {
            continue;
        }
        let mut members = vec![s];
        piece[s] = s;
        let mut bordered = false;
        let mut head = 0;
        while head < members.len() {
            let i = members[head];
            head += 1;
            for &(j, _) in g.neighbors(i) {
                if x[j] > 0.0 {
                    if piece[j] == usize::MAX {
                        piece[j] = s;
                        members.push(j);
                    }
                } else {
                    bordered = true;
                }
            }
        }
        if !bordered {
            for i in members {
                keep[i] = true;
            }
        }
    }
    let support: Vec<usize> = (0..n).filter(|&i| x[i] > 0.0 && !keep[i]).collect();
    if support.is_empty() {
        return None;
    }
    let mut pos = vec![usize::MAX; x.len()];
    for (k, &i) in support.iter().enumerate() {
        pos[i] = k;
    }
    let diag: Vec<f64> = support.iter().map(|&i| g.weighted_degree(i)).collect();
    let apply = |v: &[f64], out: &mut [f64]| {
        for (k, &i) in support.iter().enumerate() {
            let off: f64 = g
                .neighbors(i)
                .iter()
                .filter(|&&(j, _)| pos[j] != usize::MAX)
                .map(|&(j, w)| w * v[pos[j]])
                .sum();
            out[k] = diag[k] * v[k] - off;
        }
    };
    let b: Vec<f64> = support.iter().map(|&i| 0.5 * (problem.mass[i] - problem.capacity[i])).collect();
    let mut y: Vec<f64> = support.iter().map(|&i| x[i]).collect();
    let m = support.len();
    let mut ay = vec![0.0; m];
    apply(&y, &mut ay);
    let mut r: Vec<f64> = b.iter().zip(&ay).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let mut ap = vec![0.0; m];
    for _ in 0..(4 * m).max(50) {
        if r.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-14 * b_norm {
            break;
        }
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return None;
        }
        let alpha = rz / pap;
        for k in 0..m {
            y[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
            z[k] = r[k] / diag[k];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..m {
            p[k] = z[k] + beta * p[k];
        }
    }
    if !y.iter().all(|v| v.is_finite()) {
        return None;
    }
    let mut out: Vec<f64> = (0..n).map(|i| if keep[i] { x[i] } else { 0.0 }).collect();
    for (k, &i) in support.iter().enumerate() {
        out[i] = y[k].max(0.0);
    }
    Some(out)
}

/// Which target count the γ quota is taken over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuotaBase {
    #[default]
    AllTargets,
    PositiveTargets,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidentSet {
    /// Sorted node ids (graph numbering).
    pub member_ids: Vec<usize>,
    pub gamma: f64,
    /// Smallest `x` admitted, 0 when the set is empty.
    pub threshold_value: f64,
}

impl ConfidentSet {
    pub fn contains(&self, node: usize) -> bool {
        self.member_ids.binary_search(&node).is_ok()
    }

    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }
}

/// Target nodes ordered by `x` descending, lower id first on ties.
pub fn rank_targets(x: &[f64], g: &CrossDomainGraph) -> Vec<usize> {
    let mut t: Vec<usize> = g.target_nodes().collect();
    t.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    t
}

pub fn select_confident(sol: &DiffusionSolution, g: &CrossDomainGraph, gamma: f64) -> Result<ConfidentSet> {
    select_confident_with(sol, g, gamma, QuotaBase::AllTargets)
}

/// Top `⌈γ·base⌉` targets by `x`. Targets with `x = 0` never qualify, so the
/// quota may go unfilled.
pub fn select_confident_with(
    sol: &DiffusionSolution,
    g: &CrossDomainGraph,
    gamma: f64,
    base: QuotaBase,
) -> Result<ConfidentSet> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside (0, 1]")));
    }
    if !sol.converged {
        return Err(Error::InvalidArgument("diffusion solution did not converge".into()));
    }
    if sol.x.len() != g.num_nodes() {
        return Err(Error::Shape("solution does not match graph".into()));
    }
    let ranked = rank_targets(&sol.x, g);
    if ranked.is_empty() {
        return Err(Error::Empty("target nodes"));
    }
    let positive = ranked.iter().take_while(|&&i| sol.x[i] > 0.0).count();
    let base_count = match base {
        QuotaBase::AllTargets => ranked.len(),
        QuotaBase::PositiveTargets => positive,
    };
    // guard against 0.3 * 10 = 3.0000000000000004
    let quota = ((gamma * base_count as f64) - 1e-9).ceil().max(0.0) as usize;
    let take = quota.min(ranked.len()).min(positive);
    let mut member_ids = ranked[..take].to_vec();
    let threshold_value = member_ids.last().map_or(0.0, |&i| sol.x[i]);
    member_ids.sort_unstable();
    Ok(ConfidentSet {
        member_ids,
        gamma,
        threshold_value,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseDiagnostics {
    /// `|𝒯 ∩ 𝒞| / |𝒯|`; absent when no target is predicted correctly.
    pub a1: Option<f64>,
    /// `|𝒩 \ 𝒞| / |𝒩|`; absent when every target is predicted correctly.
    pub a0: Option<f64>,
    /// `2|𝒯| / (2|𝒯| + |𝒞 \ 𝒯| + |𝒯 \ 𝒞|)`; absent when both sets are empty.
    pub acc_f1: Option<f64>,
    /// Per target (in node order): share of neighbour weight landing in 𝒯.
    pub alpha_per_node: Vec<Option<f64>>,
    /// Pseudo-label accuracy over all targets.
    pub accuracy_all: f64,
    /// Pseudo-label accuracy restricted to 𝒞.
    pub accuracy_confident: Option<f64>,
}

/// Noise diagnostics against hidden labels. `predicted` and `hidden` are
/// indexed by target position (0-based within the target domain).
pub fn diagnostics(
    confident: &ConfidentSet,
    predicted: &[usize],
    hidden: &[usize],
    g: &CrossDomainGraph,
) -> Result<NoiseDiagnostics> {
    let targets: Vec<usize> = g.target_nodes().collect();
    if predicted.len() != targets.len() || hidden.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions / {} hidden labels for {} targets",
            predicted.len(),
            hidden.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Empty("target nodes"));
    }
    let mut correct = vec![false; g.num_nodes()];
    for (pos, &node) in targets.iter().enumerate() {
        correct[node] = predicted[pos] == hidden[pos];
    }
    let n_correct = targets.iter().filter(|&&i| correct[i]).count();
    let n_noisy = targets.len() - n_correct;
    let correct_in_c = confident.member_ids.iter().filter(|&&i| correct[i]).count();
    let c_minus_t = confident.len() - correct_in_c;
    let t_minus_c = n_correct - correct_in_c;
    let noisy_outside_c = n_noisy - c_minus_t;

    let a1 = (n_correct > 0).then(|| correct_in_c as f64 / n_correct as f64);
    let a0 = (n_noisy > 0).then(|| noisy_outside_c as f64 / n_noisy as f64);
    let denom = 2 * n_correct + c_minus_t + t_minus_c;
    let acc_f1 = (denom > 0).then(|| 2.0 * n_correct as f64 / denom as f64);

    let alpha_per_node = targets
        .iter()
        .map(|&j| {
            let nb = g.neighbors(j);
            let total: f64 = nb.iter().map(|&(_, w)| w).sum();
            let good: f64 = nb.iter().filter(|&&(k, _)| correct[k]).map(|&(_, w)| w).sum();
            (total > 0.0).then(|| good / total)
        })
        .collect();

    Ok(NoiseDiagnostics {
        a1,
        a0,
        acc_f1,
        alpha_per_node,
        accuracy_all: n_correct as f64 / targets.len() as f64,
        accuracy_confident: (!confident.is_empty()).then(|| correct_in_c as f64 / confident.len() as f64),
    })
}

/// JSON report of a diffusion run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionReport {
    pub x: Vec<f64>,
    pub mass: Vec<f64>,
    pub capacity: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub confident_ids: Vec<usize>,
    pub gamma: f64,
}

impl DiffusionReport {
    pub fn new(problem: &DiffusionProblem<'_>, sol: &DiffusionSolution, confident: &ConfidentSet) -> Self {
        Self {
            x: sol.x.clone(),
            mass: problem.mass.clone(),
            capacity: problem.capacity.clone(),
            converged: sol.converged,
            iterations: sol.iterations,
            kkt_residual: sol.kkt_residual,
            confident_ids: confident.member_ids.clone(),
            gamma: confident.gamma,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node() -> CrossDomainGraph {
        CrossDomainGraph::from_edges(vec![Domain::Source, Domain::Target], &[(0, 1, 1.0)]).unwrap()
    }

    #[test]
    fn two_node_init_and_solve() {
        let g = two_node();
        let p = init_problem(&g).unwrap();
        assert_eq!(p.mass(), &[1.0, 0.0]);
        assert_eq!(p.capacity(), &[0.5, 0.5]);
        let sol = solve(&p, 1e-12, 1000).unwrap();
        assert!(sol.converged);
        // excess 0.5 moves to the target
        assert!((sol.flows[0].f - 0.5).abs() < 1e-12);
        let m = p.net_mass(&sol.x);
        assert!((m[0] - 0.5).abs() < 1e-12 && (m[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn star_init() {
        let g = CrossDomainGraph::from_edges(
            vec![Domain::Source, Domain::Target, Domain::Target, Domain::Target],
            &[(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0)],
        )
        .unwrap();
        let p = init_problem(&g).unwrap();
        assert_eq!(p.mass(), &[3.0, 0.0, 0.0, 0.0]);
        assert!(p.capacity().iter().all(|&t| (t - 0.75).abs() < 1e-15));
    }

    #[test]
    fn all_target_graph_has_zero_mass() {
        let g = CrossDomainGraph::from_edges(vec![Domain::Target; 2], &[(0, 1, 1.0)]).unwrap();
        let p = init_problem(&g).unwrap();
        assert_eq!(p.mass(), &[0.0, 0.0]);
        let sol = solve(&p, 1e-10, 10).unwrap();
        assert_eq!(sol.x, vec![0.0, 0.0]);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn init_errors() {
        let empty = CrossDomainGraph::from_edges(vec![], &[]).unwrap();
        assert!(init_problem(&empty).is_err());
        let no_edges = CrossDomainGraph::from_edges(vec![Domain::Source], &[]).unwrap();
        assert!(init_problem(&no_edges).is_err());
    }

    #[test]
    fn overfull_component_is_rejected_or_scaled() {
        // source clique of three plus one target: mass 2+2+2+... > capacity
        let g = CrossDomainGraph::from_edges(
            vec![Domain::Source, Domain::Source, Domain::Source, Domain::Target],
            &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0), (2, 3, 1.0)],
        )
        .unwrap();
        let raw: Vec<f64> = (0..4).map(|i| if i < 3 { g.weighted_degree(i) } else { 0.0 }).collect();
        let avg = average_degree(&g).unwrap();
        assert!(DiffusionProblem::new(&g, raw, vec![avg / 2.0; 4]).is_err());
        let p = init_problem(&g).unwrap();
        let total: f64 = p.mass().iter().sum();
        assert!((total - DEFAULT_MASS_BUDGET * 2.0 * avg).abs() < 1e-12);
        assert!(solve(&p, 1e-10, 100_000).unwrap().converged);
    }

    #[test]
    fn nothing_moves_when_mass_fits() {
        let g = two_node();
        let p = DiffusionProblem::new(&g, vec![0.4, 0.0], vec![0.5, 0.5]).unwrap();
        let sol = solve(&p, 1e-12, 10).unwrap();
        assert_eq!(sol.x, vec![0.0, 0.0]);
        assert!(sol.flows.iter().all(|f| f.f == 0.0));
    }

    #[test]
    fn confident_selection_rules() {
        let g = CrossDomainGraph::from_edges(
            vec![Domain::Source, Domain::Target, Domain::Target, Domain::Target],
            &[(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0)],
        )
        .unwrap();
        let sol = DiffusionSolution {
            x: vec![1.0, 0.9, 0.1, 0.0],
            flows: vec![],
            kkt_residual: 0.0,
            iterations: 1,
            converged: true,
        };
        let c = select_confident(&sol, &g, 0.5).unwrap();
        assert_eq!(c.member_ids, vec![1, 2]);
        assert_eq!(c.threshold_value, 0.1);
        let all = select_confident(&sol, &g, 1.0).unwrap();
        assert_eq!(all.member_ids, vec![1, 2]);
        let pos = select_confident_with(&sol, &g, 0.5, QuotaBase::PositiveTargets).unwrap();
        assert_eq!(pos.member_ids, vec![1]);

        let tie = DiffusionSolution {
            x: vec![1.0, 0.5, 0.5, 0.5],
            ..sol.clone()
        };
        assert_eq!(select_confident(&tie, &g, 0.3).unwrap().member_ids, vec![1]);
        assert!(select_confident(&sol, &g, 0.0).is_err());
        assert!(select_confident(&sol, &g, 1.5).is_err());
        let not_converged = DiffusionSolution {
            converged: false,
            ..sol
        };
        assert!(select_confident(&not_converged, &g, 0.5).is_err());
    }

    #[test]
    fn diagnostics_examples() {
        let g = CrossDomainGraph::from_edges(
            vec![Domain::Source, Domain::Target, Domain::Target, Domain::Target],
            &[(0, 1, 1.0), (1, 2, 2.0), (2, 3, 1.0)],
        )
        .unwrap();
        let hidden = [0, 1, 2];
        let predicted = [0, 1, 0]; // targets 1 and 2 correct, 3 wrong
        let perfect = ConfidentSet {
            member_ids: vec![1, 2],
            gamma: 0.5,
            threshold_value: 0.0,
        };
        let d = diagnostics(&perfect, &predicted, &hidden, &g).unwrap();
        assert_eq!(d.a1, Some(1.0));
        assert_eq!(d.a0, Some(1.0));
        assert_eq!(d.acc_f1, Some(1.0));
        // node 2's neighbours are 1 (correct) and 3 (wrong)
        assert_eq!(d.alpha_per_node[1], Some(2.0 / 3.0));

        let empty = ConfidentSet {
            member_ids: vec![],
            gamma: 0.5,
            threshold_value: 0.0,
        };
        let d = diagnostics(&empty, &predicted, &hidden, &g).unwrap();
        assert_eq!(d.a1, Some(0.0));
        assert!((d.acc_f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(d.accuracy_confident, None);

        let all_right = diagnostics(&perfect, &hidden, &hidden, &g).unwrap();
        assert_eq!(all_right.a0, None);
        // node 1 only touches the source and target 2, both outside 𝒩
        let only_good = CrossDomainGraph::from_edges(
            vec![Domain::Target, Domain::Target],
            &[(0, 1, 0.5)],
        )
        .unwrap();
        let c = ConfidentSet {
            member_ids: vec![0],
            gamma: 0.5,
            threshold_value: 1.0,
        };
        let d = diagnostics(&c, &[1, 1], &[1, 1], &only_good).unwrap();
        assert_eq!(d.alpha_per_node, vec![Some(1.0), Some(1.0)]);
    }
}
