//! Cross-domain random walks and hierarchical (input-level and
//! feature-level) Mixup.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Domain;
use crate::diffusion::ConfidentSet;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::CrossDomainGraph;
use crate::hashmodel::{Grads, HashModel};
use crate::matrix::Matrix;

pub const DEFAULT_WALK_LENGTH: usize = 5;
pub const MAX_ATTEMPTS_PER_WALK: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkPath {
    pub node_ids: Vec<usize>,
    /// `edge_weights[s]` is the weight of the hop `node_ids[s] → node_ids[s + 1]`.
    pub edge_weights: Vec<f64>,
}

impl WalkPath {
    pub fn start(&self) -> usize {
        self.node_ids[0]
    }

    pub fn end(&self) -> usize {
        *self.node_ids.last().expect("walks are never empty")
    }

    /// Checks adjacency, recorded weights and endpoint constraints.
    pub fn is_valid(&self, g: &CrossDomainGraph, confident: &ConfidentSet) -> bool {
        self.node_ids.len() == self.edge_weights.len() + 1
            && g.domain(self.start()) == Domain::Source
            && confident.contains(self.end())
            && self
                .node_ids
                .windows(2)
                .zip(&self.edge_weights)
                .all(|(hop, &w)| g.weight(hop[0], hop[1]) == Some(w))
    }
}

/// Mixing pair oriented source → target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixupPair {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

impl MixupPair {
    pub fn new(source: usize, target: usize, weight: f64) -> Self {
        Self {
            source,
            target,
            weight,
        }
    }

    /// Coefficient of the source endpoint, `1 / (1 + w)`.
    pub fn lambda_source(&self) -> f64 {
        1.0 / (1.0 + self.weight)
    }

    /// Coefficient of the target endpoint, `w / (1 + w)`.
    pub fn lambda_target(&self) -> f64 {
        self.weight / (1.0 + self.weight)
    }
}

/// Next node with probability proportional to edge weight, or `None` when
/// the node has no outgoing weight.
fn step(g: &CrossDomainGraph, from: usize, rng: &mut impl Rng) -> Option<(usize, f64)> {
    let nb = g.neighbors(from);
    let total: f64 = nb.iter().map(|&(_, w)| w).sum();
    if total <= 0.0 {
        return None;
    }
    let mut r = rng.random::<f64>() * total;
    for &(j, w) in nb {
        if r < w {
            return Some((j, w));
        }
        r -= w;
    }
    // rounding left r just above zero: take the last positive-weight neighbour
    nb.iter().rev().find(|&&(_, w)| w > 0.0).copied()
}

fn one_walk(g: &CrossDomainGraph, sources: &[usize], confident: &ConfidentSet, k: usize, seed: u64) -> Option<WalkPath> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'attempt: for _ in 0..MAX_ATTEMPTS_PER_WALK {
        let mut node = sources[rng.random_range(0..sources.len())];
        let mut path = WalkPath {
            node_ids: vec![node],
            edge_weights: Vec::with_capacity(k),
        };
        for _ in 0..k {
            match step(g, node, &mut rng) {
                Some((next, w)) => {
                    path.node_ids.push(next);
                    path.edge_weights.push(w);
                    node = next;
                }
                None => continue 'attempt,
            }
        }
        if confident.contains(node) {
            return Some(path);
        }
    }
    None
}

/// Weighted random walks of `k` hops from uniformly chosen source nodes,
/// kept only when they end inside the confident set.
///
/// Each requested walk gets up to [`MAX_ATTEMPTS_PER_WALK`] tries with its
/// own generator seeded by `seed ^ walk_index`, so the output does not depend
/// on scheduling. Walks that exhaust their budget are dropped; if none
/// succeed the call fails with [`Error::NoAcceptedWalks`].
pub fn sample_walks(
    g: &CrossDomainGraph,
    confident: &ConfidentSet,
    k: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<WalkPath>> {
    if k == 0 {
        return Err(Error::InvalidArgument("walk length must be at least 1".into()));
    }
    if confident.is_empty() {
        return Err(Error::Empty("confident set"));
    }
    let sources: Vec<usize> = g.source_nodes().collect();
    if sources.is_empty() {
        return Err(Error::Empty("source nodes"));
    }
    let run = |w: usize| one_walk(g, &sources, confident, k, seed ^ w as u64);
    #[cfg(feature = "parallel")]
    let walks: Vec<Option<WalkPath>> = {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let walks: Vec<Option<WalkPath>> = (0..count).map(run).collect();

    let accepted: Vec<WalkPath> = walks.into_iter().flatten().collect();
    if accepted.is_empty() && count > 0 {
        return Err(Error::NoAcceptedWalks {
            attempts: count * MAX_ATTEMPTS_PER_WALK,
        });
    }
    Ok(accepted)
}

/// Consecutive hops of `path` that cross domains, oriented source → target.
pub fn extract_pairs(path: &WalkPath, g: &CrossDomainGraph) -> Vec<MixupPair> {
    path.node_ids
        .windows(2)
        .zip(&path.edge_weights)
        .filter_map(|(hop, &w)| match (g.domain(hop[0]), g.domain(hop[1])) {
            (Domain::Source, Domain::Target) => Some(MixupPair::new(hop[0], hop[1], w)),
            (Domain::Target, Domain::Source) => Some(MixupPair::new(hop[1], hop[0], w)),
            _ => None,
        })
        .collect()
}

/// Direct source–target edges into the confident set; used when no walk
/// reaches it.
pub fn fallback_pairs(g: &CrossDomainGraph, confident: &ConfidentSet) -> Vec<MixupPair> {
    let mut out = Vec::new();
    for &t in &confident.member_ids {
        for &(s, w) in g.neighbors(t) {
            if g.domain(s) == Domain::Source {
                out.push(MixupPair::new(s, t, w));
            }
        }
    }
    out
}

/// `x_i / (1 + w) + w x_j / (1 + w)`.
pub fn mix_inputs(pair: &MixupPair, xi: &[f64], xj: &[f64]) -> Result<Vec<f64>> {
    if xi.len() != xj.len() {
        return Err(Error::Dimension {
            expected: xi.len(),
            got: xj.len(),
        });
    }
    let (a, b) = (pair.lambda_source(), pair.lambda_target());
    Ok(xi.iter().zip(xj).map(|(u, v)| a * u + b * v).collect())
}

/// Soft label mixing `onehot(y_i)` and `onehot(ŷ_j)` with the pair's coefficients.
pub fn mix_labels(pair: &MixupPair, yi: usize, yj: usize, num_classes: usize) -> Result<Vec<f64>> {
    for y in [yi, yj] {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange { label: y, num_classes });
        }
    }
    let mut out = vec![0.0; num_classes];
    out[yi] += pair.lambda_source();
    out[yj] += pair.lambda_target();
    Ok(out)
}

/// Endpoints of a set of mixing pairs gathered into matrices.
#[derive(Clone, Debug)]
pub struct MixupBatch {
    pub pairs: Vec<MixupPair>,
    /// Rows for the source endpoints.
    pub source_rows: Matrix,
    /// Rows for the target endpoints.
    pub target_rows: Matrix,
    pub source_labels: Vec<usize>,
    /// Pseudo-labels of the target endpoints.
    pub target_labels: Vec<usize>,
}

impl MixupBatch {
    fn check(&self) -> Result<()> {
        let n = self.pairs.len();
        if self.source_rows.rows() != n
            || self.target_rows.rows() != n
            || self.source_labels.len() != n
            || self.target_labels.len() != n
        {
            return Err(Error::Shape("mixup batch parts disagree in length".into()));
        }
        if self.source_rows.cols() != self.target_rows.cols() {
            return Err(Error::Dimension {
                expected: self.source_rows.cols(),
                got: self.target_rows.cols(),
            });
        }
        Ok(())
    }

    fn mixed_rows(&self) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.pairs.len(), self.source_rows.cols());
        for (i, p) in self.pairs.iter().enumerate() {
            let m = mix_inputs(p, self.source_rows.row(i), self.target_rows.row(i))?;
            out.row_mut(i).copy_from_slice(&m);
        }
        Ok(out)
    }

    fn soft_labels(&self, num_classes: usize) -> Result<Matrix> {
        let mut y = Matrix::zeros(self.pairs.len(), num_classes);
        for (i, p) in self.pairs.iter().enumerate() {
            let m = mix_labels(p, self.source_labels[i], self.target_labels[i], num_classes)?;
            y.row_mut(i).copy_from_slice(&m);
        }
        Ok(y)
    }
}

/// Input-level Mixup loss: rows are raw inputs, mixed first and then passed
/// through `encoder` and the hash head.
pub fn loss_pixel(model: &HashModel, encoder: &dyn Encoder, batch: &MixupBatch) -> Result<(f64, Grads)> {
    let mut grads = Grads::zeros_like(model);
    let v = loss_pixel_into(model, encoder, batch, 1.0, &mut grads)?;
    Ok((v, grads))
}

pub(crate) fn loss_pixel_into(
    model: &HashModel,
    encoder: &dyn Encoder,
    batch: &MixupBatch,
    weight: f64,
    grads: &mut Grads,
) -> Result<f64> {
    batch.check()?;
    if batch.pairs.is_empty() {
        return Ok(0.0);
    }
    let latent = encoder.encode(&batch.mixed_rows()?);
    let y = batch.soft_labels(model.num_classes())?;
    model.soft_cross_entropy_into(&latent, &y, weight, grads)
}

/// Feature-level Mixup loss: rows are latent features, mixed directly.
pub fn loss_manifold(model: &HashModel, batch: &MixupBatch) -> Result<(f64, Grads)> {
    let mut grads = Grads::zeros_like(model);
    let v = loss_manifold_into(model, batch, 1.0, &mut grads)?;
    Ok((v, grads))
}

pub(crate) fn loss_manifold_into(model: &HashModel, batch: &MixupBatch, weight: f64, grads: &mut Grads) -> Result<f64> {
    batch.check()?;
    if batch.pairs.is_empty() {
        return Ok(0.0);
    }
    let mixed = batch.mixed_rows()?;
    let y = batch.soft_labels(model.num_classes())?;
    model.soft_cross_entropy_into(&mixed, &y, weight, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Identity;

    fn path_graph() -> CrossDomainGraph {
        CrossDomainGraph::from_edges(vec![Domain::Source, Domain::Target], &[(0, 1, 0.7)]).unwrap()
    }

    fn set(ids: &[usize]) -> ConfidentSet {
        ConfidentSet {
            member_ids: ids.to_vec(),
            gamma: 0.5,
            threshold_value: 0.0,
        }
    }

    #[test]
    fn forced_walk() {
        let g = path_graph();
        let walks = sample_walks(&g, &set(&[1]), 1, 5, 3).unwrap();
        assert_eq!(walks.len(), 5);
        for w in &walks {
            assert_eq!(w.node_ids, vec![0, 1]);
            assert_eq!(w.edge_weights, vec![0.7]);
        }
        assert!(sample_walks(&g, &set(&[1]), 0, 5, 3).is_err());
        assert!(sample_walks(&g, &set(&[]), 1, 5, 3).is_err());
    }

    #[test]
    fn unreachable_confident_set_errors() {
        // walks of even length from node 0 always end on a source
        let g = path_graph();
        let err = sample_walks(&g, &set(&[1]), 2, 3, 0).unwrap_err();
        assert!(matches!(err, Error::NoAcceptedWalks { .. }));
    }

    #[test]
    fn pair_extraction() {
        let g = CrossDomainGraph::from_edges(
            vec![Domain::Source, Domain::Source, Domain::Target],
            &[(0, 1, 1.0), (1, 2, 0.4)],
        )
        .unwrap();
        let p = WalkPath {
            node_ids: vec![0, 1, 2],
            edge_weights: vec![1.0, 0.4],
        };
        assert_eq!(extract_pairs(&p, &g), vec![MixupPair::new(1, 2, 0.4)]);
        let back = WalkPath {
            node_ids: vec![2, 1],
            edge_weights: vec![0.4],
        };
        assert_eq!(extract_pairs(&back, &g), vec![MixupPair::new(1, 2, 0.4)]);
    }

    #[test]
    fn mixing_examples() {
        let w1 = MixupPair::new(0, 1, 1.0);
        assert_eq!(mix_inputs(&w1, &[2.0, 0.0], &[4.0, 2.0]).unwrap(), vec![3.0, 1.0]);
        let w0 = MixupPair::new(0, 1, 0.0);
        assert_eq!(mix_inputs(&w0, &[2.0, -1.0], &[4.0, 2.0]).unwrap(), vec![2.0, -1.0]);
        let w3 = MixupPair::new(0, 1, 3.0);
        assert_eq!(mix_inputs(&w3, &[0.0], &[4.0]).unwrap(), vec![3.0]);
        assert!(mix_inputs(&w3, &[0.0], &[4.0, 1.0]).is_err());

        assert_eq!(mix_labels(&w3, 1, 1, 3).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(mix_labels(&w1, 0, 2, 3).unwrap(), vec![0.5, 0.0, 0.5]);
        assert_eq!(mix_labels(&w0, 2, 0, 3).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(mix_labels(&w0, 3, 0, 3).is_err());
    }

    fn batch(weights: &[f64]) -> MixupBatch {
        let n = weights.len();
        MixupBatch {
            pairs: weights.iter().enumerate().map(|(i, &w)| MixupPair::new(i, n + i, w)).collect(),
            source_rows: Matrix::from_vec(n, 2, (0..2 * n).map(|v| (v as f64 * 0.37).sin()).collect()),
            target_rows: Matrix::from_vec(n, 2, (0..2 * n).map(|v| (v as f64 * 0.91).cos()).collect()),
            source_labels: (0..n).map(|i| i % 3).collect(),
            target_labels: (0..n).map(|i| (i + 1) % 3).collect(),
        }
    }

    #[test]
    fn pixel_and_manifold_agree_under_identity() {
        let m = HashModel::new(2, 5, 8, 3, 2);
        let b = batch(&[0.2, 0.9, 0.5]);
        let (p, gp) = loss_pixel(&m, &Identity, &b).unwrap();
        let (q, gq) = loss_manifold(&m, &b).unwrap();
        assert_eq!(p, q);
        assert_eq!(gp, gq);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let mut m = HashModel::new(2, 5, 8, 3, 2);
        m.prototypes = Matrix::zeros(3, 8);
        let (v, _) = loss_manifold(&m, &batch(&[0.3, 0.6])).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_pair_reduces_to_source_cross_entropy() {
        let m = HashModel::new(2, 5, 8, 3, 2);
        let b = batch(&[0.0, 0.0]);
        let (v, _) = loss_manifold(&m, &b).unwrap();
        let (s, _) = crate::hashmodel::loss_source(&m, &b.source_rows, &b.source_labels).unwrap();
        assert!((v - s).abs() < 1e-12);
    }

    #[test]
    fn soft_target_equals_mixed_prototype_form() {
        // −Σ_c y_c log p_c = lse(s) − (Σ_c y_c ẑ_c)ᵀ u because the logits are linear in ẑ
        let m = HashModel::new(2, 5, 8, 3, 4);
        let b = batch(&[0.4, 1.3]);
        let (soft, _) = loss_manifold(&m, &b).unwrap();
        let mixed = b.mixed_rows().unwrap();
        let (u, _) = m.forward(&mixed).unwrap();
        let z = m.relaxed_prototypes();
        let mut direct = 0.0;
        for (i, p) in b.pairs.iter().enumerate() {
            let s: Vec<f64> = z.iter_rows().map(|zc| crate::matrix::dot(zc, u.row(i))).collect();
            let zm: Vec<f64> = (0..8)
                .map(|k| p.lambda_source() * z.get(b.source_labels[i], k) + p.lambda_target() * z.get(b.target_labels[i], k))
                .collect();
            direct += crate::hashmodel::log_sum_exp(&s) - crate::matrix::dot(&zm, u.row(i));
        }
        direct /= b.pairs.len() as f64;
        assert!((soft - direct).abs() < 1e-12);
    }
}
