//! Cross-domain mutual-nearest-neighbour relationship graph.
//!
//! Node ids are laid out with all source samples first (`0..n_source`)
//! followed by the target samples.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Domain, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};

/// Default neighbourhood size for every mutual-kNN rule.
pub const DEFAULT_K: usize = 3;

/// Weight given to intra-source edges between samples sharing a label.
pub const SAME_LABEL_WEIGHT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct CrossDomainGraph {
    node_domain: Vec<Domain>,
    /// Per node, `(neighbour, weight)` sorted by neighbour id.
    adjacency: Vec<Vec<(usize, f64)>>,
    weighted_degree: Vec<f64>,
    edge_count: usize,
}

impl CrossDomainGraph {
    /// Builds a simple undirected graph. Repeated pairs keep the largest weight.
    pub fn from_edges(node_domain: Vec<Domain>, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let n = node_domain.len();
        let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for &(u, v, w) in edges {
            if u >= n || v >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge ({u},{v}) out of range for {n} nodes"
                )));
            }
            if u == v {
                return Err(Error::InvalidArgument(format!("self-loop on node {u}")));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidArgument(format!("edge ({u},{v}) has weight {w}")));
            }
            let key = (u.min(v), u.max(v));
            merged
                .entry(key)
                .and_modify(|old| *old = old.max(w))
                .or_insert(w);
        }
        let mut adjacency = vec![Vec::new(); n];
        for (&(u, v), &w) in &merged {
            adjacency[u].push((v, w));
            adjacency[v].push((u, w));
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(j, _)| j);
        }
        let weighted_degree = adjacency
            .iter()
            .map(|l| l.iter().map(|&(_, w)| w).sum())
            .collect();
        Ok(Self {
            node_domain,
            adjacency,
            weighted_degree,
            edge_count: merged.len(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_domain.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn domain(&self, i: usize) -> Domain {
        self.node_domain[i]
    }

    pub fn node_domains(&self) -> &[Domain] {
        &self.node_domain
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    pub fn weighted_degree(&self, i: usize) -> f64 {
        self.weighted_degree[i]
    }

    pub fn weighted_degrees(&self) -> &[f64] {
        &self.weighted_degree
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        let list = &self.adjacency[i];
        list.binary_search_by_key(&j, |&(k, _)| k)
            .ok()
            .map(|pos| list[pos].1)
    }

    pub fn source_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_nodes()).filter(|&i| self.node_domain[i] == Domain::Source)
    }

    pub fn target_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_nodes()).filter(|&i| self.node_domain[i] == Domain::Target)
    }

    /// Edges as `(u, v, w)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.edge_count);
        for (u, list) in self.adjacency.iter().enumerate() {
            for &(v, w) in list {
                if u < v {
                    out.push((u, v, w));
                }
            }
        }
        out
    }

    /// Connected-component id per node, numbered in order of first node.
    pub fn components(&self) -> Vec<usize> {
        let n = self.num_nodes();
        let mut comp = vec![usize::MAX; n];
        let mut next = 0;
        let mut stack = Vec::new();
        for start in 0..n {
            if comp[start] != usize::MAX {
                continue;
            }
            comp[start] = next;
            stack.push(start);
            while let Some(u) = stack.pop() {
                for &(v, _) in &self.adjacency[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    pub fn to_dump(&self) -> GraphDump {
        GraphDump {
            num_nodes: self.num_nodes(),
            domains: self.node_domain.clone(),
            edges: self
                .edges()
                .into_iter()
                .map(|(u, v, w)| EdgeRecord { u, v, w })
                .collect(),
        }
    }

    pub fn from_dump(dump: &GraphDump) -> Result<Self> {
        if dump.domains.len() != dump.num_nodes {
            return Err(Error::Shape(format!(
                "graph dump lists {} domains for {} nodes",
                dump.domains.len(),
                dump.num_nodes
            )));
        }
        let edges: Vec<_> = dump.edges.iter().map(|e| (e.u, e.v, e.w)).collect();
        Self::from_edges(dump.domains.clone(), &edges)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_dump())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_dump(&serde_json::from_str(&text)?)
    }
}

/// Diagnostic JSON form of a graph. `serde_json` writes the shortest
/// representation that parses back to the same `f64`, so dumps round-trip
/// exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub num_nodes: usize,
    pub domains: Vec<Domain>,
    pub edges: Vec<EdgeRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub u: usize,
    pub v: usize,
    pub w: f64,
}

/// Mean weighted degree.
pub fn average_degree(g: &CrossDomainGraph) -> Result<f64> {
    if g.num_nodes() == 0 {
        return Err(Error::Empty("graph"));
    }
    Ok(g.weighted_degree.iter().sum::<f64>() / g.num_nodes() as f64)
}

#[inline]
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Exact k nearest base rows per query row by cosine similarity, sorted by
/// similarity descending with ties going to the lower base id.
pub fn knn(query: &Matrix, base: &Matrix, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    knn_impl(query, base, k, false)
}

/// Like [`knn`] with query and base the same set; a row is never its own neighbour.
pub fn knn_self(rows: &Matrix, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    knn_impl(rows, rows, k, true)
}

fn knn_impl(query: &Matrix, base: &Matrix, k: usize, exclude_self: bool) -> Result<Vec<Vec<(usize, f64)>>> {
    let available = base.rows() - usize::from(exclude_self && base.rows() > 0);
    if base.rows() == 0 || available == 0 {
        return Err(Error::Empty("kNN base set"));
    }
    if k == 0 || k > available {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={available}"
        )));
    }
    if query.cols() != base.cols() {
        return Err(Error::Dimension {
            expected: base.cols(),
            got: query.cols(),
        });
    }
    let base_norms: Vec<f64> = base.iter_rows().map(norm).collect();
    let one = |qi: usize| -> Vec<(usize, f64)> {
        let q = query.row(qi);
        let qn = norm(q);
        let mut sims: Vec<(usize, f64)> = base
            .iter_rows()
            .enumerate()
            .filter(|&(bi, _)| !(exclude_self && bi == qi))
            .map(|(bi, b)| {
                let s = if qn == 0.0 || base_norms[bi] == 0.0 {
                    0.0
                } else {
                    dot(q, b) / (qn * base_norms[bi])
                };
                (bi, s)
            })
            .collect();
        let order = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if k < sims.len() {
            sims.select_nth_unstable_by(k - 1, order);
            sims.truncate(k);
        }
        sims.sort_by(order);
        sims
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        Ok((0..query.rows()).into_par_iter().map(one).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok((0..query.rows()).map(one).collect())
    }
}

/// Assembles the relationship graph over `source ∪ target`.
///
/// * source–target: mutual k-nearest neighbours across domains,
/// * source–source: every pair sharing a label, weight [`SAME_LABEL_WEIGHT`],
/// * target–target: mutual k-nearest neighbours within the target.
///
/// Similarity edges are weighted by `max(0, cosine)`. `k` is clamped to the
/// size of the searched set.
pub fn build_mnn_graph(source: &EmbeddingDataset, target: &EmbeddingDataset, k: usize) -> Result<CrossDomainGraph> {
    build_mnn_graph_from(&source.features, source.labels()?, &target.features, k)
}

/// [`build_mnn_graph`] over raw matrices, used when the graph is rebuilt from
/// learned representations instead of the stored features.
pub fn build_mnn_graph_from(
    source: &Matrix,
    source_labels: &[usize],
    target: &Matrix,
    k: usize,
) -> Result<CrossDomainGraph> {
    if source.cols() != target.cols() {
        return Err(Error::Dimension {
            expected: source.cols(),
            got: target.cols(),
        });
    }
    if source_labels.len() != source.rows() {
        return Err(Error::MissingLabels);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let ns = source.rows();
    let nt = target.rows();
    let mut domains = vec![Domain::Source; ns];
    domains.extend(std::iter::repeat_n(Domain::Target, nt));
    let mut edges = Vec::new();

    if ns > 0 && nt > 0 {
        let t_to_s = knn(target, source, k.min(ns))?;
        let s_to_t = knn(source, target, k.min(nt))?;
        for (j, list) in t_to_s.iter().enumerate() {
            for &(i, sim) in list {
                if s_to_t[i].iter().any(|&(jj, _)| jj == j) {
                    edges.push((i, ns + j, sim.max(0.0)));
                }
            }
        }
    }

    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in source_labels.iter().enumerate() {
        by_label.entry(y).or_default().push(i);
    }
    for members in by_label.values() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                edges.push((i, j, SAME_LABEL_WEIGHT));
            }
        }
    }

    if nt > 1 {
        let t_to_t = knn_self(target, k.min(nt - 1))?;
        for (a, list) in t_to_t.iter().enumerate() {
            for &(b, sim) in list {
                if a < b && t_to_t[b].iter().any(|&(x, _)| x == a) {
                    edges.push((ns + a, ns + b, sim.max(0.0)));
                }
            }
        }
    }

    CrossDomainGraph::from_edges(domains, &edges)
}
