//! Retrieval metrics over ranked relevance flags, hash-bit correlation and
//! the aggregated metrics report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::BinaryCodeIndex;
use crate::matrix::Matrix;

/// Relevance flags of a ranking under the same-class rule.
pub fn relevance_flags(ranked_ids: &[usize], query_label: usize, database_labels: &[usize]) -> Vec<bool> {
    ranked_ids.iter().map(|&i| database_labels[i] == query_label).collect()
}

/// Full-ranking AP. `None` when nothing is relevant.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// AP restricted to the top `cutoff` ranks, normalised by the relevant items
/// found there. `None` when the full ranking has no relevant item; zero when
/// relevant items exist only below the cutoff.
pub fn average_precision_at(relevance: &[bool], cutoff: usize) -> Option<f64> {
    if !relevance.iter().any(|&r| r) {
        return None;
    }
    Some(average_precision(&relevance[..cutoff.min(relevance.len())]).unwrap_or(0.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "cutoff")]
pub enum MapMode {
    #[default]
    All,
    AtR(usize),
}

impl MapMode {
    pub fn ap(&self, relevance: &[bool]) -> Option<f64> {
        match *self {
            MapMode::All => average_precision(relevance),
            MapMode::AtR(r) => average_precision_at(relevance, r),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub map: f64,
    pub evaluated_queries: usize,
    pub zero_relevant_queries: usize,
    pub per_query: Vec<Option<f64>>,
}

pub fn mean_average_precision(rankings: &[Vec<bool>], mode: MapMode) -> MapSummary {
    let per_query: Vec<Option<f64>> = rankings.iter().map(|r| mode.ap(r)).collect();
    summarize(per_query)
}

fn summarize(per_query: Vec<Option<f64>>) -> MapSummary {
    let scored: Vec<f64> = per_query.iter().flatten().copied().collect();
    MapSummary {
        map: if scored.is_empty() {
            0.0
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        },
        evaluated_queries: scored.len(),
        zero_relevant_queries: per_query.len() - scored.len(),
        per_query,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub cutoff: usize,
    pub recall: f64,
    pub precision: f64,
}

/// Cutoffs `1..=n` thinned to at most `points` knots, first and last kept.
pub fn knot_cutoffs(n: usize, points: usize) -> Vec<usize> {
    if n == 0 || points == 0 {
        return Vec::new();
    }
    if points == 1 {
        return vec![n];
    }
    let mut out: Vec<usize> = (0..points)
        .map(|i| 1 + ((i as f64) * (n - 1) as f64 / (points - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Precision and recall at each knot cutoff. Recall is zero throughout when
/// nothing is relevant.
pub fn pr_curve(relevance: &[bool], points: usize) -> Vec<PrPoint> {
    let total = relevance.iter().filter(|&&r| r).count();
    let mut prefix = Vec::with_capacity(relevance.len());
    let mut hits = 0usize;
    for &r in relevance {
        hits += r as usize;
        prefix.push(hits);
    }
    knot_cutoffs(relevance.len(), points)
        .into_iter()
        .map(|c| PrPoint {
            cutoff: c,
            recall: if total == 0 { 0.0 } else { prefix[c - 1] as f64 / total as f64 },
            precision: prefix[c - 1] as f64 / c as f64,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopNPoint {
    /// Requested N.
    pub n: usize,
    /// N actually used after clamping to the ranking length.
    pub effective_n: usize,
    pub precision: f64,
    pub recall: f64,
    pub hits: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopNCurves {
    pub points: Vec<TopNPoint>,
    pub clamped: bool,
}

pub fn topn_curves(relevance: &[bool], ns: &[usize]) -> TopNCurves {
    let total = relevance.iter().filter(|&&r| r).count();
    let mut clamped = false;
    let points = ns
        .iter()
        .map(|&n| {
            let eff = n.min(relevance.len());
            clamped |= eff != n;
            let hits = relevance[..eff].iter().filter(|&&r| r).count();
            TopNPoint {
                n,
                effective_n: eff,
                precision: if eff == 0 { 0.0 } else { hits as f64 / eff as f64 },
                recall: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
                hits,
            }
        })
        .collect();
    TopNCurves { points, clamped }
}

/// Pearson correlation between code bits. Constant columns correlate 0 with
/// everything else and 1 with themselves.
pub fn bit_correlation(codes: &Matrix) -> Result<Matrix> {
    let (n, l) = (codes.rows(), codes.cols());
    if n < 2 {
        return Err(Error::InvalidArgument("bit correlation needs at least two codes".into()));
    }
    let means = codes.sum_rows().into_iter().map(|s| s / n as f64).collect::<Vec<_>>();
    let mut centered = codes.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&means) {
            *v -= m;
        }
    }
    let cov = centered.t_matmul(&centered);
    let sd: Vec<f64> = (0..l).map(|j| cov.get(j, j).sqrt()).collect();
    let mut out = Matrix::zeros(l, l);
    for a in 0..l {
        for b in 0..l {
            let v = if a == b {
                1.0
            } else if sd[a] < 1e-12 || sd[b] < 1e-12 {
                0.0
            } else {
                (cov.get(a, b) / (sd[a] * sd[b])).clamp(-1.0, 1.0)
            };
            out.set(a, b, v);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub map_mode: MapMode,
    pub pr_points: usize,
    pub topn: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            map_mode: MapMode::All,
            pr_points: 21,
            topn: vec![1, 5, 10, 20, 50, 100, 200, 500, 1000],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub queries: usize,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub map_mode: MapMode,
    pub queries: usize,
    pub evaluated_queries: usize,
    pub zero_relevant_queries: usize,
    pub database_size: usize,
    /// (recall, precision) averaged over evaluated queries at shared cutoffs.
    pub pr_curve: Vec<(f64, f64)>,
    pub topn_precision: Vec<(usize, f64)>,
    pub topn_recall: Vec<(usize, f64)>,
    pub topn_clamped: bool,
    pub per_class: Vec<ClassMetrics>,
    /// Bit correlation of the query codes.
    pub bit_correlation: Vec<Vec<f64>>,
}

/// Ranks the database for every query with the Hamming index and scores the
/// rankings by shared class labels.
pub fn evaluate_codes(
    query_codes: &Matrix,
    query_labels: &[usize],
    database_codes: &Matrix,
    database_labels: &[usize],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if query_codes.rows() != query_labels.len() || database_codes.rows() != database_labels.len() {
        return Err(Error::Shape("codes and labels disagree in length".into()));
    }
    if database_codes.rows() == 0 || query_codes.rows() == 0 {
        return Err(Error::Empty("retrieval set"));
    }
    let index = BinaryCodeIndex::pack(database_codes)?;
    let ranked = index.search_parallel(query_codes, index.len())?;
    let rankings: Vec<Vec<bool>> = ranked
        .neighbors
        .iter()
        .zip(query_labels)
        .map(|(nbs, &q)| nbs.iter().map(|nb| database_labels[nb.index] == q).collect())
        .collect();
    let mut report = report_from_rankings(&rankings, query_labels, opts);
    let corr = bit_correlation(query_codes).unwrap_or_else(|_| Matrix::zeros(0, 0));
    report.bit_correlation = corr.iter_rows().map(|r| r.to_vec()).collect();
    Ok(report)
}

/// Aggregates metrics from per-query ranked relevance flags. All rankings
/// must have the database length.
pub fn report_from_rankings(rankings: &[Vec<bool>], query_labels: &[usize], opts: &EvalOptions) -> MetricsReport {
    let summary = mean_average_precision(rankings, opts.map_mode);
    let n = rankings.first().map_or(0, |r| r.len());
    let knots = knot_cutoffs(n, opts.pr_points);
    let mut pr = vec![(0.0, 0.0); knots.len()];
    let mut tp = vec![0.0; opts.topn.len()];
    let mut tr = vec![0.0; opts.topn.len()];
    let mut clamped = false;
    for (r, ap) in rankings.iter().zip(&summary.per_query) {
        if ap.is_none() {
            continue;
        }
        for (acc, p) in pr.iter_mut().zip(pr_curve(r, opts.pr_points)) {
            acc.0 += p.recall;
            acc.1 += p.precision;
        }
        let t = topn_curves(r, &opts.topn);
        clamped |= t.clamped;
        for (i, p) in t.points.iter().enumerate() {
            tp[i] += p.precision;
            tr[i] += p.recall;
        }
    }
    let m = summary.evaluated_queries.max(1) as f64;
    let classes = query_labels.iter().copied().max().map_or(0, |c| c + 1);
    let per_class = (0..classes)
        .filter_map(|c| {
            let aps: Vec<Option<f64>> = summary
                .per_query
                .iter()
                .zip(query_labels)
                .filter(|(_, &q)| q == c)
                .map(|(a, _)| *a)
                .collect();
            (!aps.is_empty()).then(|| {
                let s = summarize(aps);
                ClassMetrics {
                    class: c,
                    queries: s.evaluated_queries,
                    map: s.map,
                }
            })
        })
        .collect();
    MetricsReport {
        map: summary.map,
        map_mode: opts.map_mode,
        queries: rankings.len(),
        evaluated_queries: summary.evaluated_queries,
        zero_relevant_queries: summary.zero_relevant_queries,
        database_size: n,
        pr_curve: pr.into_iter().map(|(r, p)| (r / m, p / m)).collect(),
        topn_precision: opts.topn.iter().zip(&tp).map(|(&n, &v)| (n, v / m)).collect(),
        topn_recall: opts.topn.iter().zip(&tr).map(|(&n, &v)| (n, v / m)).collect(),
        topn_clamped: clamped,
        per_class,
        bit_correlation: Vec::new(),
    }
}

/// Plot-ready CSV with one row per curve point: `curve,x,y`.
pub fn curves_csv(report: &MetricsReport) -> String {
    let mut s = String::from("curve,x,y\n");
    for (r, p) in &report.pr_curve {
        let _ = writeln!(s, "pr,{r},{p}");
    }
    for (n, v) in &report.topn_precision {
        let _ = writeln!(s, "topn_precision,{n},{v}");
    }
    for (n, v) in &report.topn_recall {
        let _ = writeln!(s, "topn_recall,{n},{v}");
    }
    s
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true, true]), Some(1.0));
        assert_eq!(average_precision(&[false, true]), Some(0.5));
        assert_eq!(average_precision(&[false, false]), None);
        assert_eq!(average_precision_at(&[false, false, true], 2), Some(0.0));
    }

    #[test]
    fn map_excludes_zero_relevant() {
        let s = mean_average_precision(&[vec![true, false], vec![false, false]], MapMode::All);
        assert_eq!(s.map, 1.0);
        assert_eq!(s.evaluated_queries, 1);
        assert_eq!(s.zero_relevant_queries, 1);
    }

    #[test]
    fn pr_and_topn_examples() {
        let perfect = [true, true, false, false];
        assert!(pr_curve(&perfect, 2).iter().all(|p| p.cutoff > 2 || p.precision == 1.0));
        assert!(pr_curve(&[false; 5], 3).iter().all(|p| p.precision == 0.0));
        let k = knot_cutoffs(10, 4);
        assert_eq!((k[0], *k.last().unwrap()), (1, 10));
        let t = topn_curves(&[true, false, true], &[1, 3, 9]);
        assert_eq!(t.points[0].precision, 1.0);
        assert_eq!(t.points[1].recall, 1.0);
        assert!(t.clamped);
        assert_eq!(t.points[2].effective_n, 3);
    }

    #[test]
    fn correlation_conventions() {
        let m = Matrix::from_rows(&[
            [1.0, 1.0, -1.0, 1.0],
            [-1.0, -1.0, 1.0, 1.0],
            [1.0, 1.0, -1.0, 1.0],
        ]);
        let c = bit_correlation(&m).unwrap();
        assert!((c.get(0, 1) - 1.0).abs() < 1e-12);
        assert!((c.get(0, 2) + 1.0).abs() < 1e-12);
        assert_eq!(c.get(0, 3), 0.0);
        assert_eq!(c.get(3, 3), 1.0);
        assert!(bit_correlation(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn perfect_retrieval_has_unit_map() {
        let q = Matrix::from_rows(&[[1.0, 1.0], [-1.0, -1.0]]);
        let r = evaluate_codes(&q, &[0, 1], &q, &[0, 1], &EvalOptions::default()).unwrap();
        assert_eq!(r.map, 1.0);
        assert!(r.topn_clamped);
    }
}
