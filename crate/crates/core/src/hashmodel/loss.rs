use serde::{Deserialize, Serialize};

use super::{log_sum_exp, Grads, HashModel};
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};

fn one_hot(labels: &[usize], num_classes: usize) -> Result<Matrix> {
    let mut y = Matrix::zeros(labels.len(), num_classes);
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                num_classes,
            });
        }
        y.set(i, l, 1.0);
    }
    Ok(y)
}

/// Mean softmax cross-entropy of prototype logits `tanh(z_c)ᵀ u_i` against
/// the true labels.
pub fn loss_source(model: &HashModel, x: &Matrix, labels: &[usize]) -> Result<(f64, Grads)> {
    if labels.len() != x.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), x.rows())));
    }
    let y = one_hot(labels, model.num_classes())?;
    model.soft_cross_entropy(x, &y)
}

/// Mean over class pairs of `max(0, cos(ẑ_c, ẑ_c'))` on relaxed prototypes.
pub fn loss_margin(model: &HashModel) -> Result<(f64, Grads)> {
    let c = model.num_classes();
    if c < 2 {
        return Err(Error::InvalidArgument("margin loss needs at least two classes".into()));
    }
    let z = model.relaxed_prototypes();
    let norms: Vec<f64> = z.iter_rows().map(norm).collect();
    let pairs = (c * (c - 1) / 2) as f64;
    let mut d_z = Matrix::zeros(c, model.code_length());
    let mut total = 0.0;
    for a in 0..c {
        for b in (a + 1)..c {
            if norms[a] == 0.0 || norms[b] == 0.0 {
                continue;
            }
            let cos = dot(z.row(a), z.row(b)) / (norms[a] * norms[b]);
            if cos <= 0.0 {
                continue;
            }
            total += cos;
            // d cos / d z_a = z_b / (|a||b|) − cos z_a / |a|²
            for k in 0..model.code_length() {
                let ga = z.get(b, k) / (norms[a] * norms[b]) - cos * z.get(a, k) / (norms[a] * norms[a]);
                let gb = z.get(a, k) / (norms[a] * norms[b]) - cos * z.get(b, k) / (norms[b] * norms[b]);
                d_z.set(a, k, d_z.get(a, k) + ga / pairs);
                d_z.set(b, k, d_z.get(b, k) + gb / pairs);
            }
        }
    }
    let mut grads = Grads::zeros_like(model);
    model.backward_prototypes(&d_z, &mut grads);
    Ok((total / pairs, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub class: usize,
    /// Difference between the two largest softmax probabilities.
    pub confidence: f64,
}

/// `argmax_c sign(u_j)ᵀ tanh(z_c)`, ties to the lower class id.
pub fn pseudo_label(model: &HashModel, x: &Matrix) -> Result<Vec<PseudoLabel>> {
    let (_, binary) = model.forward(x)?;
    let protos = model.relaxed_prototypes();
    Ok(pseudo_label_codes(&binary, &protos))
}

pub(crate) fn pseudo_label_codes(binary: &Matrix, protos: &Matrix) -> Vec<PseudoLabel> {
    let logits = binary.matmul_t(protos);
    logits
        .iter_rows()
        .map(|s| {
            let mut best = 0;
            for c in 1..s.len() {
                if s[c] > s[best] {
                    best = c;
                }
            }
            let confidence = if s.len() < 2 {
                1.0
            } else {
                let lse = log_sum_exp(s);
                let second = (0..s.len())
                    .filter(|&c| c != best)
                    .map(|c| s[c])
                    .fold(f64::NEG_INFINITY, f64::max);
                (s[best] - lse).exp() - (second - lse).exp()
            };
            PseudoLabel {
                class: best,
                confidence,
            }
        })
        .collect()
}

/// Denominator used by the target consistency loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyForm {
    /// `Σ_{i∈Bˢ} exp(u_iᵀ u_j)`: every source code scored against the target anchor.
    #[default]
    Anchor,
    /// `Σ_{i∈Bˢ} exp(u_iᵀ u_k)`: source codes scored against the positive source code.
    SourcePair,
}

/// Contrastive consistency between target codes and same-(pseudo)label
/// source codes of one mini-batch.
///
/// For every target `j` whose pseudo-label occurs among the source labels,
/// with `Π(j)` those source rows:
/// `ℓ_j = −1/|Π(j)| Σ_{k∈Π(j)} log(exp(u_kᵀ u_j) / denominator)`.
/// The loss is the mean of `ℓ_j` over such targets and zero when there are none.
pub fn loss_target_consistency(
    model: &HashModel,
    source_x: &Matrix,
    source_labels: &[usize],
    target_x: &Matrix,
    pseudo_labels: &[usize],
    form: ConsistencyForm,
) -> Result<(f64, Grads)> {
    let mut grads = Grads::zeros_like(model);
    let value = loss_target_consistency_into(
        model,
        source_x,
        source_labels,
        target_x,
        pseudo_labels,
        form,
        1.0,
        &mut grads,
    )?;
    Ok((value, grads))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn loss_target_consistency_into(
    model: &HashModel,
    source_x: &Matrix,
    source_labels: &[usize],
    target_x: &Matrix,
    pseudo_labels: &[usize],
    form: ConsistencyForm,
    weight: f64,
    grads: &mut Grads,
) -> Result<f64> {
    if source_labels.len() != source_x.rows() || pseudo_labels.len() != target_x.rows() {
        return Err(Error::Shape("labels do not match batch rows".into()));
    }
    let contributing: Vec<usize> = (0..target_x.rows())
        .filter(|&j| source_labels.contains(&pseudo_labels[j]))
        .collect();
    if contributing.is_empty() {
        return Ok(0.0);
    }
    let sc = model.forward_cached(source_x)?;
    let tc = model.forward_cached(target_x)?;
    let us = &sc.relaxed;
    let ut = &tc.relaxed;
    let l = model.code_length();
    let ns = us.rows();
    let mut d_us = Matrix::zeros(ns, l);
    let mut d_ut = Matrix::zeros(ut.rows(), l);
    let scale = weight / contributing.len() as f64;
    let mut total = 0.0;

    // sims between source rows, needed only for the source-pair form
    let ss = matches!(form, ConsistencyForm::SourcePair).then(|| us.matmul_t(us));

    for &j in &contributing {
        let positives: Vec<usize> = (0..ns).filter(|&k| source_labels[k] == pseudo_labels[j]).collect();
        let inv = 1.0 / positives.len() as f64;
        let anchor = ut.row(j);
        let s: Vec<f64> = (0..ns).map(|i| dot(us.row(i), anchor)).collect();
        match form {
            ConsistencyForm::Anchor => {
                let lse = log_sum_exp(&s);
                let mut loss_j = 0.0;
                for &k in &positives {
                    loss_j += inv * (lse - s[k]);
                }
                total += loss_j;
                // d ℓ / d s_i = p_i − [i ∈ Π] / |Π|
                for i in 0..ns {
                    let mut ds = (s[i] - lse).exp();
                    if source_labels[i] == pseudo_labels[j] {
                        ds -= inv;
                    }
                    let ds = ds * scale;
                    for c in 0..l {
                        d_us.set(i, c, d_us.get(i, c) + ds * anchor[c]);
                        d_ut.set(j, c, d_ut.get(j, c) + ds * us.get(i, c));
                    }
                }
            }
            ConsistencyForm::SourcePair => {
                let ss = ss.as_ref().expect("computed above");
                let mut loss_j = 0.0;
                for &k in &positives {
                    let row = ss.row(k);
                    let lse = log_sum_exp(row);
                    loss_j += inv * (lse - s[k]);
                    // d lse_k: each u_iᵀu_k term, with the diagonal counted on both sides
                    let mut pull = vec![0.0; l];
                    for i in 0..ns {
                        let q = (row[i] - lse).exp() * inv * scale;
                        for c in 0..l {
                            d_us.set(i, c, d_us.get(i, c) + q * us.get(k, c));
                            pull[c] += q * us.get(i, c);
                        }
                    }
                    for c in 0..l {
                        let v = d_us.get(k, c) + pull[c] - inv * scale * anchor[c];
                        d_us.set(k, c, v);
                        d_ut.set(j, c, d_ut.get(j, c) - inv * scale * us.get(k, c));
                    }
                }
                total += loss_j;
            }
        }
    }
    model.backward(&sc, &d_us, grads);
    model.backward(&tc, &d_ut, grads);
    Ok(total / contributing.len() as f64)
}
