//! The trainable hash head: a two-layer tanh perceptron mapping latent
//! features to relaxed codes in (−1, 1)^L, plus one learnable prototype row
//! per class living in the same code space.

mod adam;
mod loss;
pub mod train;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use adam::{Adam, AdamConfig};
pub use loss::{
    loss_margin, loss_source, loss_target_consistency, pseudo_label, ConsistencyForm, PseudoLabel,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPL1";
pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_CODE_LENGTH: usize = 64;
pub const SUPPORTED_CODE_LENGTHS: [usize; 6] = [16, 32, 48, 64, 96, 128];

/// `sign` with `sign(0) = +1`.
#[inline]
pub fn binarize(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashModel {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    /// Raw prototype logits, one row per class; `tanh` relaxes them.
    pub prototypes: Matrix,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: Matrix,
    pub hidden: Matrix,
    pub relaxed: Matrix,
}

impl ForwardCache {
    pub fn binary(&self) -> Matrix {
        let mut b = self.relaxed.clone();
        b.map_inplace(binarize);
        b
    }
}

impl HashModel {
    /// Xavier-uniform layer weights, zero biases, standard-normal prototypes.
    pub fn new(input_dim: usize, hidden: usize, code_length: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xavier = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
            Matrix::from_vec(rows, cols, data)
        };
        let w1 = xavier(input_dim, hidden);
        let w2 = xavier(hidden, code_length);
        let mut prototypes = Matrix::zeros(num_classes, code_length);
        for v in prototypes.as_mut_slice() {
            *v = StandardNormal.sample(&mut rng);
        }
        Self {
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; code_length],
            prototypes,
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize, code_length: usize, num_classes: usize) -> Self {
        Self {
            w1: Matrix::zeros(input_dim, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, code_length),
            b2: vec![0.0; code_length],
            prototypes: Matrix::zeros(num_classes, code_length),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn code_length(&self) -> usize {
        self.w2.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let mut hidden = x.matmul(&self.w1);
        hidden.add_row_vector(&self.b1);
        hidden.map_inplace(f64::tanh);
        let mut relaxed = hidden.matmul(&self.w2);
        relaxed.add_row_vector(&self.b2);
        relaxed.map_inplace(f64::tanh);
        Ok(ForwardCache {
            input: x.clone(),
            hidden,
            relaxed,
        })
    }

    /// Relaxed codes `tanh(tanh(x W1 + b1) W2 + b2)` and their signs.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let cache = self.forward_cached(x)?;
        let binary = cache.binary();
        Ok((cache.relaxed, binary))
    }

    pub fn relaxed_prototypes(&self) -> Matrix {
        let mut z = self.prototypes.clone();
        z.map_inplace(f64::tanh);
        z
    }

    pub fn binary_prototypes(&self) -> Matrix {
        let mut z = self.prototypes.clone();
        z.map_inplace(binarize);
        z
    }

    /// Accumulates parameter gradients given `dL/d(relaxed codes)`.
    pub fn backward(&self, cache: &ForwardCache, d_relaxed: &Matrix, grads: &mut Grads) {
        let mut d_a2 = d_relaxed.clone();
        for (g, &u) in d_a2.as_mut_slice().iter_mut().zip(cache.relaxed.as_slice()) {
            *g *= 1.0 - u * u;
        }
        add_into(grads.w2.as_mut_slice(), cache.hidden.t_matmul(&d_a2).as_slice());
        add_into(&mut grads.b2, &d_a2.sum_rows());
        let mut d_a1 = d_a2.matmul_t(&self.w2);
        for (g, &h) in d_a1.as_mut_slice().iter_mut().zip(cache.hidden.as_slice()) {
            *g *= 1.0 - h * h;
        }
        add_into(grads.w1.as_mut_slice(), cache.input.t_matmul(&d_a1).as_slice());
        add_into(&mut grads.b1, &d_a1.sum_rows());
    }

    /// Accumulates prototype gradients given `dL/d(tanh(prototypes))`.
    pub fn backward_prototypes(&self, d_relaxed_protos: &Matrix, grads: &mut Grads) {
        for ((g, &d), &z) in grads
            .prototypes
            .as_mut_slice()
            .iter_mut()
            .zip(d_relaxed_protos.as_slice())
            .zip(self.prototypes.as_slice())
        {
            let t = z.tanh();
            *g += d * (1.0 - t * t);
        }
    }

    /// Soft-target cross-entropy of `softmax(tanh(Z) u)` against `targets`
    /// (rows summing to one), averaged over rows.
    pub fn soft_cross_entropy(&self, x: &Matrix, targets: &Matrix) -> Result<(f64, Grads)> {
        let mut grads = Grads::zeros_like(self);
        let value = self.soft_cross_entropy_into(x, targets, 1.0, &mut grads)?;
        Ok((value, grads))
    }

    pub(crate) fn soft_cross_entropy_into(
        &self,
        x: &Matrix,
        targets: &Matrix,
        weight: f64,
        grads: &mut Grads,
    ) -> Result<f64> {
        if targets.rows() != x.rows() || targets.cols() != self.num_classes() {
            return Err(Error::Shape(format!(
                "targets {}x{} for {} rows and {} classes",
                targets.rows(),
                targets.cols(),
                x.rows(),
                self.num_classes()
            )));
        }
        let n = x.rows();
        if n == 0 {
            return Ok(0.0);
        }
        let cache = self.forward_cached(x)?;
        let protos = self.relaxed_prototypes();
        let logits = cache.relaxed.matmul_t(&protos);
        let mut d_logits = Matrix::zeros(n, self.num_classes());
        let mut total = 0.0;
        for i in 0..n {
            let s = logits.row(i);
            let y = targets.row(i);
            let lse = log_sum_exp(s);
            let y_sum: f64 = y.iter().sum();
            total += y_sum * lse - crate::matrix::dot(y, s);
            for (c, d) in d_logits.row_mut(i).iter_mut().enumerate() {
                *d = weight * (y_sum * (s[c] - lse).exp() - y[c]) / n as f64;
            }
        }
        let d_relaxed = d_logits.matmul(&protos);
        self.backward(&cache, &d_relaxed, grads);
        let d_protos = d_logits.t_matmul(&cache.relaxed);
        self.backward_prototypes(&d_protos, grads);
        Ok(total / n as f64)
    }

    fn blocks(&self) -> [&[f64]; 5] {
        [
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
            self.prototypes.as_slice(),
        ]
    }

    pub(crate) fn blocks_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
            self.prototypes.as_mut_slice(),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// All parameters in checkpoint order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut off = 0;
        for block in self.blocks_mut() {
            block.copy_from_slice(&flat[off..off + block.len()]);
            off += block.len();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Rounds every parameter to the nearest `f32`, the precision checkpoints
    /// store. Encoding after this gives the same codes as a reloaded checkpoint.
    pub fn round_to_f32(&mut self) {
        for block in self.blocks_mut() {
            for v in block.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Checkpoint bytes: magic, u32 d, h, L, C, then W1, b1, W2, b2, Z as
    /// little-endian f32, matrices row-major.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.num_params() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for dim in [self.input_dim(), self.hidden(), self.code_length(), self.num_classes()] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for block in self.blocks() {
            for &v in block {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Shape("not a CPL1 checkpoint".into()));
        }
        let dim = |i: usize| {
            let o = 4 + 4 * i;
            u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        };
        let mut model = Self::zeros(dim(0), dim(1), dim(2), dim(3));
        let payload = &bytes[20..];
        if payload.len() != model.num_params() * 4 {
            return Err(Error::Shape(format!(
                "checkpoint payload has {} bytes, expected {}",
                payload.len(),
                model.num_params() * 4
            )));
        }
        let flat: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        model.set_flat_params(&flat);
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// Gradients with the same block layout as [`HashModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub prototypes: Matrix,
}

impl Grads {
    pub fn zeros_like(model: &HashModel) -> Self {
        Self {
            w1: Matrix::zeros(model.w1.rows(), model.w1.cols()),
            b1: vec![0.0; model.b1.len()],
            w2: Matrix::zeros(model.w2.rows(), model.w2.cols()),
            b2: vec![0.0; model.b2.len()],
            prototypes: Matrix::zeros(model.prototypes.rows(), model.prototypes.cols()),
        }
    }

    pub(crate) fn blocks(&self) -> [&[f64]; 5] {
        [
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
            self.prototypes.as_slice(),
        ]
    }

    fn blocks_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
            self.prototypes.as_mut_slice(),
        ]
    }

    pub fn flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    /// Euclidean norm per block: `[w1, b1, w2, b2, prototypes]`.
    pub fn block_norms(&self) -> [f64; 5] {
        self.blocks().map(|b| b.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}
