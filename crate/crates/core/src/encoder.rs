//! Frozen feature extractors applied before the hash head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;

pub trait Encoder {
    fn encode(&self, x: &Matrix) -> Matrix;
    fn output_dim(&self, input_dim: usize) -> usize;
}

/// Passes features through unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Encoder for Identity {
    fn encode(&self, x: &Matrix) -> Matrix {
        x.clone()
    }

    fn output_dim(&self, input_dim: usize) -> usize {
        input_dim
    }
}

/// Fixed random tanh projection `tanh(x P / sqrt(d))`, a stand-in for a
/// frozen nonlinear backbone.
#[derive(Clone, Debug)]
pub struct RandomFeatures {
    projection: Matrix,
}

impl RandomFeatures {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (input_dim.max(1) as f64).sqrt();
        let data = (0..input_dim * output_dim)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Self {
            projection: Matrix::from_vec(input_dim, output_dim, data),
        }
    }
}

impl Encoder for RandomFeatures {
    fn encode(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul(&self.projection);
        out.map_inplace(f64::tanh);
        out
    }

    fn output_dim(&self, _input_dim: usize) -> usize {
        self.projection.cols()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    #[default]
    Identity,
    RandomFeatures { dim: usize, seed: u64 },
}

impl EncoderSpec {
    pub fn build(&self, input_dim: usize) -> Box<dyn Encoder + Send + Sync> {
        match *self {
            EncoderSpec::Identity => Box::new(Identity),
            EncoderSpec::RandomFeatures { dim, seed } => Box::new(RandomFeatures::new(input_dim, dim, seed)),
        }
    }
}
