use super::config::BottleneckConfig;
use super::params::{lecun_normal, ParamStore};
use crate::diffcore::{Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Token-wise one-hidden-layer projection with dropout on its input, hidden
/// activation and output. Maps a `C' x H' x W'` map to the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck<T> {
    config: BottleneckConfig,
    dim: usize,
    params: ParamStore<T>,
}

const FC1_W: usize = 0;
const FC1_B: usize = 1;
const FC2_W: usize = 2;
const FC2_B: usize = 3;

impl<T: Scalar> Bottleneck<T> {
    pub fn new(config: BottleneckConfig, dim: usize, seed: u64, stream: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed, stream);
        let hidden = dim * config.hidden_ratio;
        let mut params = ParamStore::new();
        params.push("fc1.weight", lecun_normal(&mut rng, dim, hidden));
        params.push("fc1.bias", Tensor::zeros([hidden]));
        params.push("fc2.weight", lecun_normal(&mut rng, hidden, dim));
        params.push("fc2.bias", Tensor::zeros([dim]));
        Ok(Bottleneck {
            config,
            dim,
            params,
        })
    }

    /// Projection computing the identity through the GELU:
    /// `gelu(x) - gelu(-x) = x`. Needs `hidden_ratio >= 2`.
    pub fn identity(config: BottleneckConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        if config.hidden_ratio < 2 {
            return Err(Error::Config(
                "identity bottleneck needs hidden_ratio >= 2".into(),
            ));
        }
        let hidden = dim * config.hidden_ratio;
        let fc1 = Tensor::from_fn([dim, hidden], |k| {
            let (r, c) = (k / hidden, k % hidden);
            if c == r {
                T::one()
            } else if c == r + dim {
                -T::one()
            } else {
                T::zero()
            }
        });
        let fc2 = Tensor::from_fn([hidden, dim], |k| {
            let (r, c) = (k / dim, k % dim);
            if r == c {
                T::one()
            } else if r == c + dim {
                -T::one()
            } else {
                T::zero()
            }
        });
        let mut params = ParamStore::new();
        params.push("fc1.weight", fc1);
        params.push("fc1.bias", Tensor::zeros([hidden]));
        params.push("fc2.weight", fc2);
        params.push("fc2.bias", Tensor::zeros([dim]));
        Ok(Bottleneck {
            config,
            dim,
            params,
        })
    }

    pub fn config(&self) -> &BottleneckConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn forward<'g>(
        &self,
        bound: &[Var<'g, T>],
        fused: Var<'g, T>,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var<'g, T>> {
        let shape = fused.shape();
        if shape.len() != 3 || shape[0] != self.dim {
            return shape_err(format!(
                "bottleneck input {shape:?}, expected [{}, H, W]",
                self.dim
            ));
        }
        let n = shape[1] * shape[2];
        let rate = self.config.drop_rate;
        let x = fused.reshape(&[self.dim, n])?.transpose()?;
        let y = x
            .dropout(rate, training, rng)?
            .linear(bound[FC1_W], bound[FC1_B])?
            .gelu()
            .dropout(rate, training, rng)?
            .linear(bound[FC2_W], bound[FC2_B])?
            .dropout(rate, training, rng)?;
        y.transpose()?.reshape(&shape)
    }
}
