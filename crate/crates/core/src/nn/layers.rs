use rand::Rng;

use crate::nn::graph::{Graph, Var};
use crate::nn::params::{fan_in_uniform, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stride-1 "same" convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        group: ParamGroup,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            group,
            fan_in_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_channels]));
        Self { weight, bias, in_channels, out_channels, kernel }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b))
    }
}

/// 2x2 stride-2 transposed convolution (learned upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2x2 {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        group: ParamGroup,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            fan_in_uniform(&[in_channels, out_channels, 2, 2], in_channels, rng),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_channels]));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv_transpose2x2(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, group: ParamGroup, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), group, Tensor::zeros(&[channels]));
        Self { gamma, beta, groups: default_groups(channels) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, self.groups, gamma, beta, T::of(1e-5))
    }
}

/// Largest of 8, 4, 2, 1 that divides `channels`.
pub fn default_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}
