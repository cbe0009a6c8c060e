//! Parameterized building blocks: linear maps, convolutions, layer norms.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

use super::params::{xavier_uniform, BoundParams, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// `[in, out]` Xavier-uniform weight and zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, group: ParamGroup, rng: &mut Rng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(&[fan_in, fan_out], fan_in, fan_out, rng),
            group,
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), group, false);
        Self { weight, bias }
    }

    pub fn apply(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Self {
        let k2 = kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(&[cout, cin, kernel, kernel], cin * k2, cout * k2, rng),
            group,
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), group, false);
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn apply(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: ParamGroup) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), group, false);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), group, false);
        Self { gamma, beta }
    }

    pub fn apply(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}
