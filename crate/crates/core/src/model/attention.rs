//! Masked cross-attention and its additive mask bias.

use crate::error::{shape_err, Result};
use crate::rng::Rng;
use crate::tensor::{kernels, Tape, Tensor, Var, MASKED};

use super::layers::Linear;
use super::params::{BoundParams, ParamGroup, ParamStore};

/// Additive attention bias `[N, th·tw]` from mask logits `[N, h, w]`.
///
/// Probabilities `σ(logit)` are resized bilinearly to `th×tw` and
/// binarized: positions with probability `>= threshold` get bias 0, the rest
/// [`MASKED`]. A query whose row would be entirely masked is reset to all
/// zeros so it attends everywhere.
pub fn attention_bias_from_mask(mask_logits: &Tensor, th: usize, tw: usize, threshold: f64) -> Result<Tensor> {
    let (n, h, w) = match mask_logits.shape() {
        &[n, h, w] => (n, h, w),
        s => return Err(shape_err("attention_bias_from_mask", format!("{s:?}"))),
    };
    let probs: Vec<f64> = mask_logits.data().iter().map(|&v| kernels::sigmoid(v)).collect();
    let resized = kernels::resize_forward(&probs, n, h, w, th, tw);
    let mut bias: Vec<f64> = resized
        .iter()
        .map(|&p| if p >= threshold { 0.0 } else { MASKED })
        .collect();
    let m = th * tw;
    if m > 0 {
        for row in bias.chunks_mut(m) {
            if row.iter().all(|&b| b == MASKED) {
                row.fill(0.0);
            }
        }
    }
    Tensor::new(vec![n, m], bias)
}

/// Projections of one multi-head attention block.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl AttentionWeights {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut Rng) -> Self {
        let g = ParamGroup::Head;
        Self {
            q: Linear::new(store, &format!("{name}.q"), c, c, g, rng),
            k: Linear::new(store, &format!("{name}.k"), c, c, g, rng),
            v: Linear::new(store, &format!("{name}.v"), c, c, g, rng),
            out: Linear::new(store, &format!("{name}.out"), c, c, g, rng),
        }
    }

    /// Projected attention update (without residual) and the attention node,
    /// whose saved probabilities are `[heads, N, M]`.
    #[allow(clippy::too_many_arguments)]
    pub fn attend(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        query_in: Var,
        key_in: Var,
        value_in: Var,
        bias: Option<&Tensor>,
        heads: usize,
    ) -> Result<(Var, Var)> {
        let q = self.q.apply(tape, p, query_in)?;
        let k = self.k.apply(tape, p, key_in)?;
        let v = self.v.apply(tape, p, value_in)?;
        let attn = tape.attention(q, k, v, bias, heads)?;
        let out = self.out.apply(tape, p, attn)?;
        Ok((out, attn))
    }
}

/// Inputs on the key/value side of cross-attention for one pyramid level.
#[derive(Clone, Copy, Debug)]
pub struct KeyValueSource {
    /// Flattened features `[H_l·W_l, C]`; values are projected from these.
    pub memory: Var,
    /// Sinusoidal plus level embedding `[H_l·W_l, C]`, added to keys only.
    pub key_pos: Var,
}

/// `X_l = softmax(M + Q Kᵀ/√d) V + X_{l−1}` with multi-head projections.
///
/// Queries come from `x_prev + query_pos`, keys from `memory + key_pos`,
/// values from `memory`. One bias row per query is shared by all heads.
/// Returns the residual sum and the attention node.
#[allow(clippy::too_many_arguments)]
pub fn masked_attention(
    tape: &mut Tape,
    p: &BoundParams,
    weights: &AttentionWeights,
    x_prev: Var,
    query_pos: Var,
    source: KeyValueSource,
    bias: Option<&Tensor>,
    heads: usize,
) -> Result<(Var, Var)> {
    let q_in = tape.add(x_prev, query_pos)?;
    let k_in = tape.add(source.memory, source.key_pos)?;
    let (update, attn) = weights.attend(tape, p, q_in, k_in, source.memory, bias, heads)?;
    let x = tape.add(x_prev, update)?;
    Ok((x, attn))
}
