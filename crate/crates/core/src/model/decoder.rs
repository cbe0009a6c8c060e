//! Transformer decoder: `3L` layers fed one pyramid level at a time in
//! round-robin order, with a prediction after `X₀` and after every layer.

use rand::Rng as _;

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

use super::attention::{attention_bias_from_mask, AttentionWeights, KeyValueSource};
use super::config::{AttentionMode, LayerOrder, ModelConfig, QueryInit, ScaleMode, NUM_SCALES};
use super::heads::{PredictionHeads, SegmentPrediction};
use super::layers::{LayerNorm, Linear};
use super::params::{normal, BoundParams, ParamGroup, ParamId, ParamStore};
use super::pixel_decoder::FeaturePyramid;
use super::posenc::sinusoidal_pos_embedding;

/// Pyramid level consumed by 1-based decoder layer `layer`.
pub fn scale_for_layer(layer: usize, mode: ScaleMode) -> usize {
    assert!(layer >= 1, "decoder layers are 1-based");
    match mode {
        ScaleMode::Multi => (layer - 1) % NUM_SCALES,
        ScaleMode::Single(s) => s,
    }
}

/// Query features and their positional embeddings.
#[derive(Clone, Copy, Debug)]
pub struct QueryState {
    pub x: Var,
    pub query_pos: Var,
}

/// Per-forward switches.
#[derive(Default)]
pub struct ForwardCtx<'r> {
    pub dropout: f64,
    pub rng: Option<&'r mut Rng>,
    /// Per-layer attention biases used in place of the ones derived from
    /// the previous predictions, e.g. to hold the masks fixed while
    /// probing the loss with finite differences.
    pub fixed_biases: Option<&'r [Option<Tensor>]>,
}

impl ForwardCtx<'_> {
    pub fn inference() -> Self {
        Self::default()
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let mask = (0..tape.value(x).numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.mul_const(x, mask)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    cross: AttentionWeights,
    cross_norm: LayerNorm,
    self_attn: AttentionWeights,
    self_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: LayerNorm,
}

/// Output of one decoder layer.
pub struct LayerOutput {
    pub state: QueryState,
    /// Cross-attention node (probabilities `[heads, N, H_l·W_l]`).
    pub cross_attention: Var,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, ffn: usize, rng: &mut Rng) -> Self {
        let g = ParamGroup::Head;
        Self {
            cross: AttentionWeights::new(store, &format!("{name}.cross"), c, rng),
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), c, g),
            self_attn: AttentionWeights::new(store, &format!("{name}.self"), c, rng),
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), c, g),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), c, ffn, g, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), ffn, c, g, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), c, g),
        }
    }

    fn cross_block(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        state: QueryState,
        source: KeyValueSource,
        bias: Option<&Tensor>,
        heads: usize,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(Var, Var)> {
        let q_in = tape.add(state.x, state.query_pos)?;
        let k_in = tape.add(source.memory, source.key_pos)?;
        let (update, attn) = self.cross.attend(tape, p, q_in, k_in, source.memory, bias, heads)?;
        let update = ctx.dropout(tape, update)?;
        let x = tape.add(state.x, update)?;
        Ok((self.cross_norm.apply(tape, p, x)?, attn))
    }

    fn self_block(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        state: QueryState,
        heads: usize,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let qk = tape.add(state.x, state.query_pos)?;
        let (update, _) = self.self_attn.attend(tape, p, qk, qk, state.x, None, heads)?;
        let update = ctx.dropout(tape, update)?;
        let x = tape.add(state.x, update)?;
        self.self_norm.apply(tape, p, x)
    }

    fn ffn_block(&self, tape: &mut Tape, p: &BoundParams, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let h = self.ffn_in.apply(tape, p, x)?;
        let h = tape.relu(h)?;
        let h = ctx.dropout(tape, h)?;
        let h = self.ffn_out.apply(tape, p, h)?;
        let h = ctx.dropout(tape, h)?;
        let x = tape.add(x, h)?;
        self.ffn_norm.apply(tape, p, x)
    }

    /// Masked attention, self-attention over queries, then FFN; each with a
    /// residual connection followed by layer norm.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        state: QueryState,
        source: KeyValueSource,
        bias: Option<&Tensor>,
        cfg: &ModelConfig,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<LayerOutput> {
        let heads = cfg.heads;
        let (x, cross_attention) = match cfg.layer_order {
            LayerOrder::MaskedFirst => {
                let (x, attn) = self.cross_block(tape, p, state, source, bias, heads, ctx)?;
                let x = self.self_block(tape, p, QueryState { x, ..state }, heads, ctx)?;
                (x, attn)
            }
            LayerOrder::SelfFirst => {
                let x = self.self_block(tape, p, state, heads, ctx)?;
                self.cross_block(tape, p, QueryState { x, ..state }, source, bias, heads, ctx)?
            }
        };
        let x = self.ffn_block(tape, p, x, ctx)?;
        Ok(LayerOutput {
            state: QueryState { x, ..state },
            cross_attention,
        })
    }
}

/// Cross-attention record for analysis.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    /// 1-based decoder layer.
    pub layer: usize,
    pub scale: usize,
    pub height: usize,
    pub width: usize,
    pub node: Var,
    /// Bias the layer attended with, `None` for unmasked attention.
    pub bias: Option<Tensor>,
}

pub struct DecoderOutput {
    /// `3L + 1` prediction sets; index 0 comes from `X₀`.
    pub predictions: Vec<SegmentPrediction>,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    query_feat: ParamId,
    query_pos: ParamId,
    level_embed: ParamId,
    layers: Vec<DecoderLayer>,
}

impl TransformerDecoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (n, c) = (cfg.num_queries, cfg.hidden_dim);
        let g = ParamGroup::Head;
        let query_feat = store.add("decoder.query_feat", normal(&[n, c], 0.02, rng), g, false);
        let query_pos = store.add("decoder.query_pos", normal(&[n, c], 0.02, rng), g, false);
        let level_embed = store.add("decoder.level_embed", normal(&[NUM_SCALES, c], 0.02, rng), g, false);
        let layers = (0..cfg.num_layers())
            .map(|i| DecoderLayer::new(store, &format!("decoder.layer{i}"), c, cfg.ffn_dim, rng))
            .collect();
        Self {
            query_feat,
            query_pos,
            level_embed,
            layers,
        }
    }

    pub fn layers(&self) -> &[DecoderLayer] {
        &self.layers
    }

    /// Initial query state `X₀` (zeros and untracked under zero-init).
    pub fn initial_state(&self, tape: &mut Tape, p: &BoundParams, cfg: &ModelConfig) -> Result<QueryState> {
        let x = match cfg.queries {
            QueryInit::ZeroInit => tape.constant(Tensor::zeros(&[cfg.num_queries, cfg.hidden_dim]))?,
            _ => p.var(self.query_feat),
        };
        Ok(QueryState {
            x,
            query_pos: p.var(self.query_pos),
        })
    }

    /// Flattened memory and key positional input for each pyramid level.
    pub fn key_value_sources(&self, tape: &mut Tape, p: &BoundParams, pyramid: &FeaturePyramid) -> Result<Vec<(KeyValueSource, usize, usize)>> {
        let mut out = Vec::with_capacity(NUM_SCALES);
        for (s, &feat) in pyramid.scales.iter().enumerate() {
            let (c, h, w) = {
                let sh = tape.shape(feat);
                (sh[0], sh[1], sh[2])
            };
            let flat = tape.reshape(feat, &[c, h * w])?;
            let memory = tape.transpose(flat)?;
            let pos = tape.constant(sinusoidal_pos_embedding(h, w, c)?)?;
            let lvl = tape.narrow(p.var(self.level_embed), 0, s, 1)?;
            let key_pos = tape.add_row(pos, lvl)?;
            out.push((KeyValueSource { memory, key_pos }, h, w));
        }
        Ok(out)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        pyramid: &FeaturePyramid,
        heads: &PredictionHeads,
        cfg: &ModelConfig,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<DecoderOutput> {
        let sources = self.key_value_sources(tape, p, pyramid)?;
        let mut state = self.initial_state(tape, p, cfg)?;
        let mut predictions = vec![heads.predict(tape, p, state.x, pyramid.per_pixel)?];
        let mut attention = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let l = i + 1;
            let s = scale_for_layer(l, cfg.scales);
            let (source, h, w) = sources[s];
            let bias = match (ctx.fixed_biases, cfg.attention) {
                (Some(fixed), _) => fixed.get(i).cloned().flatten(),
                (None, AttentionMode::Masked) => {
                    let prev = tape.value(predictions[i].mask_logits);
                    Some(attention_bias_from_mask(prev, h, w, cfg.mask_threshold)?)
                }
                (None, AttentionMode::Cross) => None,
            };
            let out = layer.forward(tape, p, state, source, bias.as_ref(), cfg, ctx)?;
            state = out.state;
            attention.push(AttentionRecord {
                layer: l,
                scale: s,
                height: h,
                width: w,
                node: out.cross_attention,
                bias,
            });
            predictions.push(heads.predict(tape, p, state.x, pyramid.per_pixel)?);
        }
        Ok(DecoderOutput { predictions, attention })
    }
}
