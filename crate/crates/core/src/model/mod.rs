//! Backbone, FPN pixel decoder, masked-attention Transformer decoder and
//! prediction heads.

pub mod attention;
pub mod backbone;
pub mod config;
pub mod decoder;
pub mod heads;
pub mod layers;
pub mod params;
pub mod pixel_decoder;
pub mod posenc;

pub use attention::{attention_bias_from_mask, masked_attention, AttentionWeights, KeyValueSource};
pub use backbone::{backbone_forward, Backbone, BACKBONE_STRIDE};
pub use config::{AttentionMode, LayerOrder, ModelConfig, QueryInit, ScaleMode, NUM_SCALES};
pub use decoder::{scale_for_layer, AttentionRecord, DecoderLayer, DecoderOutput, ForwardCtx, QueryState, TransformerDecoder};
pub use heads::{mask_logits_from_embedding, PredictionHeads, SegmentPrediction};
pub use params::{BoundParams, ParamEntry, ParamGroup, ParamId, ParamStore};
pub use pixel_decoder::{FeaturePyramid, PixelDecoder};
pub use posenc::sinusoidal_pos_embedding;

use crate::error::Result;
use crate::rng::stream;
use crate::tensor::{Checkpoint, Tape, Tensor, Var};

/// Full segmentation model: parameters plus the module layout that reads them.
#[derive(Clone, Debug)]
pub struct Mask2Former {
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    pixel_decoder: PixelDecoder,
    decoder: TransformerDecoder,
    heads: PredictionHeads,
}

/// Everything one forward pass leaves on the tape.
pub struct ModelOutput {
    pub pyramid: FeaturePyramid,
    /// `3L + 1` prediction sets, index 0 from the initial queries.
    pub predictions: Vec<SegmentPrediction>,
    pub attention: Vec<AttentionRecord>,
}

impl ModelOutput {
    pub fn last(&self) -> SegmentPrediction {
        *self.predictions.last().expect("at least one prediction")
    }
}

impl Mask2Former {
    /// Builds and initializes a model; each component draws from its own
    /// seed-derived stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let backbone = Backbone::new(&mut store, config.backbone_widths, &mut stream(seed, &[1]));
        let pixel_decoder = PixelDecoder::new(
            &mut store,
            config.backbone_widths,
            config.hidden_dim,
            &mut stream(seed, &[2]),
        );
        let decoder = TransformerDecoder::new(&mut store, &config, &mut stream(seed, &[3]));
        let heads = PredictionHeads::new(
            &mut store,
            config.hidden_dim,
            config.num_classes,
            &mut stream(seed, &[4]),
        );
        Ok(Self {
            config,
            store,
            backbone,
            pixel_decoder,
            decoder,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn decoder(&self) -> &TransformerDecoder {
        &self.decoder
    }

    pub fn heads(&self) -> &PredictionHeads {
        &self.heads
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, image: Var, ctx: &mut ForwardCtx<'_>) -> Result<ModelOutput> {
        let feats = self.backbone.forward(tape, p, image)?;
        let pyramid = self.pixel_decoder.forward(tape, p, &feats)?;
        let out = self.decoder.forward(tape, p, &pyramid, &self.heads, &self.config, ctx)?;
        Ok(ModelOutput {
            pyramid,
            predictions: out.predictions,
            attention: out.attention,
        })
    }

    /// Forward pass with frozen weights and no dropout.
    pub fn infer(&self, image: &Tensor) -> Result<(Tape, ModelOutput)> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape)?;
        let x = tape.constant(image.clone())?;
        let out = self.forward(&mut tape, &p, x, &mut ForwardCtx::inference())?;
        Ok((tape, out))
    }

    /// Final-layer class and mask logits as plain tensors.
    pub fn predict(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let (tape, out) = self.infer(image)?;
        let last = out.last();
        Ok((tape.value(last.class_logits).clone(), tape.value(last.mask_logits).clone()))
    }

    /// Checkpoint with the model hyperparameters in the header.
    pub fn to_checkpoint(&self, extra: &[(String, String)]) -> Checkpoint {
        let mut header = self.config.entries();
        header.extend(extra.iter().cloned());
        Checkpoint {
            header,
            params: self.store.named_tensors(),
        }
    }

    /// Rebuilds a model from a checkpoint, reading the config from its header
    /// and ignoring unknown header keys.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut config = ModelConfig::default();
        for (k, v) in &ckpt.header {
            config.set(k, v)?;
        }
        let mut model = Self::new(config, 0)?;
        model.store.load_named(&ckpt.params)?;
        Ok(model)
    }
}
