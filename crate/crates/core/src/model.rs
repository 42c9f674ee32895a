//! The full model: frozen backbone(s), prompt bank and heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{init_backbone, AudioSample, BackboneParams, BlockVars, VisualSample};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{fg_unimodal, heads_forward, HeadParams, HeadVars, Predictions};
use crate::params::ParamStore;
use crate::tensor::{checksum, Tape, Tensor, Var};
use crate::tokens::{encode_stream, Modality, StreamState, TokenBank};

/// Mixes a master seed with a stream tag (splitmix64 finaliser).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_BACKBONE: u64 = 1;
const TAG_AUDIO_BACKBONE: u64 = 2;
const TAG_TOKENS: u64 = 3;
const TAG_LSA: u64 = 4;
const TAG_HEADS: u64 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: RunConfig,
    pub backbone: BackboneParams,
    /// Present only with `separate_backbones`.
    pub audio_backbone: Option<BackboneParams>,
    pub store: ParamStore,
    pub bank: TokenBank,
    /// Absent when class tokens are disabled.
    pub heads: Option<HeadParams>,
}

/// Both streams after the frozen encoder, and the recorded heads.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub audio: StreamState,
    pub visual: StreamState,
    pub heads: Option<HeadVars>,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = init_backbone(cfg, derive_seed(cfg.seed, TAG_BACKBONE));
        let audio_backbone = cfg
            .separate_backbones
            .then(|| init_backbone(cfg, derive_seed(cfg.seed, TAG_AUDIO_BACKBONE)));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_TOKENS));
        let mut store = ParamStore::new();
        let mut lsa_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_LSA));
        let bank = TokenBank::init(cfg, &mut store, &mut rng, &mut lsa_rng);
        let mut head_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_HEADS));
        let heads = cfg
            .class_tokens
            .then(|| HeadParams::init(cfg, &mut store, &mut head_rng));
        Ok(Model {
            cfg: cfg.clone(),
            backbone,
            audio_backbone,
            store,
            bank,
            heads,
        })
    }

    pub fn backbone(&self, m: Modality) -> &BackboneParams {
        match (m, &self.audio_backbone) {
            (Modality::Audio, Some(b)) => b,
            _ => &self.backbone,
        }
    }

    /// Every frozen tensor with its checkpoint name.
    pub fn frozen_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone.named_tensors("backbone");
        if let Some(b) = &self.audio_backbone {
            out.extend(b.named_tensors("audio_backbone"));
        }
        out
    }

    pub fn frozen_checksum(&self) -> u64 {
        checksum(self.frozen_tensors().into_iter().map(|(_, t)| t))
    }

    pub fn frozen_numel(&self) -> usize {
        self.frozen_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Walks every stored tensor and counts those that require gradients.
    pub fn trainable_numel(&self) -> usize {
        self.store.trainable_count()
    }

    /// Closed-form trainable count for `cfg`.
    pub fn expected_trainable(cfg: &RunConfig) -> usize {
        let heads = if cfg.class_tokens {
            HeadParams::expected_numel(cfg)
        } else {
            0
        };
        TokenBank::expected_numel(cfg) + heads
    }

    /// Patch tokens of one image, `[m, d]`.
    pub fn visual_patches(&self, v: &VisualSample) -> Result<Tensor> {
        self.backbone(Modality::Visual).patchify_visual(v)
    }

    /// Patch tokens of one spectrogram, `[n, d]`.
    pub fn audio_patches(&self, a: &AudioSample) -> Result<Tensor> {
        self.backbone(Modality::Audio).patchify_audio(a)
    }

    fn record_blocks(&self, tape: &mut Tape) -> (Vec<BlockVars>, Vec<BlockVars>) {
        let v = self.backbone.record_blocks(tape);
        let a = match &self.audio_backbone {
            Some(b) => b.record_blocks(tape),
            None => v.clone(),
        };
        (v, a)
    }

    /// Encodes a batch of patch tokens (`[B, n, d]` audio, `[B, m, d]`
    /// visual) through both streams.
    pub fn encode_pair(&self, tape: &mut Tape, p_a: Var, p_v: Var) -> Result<Encoded> {
        let (blocks_v, blocks_a) = self.record_blocks(tape);
        let prompts = self.bank.record_prompts(tape, &self.store, self.cfg.heads)?;
        let class = self.bank.record_class(tape, &self.store);
        let audio = encode_stream(tape, Modality::Audio, &blocks_a, &prompts, class.as_ref(), p_a, true)?;
        let visual = encode_stream(tape, Modality::Visual, &blocks_v, &prompts, class.as_ref(), p_v, true)?;
        let heads = self.heads.map(|h| h.record(tape, &self.store));
        Ok(Encoded { audio, visual, heads })
    }

    /// Multimodal forward: encoded streams and head predictions.
    pub fn forward_pair(&self, tape: &mut Tape, p_a: Var, p_v: Var) -> Result<(Encoded, Predictions)> {
        let enc = self.encode_pair(tape, p_a, p_v)?;
        let heads = enc.heads.ok_or_else(class_tokens_off)?;
        let pred = heads_forward(tape, &heads, &enc.audio, &enc.visual)?;
        Ok((enc, pred))
    }

    /// One stream without shared tokens, classified through its half of the
    /// foreground head. Returns the stream and logits `[B, C]`.
    pub fn unimodal_forward(&self, tape: &mut Tape, modality: Modality, patches: Var) -> Result<(StreamState, Var)> {
        let heads = self.heads.ok_or_else(class_tokens_off)?;
        let blocks = self.backbone(modality).record_blocks(tape);
        let prompts = self.bank.record_prompts(tape, &self.store, self.cfg.heads)?;
        let class = self.bank.record_class(tape, &self.store);
        let stream = encode_stream(tape, modality, &blocks, &prompts, class.as_ref(), patches, false)?;
        let hv = heads.record(tape, &self.store);
        let logits = fg_unimodal(tape, &hv, &stream)?;
        Ok((stream, logits))
    }

    /// Every trainable tensor with its checkpoint name.
    pub fn trainable_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.store.iter().map(|(_, n, t)| (n, t))
    }
}

fn class_tokens_off() -> Error {
    Error::Contract("class tokens are disabled; no prediction heads exist".into())
}

/// Stacks per-sample `[n, d]` tensors into `[B, n, d]`.
pub fn stack(rows: &[&Tensor]) -> Result<Tensor> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Contract("cannot stack an empty batch".into()))?;
    let inner = first.shape().to_vec();
    let mut data = Vec::with_capacity(rows.len() * first.numel());
    for r in rows {
        if r.shape() != inner.as_slice() {
            return Err(Error::dim("stack", &inner, r.shape()));
        }
        data.extend_from_slice(r.data());
    }
    let mut shape = vec![rows.len()];
    shape.extend(inner);
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_ne!(derive_seed(0, 1), derive_seed(1, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn default_model_counts_match_closed_form() {
        let cfg = RunConfig::default();
        let m = Model::new(&cfg).unwrap();
        assert_eq!(m.trainable_numel(), Model::expected_trainable(&cfg));
    }
}
