//! Learnable prompt tokens, local self-attention over prompt groups, and the
//! assembly of per-modality token streams.
//!
//! Stream layout with class tokens enabled:
//!
//! ```text
//! [ z_b | LSA_mod(z_mod) | patches | LSA_s(z_s) | z_f ]
//! ```
//!
//! Without class tokens the two ends are dropped. `z_s`, `z_b` and `z_f` are
//! single parameters read by both streams, so their gradients sum over the
//! two streams.

use std::ops::Range;

use rand::Rng;

use crate::backbone::{block_forward, BlockVars};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::AttentionVars;
use crate::params::{LinearIds, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Std of the normal initialisation of prompt tokens.
pub const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Audio,
    Visual,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

/// Q/K/V/O projections of one local self-attention unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LsaParams {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

impl LsaParams {
    /// The output projection starts at zero, so a fresh unit is the identity.
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        let mut lin = |n: &str, std: f64| store.add_linear(&format!("{name}.{n}"), d, d, std, rng);
        LsaParams {
            q: lin("q", TOKEN_INIT_STD),
            k: lin("k", TOKEN_INIT_STD),
            v: lin("v", TOKEN_INIT_STD),
            o: lin("o", 0.0),
        }
    }

    pub fn record(&self, tape: &mut Tape, store: &ParamStore) -> AttentionVars {
        AttentionVars {
            q: store.record_linear(tape, &self.q),
            k: store.record_linear(tape, &self.k),
            v: store.record_linear(tape, &self.v),
            o: store.record_linear(tape, &self.o),
        }
    }

    /// Element count of one unit: four `d×d` matrices and four biases.
    pub fn numel(d: usize) -> usize {
        4 * (d * d + d)
    }
}

/// `LSA(x) = x + MHA(x)` over the rows of `x: [t, d]`.
pub fn lsa_forward(tape: &mut Tape, unit: &AttentionVars, x: Var, heads: usize) -> Result<Var> {
    let h = unit.forward(tape, x, heads)?;
    tape.add(x, h)
}

/// One set of prompt tokens for a single block input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PromptSet {
    pub z_a: Option<crate::tensor::ParamId>,
    pub z_v: Option<crate::tensor::ParamId>,
    pub z_s: Option<crate::tensor::ParamId>,
}

/// Background or foreground class token, possibly distinct per modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassToken {
    pub audio: crate::tensor::ParamId,
    pub visual: crate::tensor::ParamId,
}

impl ClassToken {
    pub fn for_modality(&self, m: Modality) -> crate::tensor::ParamId {
        match m {
            Modality::Audio => self.audio,
            Modality::Visual => self.visual,
        }
    }
}

/// Every learnable prompt parameter plus the LSA units.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBank {
    /// Block-1 prompts, then one set per later block when `deep_prompts` is on.
    pub prompts: Vec<PromptSet>,
    pub z_b: Option<ClassToken>,
    pub z_f: Option<ClassToken>,
    pub lsa_a: Option<LsaParams>,
    pub lsa_v: Option<LsaParams>,
    pub lsa_s: Option<LsaParams>,
}

impl TokenBank {
    /// Prompt and class tokens draw from `rng`; the LSA units draw from
    /// `lsa_rng` so toggling LSA leaves every other initial value unchanged.
    pub fn init<R: Rng + ?Sized>(cfg: &RunConfig, store: &mut ParamStore, rng: &mut R, lsa_rng: &mut R) -> Self {
        let d = cfg.d;
        let sets = if cfg.deep_prompts { cfg.depth } else { 1 };
        let mut prompts = Vec::with_capacity(sets);
        for k in 0..sets {
            let suffix = if k == 0 { String::new() } else { format!(".block{k}") };
            let mut tok = |name: &str, n: usize| {
                (n > 0).then(|| {
                    store.add(
                        format!("tokens.{name}{suffix}"),
                        Tensor::randn(&[n, d], TOKEN_INIT_STD, rng),
                    )
                })
            };
            prompts.push(PromptSet {
                z_a: tok("z_a", cfg.n_a),
                z_v: tok("z_v", cfg.n_v),
                z_s: tok("z_s", cfg.n_s),
            });
        }
        let mut class = |name: &str| {
            if !cfg.class_tokens {
                return None;
            }
            let mut one = |suffix: &str| {
                store.add(
                    format!("tokens.{name}{suffix}"),
                    Tensor::randn(&[1, d], TOKEN_INIT_STD, rng),
                )
            };
            Some(if cfg.share_class_tokens {
                let id = one("");
                ClassToken { audio: id, visual: id }
            } else {
                ClassToken {
                    audio: one(".audio"),
                    visual: one(".visual"),
                }
            })
        };
        let z_b = class("z_b");
        let z_f = class("z_f");
        let mut lsa = |name: &str, n: usize| {
            (cfg.lsa && n > 0).then(|| LsaParams::init(store, &format!("lsa.{name}"), d, lsa_rng))
        };
        let lsa_a = lsa("a", cfg.n_a);
        let lsa_v = lsa("v", cfg.n_v);
        let lsa_s = lsa("s", cfg.n_s);
        TokenBank {
            prompts,
            z_b,
            z_f,
            lsa_a,
            lsa_v,
            lsa_s,
        }
    }

    /// Closed-form trainable element count of a bank built from `cfg`.
    pub fn expected_numel(cfg: &RunConfig) -> usize {
        let d = cfg.d;
        let sets = if cfg.deep_prompts { cfg.depth } else { 1 };
        let mut n = d * sets * (cfg.n_a + cfg.n_v + cfg.n_s);
        if cfg.class_tokens {
            let per = if cfg.share_class_tokens { 1 } else { 2 };
            n += 2 * per * d;
        }
        if cfg.lsa {
            let groups = [cfg.n_a, cfg.n_v, cfg.n_s].iter().filter(|&&g| g > 0).count();
            n += groups * LsaParams::numel(d);
        }
        n
    }

    /// Records every prompt group for every block input, passing each group
    /// through its LSA unit when one exists.
    pub fn record_prompts(&self, tape: &mut Tape, store: &ParamStore, heads: usize) -> Result<Vec<PromptVars>> {
        let lsa_a = self.lsa_a.map(|u| u.record(tape, store));
        let lsa_v = self.lsa_v.map(|u| u.record(tape, store));
        let lsa_s = self.lsa_s.map(|u| u.record(tape, store));
        let group = |tape: &mut Tape, id: Option<_>, unit: &Option<AttentionVars>| -> Result<Option<Var>> {
            let Some(id) = id else { return Ok(None) };
            let z = store.record(tape, id);
            Ok(Some(match unit {
                Some(u) => lsa_forward(tape, u, z, heads)?,
                None => z,
            }))
        };
        let mut out = Vec::with_capacity(self.prompts.len());
        for set in &self.prompts {
            out.push(PromptVars {
                audio: group(tape, set.z_a, &lsa_a)?,
                visual: group(tape, set.z_v, &lsa_v)?,
                shared: group(tape, set.z_s, &lsa_s)?,
            });
        }
        Ok(out)
    }

    pub fn record_class(&self, tape: &mut Tape, store: &ParamStore) -> Option<ClassVars> {
        let (b, f) = (self.z_b?, self.z_f?);
        let rec = |tape: &mut Tape, c: ClassToken| {
            let audio = store.record(tape, c.audio);
            let visual = if c.visual == c.audio {
                audio
            } else {
                store.record(tape, c.visual)
            };
            (audio, visual)
        };
        let (bg_audio, bg_visual) = rec(tape, b);
        let (fg_audio, fg_visual) = rec(tape, f);
        Some(ClassVars {
            bg_audio,
            bg_visual,
            fg_audio,
            fg_visual,
        })
    }
}

/// Prompt groups after LSA, each `[n, d]`, for one block input.
#[derive(Clone, Copy, Debug)]
pub struct PromptVars {
    pub audio: Option<Var>,
    pub visual: Option<Var>,
    pub shared: Option<Var>,
}

impl PromptVars {
    pub fn unimodal(&self, m: Modality) -> Option<Var> {
        match m {
            Modality::Audio => self.audio,
            Modality::Visual => self.visual,
        }
    }
}

/// Class tokens `[1, d]` as seen by each stream.
#[derive(Clone, Copy, Debug)]
pub struct ClassVars {
    pub bg_audio: Var,
    pub bg_visual: Var,
    pub fg_audio: Var,
    pub fg_visual: Var,
}

impl ClassVars {
    fn for_modality(&self, m: Modality) -> (Var, Var) {
        match m {
            Modality::Audio => (self.bg_audio, self.fg_audio),
            Modality::Visual => (self.bg_visual, self.fg_visual),
        }
    }
}

/// Row offsets of each slice in an assembled stream. Constant across blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamLayout {
    pub bg: Option<usize>,
    pub unimodal: Range<usize>,
    pub patches: Range<usize>,
    pub shared: Range<usize>,
    pub fg: Option<usize>,
    pub len: usize,
}

impl StreamLayout {
    pub fn new(class_tokens: bool, n_mod: usize, n_patches: usize, n_shared: usize) -> Self {
        let mut at = 0;
        let bg = class_tokens.then(|| {
            at += 1;
            0
        });
        let unimodal = at..at + n_mod;
        at += n_mod;
        let patches = at..at + n_patches;
        at += n_patches;
        let shared = at..at + n_shared;
        at += n_shared;
        let fg = class_tokens.then(|| {
            at += 1;
            at - 1
        });
        StreamLayout {
            bg,
            unimodal,
            patches,
            shared,
            fg,
            len: at,
        }
    }
}

/// Token embeddings of one stream after every block.
#[derive(Clone, Debug)]
pub struct StreamState {
    pub modality: Modality,
    pub layout: StreamLayout,
    /// `blocks[k]` is the output of block `k + 1`, shape `[B, S, d]`.
    pub blocks: Vec<Var>,
    /// `inputs[k]` is the input of block `k + 1`.
    pub inputs: Vec<Var>,
    pub batch: usize,
}

/// Builds the block-1 input `[B, S, d]` for one modality.
pub fn assemble_stream(
    tape: &mut Tape,
    modality: Modality,
    prompts: &PromptVars,
    class: Option<&ClassVars>,
    patches: Var,
    with_shared: bool,
) -> Result<(Var, StreamLayout)> {
    let pshape = tape.shape(patches).to_vec();
    if pshape.len() != 3 {
        return Err(Error::dim("assemble_stream", &pshape, &[]));
    }
    let (batch, n_patches) = (pshape[0], pshape[1]);
    let mut pieces = Vec::with_capacity(5);
    let widen = |tape: &mut Tape, v: Var| tape.broadcast_batch(v, batch);

    let class = class.map(|c| c.for_modality(modality));
    if let Some((bg, _)) = class {
        pieces.push(widen(tape, bg));
    }
    let uni = prompts.unimodal(modality);
    if let Some(u) = uni {
        pieces.push(widen(tape, u));
    }
    pieces.push(patches);
    let shared = if with_shared { prompts.shared } else { None };
    if let Some(s) = shared {
        pieces.push(widen(tape, s));
    }
    if let Some((_, fg)) = class {
        pieces.push(widen(tape, fg));
    }
    let rows = |v: Option<Var>, tape: &Tape| v.map_or(0, |v| tape.shape(v)[0]);
    let layout = StreamLayout::new(class.is_some(), rows(uni, tape), n_patches, rows(shared, tape));
    let x = tape.concat(&pieces, 1)?;
    Ok((x, layout))
}

/// Swaps fresh prompt groups into the prompt slices of `x` (deep prompting).
fn replace_prompts(
    tape: &mut Tape,
    x: Var,
    layout: &StreamLayout,
    modality: Modality,
    prompts: &PromptVars,
    batch: usize,
) -> Result<Var> {
    let mut pieces = Vec::with_capacity(5);
    if let Some(bg) = layout.bg {
        pieces.push(tape.slice(x, 1, bg, 1)?);
    }
    if !layout.unimodal.is_empty() {
        let u = prompts
            .unimodal(modality)
            .ok_or_else(|| Error::Contract("deep prompt set lacks a unimodal group".into()))?;
        pieces.push(tape.broadcast_batch(u, batch));
    }
    pieces.push(tape.slice(x, 1, layout.patches.start, layout.patches.len())?);
    if !layout.shared.is_empty() {
        let s = prompts
            .shared
            .ok_or_else(|| Error::Contract("deep prompt set lacks a shared group".into()))?;
        pieces.push(tape.broadcast_batch(s, batch));
    }
    if let Some(fg) = layout.fg {
        pieces.push(tape.slice(x, 1, fg, 1)?);
    }
    tape.concat(&pieces, 1)
}

/// Assembles one stream and runs it through every frozen block, recording
/// each block's output.
pub fn encode_stream(
    tape: &mut Tape,
    modality: Modality,
    blocks: &[BlockVars],
    prompts: &[PromptVars],
    class: Option<&ClassVars>,
    patches: Var,
    with_shared: bool,
) -> Result<StreamState> {
    let (mut x, layout) = assemble_stream(tape, modality, &prompts[0], class, patches, with_shared)?;
    let batch = tape.shape(patches)[0];
    let mut outs = Vec::with_capacity(blocks.len());
    let mut inputs = Vec::with_capacity(blocks.len());
    for (k, block) in blocks.iter().enumerate() {
        if k > 0 && prompts.len() > 1 {
            x = replace_prompts(tape, x, &layout, modality, &prompts[k], batch)?;
        }
        inputs.push(x);
        x = block_forward(tape, block, x)?;
        outs.push(x);
    }
    Ok(StreamState {
        modality,
        layout,
        blocks: outs,
        inputs,
        batch,
    })
}

/// Mean of the shared-token rows of block `k` (1-based), `[B, d]`.
pub fn pool_shared(tape: &mut Tape, stream: &StreamState, k: usize) -> Result<Var> {
    if k == 0 || k > stream.blocks.len() {
        return Err(Error::Contract(format!(
            "block index {k} outside 1..={}",
            stream.blocks.len()
        )));
    }
    let r = &stream.layout.shared;
    if r.is_empty() {
        return Err(Error::Contract("stream carries no shared tokens".into()));
    }
    let s = tape.slice(stream.blocks[k - 1], 1, r.start, r.len())?;
    tape.mean(s, 1)
}

/// Final-block output of the background (`fg = false`) or foreground class
/// token, `[B, d]`.
pub fn class_output(tape: &mut Tape, stream: &StreamState, fg: bool) -> Result<Var> {
    let at = if fg { stream.layout.fg } else { stream.layout.bg };
    let at = at.ok_or_else(|| Error::Contract("class tokens are disabled".into()))?;
    let last = *stream.blocks.last().expect("at least one block");
    let s = tape.slice(last, 1, at, 1)?;
    let d = tape.shape(s)[2];
    tape.reshape(s, &[stream.batch, d])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_arithmetic() {
        let l = StreamLayout::new(true, 5, 12, 5);
        assert_eq!(l.len, 24);
        assert_eq!(l.bg, Some(0));
        assert_eq!(l.unimodal, 1..6);
        assert_eq!(l.patches, 6..18);
        assert_eq!(l.shared, 18..23);
        assert_eq!(l.fg, Some(23));
        assert_eq!(StreamLayout::new(false, 5, 12, 5).len, 22);
        assert_eq!(StreamLayout::new(true, 5, 12, 0).len, 19);
    }
}
