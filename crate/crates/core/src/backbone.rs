//! Frozen ViT-style encoder shared by the audio and visual streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{Attention, AttentionVars, Linear, LinearVars};
use crate::tensor::{checksum, Tape, Tensor, Var};

/// Layernorm epsilon used throughout the encoder.
pub const LN_EPS: f64 = 1e-8;

/// RGB image with values in [0, 1], shape `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualSample {
    pub pixels: Tensor,
}

/// Log-magnitude spectrogram, shape `[F, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSample {
    pub spectrogram: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub attn: Attention,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    ln1_gain: Var,
    ln1_bias: Var,
    attn: AttentionVars,
    ln2_gain: Var,
    ln2_bias: Var,
    fc1: LinearVars,
    fc2: LinearVars,
    heads: usize,
    width: usize,
}

impl BlockParams {
    pub fn width(&self) -> usize {
        self.ln1_gain.numel()
    }

    pub fn record(&self, tape: &mut Tape) -> BlockVars {
        BlockVars {
            ln1_gain: tape.constant(&self.ln1_gain),
            ln1_bias: tape.constant(&self.ln1_bias),
            attn: self.attn.record(tape),
            ln2_gain: tape.constant(&self.ln2_gain),
            ln2_bias: tape.constant(&self.ln2_bias),
            fc1: self.fc1.record(tape),
            fc2: self.fc2.record(tape),
            heads: self.heads,
            width: self.width(),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.ln1.gain"), &self.ln1_gain));
        out.push((format!("{prefix}.ln1.bias"), &self.ln1_bias));
        for (n, lin) in self.attn.linears() {
            out.push((format!("{prefix}.attn.{n}.weight"), &lin.weight));
            out.push((format!("{prefix}.attn.{n}.bias"), &lin.bias));
        }
        out.push((format!("{prefix}.ln2.gain"), &self.ln2_gain));
        out.push((format!("{prefix}.ln2.bias"), &self.ln2_bias));
        out.push((format!("{prefix}.fc1.weight"), &self.fc1.weight));
        out.push((format!("{prefix}.fc1.bias"), &self.fc1.bias));
        out.push((format!("{prefix}.fc2.weight"), &self.fc2.weight));
        out.push((format!("{prefix}.fc2.bias"), &self.fc2.bias));
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `+ MLP(LN(·))`.
pub fn block_forward(tape: &mut Tape, block: &BlockVars, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.last() != Some(&block.width) {
        return Err(Error::dim("block_forward", shape, &[block.width]));
    }
    let h = tape.layernorm(x, block.ln1_gain, block.ln1_bias, LN_EPS)?;
    let h = block.attn.forward(tape, h, block.heads)?;
    let x = tape.add(x, h)?;
    let h = tape.layernorm(x, block.ln2_gain, block.ln2_bias, LN_EPS)?;
    let h = block.fc1.forward(tape, h)?;
    let h = tape.gelu(h);
    let h = block.fc2.forward(tape, h)?;
    tape.add(x, h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    /// Patch projection, `[3·p·p, d]` plus bias.
    pub patch_proj: Linear,
    /// Pretrained-length position table, `[L_pre, d]`.
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub patch_size: usize,
}

/// Seeded stand-in for pretrained weights. Embedding tables use std 0.02;
/// projection matrices use std `1/sqrt(fan_in)`; layernorms start at
/// identity. Every tensor is frozen.
pub fn init_backbone(cfg: &RunConfig, seed: u64) -> BackboneParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d;
    let p = cfg.patch_size;
    let pix = 3 * p * p;
    let hidden = cfg.mlp_ratio * d;
    let fan = |n: usize| 1.0 / (n as f64).sqrt();

    let patch_proj = Linear::randn(pix, d, fan(pix), &mut rng);
    let pos_embed = Tensor::randn(&[cfg.n_visual_patches(), d], 0.02, &mut rng);
    let blocks = (0..cfg.depth)
        .map(|_| BlockParams {
            ln1_gain: Tensor::ones(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            attn: Attention {
                q: Linear::randn(d, d, fan(d), &mut rng),
                k: Linear::randn(d, d, fan(d), &mut rng),
                v: Linear::randn(d, d, fan(d), &mut rng),
                o: Linear::randn(d, d, fan(d), &mut rng),
            },
            ln2_gain: Tensor::ones(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
            fc1: Linear::randn(d, hidden, fan(d), &mut rng),
            fc2: Linear::randn(hidden, d, fan(hidden), &mut rng),
            heads: cfg.heads,
        })
        .collect();
    BackboneParams {
        patch_proj,
        pos_embed,
        blocks,
        patch_size: p,
    }
}

impl BackboneParams {
    pub fn width(&self) -> usize {
        self.pos_embed.shape()[1]
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn record_blocks(&self, tape: &mut Tape) -> Vec<BlockVars> {
        self.blocks.iter().map(|b| b.record(tape)).collect()
    }

    /// Every tensor with a stable name, in serialisation order.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            (format!("{prefix}.patch_proj.weight"), &self.patch_proj.weight),
            (format!("{prefix}.patch_proj.bias"), &self.patch_proj.bias),
            (format!("{prefix}.pos_embed"), &self.pos_embed),
        ];
        for (k, b) in self.blocks.iter().enumerate() {
            b.named(&format!("{prefix}.block{k}"), &mut out);
        }
        out
    }

    /// Rebuilds parameters from `named_tensors` output. The inverse of
    /// `named_tensors` for the same prefix.
    pub fn from_named(prefix: &str, lookup: &dyn Fn(&str) -> Option<Tensor>, cfg: &RunConfig) -> Result<Self> {
        let mut skeleton = init_backbone(cfg, 0);
        let names: Vec<String> = skeleton.named_tensors(prefix).into_iter().map(|(n, _)| n).collect();
        let mut slots = skeleton.tensors_mut();
        for (name, slot) in names.iter().zip(slots.iter_mut()) {
            let t = lookup(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::dim("checkpoint", slot.shape(), t.shape()));
            }
            **slot = t;
        }
        Ok(skeleton)
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.patch_proj.weight,
            &mut self.patch_proj.bias,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.push(&mut b.ln1_gain);
            out.push(&mut b.ln1_bias);
            for lin in [&mut b.attn.q, &mut b.attn.k, &mut b.attn.v, &mut b.attn.o] {
                out.push(&mut lin.weight);
                out.push(&mut lin.bias);
            }
            out.push(&mut b.ln2_gain);
            out.push(&mut b.ln2_bias);
            out.push(&mut b.fc1.weight);
            out.push(&mut b.fc1.bias);
            out.push(&mut b.fc2.weight);
            out.push(&mut b.fc2.bias);
        }
        out
    }

    pub fn numel(&self) -> usize {
        self.named_tensors("").iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn checksum(&self) -> u64 {
        checksum(self.named_tensors("").into_iter().map(|(_, t)| t))
    }

    /// Flattens non-overlapping `p×p` patches of `image: [3, H, W]` in
    /// row-major grid order (channel, row, column within a patch) and
    /// applies the patch projection. No position embedding.
    pub fn project_patches(&self, image: &Tensor) -> Result<Tensor> {
        let p = self.patch_size;
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] % p != 0 || s[2] % p != 0 {
            return Err(Error::Config(format!(
                "image shape {s:?} is not [3, H, W] with sides divisible by {p}"
            )));
        }
        let (h, w) = (s[1], s[2]);
        let (gh, gw) = (h / p, w / p);
        let pix = 3 * p * p;
        let mut flat = Vec::with_capacity(gh * gw * pix);
        let data = image.data();
        for gy in 0..gh {
            for gx in 0..gw {
                for c in 0..3 {
                    for y in 0..p {
                        let row = c * h * w + (gy * p + y) * w + gx * p;
                        flat.extend_from_slice(&data[row..row + p]);
                    }
                }
            }
        }
        let mut tape = Tape::inference();
        let x = tape.input(&[gh * gw, pix], flat)?;
        let lin = self.patch_proj.record(&mut tape);
        let y = lin.forward(&mut tape, x)?;
        Ok(tape.to_tensor(y))
    }

    fn add_positions(&self, mut tokens: Tensor) -> Result<Tensor> {
        let n = tokens.shape()[0];
        let table = interpolate_pos_embed(&self.pos_embed, n)?;
        tokens
            .data_mut()
            .iter_mut()
            .zip(table.data())
            .for_each(|(t, p)| *t += p);
        Ok(tokens)
    }

    /// Patch tokens `P_v⁰: [m, d]`.
    pub fn patchify_visual(&self, v: &VisualSample) -> Result<Tensor> {
        let tokens = self.project_patches(&v.pixels)?;
        self.add_positions(tokens)
    }

    /// Patch tokens `P_a⁰: [n, d]`. The single spectrogram channel is
    /// repeated three times so the image patch projection applies unchanged.
    pub fn patchify_audio(&self, a: &AudioSample) -> Result<Tensor> {
        let tokens = self.project_patches(&replicate_channels(&a.spectrogram)?)?;
        self.add_positions(tokens)
    }
}

/// `[F, T]` → `[3, F, T]` by repeating the single channel.
pub fn replicate_channels(spec: &Tensor) -> Result<Tensor> {
    let s = spec.shape();
    if s.len() != 2 {
        return Err(Error::Config(format!("spectrogram must be [F, T], got {s:?}")));
    }
    let mut data = Vec::with_capacity(3 * spec.numel());
    for _ in 0..3 {
        data.extend_from_slice(spec.data());
    }
    Tensor::new(&[3, s[0], s[1]], data)
}

/// Per-dimension linear interpolation of a `[L_pre, d]` table onto
/// `target` evenly spaced positions of the same normalised [0, 1] span.
pub fn interpolate_pos_embed(table: &Tensor, target: usize) -> Result<Tensor> {
    let s = table.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::Config(format!(
            "position table needs at least two rows, got shape {s:?}"
        )));
    }
    if target == 0 {
        return Err(Error::Config("interpolation target length must be >= 1".into()));
    }
    let (len, d) = (s[0], s[1]);
    if target == len {
        return Ok(Tensor::new(s, table.data().to_vec())?);
    }
    let den = (target - 1).max(1);
    let mut out = Vec::with_capacity(target * d);
    for i in 0..target {
        let num = i * (len - 1);
        let lo = num / den;
        let rem = num % den;
        if rem == 0 {
            out.extend_from_slice(table.row(lo));
            continue;
        }
        let frac = rem as f64 / den as f64;
        let (a, b) = (table.row(lo), table.row(lo + 1));
        out.extend(a.iter().zip(b).map(|(x, y)| (1.0 - frac) * x + frac * y));
    }
    Tensor::new(&[target, d], out)
}
