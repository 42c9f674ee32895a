//! Prediction heads, blockwise semantic contrastive loss, the gated
//! foreground/background loss and the total training objective.

use rand::Rng;

use crate::config::{Eq9Mode, RunConfig};
use crate::error::{Error, Result};
use crate::nn::LinearVars;
use crate::params::{LinearIds, ParamStore};
use crate::tensor::{Tape, Var};
use crate::tokens::{class_output, pool_shared, Modality, StreamState};

/// Row normalisation epsilon inside cosine similarities.
pub const COS_EPS: f64 = 1e-8;

/// Background flag and, for foreground pairs, the class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LabelPair {
    pub y_b: u8,
    pub y_f: Option<usize>,
}

impl LabelPair {
    pub fn foreground(class: usize) -> Self {
        LabelPair {
            y_b: 0,
            y_f: Some(class),
        }
    }

    pub fn background() -> Self {
        LabelPair { y_b: 1, y_f: None }
    }

    pub fn is_background(&self) -> bool {
        self.y_b == 1
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match (self.y_b, self.y_f) {
            (0, Some(c)) if c < classes => Ok(()),
            (1, None) => Ok(()),
            _ => Err(Error::Contract(format!("invalid label {self:?} for {classes} classes"))),
        }
    }
}

/// Background MLP (`2d → bg_hidden → 1`) and the affine foreground head
/// `2d → C`. Rows `0..d` of the foreground weight read the visual class
/// token, rows `d..2d` the audio one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadParams {
    pub bg1: LinearIds,
    pub bg2: LinearIds,
    pub fg: LinearIds,
}

pub const HEAD_INIT_STD: f64 = 0.02;

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(cfg: &RunConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let two_d = 2 * cfg.d;
        HeadParams {
            bg1: store.add_linear("head.bg1", two_d, cfg.bg_hidden, 1.0 / (two_d as f64).sqrt(), rng),
            bg2: store.add_linear("head.bg2", cfg.bg_hidden, 1, 1.0 / (cfg.bg_hidden as f64).sqrt(), rng),
            fg: store.add_linear("head.fg", two_d, cfg.classes, HEAD_INIT_STD, rng),
        }
    }

    pub fn expected_numel(cfg: &RunConfig) -> usize {
        let two_d = 2 * cfg.d;
        let h = cfg.bg_hidden;
        (two_d * h + h) + (h + 1) + (two_d * cfg.classes + cfg.classes)
    }

    pub fn record(&self, tape: &mut Tape, store: &ParamStore) -> HeadVars {
        HeadVars {
            bg1: store.record_linear(tape, &self.bg1),
            bg2: store.record_linear(tape, &self.bg2),
            fg: store.record_linear(tape, &self.fg),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub bg1: LinearVars,
    pub bg2: LinearVars,
    pub fg: LinearVars,
}

/// Background logit `[B]` and foreground logits `[B, C]`.
#[derive(Clone, Copy, Debug)]
pub struct Predictions {
    pub bg_logit: Var,
    pub fg_logits: Var,
}

impl Predictions {
    /// `ŷ_b = sigmoid(bg_logit)` per sample.
    pub fn bg_prob(&self, tape: &Tape) -> Vec<f64> {
        tape.value(self.bg_logit)
            .iter()
            .map(|&z| crate::tensor::sigmoid(z))
            .collect()
    }

    pub fn fg_argmax(&self, tape: &Tape) -> Vec<usize> {
        argmax_rows(tape, self.fg_logits)
    }
}

pub fn argmax_rows(tape: &Tape, logits: Var) -> Vec<usize> {
    let c = *tape.shape(logits).last().expect("logits have a class axis");
    tape.value(logits)
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Applies both heads to the final-block class-token outputs.
pub fn heads_forward(
    tape: &mut Tape,
    heads: &HeadVars,
    stream_a: &StreamState,
    stream_v: &StreamState,
) -> Result<Predictions> {
    let bg = {
        let v = class_output(tape, stream_v, false)?;
        let a = class_output(tape, stream_a, false)?;
        tape.concat(&[v, a], 1)?
    };
    let fg = {
        let v = class_output(tape, stream_v, true)?;
        let a = class_output(tape, stream_a, true)?;
        tape.concat(&[v, a], 1)?
    };
    let h = heads.bg1.forward(tape, bg)?;
    let h = tape.gelu(h);
    let z = heads.bg2.forward(tape, h)?;
    let batch = tape.shape(z)[0];
    let bg_logit = tape.reshape(z, &[batch])?;
    let fg_logits = heads.fg.forward(tape, fg)?;
    Ok(Predictions { bg_logit, fg_logits })
}

/// Foreground logits from one stream through its half of the split head,
/// plus the full bias.
pub fn fg_unimodal(tape: &mut Tape, heads: &HeadVars, stream: &StreamState) -> Result<Var> {
    let f = class_output(tape, stream, true)?;
    let d = tape.shape(f)[1];
    let start = match stream.modality {
        Modality::Visual => 0,
        Modality::Audio => d,
    };
    let w = tape.slice(heads.fg.w, 0, start, d)?;
    let y = tape.matmul(f, w)?;
    tape.add(y, heads.fg.b)
}

/// Symmetric InfoNCE between rows of `v` and `a` (`[B, d]`) restricted to
/// rows where `mask` is set. Returns a scalar; zero when fewer than one row
/// participates.
pub fn scl_block_loss(tape: &mut Tape, v: Var, a: Var, tau: f64, mask: &[bool]) -> Result<Var> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let (vs, as_) = (tape.shape(v).to_vec(), tape.shape(a).to_vec());
    if vs.len() != 2 || vs != as_ || vs[0] != mask.len() {
        return Err(Error::dim("scl_block_loss", &vs, &as_));
    }
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Ok(tape.constant_owned(crate::tensor::Tensor::scalar(0.0)));
    }
    let m = rows.len();
    let (v, a) = if m == mask.len() {
        (v, a)
    } else {
        (tape.select_rows(v, &rows)?, tape.select_rows(a, &rows)?)
    };
    let vn = tape.normalize_rows(v, COS_EPS);
    let an = tape.normalize_rows(a, COS_EPS);
    let at = tape.transpose(an, 0, 1)?;
    let sim = tape.matmul(vn, at)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let diag: Vec<usize> = (0..m).collect();
    let v2a = tape.log_softmax(logits);
    let v2a = tape.pick(v2a, &diag)?;
    let lt = tape.transpose(logits, 0, 1)?;
    let a2v = tape.log_softmax(lt);
    let a2v = tape.pick(a2v, &diag)?;
    let both = tape.concat(&[v2a, a2v], 0)?;
    let s = tape.sum(both);
    Ok(tape.scale(s, -1.0 / (2 * m) as f64))
}

/// Per-sample foreground/background loss `[B]`.
///
/// `Literal`: `y_b·BCE + (1 − y_b)·CE`. `AlwaysBg`: `BCE + (1 − y_b)·CE`.
pub fn fg_bg_loss(tape: &mut Tape, pred: &Predictions, labels: &[LabelPair], mode: Eq9Mode) -> Result<Var> {
    let batch = labels.len();
    let z = pred.bg_logit;
    if tape.shape(z) != [batch] || tape.shape(pred.fg_logits).first() != Some(&batch) {
        return Err(Error::dim("fg_bg_loss", tape.shape(pred.fg_logits), &[batch]));
    }
    let yb: Vec<f64> = labels.iter().map(|l| l.y_b as f64).collect();
    let w_bce: Vec<f64> = match mode {
        Eq9Mode::Literal => yb.clone(),
        Eq9Mode::AlwaysBg => vec![1.0; batch],
    };
    let w_ce: Vec<f64> = yb.iter().map(|y| 1.0 - y).collect();

    let yb_v = tape.input(&[batch], yb)?;
    let sp = tape.softplus(z);
    let yz = tape.mul(z, yb_v)?;
    let bce = tape.sub(sp, yz)?;
    let w_bce = tape.input(&[batch], w_bce)?;
    let mut loss = tape.mul(bce, w_bce)?;

    if labels.iter().any(|l| !l.is_background()) {
        let idx: Vec<usize> = labels.iter().map(|l| l.y_f.unwrap_or(0)).collect();
        let ls = tape.log_softmax(pred.fg_logits);
        let picked = tape.pick(ls, &idx)?;
        let w_ce = tape.input(&[batch], w_ce)?;
        let ce = tape.mul(picked, w_ce)?;
        loss = tape.sub(loss, ce)?;
    }
    Ok(loss)
}

/// Symbolic loss terms of one batch.
#[derive(Clone, Debug)]
pub struct LossBundle {
    /// Per-sample `L_bf`, `[B]`.
    pub l_bf: Var,
    /// `(block index (1-based), L_cnt^k)` for every supervised block.
    pub l_cnt: Vec<(usize, Var)>,
    pub total: Var,
}

/// Scalar values of a [`LossBundle`].
#[derive(Clone, Debug, PartialEq)]
pub struct LossSummary {
    pub total: f64,
    pub bf_mean: f64,
    pub bf: Vec<f64>,
    pub cnt: Vec<(usize, f64)>,
    pub cnt_sum: f64,
}

impl LossSummary {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.bf.iter().all(|v| v.is_finite()) && self.cnt.iter().all(|(_, v)| v.is_finite())
    }
}

impl std::fmt::Display for LossSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "total = {}", self.total)?;
        writeln!(f, "bf_mean = {}", self.bf_mean)?;
        writeln!(f, "bf = {:?}", self.bf)?;
        for (k, v) in &self.cnt {
            writeln!(f, "cnt_block{k} = {v}")?;
        }
        write!(f, "cnt_sum = {}", self.cnt_sum)
    }
}

impl LossBundle {
    pub fn summary(&self, tape: &Tape) -> LossSummary {
        let bf = tape.value(self.l_bf).to_vec();
        let cnt: Vec<(usize, f64)> = self.l_cnt.iter().map(|&(k, v)| (k, tape.item(v))).collect();
        LossSummary {
            total: tape.item(self.total),
            bf_mean: bf.iter().sum::<f64>() / bf.len().max(1) as f64,
            bf,
            cnt_sum: cnt.iter().map(|(_, v)| v).sum(),
            cnt,
        }
    }
}

/// Blocks (1-based) that carry a contrastive term under `cfg`.
pub fn contrastive_blocks(cfg: &RunConfig) -> Vec<usize> {
    if cfg.contrastive_weight == 0.0 || cfg.n_s == 0 {
        return Vec::new();
    }
    if cfg.blockwise {
        (1..=cfg.depth).collect()
    } else {
        vec![cfg.depth]
    }
}

/// Per-block contrastive losses over the foreground rows of the batch.
pub fn contrastive_terms(
    tape: &mut Tape,
    stream_a: &StreamState,
    stream_v: &StreamState,
    labels: &[LabelPair],
    cfg: &RunConfig,
) -> Result<Vec<(usize, Var)>> {
    let mask: Vec<bool> = labels.iter().map(|l| !l.is_background()).collect();
    let mut out = Vec::new();
    for k in contrastive_blocks(cfg) {
        let v = pool_shared(tape, stream_v, k)?;
        let a = pool_shared(tape, stream_a, k)?;
        out.push((k, scl_block_loss(tape, v, a, cfg.tau, &mask)?));
    }
    Ok(out)
}

/// `mean_b L_bf + λ Σ_k w_k L_cnt^k`.
pub fn total_loss(
    tape: &mut Tape,
    pred: &Predictions,
    stream_a: &StreamState,
    stream_v: &StreamState,
    labels: &[LabelPair],
    cfg: &RunConfig,
) -> Result<LossBundle> {
    let l_bf = fg_bg_loss(tape, pred, labels, cfg.eq9_mode)?;
    let l_cnt = contrastive_terms(tape, stream_a, stream_v, labels, cfg)?;
    let total = combine(tape, l_bf, &l_cnt, cfg)?;
    Ok(LossBundle { l_bf, l_cnt, total })
}

/// Combines a per-sample loss with weighted contrastive terms.
pub fn combine(tape: &mut Tape, l_bf: Var, l_cnt: &[(usize, Var)], cfg: &RunConfig) -> Result<Var> {
    let mut total = tape.mean(l_bf, 0)?;
    for &(k, l) in l_cnt {
        let w = cfg.contrastive_weight * cfg.block_weight(k - 1);
        let t = tape.scale(l, w);
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Per-sample cross entropy `[B]` for foreground-only batches.
pub fn cross_entropy(tape: &mut Tape, logits: Var, classes: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(logits);
    let picked = tape.pick(ls, classes)?;
    Ok(tape.scale(picked, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_validation() {
        assert!(LabelPair::foreground(3).validate(8).is_ok());
        assert!(LabelPair::foreground(8).validate(8).is_err());
        assert!(LabelPair::background().validate(8).is_ok());
        assert!(LabelPair { y_b: 1, y_f: Some(0) }.validate(8).is_err());
        assert!(LabelPair { y_b: 2, y_f: None }.validate(8).is_err());
    }
}
