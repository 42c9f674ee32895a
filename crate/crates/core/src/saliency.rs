//! Gradient saliency over the visual patch grid, exported as 8-bit PGM.
//!
//! The score of a patch is the channel mean of the gradient of one
//! foreground logit with respect to that patch's embedding at the input of
//! the last block (the last point where patch rows still reach the class
//! token), clamped at zero and min-max scaled to [0, 1].

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{stack, Model};
use crate::synth::PairedSample;
use crate::tensor::{Tape, Tensor};

/// Reduces a `[m, d]` gradient to a `[gh, gw]` map in [0, 1]. A constant
/// score field maps to all zeros.
pub fn saliency_from_grad(grad: &[f64], d: usize, grid: (usize, usize)) -> Result<Tensor> {
    let m = grid.0 * grid.1;
    if d == 0 || grad.len() != m * d {
        return Err(Error::dim("saliency_from_grad", &[grad.len()], &[m, d]));
    }
    let scores: Vec<f64> = grad
        .chunks(d)
        .map(|row| (row.iter().sum::<f64>() / d as f64).max(0.0))
        .collect();
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let map = if span > 0.0 {
        scores.iter().map(|s| (s - lo) / span).collect()
    } else {
        vec![0.0; m]
    };
    Tensor::new(&[grid.0, grid.1], map)
}

/// Saliency of foreground class `class_idx` for one sample.
pub fn saliency_map(model: &Model, sample: &PairedSample, class_idx: usize) -> Result<Tensor> {
    let cfg = &model.cfg;
    if class_idx >= cfg.classes {
        return Err(Error::Contract(format!("class {class_idx} outside 0..{}", cfg.classes)));
    }
    let pa = model.audio_patches(&sample.audio)?;
    let pv = model.visual_patches(&sample.visual)?;
    let mut tape = Tape::new();
    let pa = tape.constant_owned(stack(&[&pa])?);
    let pv = tape.constant_owned(stack(&[&pv])?);
    let (enc, pred) = model.forward_pair(&mut tape, pa, pv)?;
    let logit = tape.pick(pred.fg_logits, &[class_idx])?;
    let logit = tape.sum(logit);
    let watch = *enc.visual.inputs.last().expect("at least one block");
    let grads = tape.backward_watch(logit, &[watch])?;
    let d = cfg.d;
    let r = &enc.visual.layout.patches;
    let rows = match grads.of(watch) {
        Some(g) => g[r.start * d..r.end * d].to_vec(),
        None => vec![0.0; r.len() * d],
    };
    saliency_from_grad(&rows, d, cfg.grid_visual())
}

/// Row-major `(row, col)` of the largest entry; the first one on ties.
pub fn argmax_cell(map: &Tensor) -> (usize, usize) {
    let w = map.shape()[1];
    let mut best = 0;
    for (i, &v) in map.data().iter().enumerate() {
        if v > map.data()[best] {
            best = i;
        }
    }
    (best / w, best % w)
}

/// Binary (P5) PGM with values scaled from [0, 1] to 0..=255.
pub fn write_pgm<W: Write>(w: &mut W, map: &Tensor) -> Result<()> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::dim("write_pgm", s, &[]));
    }
    write!(w, "P5\n{} {}\n255\n", s[1], s[0])?;
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}
