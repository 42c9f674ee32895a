//! Finite-difference check of the full training loss with respect to every
//! trainable tensor.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::RunConfig;
use crate::error::Result;
use crate::losses::{total_loss, LabelPair};
use crate::model::{derive_seed, stack, Model};
use crate::synth::{gen_dataset, SynthSpec};
use crate::tensor::{relative_error_floor, Tape, Tensor, Var};

/// Tolerance for primitive ops.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Tolerance for the full loss.
pub const MODEL_TOL: f64 = 1e-4;
/// Default central-difference steps.
pub const PRIMITIVE_H: f64 = 1e-5;
pub const MODEL_H: f64 = 1e-4;
/// Denominator floor for the full loss. Derivatives smaller than this are
/// compared absolutely: with a loss of order 10 and `h = 1e-4`, the
/// difference quotient carries roundoff near 1e-10.
pub const MODEL_FLOOR: f64 = 1e-6;
/// Elements probed per trainable tensor.
pub const MODEL_PER_TENSOR: usize = 16;
/// Batch of the full-loss check.
pub const MODEL_BATCH: usize = 4;

/// Std of the Gaussian offset added to every trainable tensor before the
/// check.
pub const JITTER_STD: f64 = 0.2;

const TAG_CHECK: u64 = 31;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compares the tape gradient of the total loss on a small mixed batch
/// (foreground and background pairs) with central differences, at the
/// initial parameters plus seeded Gaussian jitter, using the five-point
/// central stencil (truncation error `O(h⁴)`). At most `per_tensor`
/// seeded elements of each tensor are probed.
/// Relative errors use a denominator floor of [`MODEL_FLOOR`].
pub fn model_gradcheck(cfg: &RunConfig, batch: usize, per_tensor: usize, h: f64) -> Result<Vec<TensorCheck>> {
    let mut data_cfg = cfg.clone();
    data_cfg.train_size = 1;
    data_cfg.test_size = batch.max(2);
    data_cfg.test_mismatch = 0.5;
    let (_, data) = gen_dataset(&SynthSpec::from_config(&data_cfg))?;
    let mut model = Model::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_CHECK));
    // At init the attention scores are near zero and q/k gradients sit
    // below f64 resolution of the loss; probe a generic point instead.
    let normal = Normal::new(0.0, JITTER_STD).expect("finite std");
    for (_, t) in model.store.iter_mut() {
        for x in t.data_mut() {
            *x += normal.sample(&mut rng);
        }
    }
    let samples = &data.test;
    let labels: Vec<LabelPair> = samples.iter().map(|s| s.label).collect();
    let pa: Vec<Tensor> = samples
        .iter()
        .map(|s| model.audio_patches(&s.audio))
        .collect::<Result<_>>()?;
    let pv: Vec<Tensor> = samples
        .iter()
        .map(|s| model.visual_patches(&s.visual))
        .collect::<Result<_>>()?;
    let pa = stack(&pa.iter().collect::<Vec<_>>())?;
    let pv = stack(&pv.iter().collect::<Vec<_>>())?;

    let loss = |model: &Model, tape: &mut Tape| -> Result<Var> {
        let a = tape.constant(&pa);
        let v = tape.constant(&pv);
        let (enc, pred) = model.forward_pair(tape, a, v)?;
        Ok(total_loss(tape, &pred, &enc.audio, &enc.visual, &labels, &model.cfg)?.total)
    };

    let mut tape = Tape::new();
    let out = loss(&model, &mut tape)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let ids: Vec<_> = model
        .store
        .iter()
        .map(|(id, name, t)| (id, name.to_string(), t.numel()))
        .collect();
    let mut report = Vec::with_capacity(ids.len());
    for (id, name, numel) in ids {
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
        let mut idx: Vec<usize> = if numel <= per_tensor {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, per_tensor).into_vec()
        };
        idx.sort_unstable();
        let x = model.store.get(id).data().to_vec();
        let mut pairs = Vec::with_capacity(idx.len());
        for &i in &idx {
            let mut at = |v: f64| -> Result<f64> {
                model.store.get_mut(id).data_mut()[i] = v;
                let mut t = Tape::inference();
                let out = loss(&model, &mut t)?;
                Ok(t.item(out))
            };
            let near = at(x[i] + h)? - at(x[i] - h)?;
            let far = at(x[i] + 2.0 * h)? - at(x[i] - 2.0 * h)?;
            let numeric = (8.0 * near - far) / (12.0 * h);
            model.store.get_mut(id).data_mut()[i] = x[i];
            pairs.push((analytic[i], numeric));
        }
        let err = pairs
            .iter()
            .map(|&(a, n)| relative_error_floor(a, n, MODEL_FLOOR))
            .fold(0.0, f64::max);
        report.push(TensorCheck {
            name,
            numel,
            checked: idx.len(),
            max_rel_err: err,
        });
    }
    Ok(report)
}
