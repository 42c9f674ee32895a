//! Adam, the step-decay schedule, the training loop, evaluation and
//! checkpoints.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::BackboneParams;
use crate::config::{ModalitySet, RunConfig};
use crate::error::{Error, Result};
use crate::losses::{argmax_rows, cross_entropy, total_loss, LabelPair, LossSummary};
use crate::model::{derive_seed, stack, Model};
use crate::params::ParamStore;
use crate::synth::{mismatch_plan, Dataset, PairedSample};
use crate::tensor::{cosine_sim, read_records, write_records, Tape, Tensor};
use crate::tokens::{pool_shared, Modality};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
const EVAL_BATCH: usize = 100;
const TAG_SHUFFLE: u64 = 21;

/// Bias-corrected Adam over the trainable tensors of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments, indexed like the store.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| {
                    if t.requires_grad() {
                        vec![0.0; t.numel()]
                    } else {
                        Vec::new()
                    }
                })
                .collect()
        };
        Adam {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients accumulated in `store`. Every trainable
    /// tensor must carry a gradient; nothing changes if one does not.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (id, name, t) in store.iter() {
            if t.requires_grad() && t.grad().is_none() {
                return Err(Error::Contract(format!(
                    "trainable tensor {name} (#{}) has no gradient",
                    id.0
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, t) in store.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            let g = t.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (((p, g), m), v) in t.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `lr · lr_decay^⌊epoch / lr_step⌋`.
pub fn lr_at(epoch: usize, cfg: &RunConfig) -> f64 {
    let k = epoch / cfg.lr_step.max(1);
    cfg.lr * cfg.lr_decay.powi(k as i32)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub fg_acc: f64,
    /// NaN for single-modality evaluation.
    pub bg_acc: f64,
    /// NaN for single-modality evaluation.
    pub retrieval_r1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_bf: f64,
    pub loss_cnt_sum: f64,
    pub fg_acc: f64,
    pub bg_acc: f64,
    pub retrieval_r1: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,loss_total,loss_bf,loss_cnt_sum,fg_acc,bg_acc,retrieval_r1";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.loss_total,
            self.loss_bf,
            self.loss_cnt_sum,
            self.fg_acc,
            self.bg_acc,
            self.retrieval_r1
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

/// Frozen patch tokens of every sample, computed once per model.
#[derive(Clone, Debug)]
pub struct PatchCache {
    pub audio: Vec<Tensor>,
    pub visual: Vec<Tensor>,
    pub labels: Vec<LabelPair>,
    pub classes: Vec<usize>,
}

impl PatchCache {
    pub fn new(model: &Model, samples: &[PairedSample]) -> Result<Self> {
        let mut c = PatchCache {
            audio: Vec::with_capacity(samples.len()),
            visual: Vec::with_capacity(samples.len()),
            labels: Vec::with_capacity(samples.len()),
            classes: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            s.label.validate(model.cfg.classes)?;
            c.audio.push(model.audio_patches(&s.audio)?);
            c.visual.push(model.visual_patches(&s.visual)?);
            c.labels.push(s.label);
            c.classes.push(s.source.0);
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Test metrics of `model` on `samples`. `Audio`/`Visual` route through the
/// single-stream path without shared tokens.
pub fn evaluate(model: &Model, samples: &[PairedSample], modality: ModalitySet) -> Result<EvalMetrics> {
    evaluate_cached(model, &PatchCache::new(model, samples)?, modality)
}

pub fn evaluate_cached(model: &Model, cache: &PatchCache, modality: ModalitySet) -> Result<EvalMetrics> {
    let n = cache.len();
    let mut fg_hits = 0usize;
    let mut fg_total = 0usize;
    let mut bg_hits = 0usize;
    let mut pooled_v: Vec<Vec<f64>> = Vec::new();
    let mut pooled_a: Vec<Vec<f64>> = Vec::new();
    let depth = model.cfg.depth;
    let retrieval = modality == ModalitySet::Both && model.cfg.n_s > 0;
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let mut tape = Tape::inference();
        let fg_pred = match modality.single() {
            Some(m) => {
                let src = match m {
                    Modality::Audio => &cache.audio,
                    Modality::Visual => &cache.visual,
                };
                let p = tape.constant_owned(stack(&idx.iter().map(|&i| &src[i]).collect::<Vec<_>>())?);
                let (_, logits) = model.unimodal_forward(&mut tape, m, p)?;
                argmax_rows(&tape, logits)
            }
            None => {
                let pa = tape.constant_owned(stack(&idx.iter().map(|&i| &cache.audio[i]).collect::<Vec<_>>())?);
                let pv = tape.constant_owned(stack(&idx.iter().map(|&i| &cache.visual[i]).collect::<Vec<_>>())?);
                let (enc, pred) = model.forward_pair(&mut tape, pa, pv)?;
                for (j, p) in pred.bg_prob(&tape).into_iter().enumerate() {
                    let said_bg = p >= 0.5;
                    if said_bg == cache.labels[idx[j]].is_background() {
                        bg_hits += 1;
                    }
                }
                if retrieval {
                    let v = pool_shared(&mut tape, &enc.visual, depth)?;
                    let a = pool_shared(&mut tape, &enc.audio, depth)?;
                    let d = model.cfg.d;
                    for (j, &i) in idx.iter().enumerate() {
                        if !cache.labels[i].is_background() {
                            pooled_v.push(tape.value(v)[j * d..(j + 1) * d].to_vec());
                            pooled_a.push(tape.value(a)[j * d..(j + 1) * d].to_vec());
                        }
                    }
                }
                pred.fg_argmax(&tape)
            }
        };
        for (j, &i) in idx.iter().enumerate() {
            if let Some(y) = cache.labels[i].y_f {
                fg_total += 1;
                if fg_pred[j] == y {
                    fg_hits += 1;
                }
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
    let (bg_acc, retrieval_r1) = match modality {
        ModalitySet::Both => (
            ratio(bg_hits, n),
            if retrieval {
                recall_at_1(&pooled_v, &pooled_a)?
            } else {
                f64::NAN
            },
        ),
        _ => (f64::NAN, f64::NAN),
    };
    Ok(EvalMetrics {
        fg_acc: ratio(fg_hits, fg_total),
        bg_acc,
        retrieval_r1,
    })
}

/// Fraction of rows `i` whose most cosine-similar `a` row is `a[i]`.
pub fn recall_at_1(v: &[Vec<f64>], a: &[Vec<f64>]) -> Result<f64> {
    if v.len() != a.len() {
        return Err(Error::dim("recall_at_1", &[v.len()], &[a.len()]));
    }
    if v.is_empty() {
        return Ok(f64::NAN);
    }
    let mut hits = 0;
    for (i, vi) in v.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (j, aj) in a.iter().enumerate() {
            let s = cosine_sim(vi, aj, crate::losses::COS_EPS)?;
            if s > best.0 {
                best = (s, j);
            }
        }
        if best.1 == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / v.len() as f64)
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Model,
    pub last_optim: Adam,
    /// Model at the epoch with the highest test fg accuracy; ties go to the
    /// higher bg accuracy, then to the earlier epoch.
    pub best: Model,
    pub best_optim: Adam,
    pub best_epoch: usize,
    pub metrics: Vec<MetricsRow>,
    pub init_frozen_checksum: u64,
}

/// Trains a fresh model built from `cfg` on `data`. With `out`, writes
/// `metrics.csv`, `best.mavt` and `last.mavt` there. `log` sees each row as
/// it is produced.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    out: Option<&Path>,
    log: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    let mut model = Model::new(cfg)?;
    if !cfg.class_tokens {
        return Err(Error::Config(
            "training needs class_tokens = on; the heads read the class tokens".into(),
        ));
    }
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let init_frozen_checksum = model.frozen_checksum();
    let train_cache = PatchCache::new(&model, &data.train)?;
    let test_cache = PatchCache::new(&model, &data.test)?;
    if train_cache.labels.iter().any(LabelPair::is_background) {
        return Err(Error::Config("training split must hold foreground pairs only".into()));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut adam = Adam::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_SHUFFLE));
    let b = cfg.batch_size.min(train_cache.len());
    let mut order: Vec<usize> = (0..train_cache.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<((f64, f64), usize, ParamStore, Adam)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        // The trailing partial batch is dropped.
        for (step, chunk) in order.chunks_exact(b).enumerate() {
            let summary =
                train_step(&mut model, &mut adam, &train_cache, chunk, lr, &mut rng).map_err(|e| match e {
                    Error::NonFinite { dump, .. } => Error::NonFinite { epoch, step, dump },
                    other => other,
                })?;
            if !summary.is_finite() {
                let dump = summary.to_string();
                if let Some(dir) = out {
                    fs::write(dir.join("nonfinite.txt"), &dump)?;
                }
                return Err(Error::NonFinite { epoch, step, dump });
            }
            sums.0 += summary.total;
            sums.1 += summary.bf_mean;
            sums.2 += summary.cnt_sum;
            steps += 1;
        }
        let eval = evaluate_cached(&model, &test_cache, cfg.train_modality)?;
        let s = steps.max(1) as f64;
        let row = MetricsRow {
            epoch,
            lr,
            loss_total: sums.0 / s,
            loss_bf: sums.1 / s,
            loss_cnt_sum: sums.2 / s,
            fg_acc: eval.fg_acc,
            bg_acc: eval.bg_acc,
            retrieval_r1: eval.retrieval_r1,
        };
        log(&row);
        let key = (eval.fg_acc, eval.bg_acc);
        let improved = best
            .as_ref()
            .map_or(true, |(old, ..)| key.0 > old.0 || (key.0 == old.0 && key.1 > old.1));
        if improved {
            best = Some((key, epoch, model.store.clone(), adam.clone()));
        }
        metrics.push(row);
    }

    let (_, best_epoch, best_store, best_optim) = best.expect("at least one epoch");
    let mut best_model = model.clone();
    best_model.store = best_store;
    if let Some(dir) = out {
        fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
        save_checkpoint(&dir.join("best.mavt"), &best_model, Some(&best_optim))?;
        save_checkpoint(&dir.join("last.mavt"), &model, Some(&adam))?;
    }
    Ok(TrainOutcome {
        last: model,
        last_optim: adam,
        best: best_model,
        best_optim,
        best_epoch,
        metrics,
        init_frozen_checksum,
    })
}

fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    cache: &PatchCache,
    chunk: &[usize],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossSummary> {
    let cfg = model.cfg.clone();
    let mut tape = Tape::new();
    let (loss, summary) = match cfg.train_modality.single() {
        Some(m) => {
            let src = match m {
                Modality::Audio => &cache.audio,
                Modality::Visual => &cache.visual,
            };
            let p = tape.constant_owned(stack(&chunk.iter().map(|&i| &src[i]).collect::<Vec<_>>())?);
            let ys: Vec<usize> = chunk.iter().map(|&i| cache.classes[i]).collect();
            let (_, logits) = model.unimodal_forward(&mut tape, m, p)?;
            let ce = cross_entropy(&mut tape, logits, &ys)?;
            let loss = tape.mean(ce, 0)?;
            let bf = tape.value(ce).to_vec();
            let total = tape.item(loss);
            (
                loss,
                LossSummary {
                    total,
                    bf_mean: total,
                    bf,
                    cnt: Vec::new(),
                    cnt_sum: 0.0,
                },
            )
        }
        None => {
            let classes: Vec<usize> = chunk.iter().map(|&i| cache.classes[i]).collect();
            let plan = mismatch_plan(&classes, cfg.mismatch_ratio, rng)?;
            let labels: Vec<LabelPair> = plan
                .iter()
                .map(|&(v, a)| {
                    if v == a {
                        cache.labels[chunk[v]]
                    } else {
                        LabelPair::background()
                    }
                })
                .collect();
            let va: Vec<&Tensor> = plan.iter().map(|&(v, _)| &cache.visual[chunk[v]]).collect();
            let aa: Vec<&Tensor> = plan.iter().map(|&(_, a)| &cache.audio[chunk[a]]).collect();
            let pv = tape.constant_owned(stack(&va)?);
            let pa = tape.constant_owned(stack(&aa)?);
            let (enc, pred) = model.forward_pair(&mut tape, pa, pv)?;
            let bundle = total_loss(&mut tape, &pred, &enc.audio, &enc.visual, &labels, &cfg)?;
            (bundle.total, bundle.summary(&tape))
        }
    };
    if !summary.is_finite() {
        return Ok(summary);
    }
    let grads = tape.backward(loss)?;
    model.store.zero_grads();
    model.store.apply_grads(&grads)?;
    model.store.fill_missing_grads();
    adam.step(&mut model.store, lr)?;
    Ok(summary)
}

const META_CONFIG: &str = "meta/config";
const OPTIM_STEP: &str = "optim/step";

/// Writes config, frozen section, trainable section and optimiser state.
pub fn save_checkpoint(path: &Path, model: &Model, optim: Option<&Adam>) -> Result<()> {
    let mut recs: Vec<(String, Tensor)> = Vec::new();
    let cfg_bytes: Vec<f64> = model.cfg.dump().bytes().map(f64::from).collect();
    recs.push((META_CONFIG.into(), Tensor::new(&[cfg_bytes.len()], cfg_bytes)?));
    for (name, t) in model.frozen_tensors() {
        recs.push((format!("frozen/{name}"), t.clone()));
    }
    for (name, t) in model.trainable_tensors() {
        recs.push((format!("trainable/{name}"), t.clone()));
    }
    if let Some(opt) = optim {
        recs.push((OPTIM_STEP.into(), Tensor::scalar(opt.step as f64)));
        for (id, name, t) in model.store.iter() {
            if t.requires_grad() {
                recs.push((format!("optim/m/{name}"), Tensor::new(t.shape(), opt.m[id.0].clone())?));
                recs.push((format!("optim/v/{name}"), Tensor::new(t.shape(), opt.v[id.0].clone())?));
            }
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_records(&mut w, &recs)?;
    w.flush()?;
    Ok(())
}

/// Loaded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optim: Option<Adam>,
    /// Checksum over the frozen section exactly as stored.
    pub frozen_checksum: u64,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let recs = read_records(&mut std::io::BufReader::new(fs::File::open(path)?))?;
    let find = |name: &str| recs.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
    let cfg_t = find(META_CONFIG).ok_or_else(|| Error::Format("checkpoint lacks its config".into()))?;
    let text: String = cfg_t
        .data()
        .iter()
        .map(|&b| {
            if (0.0..=127.0).contains(&b) && b.fract() == 0.0 {
                Ok(b as u8 as char)
            } else {
                Err(Error::Format("config record is not ASCII".into()))
            }
        })
        .collect::<Result<_>>()?;
    let cfg = RunConfig::parse(&text)?;
    let mut model = Model::new(&cfg)?;
    let frozen = |prefix: &str| BackboneParams::from_named(prefix, &|n: &str| find(&format!("frozen/{n}")), &cfg);
    model.backbone = frozen("backbone")?;
    if model.audio_backbone.is_some() {
        model.audio_backbone = Some(frozen("audio_backbone")?);
    }
    model.store.load_values(&|n: &str| find(&format!("trainable/{n}")))?;
    let frozen_checksum =
        crate::tensor::checksum(recs.iter().filter(|(n, _)| n.starts_with("frozen/")).map(|(_, t)| t));
    let optim = match find(OPTIM_STEP) {
        None => None,
        Some(step) => {
            let mut opt = Adam::new(&model.store);
            opt.step = step.item() as u64;
            for (id, name, t) in model.store.iter() {
                if !t.requires_grad() {
                    continue;
                }
                let get = |kind: &str| {
                    find(&format!("optim/{kind}/{name}"))
                        .filter(|m| m.shape() == t.shape())
                        .map(Tensor::into_data)
                        .ok_or_else(|| Error::Format(format!("missing optimiser state for {name}")))
                };
                opt.m[id.0] = get("m")?;
                opt.v[id.0] = get("v")?;
            }
            Some(opt)
        }
    };
    Ok(Checkpoint {
        model,
        optim,
        frozen_checksum,
    })
}
