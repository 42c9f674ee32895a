use avprompt::config::Eq9Mode;
use avprompt::losses::{
    combine, contrastive_terms, fg_bg_loss, heads_forward, scl_block_loss, total_loss, HeadParams, LabelPair,
    Predictions,
};
use avprompt::model::Model;
use avprompt::params::ParamStore;
use avprompt::saliency::{argmax_cell, saliency_from_grad, saliency_map, write_pgm};
use avprompt::synth::gen_dataset;
use avprompt::synth::SynthSpec;
use avprompt::tensor::{fd_check, Tape, Tensor};
use avprompt::tokens::{pool_shared, Modality, StreamLayout, StreamState};
use avprompt::{Error, RunConfig, Var};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn scl_value(v: &Tensor, a: &Tensor, tau: f64, mask: &[bool]) -> f64 {
    let mut tape = Tape::inference();
    let (vv, av) = (tape.constant(v), tape.constant(a));
    let l = scl_block_loss(&mut tape, vv, av, tau, mask).unwrap();
    tape.item(l)
}

fn cos(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nx * ny)
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn infonce_loop(v: &[Vec<f64>], a: &[Vec<f64>], tau: f64) -> f64 {
    let b = v.len();
    let mut v2a = 0.0;
    let mut a2v = 0.0;
    for i in 0..b {
        let row: Vec<f64> = (0..b).map(|j| cos(&v[i], &a[j]) / tau).collect();
        v2a += lse(&row) - row[i];
        let col: Vec<f64> = (0..b).map(|j| cos(&v[j], &a[i]) / tau).collect();
        a2v += lse(&col) - col[i];
    }
    (v2a / b as f64 + a2v / b as f64) / 2.0
}

// Two-token streams: background class token at row 0, foreground at row 1.
fn class_stream(tape: &mut Tape, modality: Modality, bg: &[f64], fg: &[f64]) -> StreamState {
    let d = bg.len();
    let x = tape.input(&[1, 2, d], [bg, fg].concat()).unwrap();
    StreamState {
        modality,
        layout: StreamLayout::new(true, 0, 0, 0),
        blocks: vec![x],
        inputs: vec![x],
        batch: 1,
    }
}

fn heads(cfg: &RunConfig, seed: u64) -> (ParamStore, HeadParams) {
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = HeadParams::init(cfg, &mut store, &mut rng);
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
    }
    (store, h)
}

struct Tokens {
    v_bg: Vec<f64>,
    v_fg: Vec<f64>,
    a_bg: Vec<f64>,
    a_fg: Vec<f64>,
}

impl Tokens {
    fn random(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut r = || (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        Tokens {
            v_bg: r(),
            v_fg: r(),
            a_bg: r(),
            a_fg: r(),
        }
    }

    fn predict(&self, store: &ParamStore, h: &HeadParams) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let hv = h.record(&mut tape, store);
        let sv = class_stream(&mut tape, Modality::Visual, &self.v_bg, &self.v_fg);
        let sa = class_stream(&mut tape, Modality::Audio, &self.a_bg, &self.a_fg);
        let p = heads_forward(&mut tape, &hv, &sa, &sv).unwrap();
        (p.bg_prob(&tape)[0], tape.value(p.fg_logits).to_vec())
    }
}

#[test]
fn zero_heads_give_half_and_zero_logits() {
    let cfg = RunConfig::default();
    let (mut store, h) = heads(&cfg, 1);
    store.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (p, fg) = Tokens::random(cfg.d, &mut rng).predict(&store, &h);
    assert_eq!(p, 0.5);
    assert!(fg.iter().all(|&x| x == 0.0));
}

#[test]
fn fg_head_split_isolates_visual_half() {
    let cfg = RunConfig::default();
    let (mut store, h) = heads(&cfg, 3);
    let d = cfg.d;
    let c = cfg.classes;
    store.get_mut(h.fg.w).data_mut()[d * c..].fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t1 = Tokens::random(d, &mut rng);
    let mut t2 = Tokens::random(d, &mut rng);
    t2.v_fg = t1.v_fg.clone();
    assert_eq!(t1.predict(&store, &h).1, t2.predict(&store, &h).1);
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let out = b.numel();
    (0..out)
        .map(|j| {
            b.data()[j]
                + x.iter()
                    .enumerate()
                    .map(|(i, v)| v * w.data()[i * out + j])
                    .sum::<f64>()
        })
        .collect()
}

#[test]
fn heads_match_hand_computed_affine_maps() {
    let cfg = RunConfig::default();
    let (store, h) = heads(&cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t = Tokens::random(cfg.d, &mut rng);
    let (p, fg) = t.predict(&store, &h);

    let x_fg = [t.v_fg.clone(), t.a_fg.clone()].concat();
    let want = affine(&x_fg, store.get(h.fg.w), store.get(h.fg.b));
    for (g, w) in fg.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12);
    }
    let x_bg = [t.v_bg.clone(), t.a_bg.clone()].concat();
    let hid: Vec<f64> = affine(&x_bg, store.get(h.bg1.w), store.get(h.bg1.b))
        .into_iter()
        .map(gelu)
        .collect();
    let z = affine(&hid, store.get(h.bg2.w), store.get(h.bg2.b))[0];
    assert!((p - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
}

#[test]
fn heads_need_class_tokens() {
    let cfg = RunConfig::default();
    let (store, h) = heads(&cfg, 7);
    let mut tape = Tape::new();
    let hv = h.record(&mut tape, &store);
    let x = tape.input(&[1, 3, cfg.d], vec![0.0; 3 * cfg.d]).unwrap();
    let st = |m| StreamState {
        modality: m,
        layout: StreamLayout::new(false, 0, 3, 0),
        blocks: vec![x],
        inputs: vec![x],
        batch: 1,
    };
    let r = heads_forward(&mut tape, &hv, &st(Modality::Audio), &st(Modality::Visual));
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn single_pair_has_zero_contrastive_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let v = rand_tensor(&[1, 16], &mut rng);
    let a = rand_tensor(&[1, 16], &mut rng);
    assert_eq!(scl_value(&v, &a, 0.07, &[true]), 0.0);
}

#[test]
fn identical_rows_give_log_batch_for_any_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let row = rand_tensor(&[1, 16], &mut rng);
    let other = rand_tensor(&[1, 16], &mut rng);
    for b in [2usize, 4, 7] {
        let v = Tensor::from_fn(&[b, 16], |i| row.data()[i % 16]);
        let a = Tensor::from_fn(&[b, 16], |i| other.data()[i % 16]);
        for tau in [0.01, 0.07, 1.0, 5.0] {
            let l = scl_value(&v, &a, tau, &vec![true; b]);
            let want = (b as f64).ln();
            assert!(
                (l - want).abs() <= 4.0 * f64::EPSILON * want,
                "b={b} tau={tau}: {l} vs {want}"
            );
        }
    }
}

#[test]
fn contrastive_loss_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..5 {
        let unit = |rng: &mut ChaCha8Rng| {
            let t = rand_tensor(&[4, 16], rng);
            let r: Vec<f64> = rows(&t)
                .into_iter()
                .flat_map(|r| {
                    let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                    r.into_iter().map(move |x| x / n)
                })
                .collect();
            Tensor::new(&[4, 16], r).unwrap()
        };
        let v = unit(&mut rng);
        let a = unit(&mut rng);
        let got = scl_value(&v, &a, 0.07, &[true; 4]);
        let want = infonce_loop(&rows(&v), &rows(&a), 0.07);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn contrastive_loss_rejects_bad_temperature_and_handles_empty_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let v = rand_tensor(&[3, 8], &mut rng);
    let a = rand_tensor(&[3, 8], &mut rng);
    for tau in [0.0, -1.0, f64::NAN] {
        let mut tape = Tape::new();
        let (vv, av) = (tape.constant(&v), tape.constant(&a));
        assert!(matches!(
            scl_block_loss(&mut tape, vv, av, tau, &[true; 3]),
            Err(Error::Config(_))
        ));
    }
    assert_eq!(scl_value(&v, &a, 0.07, &[false; 3]), 0.0);
}

#[test]
fn positive_pairs_are_a_local_optimum() {
    // Only perturbations orthogonal to every row of `a` are tested: components
    // towards a negative change its similarity to first order, which can lower
    // the loss by a term scaled by the (tiny) negative softmax mass.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < 4 {
        let mut r: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = r.iter().zip(b).map(|(x, y)| x * y).sum();
            r.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(r.into_iter().map(|x| x / n).collect());
    }
    let a = Tensor::new(&[4, 16], basis.concat()).unwrap();
    let base = scl_value(&a, &a, 0.07, &[true; 4]);
    for _ in 0..50 {
        let row = rng.gen_range(0..4);
        let mut delta: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = delta.iter().zip(b).map(|(x, y)| x * y).sum();
            delta.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let scale = rng.gen_range(0.05..0.5);
        let mut v = a.clone();
        for j in 0..16 {
            v.data_mut()[row * 16 + j] += scale * delta[j];
        }
        assert!(base <= scl_value(&v, &a, 0.07, &[true; 4]));
    }
}

#[test]
fn contrastive_loss_stays_finite_for_large_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let v = Tensor::from_fn(&[6, 16], |_| rng.gen_range(-1e3..1e3));
    let a = Tensor::from_fn(&[6, 16], |_| rng.gen_range(-1e3..1e3));
    let mut tape = Tape::new();
    let mut store = ParamStore::default();
    let id = store.add("v", v.clone());
    let vv = store.record(&mut tape, id);
    let av = tape.constant(&a);
    let l = scl_block_loss(&mut tape, vv, av, 0.01, &[true; 6]).unwrap();
    assert!(tape.item(l).is_finite());
    let g = tape.backward(l).unwrap();
    assert!(g.param(id).unwrap().iter().all(|x| x.is_finite()));
}

fn bf(bg_logit: &[f64], fg_logits: &[f64], labels: &[LabelPair], mode: Eq9Mode) -> Vec<f64> {
    let b = labels.len();
    let c = fg_logits.len() / b;
    let mut tape = Tape::new();
    let pred = Predictions {
        bg_logit: tape.input(&[b], bg_logit.to_vec()).unwrap(),
        fg_logits: tape.input(&[b, c], fg_logits.to_vec()).unwrap(),
    };
    let l = fg_bg_loss(&mut tape, &pred, labels, mode).unwrap();
    tape.value(l).to_vec()
}

#[test]
fn confident_background_has_vanishing_loss() {
    for mode in [Eq9Mode::Literal, Eq9Mode::AlwaysBg] {
        let l = bf(&[40.0], &[0.3; 8], &[LabelPair::background()], mode);
        assert!(l[0] < 1e-15);
    }
}

#[test]
fn uniform_foreground_logits_cost_log_classes() {
    let l = bf(&[0.7], &[0.25; 8], &[LabelPair::foreground(3)], Eq9Mode::Literal);
    assert!((l[0] - 8f64.ln()).abs() < 1e-12);
    assert!((l[0] - 2.0794).abs() < 1e-4);
    let l = bf(&[0.0], &[0.25; 8], &[LabelPair::foreground(3)], Eq9Mode::AlwaysBg);
    assert!((l[0] - (8f64.ln() + 2f64.ln())).abs() < 1e-12);
}

// Packs `[bg logits (B), fg logits (B*C)]` into one leaf for gradient checks.
fn packed_loss(labels: Vec<LabelPair>, c: usize, mode: Eq9Mode) -> impl Fn(&mut Tape, Var) -> avprompt::Result<Var> {
    move |tape, x| {
        let b = labels.len();
        let z = tape.slice(x, 0, 0, b)?;
        let f = tape.slice(x, 0, b, b * c)?;
        let f = tape.reshape(f, &[b, c])?;
        let pred = Predictions {
            bg_logit: z,
            fg_logits: f,
        };
        let l = fg_bg_loss(tape, &pred, &labels, mode)?;
        Ok(tape.sum(l))
    }
}

#[test]
fn literal_mode_gives_foreground_bg_logit_no_gradient() {
    let labels = vec![
        LabelPair::foreground(1),
        LabelPair::background(),
        LabelPair::foreground(4),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&[3 + 3 * 8], &mut rng).param();
    let f = packed_loss(labels, 8, Eq9Mode::Literal);
    let mut store = ParamStore::default();
    let id = store.add("x", x);
    let mut tape = Tape::new();
    let xv = store.record(&mut tape, id);
    let l = f(&mut tape, xv).unwrap();
    let g = tape.backward(l).unwrap();
    let g = g.param(id).unwrap();
    assert_eq!(g[0], 0.0);
    assert_eq!(g[2], 0.0);
    assert_ne!(g[1], 0.0);
    assert!(g[3 + 8..3 + 16].iter().all(|&v| v == 0.0));
}

#[test]
fn fg_bg_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for mode in [Eq9Mode::Literal, Eq9Mode::AlwaysBg] {
        let labels = vec![
            LabelPair::foreground(0),
            LabelPair::background(),
            LabelPair::foreground(7),
            LabelPair::background(),
        ];
        let x = rand_tensor(&[4 + 4 * 8], &mut rng);
        let err = fd_check(packed_loss(labels, 8, mode), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{mode:?}: {err}");
    }
}

#[test]
fn fg_bg_loss_is_finite_for_extreme_logits() {
    let labels = [LabelPair::foreground(2), LabelPair::background()];
    let logits: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 1e3 } else { -1e3 }).collect();
    for mode in [Eq9Mode::Literal, Eq9Mode::AlwaysBg] {
        let l = bf(&[-1e3, 1e3], &logits, &labels, mode);
        assert!(l.iter().all(|v| v.is_finite()));
    }
}

fn batch(model: &Model, b: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = &model.cfg;
    let a = rand_tensor(&[b, cfg.n_audio_patches(), cfg.d], &mut rng);
    let v = rand_tensor(&[b, cfg.n_visual_patches(), cfg.d], &mut rng);
    (a, v)
}

#[test]
fn all_background_batch_is_plain_bce() {
    let cfg = RunConfig {
        eq9_mode: Eq9Mode::AlwaysBg,
        ..RunConfig::default()
    };
    let model = Model::new(&cfg).unwrap();
    let (pa, pv) = batch(&model, 4, 16);
    let labels = vec![LabelPair::background(); 4];

    let mut tape = Tape::new();
    let (a, v) = (tape.constant(&pa), tape.constant(&pv));
    let (enc, pred) = model.forward_pair(&mut tape, a, v).unwrap();
    let bundle = total_loss(&mut tape, &pred, &enc.audio, &enc.visual, &labels, &cfg).unwrap();
    assert_eq!(bundle.l_cnt.len(), cfg.depth);
    for &(_, l) in &bundle.l_cnt {
        assert_eq!(tape.item(l), 0.0);
    }
    let g_total = tape.backward(bundle.total).unwrap();

    let mut tape2 = Tape::new();
    let (a, v) = (tape2.constant(&pa), tape2.constant(&pv));
    let (_, pred2) = model.forward_pair(&mut tape2, a, v).unwrap();
    let sp = tape2.softplus(pred2.bg_logit);
    let yz = tape2.scale(pred2.bg_logit, -1.0);
    let bce = tape2.add(sp, yz).unwrap();
    let mean = tape2.mean(bce, 0).unwrap();
    let g_bce = tape2.backward(mean).unwrap();
    assert!((tape.item(bundle.total) - tape2.item(mean)).abs() < 1e-14);

    for (id, _, t) in model.store.iter() {
        if !t.requires_grad() {
            continue;
        }
        let zero = vec![0.0; t.numel()];
        let x = g_total.param(id).unwrap_or(&zero);
        let y = g_bce.param(id).unwrap_or(&zero);
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() <= 1e-14 * (1.0 + q.abs()));
        }
    }
    let fg = g_total.param(model.heads.unwrap().fg.w).unwrap_or(&[]);
    assert!(fg.iter().all(|&x| x == 0.0));
}

#[test]
fn all_foreground_total_is_ce_plus_block_losses() {
    let cfg = RunConfig::default();
    let model = Model::new(&cfg).unwrap();
    let (pa, pv) = batch(&model, 4, 17);
    let labels: Vec<LabelPair> = (0..4).map(|i| LabelPair::foreground(i * 2)).collect();
    let mut tape = Tape::new();
    let (a, v) = (tape.constant(&pa), tape.constant(&pv));
    let (enc, pred) = model.forward_pair(&mut tape, a, v).unwrap();
    let bundle = total_loss(&mut tape, &pred, &enc.audio, &enc.visual, &labels, &cfg).unwrap();

    let logits = tape.value(pred.fg_logits).to_vec();
    let c = cfg.classes;
    let ce: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, l)| lse(&logits[i * c..(i + 1) * c]) - logits[i * c + l.y_f.unwrap()])
        .sum::<f64>()
        / 4.0;
    let mut cnt = 0.0;
    for k in 1..=cfg.depth {
        let pv = pool_shared(&mut tape, &enc.visual, k).unwrap();
        let pa = pool_shared(&mut tape, &enc.audio, k).unwrap();
        let v = Tensor::new(&[4, cfg.d], tape.value(pv).to_vec()).unwrap();
        let a = Tensor::new(&[4, cfg.d], tape.value(pa).to_vec()).unwrap();
        cnt += infonce_loop(&rows(&v), &rows(&a), cfg.tau);
    }
    assert!((tape.item(bundle.total) - (ce + cnt)).abs() < 1e-10);
}

#[test]
fn masked_contrastive_sum_equals_filtered_batch() {
    let cfg = RunConfig::default();
    let model = Model::new(&cfg).unwrap();
    let (pa, pv) = batch(&model, 6, 18);
    let labels = vec![
        LabelPair::foreground(0),
        LabelPair::background(),
        LabelPair::foreground(3),
        LabelPair::background(),
        LabelPair::foreground(5),
        LabelPair::foreground(1),
    ];
    let keep: Vec<usize> = (0..6).filter(|&i| !labels[i].is_background()).collect();
    let sum_cnt = |pa: &Tensor, pv: &Tensor, labels: &[LabelPair]| {
        let mut tape = Tape::inference();
        let (a, v) = (tape.constant(pa), tape.constant(pv));
        let enc = model.encode_pair(&mut tape, a, v).unwrap();
        let terms = contrastive_terms(&mut tape, &enc.audio, &enc.visual, labels, &cfg).unwrap();
        terms.iter().map(|&(_, l)| tape.item(l)).sum::<f64>()
    };
    let filter = |t: &Tensor| {
        let per: usize = t.shape()[1..].iter().product();
        let data: Vec<f64> = keep
            .iter()
            .flat_map(|&i| t.data()[i * per..(i + 1) * per].to_vec())
            .collect();
        let mut shape = t.shape().to_vec();
        shape[0] = keep.len();
        Tensor::new(&shape, data).unwrap()
    };
    let fg_labels: Vec<LabelPair> = keep.iter().map(|&i| labels[i]).collect();
    let full = sum_cnt(&pa, &pv, &labels);
    let filtered = sum_cnt(&filter(&pa), &filter(&pv), &fg_labels);
    assert_eq!(full.to_bits(), filtered.to_bits());
}

#[test]
fn weighted_blocks_scale_their_terms() {
    let cfg = RunConfig {
        contrastive_weight: 0.5,
        ..RunConfig::default()
    };
    let mut tape = Tape::new();
    let bf = tape.input(&[2], vec![1.0, 3.0]).unwrap();
    let terms: Vec<(usize, Var)> = (1..=4).map(|k| (k, tape.input(&[], vec![k as f64]).unwrap())).collect();
    let t = combine(&mut tape, bf, &terms, &cfg).unwrap();
    assert!((tape.item(t) - (2.0 + 0.5 * 10.0)).abs() < 1e-15);
}

#[test]
fn constant_gradient_gives_all_zero_map() {
    let map = saliency_from_grad(&vec![0.3; 16 * 8], 8, (4, 4)).unwrap();
    assert_eq!(map.shape(), &[4, 4]);
    assert!(map.data().iter().all(|&x| x == 0.0));
}

#[test]
fn injected_gradient_peak_is_the_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..20 {
        let mut g: Vec<f64> = (0..16 * 8).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let cell = rng.gen_range(0..16);
        g[cell * 8..(cell + 1) * 8].fill(5.0);
        let map = saliency_from_grad(&g, 8, (4, 4)).unwrap();
        assert_eq!(argmax_cell(&map), (cell / 4, cell % 4));
        assert_eq!(map.data()[cell], 1.0);
        assert!(map.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

#[test]
fn saliency_map_has_patch_grid_shape_and_exports_pgm() {
    let cfg = RunConfig {
        train_size: 0,
        test_size: 2,
        ..RunConfig::default()
    };
    let (_, data) = gen_dataset(&SynthSpec::from_config(&cfg)).unwrap();
    let model = Model::new(&cfg).unwrap();
    let map = saliency_map(&model, &data.test[0], 2).unwrap();
    assert_eq!(map.shape(), &[4, 4]);
    assert!(map.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    let mut buf = Vec::new();
    write_pgm(&mut buf, &map).unwrap();
    assert!(buf.starts_with(b"P5\n4 4\n255\n"));
    assert_eq!(buf.len(), b"P5\n4 4\n255\n".len() + 16);
    assert!(matches!(
        saliency_map(&model, &data.test[0], cfg.classes),
        Err(Error::Contract(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn contrastive_loss_is_permutation_invariant(seed in any::<u64>(), b in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = rand_tensor(&[b, 8], &mut rng);
        let a = rand_tensor(&[b, 8], &mut rng);
        let mask: Vec<bool> = (0..b).map(|_| rng.gen_bool(0.7)).collect();
        let mut perm: Vec<usize> = (0..b).collect();
        perm.shuffle(&mut rng);
        let permute = |t: &Tensor| {
            let r = rows(t);
            Tensor::new(&[b, 8], perm.iter().flat_map(|&i| r[i].clone()).collect()).unwrap()
        };
        let pm: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
        let l0 = scl_value(&v, &a, 0.07, &mask);
        let l1 = scl_value(&permute(&v), &permute(&a), 0.07, &pm);
        prop_assert!((l0 - l1).abs() < 1e-12);
        prop_assert!(l0 >= 0.0);
    }
}
