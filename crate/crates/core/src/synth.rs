//! Procedural paired audio-visual data.
//!
//! Each class owns a visual prototype (three colour channels, each a sum of
//! three low-frequency 2-D cosines) and an audio prototype built the same
//! way on the spectrogram grid. A sample is its class prototype plus
//! Gaussian noise. Part of the noise variance (`cross_modal_corr`) comes from
//! a per-sample latent shared by both modalities, so an image and its own
//! spectrogram agree on more than the class label.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{AudioSample, VisualSample};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::LabelPair;
use crate::model::derive_seed;
use crate::tensor::{checksum, read_records, write_records, Tensor};

/// Scale of the cosine field around mid-grey in visual prototypes; values
/// are clamped to [0, 1].
pub const VISUAL_CONTRAST: f64 = 1.0;

/// Dimension of the per-sample latent shared across modalities.
pub const LATENT_DIM: usize = 8;

const PROTOTYPE_ATTEMPTS: usize = 64;
const TAG_PROTOTYPES: u64 = 11;
const TAG_BASIS: u64 = 12;
const TAG_TRAIN: u64 = 13;
const TAG_TEST: u64 = 14;
const TAG_TEST_LAYOUT: u64 = 15;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub image_hw: usize,
    /// Spectrogram `(F, T)`.
    pub spec_ft: (usize, usize),
    pub noise_std: f64,
    pub cross_modal_corr: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub test_mismatch: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        SynthSpec {
            classes: cfg.classes,
            image_hw: cfg.image_hw,
            spec_ft: (cfg.spec_ft.0, cfg.spec_ft.1),
            noise_std: cfg.noise_std,
            cross_modal_corr: cfg.cross_modal_corr,
            train_size: cfg.train_size,
            test_size: cfg.test_size,
            test_mismatch: cfg.test_mismatch,
            seed: cfg.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub visual: VisualSample,
    pub audio: AudioSample,
    pub label: LabelPair,
    /// Classes the visual and audio halves were drawn from.
    pub source: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub visual: Vec<Tensor>,
    pub audio: Vec<Tensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

impl Dataset {
    /// 64-bit checksum over every payload, train split first.
    pub fn digest(&self) -> u64 {
        checksum(
            self.train
                .iter()
                .chain(&self.test)
                .flat_map(|s| [&s.visual.pixels, &s.audio.spectrogram]),
        )
    }
}

/// Sum of three random low-frequency cosines on an `h × w` grid, divided by
/// three so values lie in [-1, 1].
fn cosine_field<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let (fy, fx) = loop {
                let fy = rng.gen_range(0..=3) as f64;
                let fx = rng.gen_range(0..=3) as f64;
                if fy != 0.0 || fx != 0.0 {
                    break (fy, fx);
                }
            };
            let amp = rng.gen_range(0.5..=1.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            (fy, fx, amp, phase)
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let v: f64 = waves
                .iter()
                .map(|&(fy, fx, amp, phase)| {
                    amp * (2.0 * PI * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + phase).cos()
                })
                .sum();
            out.push(v / 3.0);
        }
    }
    out
}

fn make_prototypes<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Prototypes {
    let hw = spec.image_hw;
    let (f, t) = spec.spec_ft;
    let mut visual = Vec::with_capacity(spec.classes);
    let mut audio = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let mut pix = Vec::with_capacity(3 * hw * hw);
        for _ in 0..3 {
            pix.extend(
                cosine_field(hw, hw, rng)
                    .into_iter()
                    .map(|v| (0.5 + VISUAL_CONTRAST * v).clamp(0.0, 1.0)),
            );
        }
        visual.push(Tensor::new(&[3, hw, hw], pix).expect("prototype shape"));
        audio.push(Tensor::new(&[f, t], cosine_field(f, t, rng)).expect("prototype shape"));
    }
    Prototypes { visual, audio }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl Prototypes {
    /// Smallest pairwise L2 distance over both modalities.
    pub fn min_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for set in [&self.visual, &self.audio] {
            for i in 0..set.len() {
                for j in i + 1..set.len() {
                    best = best.min(l2(set[i].data(), set[j].data()));
                }
            }
        }
        best
    }

    /// Index of the nearest visual prototype to `pixels`.
    pub fn nearest_visual(&self, pixels: &Tensor) -> usize {
        nearest(&self.visual, pixels)
    }

    pub fn nearest_audio(&self, spec: &Tensor) -> usize {
        nearest(&self.audio, spec)
    }
}

fn nearest(set: &[Tensor], x: &Tensor) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, p) in set.iter().enumerate() {
        let d = l2(p.data(), x.data());
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Fixed low-frequency basis fields, unit RMS, that map the shared latent
/// into each modality.
struct LatentBasis {
    visual: Vec<Vec<f64>>,
    audio: Vec<Vec<f64>>,
}

impl LatentBasis {
    fn new<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Self {
        let hw = spec.image_hw;
        let (f, t) = spec.spec_ft;
        let unit = |v: Vec<f64>| {
            let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
            v.into_iter().map(|x| x / rms).collect::<Vec<f64>>()
        };
        let visual = (0..LATENT_DIM)
            .map(|_| {
                let mut v = Vec::with_capacity(3 * hw * hw);
                for _ in 0..3 {
                    v.extend(cosine_field(hw, hw, rng));
                }
                unit(v)
            })
            .collect();
        let audio = (0..LATENT_DIM).map(|_| unit(cosine_field(f, t, rng))).collect();
        LatentBasis { visual, audio }
    }
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    protos: &'a Prototypes,
    basis: LatentBasis,
}

impl Generator<'_> {
    fn noisy(&self, base: &Tensor, basis: &[Vec<f64>], latent: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = self.spec.noise_std;
        let rho = self.spec.cross_modal_corr;
        let (own, shared) = ((1.0 - rho).sqrt() * s, rho.sqrt() * s / (LATENT_DIM as f64).sqrt());
        base.data()
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let e: f64 = StandardNormal.sample(rng);
                let l: f64 = latent.iter().zip(basis).map(|(z, b)| z * b[i]).sum();
                p + own * e + shared * l
            })
            .collect()
    }

    fn sample(&self, v_class: usize, a_class: usize, seed: u64) -> PairedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latent: Vec<f64> = (0..LATENT_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a_latent: Vec<f64> = if v_class == a_class {
            latent.clone()
        } else {
            (0..LATENT_DIM).map(|_| StandardNormal.sample(&mut rng)).collect()
        };
        let vproto = &self.protos.visual[v_class];
        let aproto = &self.protos.audio[a_class];
        let mut pix = self.noisy(vproto, &self.basis.visual, &latent, &mut rng);
        pix.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        let spec = self.noisy(aproto, &self.basis.audio, &a_latent, &mut rng);
        let label = if v_class == a_class {
            LabelPair::foreground(v_class)
        } else {
            LabelPair::background()
        };
        PairedSample {
            visual: VisualSample {
                pixels: Tensor::new(vproto.shape(), pix).expect("shape"),
            },
            audio: AudioSample {
                spectrogram: Tensor::new(aproto.shape(), spec).expect("shape"),
            },
            label,
            source: (v_class, a_class),
        }
    }
}

/// Generates prototypes, a foreground-only train split and a test split
/// with `test_mismatch` background pairs.
pub fn gen_dataset(spec: &SynthSpec) -> Result<(Prototypes, Dataset)> {
    if spec.classes < 2 {
        return Err(Error::Generation("need at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, TAG_PROTOTYPES));
    let floor = 10.0 * spec.noise_std;
    let mut protos = None;
    for _ in 0..PROTOTYPE_ATTEMPTS {
        let p = make_prototypes(spec, &mut rng);
        if p.min_distance() > floor {
            protos = Some(p);
            break;
        }
    }
    let protos = protos.ok_or_else(|| {
        Error::Generation(format!(
            "no prototype set with pairwise distance above {floor} after {PROTOTYPE_ATTEMPTS} attempts"
        ))
    })?;
    let mut brng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, TAG_BASIS));
    let gen = Generator {
        spec,
        protos: &protos,
        basis: LatentBasis::new(spec, &mut brng),
    };
    let sample_seed = |tag: u64, i: usize| derive_seed(derive_seed(spec.seed, tag), i as u64);

    let train = (0..spec.train_size)
        .map(|i| {
            let c = i % spec.classes;
            gen.sample(c, c, sample_seed(TAG_TRAIN, i))
        })
        .collect();

    let n_bg = (spec.test_mismatch * spec.test_size as f64).round() as usize;
    let mut lrng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, TAG_TEST_LAYOUT));
    let mut is_bg: Vec<bool> = (0..spec.test_size).map(|i| i < n_bg).collect();
    is_bg.shuffle(&mut lrng);
    let mut fg_count = 0;
    let mut test = Vec::with_capacity(spec.test_size);
    for (i, &bg) in is_bg.iter().enumerate() {
        let (vc, ac) = if bg {
            let vc = lrng.gen_range(0..spec.classes);
            let ac = (vc + lrng.gen_range(1..spec.classes)) % spec.classes;
            (vc, ac)
        } else {
            fg_count += 1;
            let c = (fg_count - 1) % spec.classes;
            (c, c)
        };
        test.push(gen.sample(vc, ac, sample_seed(TAG_TEST, i)));
    }
    Ok((protos, Dataset { train, test }))
}

/// Plans background replacements for a batch with the given source classes.
/// Returns `(visual_source, audio_source)` positions for every slot; slots
/// left foreground map to themselves.
pub fn mismatch_plan<R: Rng + ?Sized>(classes: &[usize], ratio: f64, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Sampling(format!("ratio must lie in [0, 1], got {ratio}")));
    }
    let b = classes.len();
    let k = (ratio * b as f64).floor() as usize;
    let mut plan: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    if k == 0 {
        return Ok(plan);
    }
    if classes.iter().all(|&c| c == classes[0]) {
        return Err(Error::Sampling(
            "a batch with a single class cannot form mismatched pairs".into(),
        ));
    }
    let mut order: Vec<usize> = (0..b).collect();
    order.shuffle(rng);
    for &pos in &order[..k] {
        let others: Vec<usize> = (0..b).filter(|&j| classes[j] != classes[pos]).collect();
        let q = *others.choose(rng).expect("at least two classes present");
        plan[pos] = (pos, q);
    }
    Ok(plan)
}

/// Replaces `⌊ratio·B⌋` samples by cross-class pairs labelled background.
pub fn sample_mismatch(batch: &[PairedSample], ratio: f64, seed: u64) -> Result<Vec<PairedSample>> {
    let classes: Vec<usize> = batch.iter().map(|s| s.source.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = mismatch_plan(&classes, ratio, &mut rng)?;
    Ok(plan
        .into_iter()
        .map(|(v, a)| {
            if v == a {
                return batch[v].clone();
            }
            PairedSample {
                visual: batch[v].visual.clone(),
                audio: batch[a].audio.clone(),
                label: LabelPair::background(),
                source: (batch[v].source.0, batch[a].source.1),
            }
        })
        .collect())
}

fn header_line(s: &PairedSample) -> String {
    let yf = s.label.y_f.map_or("-".to_string(), |c| c.to_string());
    format!("y_b={} y_f={} v={} a={}", s.label.y_b, yf, s.source.0, s.source.1)
}

fn parse_header(line: &str) -> Result<(LabelPair, (usize, usize))> {
    let bad = || Error::Format(format!("malformed sample header `{line}`"));
    let mut yb = None;
    let mut yf = None;
    let mut v = None;
    let mut a = None;
    for field in line.split_whitespace() {
        let (k, val) = field.split_once('=').ok_or_else(bad)?;
        match k {
            "y_b" => yb = Some(val.parse::<u8>().map_err(|_| bad())?),
            "y_f" => {
                yf = Some(if val == "-" {
                    None
                } else {
                    Some(val.parse::<usize>().map_err(|_| bad())?)
                })
            }
            "v" => v = Some(val.parse::<usize>().map_err(|_| bad())?),
            "a" => a = Some(val.parse::<usize>().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    match (yb, yf, v, a) {
        (Some(y_b), Some(y_f), Some(v), Some(a)) if y_b <= 1 => Ok((LabelPair { y_b, y_f }, (v, a))),
        _ => Err(bad()),
    }
}

pub fn write_sample<W: Write>(w: &mut W, s: &PairedSample) -> Result<()> {
    writeln!(w, "{}", header_line(s))?;
    write_records(
        w,
        &[
            ("visual".to_string(), s.visual.pixels.clone()),
            ("audio".to_string(), s.audio.spectrogram.clone()),
        ],
    )
}

pub fn read_sample<R: Read>(r: &mut R) -> Result<PairedSample> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(Error::Format("sample header is not newline terminated".into()));
    }
    let (label, source) = parse_header(line.trim_end())?;
    let recs = read_records(&mut r)?;
    let get = |name: &str| {
        recs.iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Format(format!("sample lacks a `{name}` record")))
    };
    Ok(PairedSample {
        visual: VisualSample { pixels: get("visual")? },
        audio: AudioSample {
            spectrogram: get("audio")?,
        },
        label,
        source,
    })
}

pub fn save_sample(path: &Path, s: &PairedSample) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_sample(&mut w, s)?;
    w.flush()?;
    Ok(())
}

pub fn load_sample(path: &Path) -> Result<PairedSample> {
    read_sample(&mut fs::File::open(path)?)
}

const SPLITS: [&str; 2] = ["train", "test"];

/// Writes `<root>/{train,test}/<idx>.mavt` plus a `manifest.csv` per split.
pub fn save_dataset(root: &Path, data: &Dataset) -> Result<()> {
    for (name, split) in SPLITS.iter().zip([&data.train, &data.test]) {
        let dir = root.join(name);
        fs::create_dir_all(&dir)?;
        let mut manifest = String::from("idx,y_b,y_f\n");
        for (i, s) in split.iter().enumerate() {
            save_sample(&dir.join(format!("{i}.mavt")), s)?;
            let yf = s.label.y_f.map_or("-".to_string(), |c| c.to_string());
            manifest.push_str(&format!("{i},{},{yf}\n", s.label.y_b));
        }
        fs::write(dir.join("manifest.csv"), manifest)?;
    }
    Ok(())
}

/// Reads a dataset directory in manifest order.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mut out = Dataset::default();
    for (name, split) in SPLITS.iter().zip([&mut out.train, &mut out.test]) {
        let dir = root.join(name);
        let manifest = fs::read_to_string(dir.join("manifest.csv"))?;
        for (lineno, line) in manifest.lines().enumerate().skip(1) {
            let idx = line
                .split(',')
                .next()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| Error::Format(format!("{name} manifest line {}: empty", lineno + 1)))?;
            let s = load_sample(&dir.join(format!("{idx}.mavt")))?;
            let expect = format!(
                "{idx},{},{}",
                s.label.y_b,
                s.label.y_f.map_or("-".to_string(), |c| c.to_string())
            );
            if expect != line.trim() {
                return Err(Error::Format(format!(
                    "{name} manifest line `{line}` disagrees with sample header"
                )));
            }
            split.push(s);
        }
    }
    Ok(out)
}

/// Accuracy of the nearest-visual-prototype classifier over foreground
/// test samples.
pub fn oracle_accuracy(protos: &Prototypes, test: &[PairedSample]) -> f64 {
    let fg: Vec<&PairedSample> = test.iter().filter(|s| !s.label.is_background()).collect();
    if fg.is_empty() {
        return f64::NAN;
    }
    let hits = fg
        .iter()
        .filter(|s| Some(protos.nearest_visual(&s.visual.pixels)) == s.label.y_f)
        .count();
    hits as f64 / fg.len() as f64
}
