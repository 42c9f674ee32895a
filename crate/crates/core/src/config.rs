//! Flat `key = value` run configuration shared by every module.
//!
//! Lines are `key = value`; `#` starts a comment. Unknown keys are rejected.
//! [`RunConfig::dump`] writes every key, and parsing a dump reproduces the
//! same configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which reading of the foreground/background loss is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Eq9Mode {
    /// BCE weighted by `y_b`: background samples get BCE, foreground samples CE.
    Literal,
    /// BCE on every sample, CE on foreground samples.
    AlwaysBg,
}

/// Modalities a run trains or evaluates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModalitySet {
    Both,
    Audio,
    Visual,
}

impl ModalitySet {
    /// The single modality, or `None` for `Both`.
    pub fn single(self) -> Option<crate::tokens::Modality> {
        match self {
            ModalitySet::Both => None,
            ModalitySet::Audio => Some(crate::tokens::Modality::Audio),
            ModalitySet::Visual => Some(crate::tokens::Modality::Visual),
        }
    }
}

impl ConfigValue for ModalitySet {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "av" => Ok(ModalitySet::Both),
            "a" => Ok(ModalitySet::Audio),
            "v" => Ok(ModalitySet::Visual),
            _ => Err(format!("expected av, a or v, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        match self {
            ModalitySet::Both => "av",
            ModalitySet::Audio => "a",
            ModalitySet::Visual => "v",
        }
        .to_string()
    }
}

/// `rows x cols`, e.g. `24x32`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims(pub usize, pub usize);

pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                <$t>::from_str(s).map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
from_str_value!(usize, u64, f64);

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "on" | "true" | "1" | "yes" => Ok(true),
            "off" | "false" | "0" | "no" => Ok(false),
            _ => Err(format!("expected on/off, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        if *self { "on" } else { "off" }.to_string()
    }
}

impl ConfigValue for Eq9Mode {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "literal" => Ok(Eq9Mode::Literal),
            "always_bg" => Ok(Eq9Mode::AlwaysBg),
            _ => Err(format!("expected literal or always_bg, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        match self {
            Eq9Mode::Literal => "literal",
            Eq9Mode::AlwaysBg => "always_bg",
        }
        .to_string()
    }
}

impl ConfigValue for Dims {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s
            .split_once('x')
            .ok_or_else(|| format!("expected ROWSxCOLS, got `{s}`"))?;
        let a = a.trim().parse().map_err(|e| format!("{e}"))?;
        let b = b.trim().parse().map_err(|e| format!("{e}"))?;
        Ok(Dims(a, b))
    }
    fn render(&self) -> String {
        format!("{}x{}", self.0, self.1)
    }
}

impl ConfigValue for Vec<f64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
    }
}

macro_rules! run_config {
    ($( #[doc = $doc:literal] $name:ident : $ty:ty = $default:expr, )*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( #[doc = $doc] pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $name: $default, )* }
            }
        }

        impl RunConfig {
            /// `(key, description)` for every key, in dump order.
            pub const KEYS: &'static [(&'static str, &'static str)] = &[
                $( (stringify!($name), $doc.trim_ascii()), )*
            ];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($name) => {
                        self.$name = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( stringify!($name) => Some(self.$name.render()), )*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    /// embedding width
    d: usize = 32,
    /// number of frozen transformer blocks (K)
    depth: usize = 4,
    /// attention heads in backbone blocks and LSA units
    heads: usize = 4,
    /// MLP hidden width as a multiple of d
    mlp_ratio: usize = 4,
    /// square patch side in pixels / spectrogram bins
    patch_size: usize = 8,
    /// image height and width
    image_hw: usize = 32,
    /// spectrogram frequency x time bins
    spec_ft: Dims = Dims(24, 32),
    /// give the audio stream its own frozen backbone
    separate_backbones: bool = false,
    /// audio prompt tokens (n_a)
    n_a: usize = 5,
    /// visual prompt tokens (n_v)
    n_v: usize = 5,
    /// shared multimodal prompt tokens (n_s)
    n_s: usize = 5,
    /// learnable background/foreground class tokens
    class_tokens: bool = true,
    /// fresh prompt tokens at every block input
    deep_prompts: bool = false,
    /// one z_b/z_f pair used by both streams
    share_class_tokens: bool = true,
    /// local self-attention over each prompt group
    lsa: bool = true,
    /// hidden width of the background head MLP
    bg_hidden: usize = 64,
    /// contrastive temperature
    tau: f64 = 0.07,
    /// weight on the summed contrastive losses; 0 disables them
    contrastive_weight: f64 = 1.0,
    /// contrastive loss after every block (on) or only the last (off)
    blockwise: bool = true,
    /// per-block contrastive weights, comma separated; empty = all ones
    block_weights: Vec<f64> = Vec::new(),
    /// foreground/background loss reading: literal or always_bg
    eq9_mode: Eq9Mode = Eq9Mode::Literal,
    /// modalities seen during training: av, a or v (a/v drop shared tokens)
    train_modality: ModalitySet = ModalitySet::Both,
    /// foreground classes (C)
    classes: usize = 8,
    /// per-element Gaussian noise std of generated samples
    noise_std: f64 = 0.1,
    /// fraction of sample noise shared across the two modalities
    cross_modal_corr: f64 = 0.5,
    /// generated training samples (all foreground)
    train_size: usize = 512,
    /// generated test samples
    test_size: usize = 400,
    /// fraction of mismatched (background) pairs in the test split
    test_mismatch: f64 = 0.2,
    /// fraction of each training batch replaced by mismatched pairs
    mismatch_ratio: f64 = 0.25,
    /// training batch size (B)
    batch_size: usize = 32,
    /// training epochs
    epochs: usize = 200,
    /// initial Adam learning rate
    lr: f64 = 1e-3,
    /// learning-rate multiplier applied every lr_step epochs
    lr_decay: f64 = 0.1,
    /// epochs between learning-rate decays
    lr_step: usize = 30,
    /// master seed for data, initialisation and batching
    seed: u64 = 0,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{p}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (k, _) in Self::KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).unwrap_or_default());
        }
        out
    }

    /// Every key with its default and description, one per line.
    pub fn help_text() -> String {
        let defaults = RunConfig::default();
        let mut out = String::new();
        for (k, doc) in Self::KEYS {
            let _ = writeln!(out, "  {k:<20} {:<12} {doc}", defaults.get(k).unwrap_or_default());
        }
        out
    }

    pub fn grid_visual(&self) -> (usize, usize) {
        (self.image_hw / self.patch_size, self.image_hw / self.patch_size)
    }

    pub fn grid_audio(&self) -> (usize, usize) {
        (self.spec_ft.0 / self.patch_size, self.spec_ft.1 / self.patch_size)
    }

    pub fn n_visual_patches(&self) -> usize {
        let (h, w) = self.grid_visual();
        h * w
    }

    pub fn n_audio_patches(&self) -> usize {
        let (h, w) = self.grid_audio();
        h * w
    }

    pub fn block_weight(&self, k: usize) -> f64 {
        self.block_weights.get(k).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("d, depth, heads and mlp_ratio must be positive".into());
        }
        if self.d % self.heads != 0 {
            return bad(format!("heads ({}) must divide d ({})", self.heads, self.d));
        }
        let p = self.patch_size;
        if p == 0 || self.image_hw == 0 || self.image_hw % p != 0 {
            return bad(format!("image_hw {} not divisible by patch_size {p}", self.image_hw));
        }
        if self.spec_ft.0 == 0 || self.spec_ft.1 == 0 || self.spec_ft.0 % p != 0 || self.spec_ft.1 % p != 0 {
            return bad(format!(
                "spec_ft {} not divisible by patch_size {p}",
                self.spec_ft.render()
            ));
        }
        if self.n_visual_patches() < 2 {
            return bad("need at least two visual patches for the position table".into());
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !self.block_weights.is_empty() && self.block_weights.len() != self.depth {
            return bad(format!(
                "block_weights has {} entries, depth is {}",
                self.block_weights.len(),
                self.depth
            ));
        }
        for (name, v) in [
            ("mismatch_ratio", self.mismatch_ratio),
            ("test_mismatch", self.test_mismatch),
            ("cross_modal_corr", self.cross_modal_corr),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.noise_std < 0.0 {
            return bad("noise_std must be non-negative".into());
        }
        if self.classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if self.class_tokens && self.bg_hidden == 0 {
            return bad("bg_hidden must be positive".into());
        }
        Ok(())
    }
}
