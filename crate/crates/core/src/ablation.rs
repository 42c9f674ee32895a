//! Ablation suites: every configuration is trained from the same base
//! config under the same seeds, then directional trends are checked on the
//! seed means.

use std::fmt::Write as _;

use crate::config::{ModalitySet, RunConfig};
use crate::error::{Error, Result};
use crate::synth::{gen_dataset, Dataset, SynthSpec};
use crate::train::{evaluate, train};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    /// Token groups with and without local self-attention.
    Tokens,
    /// Synthetic mismatched pairs on or off.
    FgMining,
    /// Contrastive loss after every block, after the last only, or not at all.
    Blockwise,
    /// Single-modality evaluation of multimodal versus unimodal training.
    Unimodal,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Tokens, Suite::FgMining, Suite::Blockwise, Suite::Unimodal];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Tokens => "tokens",
            Suite::FgMining => "fg_mining",
            Suite::Blockwise => "blockwise",
            Suite::Unimodal => "unimodal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}` (tokens, fg_mining, blockwise, unimodal)")))
    }

    /// Named configuration overrides, applied on top of the base config.
    pub fn variants(self) -> Vec<(&'static str, Vec<&'static str>)> {
        match self {
            Suite::Tokens => {
                let groups: [(&str, [&str; 3]); 4] = [
                    ("a+v+s", ["n_a=5", "n_v=5", "n_s=5"]),
                    ("a+v", ["n_a=5", "n_v=5", "n_s=0"]),
                    ("s", ["n_a=0", "n_v=0", "n_s=5"]),
                    ("a", ["n_a=5", "n_v=0", "n_s=0"]),
                ];
                let mut out = Vec::new();
                for (name, g) in groups {
                    for (suffix, lsa) in [("+lsa", "lsa=on"), ("", "lsa=off")] {
                        let label: &'static str = Box::leak(format!("{name}{suffix}").into_boxed_str());
                        let mut o = g.to_vec();
                        o.push(lsa);
                        out.push((label, o));
                    }
                }
                out
            }
            Suite::FgMining => vec![
                ("mining", vec!["mismatch_ratio=0.25"]),
                ("no_mining", vec!["mismatch_ratio=0"]),
            ],
            Suite::Blockwise => vec![
                ("blockwise", vec!["blockwise=on"]),
                ("final_block", vec!["blockwise=off"]),
                ("no_scl", vec!["contrastive_weight=0"]),
            ],
            Suite::Unimodal => vec![
                ("multimodal", vec!["train_modality=av"]),
                ("audio_only", vec!["train_modality=a"]),
                ("visual_only", vec!["train_modality=v"]),
            ],
        }
    }
}

/// One trained configuration under one seed, evaluated on the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub fg_acc: f64,
    pub bg_acc: f64,
    pub retrieval_r1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrendCheck {
    pub claim: String,
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs > rhs` when strict, else `lhs >= rhs`; or `lhs - rhs > margin`.
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub suite: Suite,
    pub rows: Vec<AblationRow>,
    pub trends: Vec<TrendCheck>,
}

impl AblationReport {
    pub fn passed(&self) -> bool {
        self.trends.iter().all(|t| t.passed)
    }

    /// Mean of `metric` over seeds for `config`.
    pub fn mean(&self, config: &str, metric: impl Fn(&AblationRow) -> f64) -> f64 {
        let vals: Vec<f64> = self.rows.iter().filter(|r| r.config == config).map(metric).collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("config,seed,fg_acc,bg_acc,retrieval_r1\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.config, r.seed, r.fg_acc, r.bg_acc, r.retrieval_r1
            );
        }
        out
    }

    pub fn trend_report(&self) -> String {
        let mut out = String::new();
        for t in &self.trends {
            let _ = writeln!(
                out,
                "{} {}: {:.4} vs {:.4}",
                if t.passed { "PASS" } else { "FAIL" },
                t.claim,
                t.lhs,
                t.rhs
            );
        }
        out
    }
}

/// Trains and evaluates every variant of `suite` for each seed.
///
/// The dataset for a seed is generated once from the base config and shared
/// by all variants. Rows report the last epoch's model, not the best one.
pub fn run_ablation(
    suite: Suite,
    base: &RunConfig,
    seeds: &[u64],
    log: &mut dyn FnMut(&str),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut data_cfg = base.clone();
        data_cfg.seed = seed;
        let (_, data) = gen_dataset(&SynthSpec::from_config(&data_cfg))?;
        for (name, overrides) in suite.variants() {
            let mut cfg = data_cfg.clone();
            cfg.apply_overrides(overrides.iter().copied())?;
            let new = run_variant(suite, name, &cfg, &data)?;
            for r in &new {
                log(&format!(
                    "{} seed={} {} fg={:.4} bg={:.4} r1={:.4}",
                    suite.name(),
                    seed,
                    r.config,
                    r.fg_acc,
                    r.bg_acc,
                    r.retrieval_r1
                ));
            }
            rows.extend(new);
        }
    }
    let mut report = AblationReport {
        suite,
        rows,
        trends: Vec::new(),
    };
    report.trends = trends(&report);
    Ok(report)
}

fn run_variant(suite: Suite, name: &str, cfg: &RunConfig, data: &Dataset) -> Result<Vec<AblationRow>> {
    let out = train(cfg, data, None, &mut |_| {})?;
    let row = |config: String, fg: f64, bg: f64, r1: f64| AblationRow {
        config,
        seed: cfg.seed,
        fg_acc: fg,
        bg_acc: bg,
        retrieval_r1: r1,
    };
    if suite == Suite::Unimodal && cfg.train_modality == ModalitySet::Both {
        // The multimodal model is scored on each modality alone.
        let mut rows = Vec::new();
        for (suffix, m) in [("eval_a", ModalitySet::Audio), ("eval_v", ModalitySet::Visual)] {
            let e = evaluate(&out.last, &data.test, m)?;
            rows.push(row(format!("{name}/{suffix}"), e.fg_acc, e.bg_acc, e.retrieval_r1));
        }
        return Ok(rows);
    }
    let last = out.metrics.last().expect("at least one epoch");
    Ok(vec![row(name.to_string(), last.fg_acc, last.bg_acc, last.retrieval_r1)])
}

fn check(claim: String, lhs: f64, rhs: f64, strict: bool) -> TrendCheck {
    TrendCheck {
        passed: if strict { lhs > rhs } else { lhs >= rhs },
        claim,
        lhs,
        rhs,
    }
}

/// Minimum absolute background-accuracy gain from foreground mining.
pub const MINING_MARGIN: f64 = 0.05;

fn trends(r: &AblationReport) -> Vec<TrendCheck> {
    let fg = |c: &str| r.mean(c, |x| x.fg_acc);
    let bg = |c: &str| r.mean(c, |x| x.bg_acc);
    let r1 = |c: &str| r.mean(c, |x| x.retrieval_r1);
    match r.suite {
        Suite::Tokens => {
            let mut out = Vec::new();
            let order = ["a+v+s+lsa", "a+v+lsa", "s+lsa", "a+lsa"];
            for w in order.windows(2) {
                out.push(check(format!("fg_acc {} > {}", w[0], w[1]), fg(w[0]), fg(w[1]), true));
            }
            for g in ["a+v+s", "a+v", "s", "a"] {
                let with = format!("{g}+lsa");
                out.push(check(format!("fg_acc {with} >= {g}"), fg(&with), fg(g), false));
            }
            out
        }
        Suite::FgMining => {
            let (a, b) = (bg("mining"), bg("no_mining"));
            vec![TrendCheck {
                claim: format!("bg_acc mining - no_mining > {MINING_MARGIN}"),
                lhs: a - b,
                rhs: MINING_MARGIN,
                passed: a - b > MINING_MARGIN,
            }]
        }
        Suite::Blockwise => vec![
            check(
                "fg_acc blockwise >= final_block".into(),
                fg("blockwise"),
                fg("final_block"),
                false,
            ),
            check(
                "fg_acc final_block >= no_scl".into(),
                fg("final_block"),
                fg("no_scl"),
                false,
            ),
            check(
                "r1 blockwise >= final_block".into(),
                r1("blockwise"),
                r1("final_block"),
                false,
            ),
            check(
                "r1 final_block >= no_scl".into(),
                r1("final_block"),
                r1("no_scl"),
                false,
            ),
        ],
        Suite::Unimodal => vec![
            check(
                "audio fg_acc multimodal > audio_only".into(),
                fg("multimodal/eval_a"),
                fg("audio_only"),
                true,
            ),
            check(
                "visual fg_acc multimodal > visual_only".into(),
                fg("multimodal/eval_v"),
                fg("visual_only"),
                true,
            ),
        ],
    }
}
