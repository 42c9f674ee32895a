use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{json, Value};

use avprompt::ablation::{run_ablation, Suite};
use avprompt::check::{model_gradcheck, MODEL_BATCH, MODEL_H, MODEL_PER_TENSOR, MODEL_TOL, PRIMITIVE_H, PRIMITIVE_TOL};
use avprompt::config::ModalitySet;
use avprompt::model::Model;
use avprompt::saliency::{argmax_cell, saliency_map, write_pgm};
use avprompt::synth::{gen_dataset, load_dataset, oracle_accuracy, save_dataset, SynthSpec};
use avprompt::tensor::primitive_suite;
use avprompt::train::{evaluate, load_checkpoint, train};
use avprompt::{Error, RunConfig, Tape};

#[derive(Parser)]
#[command(
    name = "avprompt",
    version,
    about = "Prompt-tuned audio-visual transformer on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed; overrides the `seed` key
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::parse(&fs::read_to_string(p)?)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(self.set.iter().map(String::as_str))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired dataset
    Gen {
        /// Config file holding the generator keys
        #[arg(long, value_name = "FILE")]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a generated dataset
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// av, a or v
        #[arg(long, default_value = "av")]
        modality: String,
    },
    /// Finite-difference gradient checks
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Central-difference step for every check
        #[arg(long)]
        h: Option<f64>,
    },
    /// Trainable and frozen parameter counts
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run an ablation suite and check its trends
    Ablate {
        /// tokens, fg_mining, blockwise or unimodal
        #[arg(long)]
        suite: String,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated seeds
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export a patch-grid saliency map as PGM
    Saliency {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Index into the test split
        #[arg(long)]
        idx: usize,
        /// Foreground class to explain; defaults to the predicted one
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Numeric(String),
    Threshold(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => Failure::Numeric(e.to_string()),
            Error::Contract(_) => Failure::Threshold(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn emit(v: Value) {
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "{v}");
}

fn main() -> ExitCode {
    let keys = format!("Config keys (default, meaning):\n{}", RunConfig::help_text());
    let mut cmd = Cli::command();
    for name in ["gen", "train", "eval", "gradcheck", "params", "ablate", "saliency"] {
        let k = keys.clone();
        cmd = cmd.mut_subcommand(name, move |s| s.after_help(k));
    }
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Threshold(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(3)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Gen { spec, set, seed, out } => {
            let cfg = ConfigArgs {
                config: spec,
                set,
                seed,
            }
            .load()?;
            cmd_gen(&cfg, &out)
        }
        Cmd::Train { cfg, data, out } => cmd_train(&cfg.load()?, &data, &out),
        Cmd::Eval { ckpt, data, modality } => cmd_eval(&ckpt, &data, &modality),
        Cmd::Gradcheck { cfg, h } => cmd_gradcheck(&cfg.load()?, h),
        Cmd::Params { cfg } => cmd_params(&cfg.load()?),
        Cmd::Ablate { suite, cfg, seeds, out } => cmd_ablate(&suite, &cfg.load()?, &seeds, &out),
        Cmd::Saliency {
            ckpt,
            data,
            idx,
            class,
            out,
        } => cmd_saliency(&ckpt, &data, idx, class, &out),
    }
}

fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let (protos, data) = gen_dataset(&SynthSpec::from_config(cfg))?;
    save_dataset(out, &data)?;
    let digest = format!("{:016x}", data.digest());
    let oracle = oracle_accuracy(&protos, &data.test);
    eprintln!(
        "wrote {} train / {} test samples to {} (digest {digest}, oracle accuracy {oracle:.4})",
        data.train.len(),
        data.test.len(),
        out.display()
    );
    emit(json!({
        "digest": digest,
        "train": data.train.len(),
        "test": data.test.len(),
        "oracle_acc": oracle,
        "prototype_min_distance": protos.min_distance(),
    }));
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<(), Failure> {
    let data = load_dataset(data_dir)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.dump())?;
    let result = train(cfg, &data, Some(out), &mut |row| {
        eprintln!(
            "epoch {:>3} lr {:.1e} loss {:.4} fg {:.4} bg {:.4} r1 {:.4}",
            row.epoch, row.lr, row.loss_total, row.fg_acc, row.bg_acc, row.retrieval_r1
        );
        emit(serde_json::to_value(row).unwrap_or(Value::Null));
    });
    let outcome = match result {
        Ok(o) => o,
        Err(e @ Error::NonFinite { .. }) => {
            let path = out.join("nonfinite.txt");
            return Err(Failure::Numeric(format!("{e}; diagnostics in {}", path.display())));
        }
        Err(e) => return Err(e.into()),
    };
    let stored = load_checkpoint(&out.join("last.mavt"))?.frozen_checksum;
    let frozen_ok = stored == outcome.init_frozen_checksum;
    let best = &outcome.metrics[outcome.best_epoch];
    eprintln!(
        "best epoch {} (fg {:.4}, bg {:.4}); checkpoints in {}",
        outcome.best_epoch,
        best.fg_acc,
        best.bg_acc,
        out.display()
    );
    emit(json!({
        "best_epoch": outcome.best_epoch,
        "best_fg_acc": best.fg_acc,
        "best_bg_acc": best.bg_acc,
        "frozen_checksum_init": format!("{:016x}", outcome.init_frozen_checksum),
        "frozen_checksum_final": format!("{stored:016x}"),
        "frozen_ok": frozen_ok,
    }));
    if !frozen_ok {
        return Err(Failure::Threshold("frozen parameters changed during training".into()));
    }
    Ok(())
}

fn parse_modality(s: &str) -> Result<ModalitySet, Failure> {
    match s {
        "av" => Ok(ModalitySet::Both),
        "a" => Ok(ModalitySet::Audio),
        "v" => Ok(ModalitySet::Visual),
        _ => Err(Failure::Usage(format!("--modality must be av, a or v, got `{s}`"))),
    }
}

fn cmd_eval(ckpt: &Path, data_dir: &Path, modality: &str) -> Result<(), Failure> {
    let modality = parse_modality(modality)?;
    let ck = load_checkpoint(ckpt)?;
    let data = load_dataset(data_dir)?;
    let m = evaluate(&ck.model, &data.test, modality)?;
    eprintln!(
        "fg {:.4} bg {:.4} r1 {:.4} over {} test samples",
        m.fg_acc,
        m.bg_acc,
        m.retrieval_r1,
        data.test.len()
    );
    emit(serde_json::to_value(m).unwrap_or(Value::Null));
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, h: Option<f64>) -> Result<(), Failure> {
    let mut failed = Vec::new();
    for (name, err) in primitive_suite(h.unwrap_or(PRIMITIVE_H), cfg.seed)? {
        let pass = err < PRIMITIVE_TOL;
        if !pass {
            failed.push(format!("op/{name}"));
        }
        emit(json!({"target": format!("op/{name}"), "max_rel_err": err, "tol": PRIMITIVE_TOL, "pass": pass}));
    }
    for c in model_gradcheck(cfg, MODEL_BATCH, MODEL_PER_TENSOR, h.unwrap_or(MODEL_H))? {
        let pass = c.max_rel_err < MODEL_TOL;
        if !pass {
            failed.push(format!("loss/{}", c.name));
        }
        emit(json!({
            "target": format!("loss/{}", c.name),
            "max_rel_err": c.max_rel_err,
            "tol": MODEL_TOL,
            "checked": c.checked,
            "numel": c.numel,
            "pass": pass,
        }));
    }
    if failed.is_empty() {
        eprintln!("all gradient checks passed");
        Ok(())
    } else {
        Err(Failure::Threshold(format!(
            "gradient checks over tolerance: {}",
            failed.join(", ")
        )))
    }
}

fn cmd_params(cfg: &RunConfig) -> Result<(), Failure> {
    let model = Model::new(cfg)?;
    let trainable = model.trainable_numel();
    let frozen = model.frozen_numel();
    let formula = Model::expected_trainable(cfg);
    let ratio = trainable as f64 / (trainable + frozen) as f64;
    eprintln!("trainable {trainable}, frozen {frozen}, ratio {ratio:.6}");
    emit(json!({
        "trainable": trainable,
        "frozen": frozen,
        "ratio": ratio,
        "closed_form": formula,
        "match": trainable == formula,
    }));
    if trainable != formula {
        return Err(Failure::Threshold(format!(
            "trainable count {trainable} differs from closed form {formula}"
        )));
    }
    Ok(())
}

fn cmd_ablate(suite: &str, cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<(), Failure> {
    let suite = Suite::parse(suite)?;
    let report = run_ablation(suite, cfg, seeds, &mut |line| eprintln!("{line}"))?;
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("{}.csv", suite.name())), report.csv())?;
    fs::write(out.join(format!("{}_trends.txt", suite.name())), report.trend_report())?;
    for r in &report.rows {
        emit(json!({
            "suite": suite.name(),
            "config": r.config,
            "seed": r.seed,
            "fg_acc": r.fg_acc,
            "bg_acc": r.bg_acc,
            "retrieval_r1": r.retrieval_r1,
        }));
    }
    for t in &report.trends {
        emit(json!({"suite": suite.name(), "trend": t.claim, "lhs": t.lhs, "rhs": t.rhs, "pass": t.passed}));
    }
    eprint!("{}", report.trend_report());
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Threshold(format!("{} trends not reproduced", suite.name())))
    }
}

fn cmd_saliency(ckpt: &Path, data_dir: &Path, idx: usize, class: Option<usize>, out: &Path) -> Result<(), Failure> {
    let ck = load_checkpoint(ckpt)?;
    let data = load_dataset(data_dir)?;
    let sample = data
        .test
        .get(idx)
        .ok_or_else(|| Failure::Usage(format!("--idx {idx} outside the {} test samples", data.test.len())))?;
    let model = &ck.model;
    let class = match class {
        Some(c) => c,
        None => {
            let mut tape = Tape::inference();
            let pa = tape.constant_owned(avprompt::model::stack(&[&model.audio_patches(&sample.audio)?])?);
            let pv = tape.constant_owned(avprompt::model::stack(&[&model.visual_patches(&sample.visual)?])?);
            let (_, pred) = model.forward_pair(&mut tape, pa, pv)?;
            pred.fg_argmax(&tape)[0]
        }
    };
    let map = saliency_map(model, sample, class)?;
    let mut f = io::BufWriter::new(fs::File::create(out)?);
    write_pgm(&mut f, &map)?;
    f.flush()?;
    let (r, c) = argmax_cell(&map);
    eprintln!(
        "class {class}: peak saliency at patch ({r}, {c}); map written to {}",
        out.display()
    );
    emit(json!({"idx": idx, "class": class, "argmax": [r, c], "grid": map.shape()}));
    Ok(())
}
