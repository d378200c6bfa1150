//! Command-line front end: `gen`, `train`, `eval` and `analyze`.
//!
//! Each subcommand resolves a [`RunConfig`] (defaults, then `--config`, then
//! flags), writes it to its output directory as `run_config.json`, and only
//! then does any work. Exit status is 0 on success, 1 for configuration or
//! validation problems and 2 for everything else.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::error::Error;

pub use config::{merge, RunConfig, Split};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ovseg", version, about = "Aligned open-vocabulary segmentation on synthetic feature pyramids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Spectral and CKA reports for a dataset or exported features.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON file overlaid on the defaults before flags are applied.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training scenes.
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub eval_scenes: Option<usize>,
    /// Comma-separated pyramid layers, e.g. 2,4,6,8,10,12.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Replace the dataset files of a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Learning rate of encoder, decoder and projector.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_backbone: Option<f64>,
    #[arg(long)]
    pub no_align: bool,
    #[arg(long)]
    pub no_gate: bool,
    /// Decode the fused layers directly; implies --no-align.
    #[arg(long)]
    pub no_encoder: bool,
    #[arg(long)]
    pub freeze_backbone: bool,
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Clip the global gradient norm (10 when given without a value).
    #[arg(long, value_name = "NORM", num_args = 0..=1, default_missing_value = "10")]
    pub clip_grad: Option<f64>,
    /// Worker threads for per-sample gradients; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Also score with the teacher features as decoder input.
    #[arg(long)]
    pub substitution: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset root; the scenes of `--split` are pooled.
    #[arg(long, value_name = "DIR", conflicts_with = "features", required_unless_present = "features")]
    pub data: Option<PathBuf>,
    /// Directory with pyramid_LL.stns files and an optional teacher.stns.
    #[arg(long, value_name = "DIR")]
    pub features: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Cutoff radius as a fraction of the maximum radius.
    #[arg(long)]
    pub rc: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
}

impl SplitArg {
    fn key(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Eval => "eval",
        }
    }
}

fn path_value(p: &std::path::Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

/// Only flags that were given end up in the overlay.
fn overlay(entries: Vec<(&[&str], Option<Value>)>) -> Value {
    let mut v = json!({});
    for (path, value) in entries {
        if let Some(value) = value {
            config::set(&mut v, path, value);
        }
    }
    v
}

fn flag(on: bool, value: Value) -> Option<Value> {
    on.then_some(value)
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Analyze(_) => "analyze",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Gen(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Analyze(a) => &a.common,
        }
    }

    fn flags(&self) -> Value {
        let out = Some(path_value(&self.common().out));
        match self {
            Command::Gen(a) => overlay(vec![
                (&["paths", "out"], out),
                (&["synthetic", "seed"], a.seed.map(Value::from)),
                (&["synthetic", "layers"], a.layers.clone().map(Value::from)),
                (&["gen", "scenes"], a.scenes.map(Value::from)),
                (&["gen", "eval_scenes"], a.eval_scenes.map(Value::from)),
            ]),
            Command::Train(a) => overlay(vec![
                (&["paths", "out"], out),
                (&["paths", "data"], Some(path_value(&a.data))),
                (&["train", "seed"], a.seed.map(Value::from)),
                (&["train", "epochs"], a.epochs.map(Value::from)),
                (&["train", "batch_size"], a.batch_size.map(Value::from)),
                (&["train", "lr_main"], a.lr.map(Value::from)),
                (&["train", "lr_backbone"], a.lr_backbone.map(Value::from)),
                (&["train", "align"], flag(a.no_align || a.no_encoder, json!(false))),
                (&["train", "no_gate"], flag(a.no_gate, json!(true))),
                (&["train", "no_encoder"], flag(a.no_encoder, json!(true))),
                (&["train", "freeze_backbone"], flag(a.freeze_backbone, json!(true))),
                (&["train", "layers"], a.layers.clone().map(Value::from)),
                (&["train", "clip_grad_norm"], a.clip_grad.map(Value::from)),
            ]),
            Command::Eval(a) => overlay(vec![
                (&["paths", "out"], out),
                (&["paths", "data"], Some(path_value(&a.data))),
                (&["paths", "checkpoint"], Some(path_value(&a.checkpoint))),
                (&["eval", "split"], a.split.map(|s| json!(s.key()))),
                (&["eval", "substitution"], flag(a.substitution, json!(true))),
            ]),
            Command::Analyze(a) => overlay(vec![
                (&["paths", "out"], out),
                (&["paths", "data"], a.data.as_deref().map(path_value)),
                (&["paths", "features"], a.features.as_deref().map(path_value)),
                (&["analyze", "split"], a.split.map(|s| json!(s.key()))),
                (&["analyze", "r_c"], a.rc.map(Value::from)),
                (&["analyze", "bins"], a.bins.map(Value::from)),
            ]),
        }
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_user_error() {
                EXIT_USER
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn execute(cmd: &Command, out: &mut dyn Write) -> crate::Result<()> {
    let common = cmd.common();
    let cfg = RunConfig::resolve(cmd.name(), common.config.as_deref(), cmd.flags())?;
    match cmd {
        Command::Gen(a) => commands::gen(cfg, a.force, out),
        Command::Train(a) => commands::train(cfg, a.threads, out),
        Command::Eval(_) => commands::eval(cfg, out),
        Command::Analyze(_) => commands::analyze(cfg, out),
    }
}

pub(crate) fn report_io(e: std::io::Error) -> Error {
    Error::io("writing to stdout", e)
}
