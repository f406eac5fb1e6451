use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use seqlab::data::{RegimesParams, SynthSpec};
use seqlab::Direction;
use seqlab_cli::commands::{self, Statistic};
use seqlab_cli::config::{Layers, Source, DATA_ROOT_ENV};
use seqlab_cli::CliError;

#[derive(Parser)]
#[command(name = "seqlab", version, about = "Recurrent sequence labeling for kinematic time series")]
struct Cli {
    /// Repeat for more detail (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in the on-disk trial layout.
    Synth(SynthArgs),
    /// Train one model and write a checkpoint plus its loss log.
    Train(TrainArgs),
    /// Leave-one-user-out cross-validation.
    Xval(XvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Draw ground-truth and predicted label tracks as an SVG ribbon plot.
    Render(RenderArgs),
    /// Paired permutation test between two cross-validation reports.
    Permtest(PermtestArgs),
    /// Label one trial with a checkpoint and write track files for `render`.
    Predict(PredictArgs),
}

/// Settings shared by every command that trains. Values are validated
/// after layering, so invalid flags surface as configuration errors.
#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` file applied on top of the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root (defaults to $SEQLAB_DATA_ROOT).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    /// forward | bidirectional
    #[arg(long)]
    mode: Option<String>,
    /// lstm | vanilla
    #[arg(long)]
    cell: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    halve_after: Option<String>,
    #[arg(long)]
    halve_every: Option<String>,
    /// Global gradient-norm ceiling, or `none`.
    #[arg(long)]
    grad_clip: Option<String>,
    #[arg(long)]
    init_scale: Option<String>,
    #[arg(long)]
    forget_bias: Option<String>,
    /// Keep every k-th frame (`auto`: 1 for synthetic data, 6 otherwise).
    #[arg(long)]
    decimation: Option<String>,
    /// auto | jigsaws | all | comma-separated 0-based indices
    #[arg(long)]
    columns: Option<String>,
    /// Feed raw inputs instead of z-scored ones.
    #[arg(long)]
    no_standardize: bool,
}

impl Common {
    fn layers(&self) -> Result<Layers, CliError> {
        let mut l = Layers::default();
        if let Some(path) = &self.config {
            l.apply_file(path)?;
        }
        l.apply_env(std::env::var(DATA_ROOT_ENV).ok());
        let flags: [(&str, Option<String>); 17] = [
            ("data_root", self.data.as_ref().map(|p| p.display().to_string())),
            ("seed", self.seed.clone()),
            ("mode", self.mode.clone()),
            ("cell", self.cell.clone()),
            ("hidden", self.hidden.clone()),
            ("layers", self.layers.clone()),
            ("epochs", self.epochs.clone()),
            ("batch_size", self.batch_size.clone()),
            ("dropout", self.dropout.clone()),
            ("learning_rate", self.learning_rate.clone()),
            ("halve_after", self.halve_after.clone()),
            ("halve_every", self.halve_every.clone()),
            ("grad_clip", self.grad_clip.clone()),
            ("init_scale", self.init_scale.clone()),
            ("forget_bias", self.forget_bias.clone()),
            ("decimation", self.decimation.clone()),
            ("columns", self.columns.clone()),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                l.set(key, v, Source::Flag)?;
            }
        }
        if self.no_standardize {
            l.set("standardize", "false", Source::Flag)?;
        }
        for line in l.provenance() {
            info!("{line}");
        }
        Ok(l)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Longrange,
    Regimes,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(value_enum, required_unless_present = "from_manifest")]
    kind: Option<SynthKind>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Re-create a dataset from a manifest written by an earlier run.
    #[arg(long, conflicts_with = "kind")]
    from_manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    sequences: usize,
    #[arg(long, default_value_t = 300)]
    length: usize,
    /// Delay of the long-range task.
    #[arg(long, default_value_t = 20)]
    lag: usize,
    #[arg(long, default_value_t = 5)]
    users: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss log path (default: `<out>.loss.log`).
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Leave this user's trials out of training.
    #[arg(long)]
    exclude_user: Option<String>,
}

#[derive(Args)]
struct XvalArgs {
    #[command(flatten)]
    common: Common,
    /// Directory for `<label>.csv` and `<label>.txt` reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate forward and bidirectional models on the same splits.
    #[arg(long)]
    compare_modes: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seeds per configuration.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Perturb analytic gradients to confirm that the gate can fail.
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    title: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatisticArg {
    Accuracy,
    Edit,
    Both,
}

#[derive(Args)]
struct PermtestArgs {
    report_a: PathBuf,
    report_b: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    statistic: StatisticArg,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    trial: String,
    #[arg(long)]
    out: PathBuf,
}

fn synth_spec(a: &SynthArgs) -> Result<SynthSpec, CliError> {
    if let Some(path) = &a.from_manifest {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        return serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())));
    }
    Ok(match a.kind.expect("clap requires a kind without a manifest") {
        SynthKind::Longrange => {
            if a.lag >= a.length {
                return Err(CliError::Config(format!("--lag {} must be smaller than --length {}", a.lag, a.length)));
            }
            SynthSpec::Longrange {
                seed: a.seed,
                sequences: a.sequences,
                length: a.length,
                lag: a.lag,
            }
        }
        SynthKind::Regimes => {
            let mut params = RegimesParams::default();
            if let Some(n) = a.noise {
                params.noise = n;
            }
            SynthSpec::Regimes {
                seed: a.seed,
                sequences: a.sequences,
                users: a.users,
                length: a.length,
                classes: a.classes,
                params,
            }
        }
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Synth(a) => {
            let spec = synth_spec(&a)?;
            let ds = commands::cmd_synth(&spec, &a.out)?;
            writeln!(out, "wrote {} sequences to {}", ds.sequences.len(), a.out.display()).map_err(CliError::runtime)?;
        }
        Command::Train(a) => {
            let cfg = a.common.layers()?.resolve()?;
            commands::cmd_train(&cfg, &a.out, a.loss_log.as_deref(), a.exclude_user.as_deref(), &mut out)?;
        }
        Command::Xval(a) => {
            let cfg = a.common.layers()?.resolve()?;
            let directions = if a.compare_modes {
                vec![Direction::Forward, Direction::Bidirectional]
            } else {
                vec![cfg.training.direction]
            };
            commands::cmd_xval(&cfg, &directions, a.out.as_deref(), &mut out)?;
        }
        Command::Gradcheck(a) => {
            commands::cmd_gradcheck(a.seeds, a.corrupt, &mut out)?;
        }
        Command::Render(a) => commands::cmd_render(&a.truth, &a.pred, &a.out, a.title.as_deref())?,
        Command::Permtest(a) => {
            let stats: &[Statistic] = match a.statistic {
                StatisticArg::Accuracy => &[Statistic::Accuracy],
                StatisticArg::Edit => &[Statistic::Edit],
                StatisticArg::Both => &[Statistic::Accuracy, Statistic::Edit],
            };
            commands::cmd_permtest(&a.report_a, &a.report_b, stats, &mut out)?;
        }
        Command::Predict(a) => {
            let root = a
                .data
                .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
                .ok_or_else(|| CliError::Config(format!("no dataset given: pass --data or set {DATA_ROOT_ENV}")))?;
            let acc = commands::cmd_predict(&a.checkpoint, &root, &a.trial, &a.out)?;
            writeln!(out, "trial={} accuracy_pct={acc}", a.trial).map_err(CliError::runtime)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("seqlab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
