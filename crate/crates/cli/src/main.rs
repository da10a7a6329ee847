mod commands;
mod plot;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use toml::{Table, Value};

use settings::Settings;

#[derive(Parser)]
#[command(name = "lpwtnet", version, about = "Statistical channel fingerprint synthesis and restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sCF dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write degraded samples and their masks for inspection.
    Degrade {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of test-split samples to degrade.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Train a model; writes a checkpoint, a loss trace and the config snapshot.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Run directory (staged as `<out>.partial` until training completes).
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate on the test split against the degraded-input baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Run or checkpoint directory; omitted means a freshly initialized model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print parameter and FLOP counts.
    Flops {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        example: Option<Example>,
    },
    /// Render an sCF channel slice or a loss curve as PNG.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "loss")]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// Also render the degraded slice under `--task`.
        #[arg(long)]
        degraded: bool,
        /// Loss trace CSV written by `train`.
        #[arg(long)]
        loss: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Example {
    /// Single-channel 256×256 large-kernel versus WTConv comparison.
    Paper,
}

/// Configuration layers shared by all subcommands.
#[derive(Args, Clone, Default)]
struct Common {
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set lr=5e-4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// `full` or `smoke`.
    #[arg(long)]
    preset: Option<String>,
    /// nonuniform, region, uniform or all.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    pm: Option<f64>,
    #[arg(long)]
    region_size: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    sigma: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
    #[arg(long)]
    nz: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    levels_lp: Option<usize>,
    #[arg(long)]
    levels_wt: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    zero_shot: bool,
    #[arg(long)]
    denormalized_metrics: bool,
}

impl Common {
    fn flags(&self) -> Table {
        let mut t = Table::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                t.insert(k.into(), v);
            }
        };
        let int = |v: Option<usize>| v.map(|v| Value::Integer(v as i64));
        put("preset", self.preset.clone().map(Value::String));
        put("task", self.task.clone().map(Value::String));
        put("pm", self.pm.map(Value::Float));
        put("region_size", int(self.region_size));
        put("stride", int(self.stride));
        put("sigma", int(self.sigma));
        put("ny", int(self.ny));
        put("nz", int(self.nz));
        put("samples", int(self.samples));
        put("levels_lp", int(self.levels_lp));
        put("levels_wt", int(self.levels_wt));
        put("kernel", int(self.kernel));
        put("n1", int(self.n1));
        put("n2", int(self.n2));
        put("iters", int(self.iters));
        put("batch", int(self.batch));
        put("seed", self.seed.map(|s| Value::Integer(s as i64)));
        put("zero_shot", self.zero_shot.then_some(Value::Boolean(true)));
        put("denormalized_metrics", self.denormalized_metrics.then_some(Value::Boolean(true)));
        t
    }

    fn settings(&self) -> anyhow::Result<Settings> {
        Settings::resolve(self.config.as_deref(), &self.sets, self.flags())
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { common, out } => commands::gen(&common.settings()?, &out),
        Command::Degrade { common, data, out, count } => commands::degrade(&common.settings()?, &data, &out, count),
        Command::Train { common, data, out, resume } => commands::train(&common.settings()?, &data, &out, resume),
        Command::Eval { common, data, checkpoint, out } => {
            commands::eval(&common.settings()?, &data, checkpoint.as_deref(), out.as_deref())
        }
        Command::Flops { common, example } => match example {
            Some(Example::Paper) => commands::flops_example(),
            None => commands::flops_model(&common.settings()?),
        },
        Command::Plot { common, data, index, channel, degraded, loss, out } => match (data, loss) {
            (Some(data), None) => commands::plot_slice(&common.settings()?, &data, index, channel, degraded, &out),
            (None, Some(loss)) => commands::plot_loss(&loss, &out),
            _ => anyhow::bail!("plot needs either --data or --loss"),
        },
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}");
            eprintln!("error: {}", msg.split_whitespace().collect::<Vec<_>>().join(" "));
            ExitCode::FAILURE
        }
    }
}
