mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

/// Frame-aware flow matching on synthetic bouncing-blob videos.
#[derive(Debug, Parser)]
#[command(name = "framewise", version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a bouncing-blob dataset.
    GenData(GenDataArgs),
    /// Train the base model with synchronized timesteps.
    Pretrain(PretrainArgs),
    /// Train low-rank adapters with per-frame timesteps on a frozen base.
    Adapt(AdaptArgs),
    /// Generate videos under a conditioning mode.
    Sample(SampleArgs),
    /// Sample held-out requests and report metrics.
    Eval(EvalArgs),
    /// Attention maps and parameter drift.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// Dump frame-to-frame attention during sampling.
    Attention(AttentionArgs),
    /// Relative parameter change between two checkpoints.
    Drift(DriftArgs),
}

#[derive(Debug, Args)]
struct ModeArgs {
    /// t2v, i2v, i2v_noisy, start_end, start_end_noisy, complete or extend.
    #[arg(long)]
    mode: Option<String>,
    /// Noise fraction of the (first) partially noised frame.
    #[arg(long)]
    kappa: Option<f64>,
    /// Noise fraction of the last frame in start_end_noisy.
    #[arg(long)]
    kappa_end: Option<f64>,
    /// Clamped leading frames for complete.
    #[arg(long)]
    head: Option<usize>,
    /// Clamped trailing frames for complete.
    #[arg(long)]
    tail: Option<usize>,
    /// Clamped leading frames for extend.
    #[arg(long)]
    extend: Option<usize>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    first: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    p_async: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Glob over parameter names; repeat for several.
    #[arg(long = "target")]
    targets: Vec<String>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Dataset supplying conditioning frames and labels.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    label: Option<usize>,
    /// Inference steps (noise levels in the schedule).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Multiply the low-rank scale at inference.
    #[arg(long)]
    lora_alpha_scale: Option<f64>,
    /// Also dump attention maps for every step and block.
    #[arg(long)]
    attention: bool,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    first: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    /// Inference steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    lora_alpha_scale: Option<f64>,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Debug, Args)]
struct AttentionArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Second checkpoint reported alongside.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    index: Option<usize>,
    /// Inference steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    shift: Option<f64>,
    /// Steps to dump, comma separated.
    #[arg(long, value_delimiter = ',')]
    record: Option<Vec<usize>>,
    #[arg(long)]
    block: Option<usize>,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Debug, Args)]
struct DriftArgs {
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long)]
    adapted: Option<PathBuf>,
    #[arg(long)]
    top: Option<usize>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src.clone() {
            $dst = v;
        }
    };
}

impl ModeArgs {
    fn apply(&self, m: &mut config::ModeSection) {
        set!(m.mode, self.mode);
        set!(m.kappa, self.kappa);
        set!(m.kappa_end, self.kappa_end);
        set!(m.head, self.head);
        set!(m.tail, self.tail);
        set!(m.extend, self.extend);
    }
}

impl Cli {
    /// Configuration after applying flags over the file (or defaults).
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        set!(c.seed, self.seed);
        set!(c.out, self.out);
        match &self.command {
            Command::GenData(a) => {
                set!(c.gen_data.count, a.count);
                set!(c.gen_data.first, a.first);
                set!(c.model.frames, a.frames);
                set!(c.model.side, a.side);
                set!(c.gen_data.workers, a.workers);
            }
            Command::Pretrain(a) => {
                set!(c.pretrain.data, a.data);
                set!(c.pretrain.steps, a.steps);
                set!(c.pretrain.batch_size, a.batch_size);
                set!(c.pretrain.learning_rate, a.learning_rate);
                set!(c.pretrain.checkpoint_every, a.checkpoint_every);
            }
            Command::Adapt(a) => {
                set!(c.adapt.base, a.base);
                set!(c.adapt.data, a.data);
                set!(c.adapt.steps, a.steps);
                set!(c.adapt.batch_size, a.batch_size);
                set!(c.adapt.learning_rate, a.learning_rate);
                set!(c.adapt.p_async, a.p_async);
                set!(c.adapt.rank, a.rank);
                set!(c.adapt.alpha, a.alpha);
                set!(c.adapt.checkpoint_every, a.checkpoint_every);
                if !a.targets.is_empty() {
                    c.adapt.targets = a.targets.clone();
                }
            }
            Command::Sample(a) => {
                let s = &mut c.sample;
                set!(s.ckpt, a.ckpt);
                if a.data.is_some() {
                    s.data = a.data.clone();
                }
                set!(s.index, a.index);
                set!(s.count, a.count);
                if a.label.is_some() {
                    s.label = a.label;
                }
                set!(s.steps, a.steps);
                set!(s.shift, a.shift);
                set!(s.workers, a.workers);
                set!(s.lora_alpha_scale, a.lora_alpha_scale);
                s.attention |= a.attention;
                a.mode.apply(&mut c.mode);
            }
            Command::Eval(a) => {
                let e = &mut c.eval;
                set!(e.ckpt, a.ckpt);
                set!(e.data, a.data);
                set!(e.first, a.first);
                set!(e.count, a.count);
                set!(e.steps, a.steps);
                set!(e.shift, a.shift);
                set!(e.workers, a.workers);
                set!(e.lora_alpha_scale, a.lora_alpha_scale);
                a.mode.apply(&mut c.mode);
            }
            Command::Analyze {
                what: AnalyzeCommand::Attention(a),
            } => {
                let t = &mut c.attention;
                set!(t.ckpt, a.ckpt);
                if a.compare.is_some() {
                    t.compare = a.compare.clone();
                }
                set!(t.data, a.data);
                set!(t.index, a.index);
                set!(t.steps, a.steps);
                set!(t.shift, a.shift);
                set!(t.record, a.record);
                if a.block.is_some() {
                    t.block = a.block;
                }
                a.mode.apply(&mut c.mode);
            }
            Command::Analyze {
                what: AnalyzeCommand::Drift(a),
            } => {
                set!(c.drift.base, a.base);
                set!(c.drift.adapted, a.adapted);
                set!(c.drift.top, a.top);
            }
        }
        Ok(c)
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = cli.resolve()?;
    match &cli.command {
        Command::GenData(_) => commands::gen_data(&cfg),
        Command::Pretrain(_) => commands::pretrain(&cfg),
        Command::Adapt(_) => commands::adapt(&cfg),
        Command::Sample(_) => commands::sample(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Analyze {
            what: AnalyzeCommand::Attention(_),
        } => commands::attention(&cfg),
        Command::Analyze {
            what: AnalyzeCommand::Drift(_),
        } => commands::drift(&cfg),
    }
}

/// 2 for numeric failures (NaN or infinity), 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<framewise::Error>())
        .any(|e| e.is_numeric());
    if numeric {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
