//! Command-line driver: dataset generation, puzzle pretraining, action
//! fine-tuning / probing, evaluation, gradient checking, and first-layer
//! filter export.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 failed
//! gradient or acceptance checks.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stpuzzle_core::error::{Error, Result};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "stpuzzle",
    version,
    about = "Self-supervised space-time cubic puzzle pretraining for 3D CNNs",
    after_help = "Exit codes: 0 success, 1 config error, 2 runtime error, 3 failed checks.\n\
                  Precedence: built-in preset defaults < --config file < flags."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct CommonArgs {
    /// key = value configuration file
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master random seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Geometry / hyperparameter bundle
    #[arg(long, global = true, value_parser = ["desk", "paper"])]
    preset: Option<String>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker thread cap (0 = library default)
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Bit-reproducible mode: one worker, zeroed wall-clock metrics
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic motion benchmark (or a watermark control set)
    GenData(GenDataArgs),
    /// Pretrain a backbone on the puzzle pretext task
    Pretrain(PretrainArgs),
    /// Fine-tune or linearly probe an action classifier
    Finetune(FinetuneArgs),
    /// Evaluate an action checkpoint on a dataset split
    Eval(EvalArgs),
    /// Finite-difference checks for every layer and the whole network
    Gradcheck(GradcheckArgs),
    /// Render first-layer filters as image files
    ExportFilters(ExportFiltersArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of motion classes (even)
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    clips_per_class: Option<usize>,
    /// Background noise ceiling, 0-255
    #[arg(long)]
    noise_level: Option<u8>,
    /// Generate the single-clip watermark control set instead
    #[arg(long)]
    watermark: bool,
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset directory (containing index.tsv)
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Pretext task: st, s, or t
    #[arg(long, value_parser = ["st", "s", "t"])]
    task: Option<String>,
    #[arg(long, value_parser = ["tiny", "resnet10", "resnet18"])]
    variant: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    flip_prob: Option<f64>,
    /// Continue from the checkpoint in the output directory
    #[arg(long)]
    resume: bool,
    /// Disable spatio-temporal jitter
    #[arg(long)]
    no_jitter: bool,
    /// Disable channel replication
    #[arg(long)]
    no_channel_replication: bool,
    /// Disable the upside-down flip classes (48 -> 24)
    #[arg(long)]
    no_rwc: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Dataset directory (containing index.tsv)
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Pretrained checkpoint to initialize from (random init if absent)
    #[arg(long, value_name = "CKPT")]
    init: Option<PathBuf>,
    /// full (all layers) or probe (head only, frozen backbone)
    #[arg(long, value_parser = ["full", "probe"])]
    mode: Option<String>,
    #[arg(long, value_parser = ["tiny", "resnet10", "resnet18"])]
    variant: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory (containing index.tsv)
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Action checkpoint to evaluate
    #[arg(long, value_name = "CKPT")]
    checkpoint: Option<PathBuf>,
    /// Dataset split: train, test, or all
    #[arg(long, value_parser = ["train", "test", "all"])]
    split: Option<String>,
    #[arg(long)]
    test_per_class: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of seeds, starting at --seed
    #[arg(long)]
    seeds: Option<u64>,
    /// Sampled parameter count for the whole-network check
    #[arg(long)]
    net_coords: Option<usize>,
}

#[derive(Args)]
struct ExportFiltersArgs {
    /// Checkpoint whose first-layer filters to render
    #[arg(long, value_name = "CKPT")]
    checkpoint: Option<PathBuf>,
    /// Integer pixel upscale factor
    #[arg(long)]
    scale: Option<usize>,
}

type Flags = BTreeMap<&'static str, String>;

fn put<T: ToString>(flags: &mut Flags, key: &'static str, value: &Option<T>) {
    if let Some(v) = value {
        flags.insert(key, v.to_string());
    }
}

fn put_path(flags: &mut Flags, key: &'static str, value: &Option<PathBuf>) {
    if let Some(v) = value {
        flags.insert(key, v.display().to_string());
    }
}

fn put_flag(flags: &mut Flags, key: &'static str, set: bool, value: &str) {
    if set {
        flags.insert(key, value.to_string());
    }
}

/// Flattens parsed flags into config-key overrides. Only flags the user
/// actually passed are inserted, so file and default values survive.
fn collect_flags(cli: &Cli) -> Flags {
    let mut f = Flags::new();
    put(&mut f, "seed", &cli.common.seed);
    put(&mut f, "preset", &cli.common.preset);
    put_path(&mut f, "out_dir", &cli.common.out);
    put(&mut f, "workers", &cli.common.workers);
    put_flag(&mut f, "deterministic", cli.common.deterministic, "true");
    match &cli.cmd {
        Cmd::GenData(a) => {
            put(&mut f, "num_classes", &a.classes);
            put(&mut f, "clips_per_class", &a.clips_per_class);
            put(&mut f, "noise_level", &a.noise_level);
            put_flag(&mut f, "watermark", a.watermark, "true");
        }
        Cmd::Pretrain(a) => {
            put_path(&mut f, "data_dir", &a.data);
            put(&mut f, "task", &a.task);
            put(&mut f, "variant", &a.variant);
            put(&mut f, "steps", &a.steps);
            put(&mut f, "batch_size", &a.batch_size);
            put(&mut f, "lr", &a.lr);
            put(&mut f, "momentum", &a.momentum);
            put(&mut f, "weight_decay", &a.weight_decay);
            put(&mut f, "eval_every", &a.eval_every);
            put(&mut f, "flip_prob", &a.flip_prob);
            put_flag(&mut f, "resume", a.resume, "true");
            put_flag(&mut f, "jitter", a.no_jitter, "false");
            put_flag(&mut f, "channel_replication", a.no_channel_replication, "false");
            put_flag(&mut f, "rwc", a.no_rwc, "false");
        }
        Cmd::Finetune(a) => {
            put_path(&mut f, "data_dir", &a.data);
            put_path(&mut f, "init_checkpoint", &a.init);
            put(&mut f, "ft_mode", &a.mode);
            put(&mut f, "variant", &a.variant);
            put(&mut f, "ft_steps", &a.steps);
            put(&mut f, "ft_batch_size", &a.batch_size);
            put(&mut f, "ft_lr", &a.lr);
            put(&mut f, "ft_momentum", &a.momentum);
            put(&mut f, "ft_weight_decay", &a.weight_decay);
            put(&mut f, "ft_eval_every", &a.eval_every);
            put(&mut f, "num_classes", &a.num_classes);
            put(&mut f, "test_per_class", &a.test_per_class);
        }
        Cmd::Eval(a) => {
            put_path(&mut f, "data_dir", &a.data);
            put_path(&mut f, "checkpoint", &a.checkpoint);
            put(&mut f, "split", &a.split);
            put(&mut f, "test_per_class", &a.test_per_class);
        }
        Cmd::Gradcheck(a) => {
            put(&mut f, "gradcheck_seeds", &a.seeds);
            put(&mut f, "net_coords", &a.net_coords);
        }
        Cmd::ExportFilters(a) => {
            put_path(&mut f, "checkpoint", &a.checkpoint);
            put(&mut f, "scale", &a.scale);
        }
    }
    f
}

fn run(cli: &Cli) -> Result<u8> {
    let file_map = match &cli.common.config {
        Some(path) => Some(config::parse_file(path)?),
        None => None,
    };
    let cfg = config::resolve(file_map.as_ref(), &collect_flags(cli))?;

    let threads = if cfg.deterministic { 1 } else { cfg.workers };
    if threads > 0 {
        // Fails only if a pool already exists (e.g. under a test harness).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }

    match &cli.cmd {
        Cmd::GenData(_) => commands::cmd_gen_data(&cfg)?,
        Cmd::Pretrain(_) => commands::cmd_pretrain(&cfg)?,
        Cmd::Finetune(_) => commands::cmd_finetune(&cfg)?,
        Cmd::Eval(_) => commands::cmd_eval(&cfg)?,
        Cmd::Gradcheck(_) => {
            if !commands::cmd_gradcheck(&cfg)? {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
        Cmd::ExportFilters(_) => commands::cmd_export_filters(&cfg)?,
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version print to stdout and succeed; anything else is
            // a configuration error.
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_RUNTIME),
            }
        }
    }
}
