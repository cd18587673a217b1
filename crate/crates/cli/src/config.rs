//! Run configuration: built-in preset defaults, overlaid by a `key=value`
//! config file, overlaid by command-line flags. Every key is validated
//! against the schema below; unknown or malformed keys are rejected before
//! any command runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use stpuzzle_core::error::{Error, Result};
use stpuzzle_core::network::Variant;
use stpuzzle_core::sampler::GeometryConfig;
use stpuzzle_core::trainer::{FinetuneMode, Task};

/// Geometry / hyperparameter bundle selected by `--preset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::config(format!("unknown preset '{other}' (want desk or paper)"))),
        }
    }
}

/// Which split of a labeled dataset a command operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::config(format!(
                "unknown split '{other}' (want train, test, or all)"
            ))),
        }
    }
}

/// Every tunable of every subcommand. Commands read the fields they need
/// and validate them before touching the filesystem.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub preset: Preset,
    pub variant: Variant,
    pub geometry: GeometryConfig,

    pub task: Task,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub eval_every: u64,
    pub flip_prob: f64,
    pub jitter: bool,
    pub channel_replication: bool,
    pub rwc: bool,
    pub resume: bool,

    pub ft_mode: FinetuneMode,
    pub ft_batch_size: usize,
    pub ft_lr: f64,
    pub ft_momentum: f64,
    pub ft_weight_decay: f64,
    pub ft_steps: u64,
    pub ft_eval_every: u64,

    pub num_classes: usize,
    pub clips_per_class: usize,
    pub noise_level: u8,
    pub test_per_class: usize,
    pub watermark: bool,
    pub split: Split,

    pub data_dir: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub scale: usize,
    pub gradcheck_seeds: u64,
    pub net_coords: usize,

    pub seed: u64,
    pub workers: usize,
    pub deterministic: bool,
}

impl RunConfig {
    /// Built-in defaults for a preset. Desk targets one CPU core with the
    /// small backbone; paper mirrors the published protocol.
    pub fn defaults(preset: Preset) -> Self {
        let desk = preset == Preset::Desk;
        RunConfig {
            preset,
            variant: if desk { Variant::Tiny } else { Variant::Resnet18 },
            geometry: if desk { GeometryConfig::desk() } else { GeometryConfig::paper() },
            task: Task::StPuzzle,
            batch_size: if desk { 16 } else { 128 },
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            steps: if desk { 1000 } else { 100_000 },
            eval_every: if desk { 100 } else { 1000 },
            flip_prob: 0.5,
            jitter: true,
            channel_replication: true,
            rwc: true,
            resume: false,
            ft_mode: if desk { FinetuneMode::Probe } else { FinetuneMode::Full },
            ft_batch_size: if desk { 16 } else { 128 },
            ft_lr: 0.05,
            ft_momentum: 0.9,
            ft_weight_decay: 5e-4,
            ft_steps: if desk { 500 } else { 4000 },
            ft_eval_every: if desk { 100 } else { 500 },
            num_classes: 8,
            clips_per_class: 12,
            noise_level: 20,
            test_per_class: 4,
            watermark: false,
            split: Split::Test,
            data_dir: None,
            init_checkpoint: None,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
            scale: 4,
            gradcheck_seeds: 20,
            net_coords: 50,
            seed: 0,
            workers: 0,
            deterministic: false,
        }
    }

    /// Applies one validated key. Unknown keys and malformed values error.
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| {
            Error::config(format!("key '{key}': '{value}' is not a valid {what}"))
        };
        match key {
            "preset" => self.preset = Preset::from_name(value)?,
            "variant" => self.variant = Variant::from_name(value)?,
            "cell_t" => self.geometry.cell.0 = parse_num(key, value)?,
            "cell_h" => self.geometry.cell.1 = parse_num(key, value)?,
            "cell_w" => self.geometry.cell.2 = parse_num(key, value)?,
            "crop_t" => self.geometry.crop.0 = parse_num(key, value)?,
            "crop_h" => self.geometry.crop.1 = parse_num(key, value)?,
            "crop_w" => self.geometry.crop.2 = parse_num(key, value)?,
            "finetune_frames" => self.geometry.finetune_frames = parse_num(key, value)?,
            "finetune_size" => self.geometry.finetune_size = parse_num(key, value)?,
            "task" => self.task = Task::from_name(value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "flip_prob" => self.flip_prob = parse_num(key, value)?,
            "jitter" => self.jitter = parse_bool(value).ok_or_else(|| bad("boolean"))?,
            "channel_replication" => {
                self.channel_replication = parse_bool(value).ok_or_else(|| bad("boolean"))?
            }
            "rwc" => self.rwc = parse_bool(value).ok_or_else(|| bad("boolean"))?,
            "resume" => self.resume = parse_bool(value).ok_or_else(|| bad("boolean"))?,
            "ft_mode" => self.ft_mode = FinetuneMode::from_name(value)?,
            "ft_batch_size" => self.ft_batch_size = parse_num(key, value)?,
            "ft_lr" => self.ft_lr = parse_num(key, value)?,
            "ft_momentum" => self.ft_momentum = parse_num(key, value)?,
            "ft_weight_decay" => self.ft_weight_decay = parse_num(key, value)?,
            "ft_steps" => self.ft_steps = parse_num(key, value)?,
            "ft_eval_every" => self.ft_eval_every = parse_num(key, value)?,
            "num_classes" => self.num_classes = parse_num(key, value)?,
            "clips_per_class" => self.clips_per_class = parse_num(key, value)?,
            "noise_level" => self.noise_level = parse_num(key, value)?,
            "test_per_class" => self.test_per_class = parse_num(key, value)?,
            "watermark" => self.watermark = parse_bool(value).ok_or_else(|| bad("boolean"))?,
            "split" => self.split = Split::from_name(value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "init_checkpoint" => self.init_checkpoint = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "scale" => self.scale = parse_num(key, value)?,
            "gradcheck_seeds" => self.gradcheck_seeds = parse_num(key, value)?,
            "net_coords" => self.net_coords = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "workers" => self.workers = parse_num(key, value)?,
            "deterministic" => {
                self.deterministic = parse_bool(value).ok_or_else(|| bad("boolean"))?
            }
            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::config(format!(
            "key '{key}': '{value}' is not a valid {}",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_bool(value: &str) -> Option<bool> {
    match value {
        "true" | "on" | "1" => Some(true),
        "false" | "off" | "0" => Some(false),
        _ => None,
    }
}

/// Parses a config file: one `key = value` per line, `#` comments, blank
/// lines ignored. Duplicate keys are rejected; key validity is checked at
/// application time.
pub fn parse_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!(
                "{}:{}: expected `key = value`, got '{raw}'",
                path.display(),
                lineno + 1
            ))
        })?;
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::config(format!(
                "{}:{}: duplicate key '{key}'",
                path.display(),
                lineno + 1
            )));
        }
    }
    Ok(map)
}

/// Builds the final config: preset defaults, then the file, then flags.
/// The preset itself is resolved first (flag over file over desk) since it
/// decides which defaults the other two layers override.
pub fn resolve(
    file: Option<&BTreeMap<String, String>>,
    flags: &BTreeMap<&'static str, String>,
) -> Result<RunConfig> {
    let preset_name = flags
        .get("preset")
        .cloned()
        .or_else(|| file.and_then(|m| m.get("preset").cloned()));
    let preset = match preset_name {
        Some(name) => Preset::from_name(&name)?,
        None => Preset::Desk,
    };
    let mut cfg = RunConfig::defaults(preset);
    if let Some(map) = file {
        for (k, v) in map {
            cfg.apply(k, v)?;
        }
    }
    for (k, v) in flags {
        cfg.apply(k, v)?;
    }
    Ok(cfg)
}

/// Renders the resolved configuration as config-file text, one key per
/// line, suitable for archiving next to a run's artifacts.
pub fn render(cfg: &RunConfig) -> String {
    let mut s = String::new();
    let mut put = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    put("preset", cfg.preset.name().into());
    put("variant", cfg.variant.name().into());
    put("cell_t", cfg.geometry.cell.0.to_string());
    put("cell_h", cfg.geometry.cell.1.to_string());
    put("cell_w", cfg.geometry.cell.2.to_string());
    put("crop_t", cfg.geometry.crop.0.to_string());
    put("crop_h", cfg.geometry.crop.1.to_string());
    put("crop_w", cfg.geometry.crop.2.to_string());
    put("finetune_frames", cfg.geometry.finetune_frames.to_string());
    put("finetune_size", cfg.geometry.finetune_size.to_string());
    put("task", cfg.task.name().into());
    put("batch_size", cfg.batch_size.to_string());
    put("lr", cfg.lr.to_string());
    put("momentum", cfg.momentum.to_string());
    put("weight_decay", cfg.weight_decay.to_string());
    put("steps", cfg.steps.to_string());
    put("eval_every", cfg.eval_every.to_string());
    put("flip_prob", cfg.flip_prob.to_string());
    put("jitter", cfg.jitter.to_string());
    put("channel_replication", cfg.channel_replication.to_string());
    put("rwc", cfg.rwc.to_string());
    put("ft_mode", cfg.ft_mode.name().into());
    put("ft_batch_size", cfg.ft_batch_size.to_string());
    put("ft_lr", cfg.ft_lr.to_string());
    put("ft_momentum", cfg.ft_momentum.to_string());
    put("ft_weight_decay", cfg.ft_weight_decay.to_string());
    put("ft_steps", cfg.ft_steps.to_string());
    put("ft_eval_every", cfg.ft_eval_every.to_string());
    put("num_classes", cfg.num_classes.to_string());
    put("clips_per_class", cfg.clips_per_class.to_string());
    put("noise_level", cfg.noise_level.to_string());
    put("test_per_class", cfg.test_per_class.to_string());
    put("seed", cfg.seed.to_string());
    put("deterministic", cfg.deterministic.to_string());
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&'static str, &str)]) -> BTreeMap<&'static str, String> {
        pairs.iter().map(|&(k, v)| (k, v.to_string())).collect()
    }

    #[test]
    fn defaults_differ_by_preset() {
        let desk = RunConfig::defaults(Preset::Desk);
        let paper = RunConfig::defaults(Preset::Paper);
        assert_eq!(desk.variant, Variant::Tiny);
        assert_eq!(paper.variant, Variant::Resnet18);
        assert_eq!(paper.batch_size, 128);
        assert_eq!(desk.geometry, GeometryConfig::desk());
        assert_eq!(paper.geometry, GeometryConfig::paper());
        assert_eq!(desk.lr, 0.01);
        assert_eq!(desk.ft_lr, 0.05);
        assert_eq!(desk.ft_weight_decay, 5e-4);
    }

    #[test]
    fn precedence_is_defaults_then_file_then_flags() {
        let mut file = BTreeMap::new();
        file.insert("steps".to_string(), "7".to_string());
        file.insert("lr".to_string(), "0.5".to_string());
        let cfg = resolve(Some(&file), &flags(&[("steps", "3")])).unwrap();
        assert_eq!(cfg.steps, 3);
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.momentum, 0.9);
    }

    #[test]
    fn preset_in_file_selects_defaults_but_flags_win() {
        let mut file = BTreeMap::new();
        file.insert("preset".to_string(), "paper".to_string());
        let cfg = resolve(Some(&file), &BTreeMap::new()).unwrap();
        assert_eq!(cfg.variant, Variant::Resnet18);
        let cfg = resolve(Some(&file), &flags(&[("preset", "desk")])).unwrap();
        assert_eq!(cfg.variant, Variant::Tiny);
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        let mut file = BTreeMap::new();
        file.insert("stepz".to_string(), "7".to_string());
        let err = resolve(Some(&file), &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");

        let mut file = BTreeMap::new();
        file.insert("steps".to_string(), "many".to_string());
        assert!(resolve(Some(&file), &BTreeMap::new()).is_err());

        let mut file = BTreeMap::new();
        file.insert("jitter".to_string(), "maybe".to_string());
        assert!(resolve(Some(&file), &BTreeMap::new()).is_err());
    }

    #[test]
    fn file_parser_handles_comments_and_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# run\nsteps = 9 # inline\n\nlr=0.1\n").unwrap();
        let map = parse_file(&path).unwrap();
        assert_eq!(map.get("steps").unwrap(), "9");
        assert_eq!(map.get("lr").unwrap(), "0.1");

        fs::write(&path, "steps = 1\nsteps = 2\n").unwrap();
        assert!(parse_file(&path).is_err());
        fs::write(&path, "steps\n").unwrap();
        assert!(parse_file(&path).is_err());
    }

    #[test]
    fn render_round_trips_through_apply() {
        let mut cfg = RunConfig::defaults(Preset::Desk);
        cfg.steps = 123;
        cfg.task = Task::TPuzzle;
        let text = render(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("echo.conf");
        fs::write(&path, &text).unwrap();
        let map = parse_file(&path).unwrap();
        let back = resolve(Some(&map), &BTreeMap::new()).unwrap();
        assert_eq!(back.steps, 123);
        assert_eq!(back.task, Task::TPuzzle);
        assert_eq!(back.geometry, cfg.geometry);
    }
}
