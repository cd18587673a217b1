//! Subcommand bodies. Each validates its configuration fully, then runs
//! and prints a short result summary. Errors bubble to `main` for exit-code
//! mapping; `cmd_gradcheck` additionally reports check failure as `false`.

use std::fs;
use std::path::Path;

use stpuzzle_core::checkpoint::load_checkpoint;
use stpuzzle_core::dataset::{
    generate_synthetic_dataset, generate_watermark_dataset, load_index_clips, split_clips,
    SyntheticSpec, VideoClip,
};
use stpuzzle_core::error::{Error, Result};
use stpuzzle_core::filters::export_conv1_filters;
use stpuzzle_core::gradcheck::run_full;
use stpuzzle_core::network::BackboneConfig;
use stpuzzle_core::sampler::AblationFlags;
use stpuzzle_core::trainer::{
    eval_clip_set, finetune_run, pretrain_run, FinetuneConfig, InitSource, TrainConfig,
};

use crate::config::{render, RunConfig, Split};

fn data_dir<'a>(cfg: &'a RunConfig, cmd: &str) -> Result<&'a Path> {
    cfg.data_dir
        .as_deref()
        .ok_or_else(|| Error::config(format!("{cmd} needs a dataset: pass --data or set data_dir")))
}

fn load_dataset(dir: &Path) -> Result<Vec<VideoClip>> {
    load_index_clips(&dir.join("index.tsv"))
}

/// Archives the resolved configuration next to a run's artifacts.
fn archive_config(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.txt"), render(cfg))?;
    Ok(())
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    cfg.geometry.validate()?;
    if cfg.watermark {
        generate_watermark_dataset(&cfg.out_dir, &cfg.geometry)?;
        println!("wrote watermark dataset to {}", cfg.out_dir.display());
        return Ok(());
    }
    let spec = SyntheticSpec {
        num_classes: cfg.num_classes,
        clips_per_class: cfg.clips_per_class,
        noise_level: cfg.noise_level,
        seed: cfg.seed,
    };
    spec.validate()?;
    let entries = generate_synthetic_dataset(&cfg.out_dir, &spec, &cfg.geometry)?;
    println!(
        "wrote {} clips across {} classes to {}",
        entries.len(),
        cfg.num_classes,
        cfg.out_dir.display()
    );
    Ok(())
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        task: cfg.task,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        steps: cfg.steps,
        seed: cfg.seed,
        flags: AblationFlags {
            jitter: cfg.jitter,
            channel_replication: cfg.channel_replication,
            rwc: cfg.rwc,
        },
        flip_prob: cfg.flip_prob,
        eval_every: cfg.eval_every,
    }
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let train_cfg = train_config(cfg);
    let bb = BackboneConfig::from_variant(cfg.variant);
    train_cfg.validate()?;
    bb.validate()?;
    train_cfg.puzzle_config(&cfg.geometry).validate()?;
    let data = data_dir(cfg, "pretrain")?;
    let clips = load_dataset(data)?;
    archive_config(cfg, &cfg.out_dir)?;
    let out = pretrain_run(
        &clips,
        &bb,
        &cfg.geometry,
        &train_cfg,
        &cfg.out_dir,
        cfg.deterministic,
        cfg.resume,
    )?;
    println!(
        "pretrained {} task for {} steps on {} clips: loss {:.4} top1 {:.4}",
        cfg.task.name(),
        cfg.steps,
        clips.len(),
        out.last_loss,
        out.last_top1
    );
    println!("checkpoint: {}", out.checkpoint.display());
    println!("metrics: {}", out.metrics.display());
    Ok(())
}

fn finetune_config(cfg: &RunConfig) -> FinetuneConfig {
    FinetuneConfig {
        mode: cfg.ft_mode,
        num_classes: cfg.num_classes,
        batch_size: cfg.ft_batch_size,
        lr: cfg.ft_lr,
        momentum: cfg.ft_momentum,
        weight_decay: cfg.ft_weight_decay,
        steps: cfg.ft_steps,
        seed: cfg.seed,
        eval_every: cfg.ft_eval_every,
    }
}

pub fn cmd_finetune(cfg: &RunConfig) -> Result<()> {
    let ft_cfg = finetune_config(cfg);
    let bb = BackboneConfig::from_variant(cfg.variant);
    ft_cfg.validate()?;
    bb.validate()?;
    cfg.geometry.validate()?;
    let data = data_dir(cfg, "finetune")?;
    let clips = load_dataset(data)?;
    let (train, test) = split_clips(clips, cfg.num_classes, cfg.test_per_class)?;

    let loaded = match &cfg.init_checkpoint {
        Some(path) => {
            let (meta, params, buffers) = load_checkpoint(path)?;
            if meta.variant != cfg.variant || meta.geometry != cfg.geometry {
                return Err(Error::config(format!(
                    "init checkpoint {} was trained as {} with a different geometry or variant",
                    path.display(),
                    meta.variant.name()
                )));
            }
            Some((params, buffers))
        }
        None => None,
    };
    let init = match &loaded {
        Some((p, b)) => InitSource::Pretrained(p, b),
        None => InitSource::Random,
    };
    archive_config(cfg, &cfg.out_dir)?;
    let out = finetune_run(
        &train,
        &test,
        &bb,
        &cfg.geometry,
        init,
        &ft_cfg,
        &cfg.out_dir,
        cfg.deterministic,
    )?;
    println!(
        "finetuned ({}, {} init) for {} steps on {} train / {} test clips",
        cfg.ft_mode.name(),
        if loaded.is_some() { "pretrained" } else { "random" },
        cfg.ft_steps,
        train.len(),
        test.len()
    );
    println!("train top1 {:.4} test top1 {:.4}", out.train_top1, out.test_top1);
    println!("checkpoint: {}", out.checkpoint.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let ckpt = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("eval needs --checkpoint"))?;
    let data = data_dir(cfg, "eval")?;
    let (meta, params, buffers) = load_checkpoint(ckpt)?;
    if !params.contains("action.fc.weight") {
        return Err(Error::state(format!(
            "checkpoint {} has no action classifier head",
            ckpt.display()
        )));
    }
    let bb = BackboneConfig::from_variant(meta.variant);
    let num_classes = meta.num_classes as usize;
    let clips = load_dataset(data)?;
    let clips = match cfg.split {
        Split::All => clips,
        Split::Train => split_clips(clips, num_classes, cfg.test_per_class)?.0,
        Split::Test => split_clips(clips, num_classes, cfg.test_per_class)?.1,
    };
    let (top1, nll) = eval_clip_set(&bb, &params, &buffers, &meta.geometry, &clips)?;
    println!(
        "eval over {} clips ({} classes): top1 {:.4} mean nll {:.4}",
        clips.len(),
        num_classes,
        top1,
        nll
    );
    Ok(())
}

/// Runs every finite-difference suite. Returns whether all checks passed.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<bool> {
    if cfg.gradcheck_seeds == 0 || cfg.net_coords == 0 {
        return Err(Error::config("gradcheck_seeds and net_coords must be positive"));
    }
    let seeds: Vec<u64> = (0..cfg.gradcheck_seeds).map(|i| cfg.seed + i).collect();
    let summary = run_full(&seeds, cfg.net_coords)?;
    let mut failures = 0usize;
    for o in &summary.outcomes {
        if !o.pass() {
            failures += 1;
            println!(
                "FAIL {} rel {:.3e} tol {:.0e} over {} coords",
                o.name, o.max_rel_err, o.tolerance, o.coords
            );
        }
    }
    let worst = summary.outcomes.iter().max_by(|a, b| {
        (a.max_rel_err / a.tolerance)
            .partial_cmp(&(b.max_rel_err / b.tolerance))
            .expect("finite")
    });
    if let Some(w) = worst {
        println!(
            "gradcheck: {} checks across {} seeds, worst {} rel {:.3e} (tol {:.0e})",
            summary.outcomes.len(),
            seeds.len(),
            w.name,
            w.max_rel_err,
            w.tolerance
        );
    }
    if failures == 0 {
        println!("gradcheck: PASS");
        Ok(true)
    } else {
        println!("gradcheck: FAIL ({failures} checks out of tolerance)");
        Ok(false)
    }
}

pub fn cmd_export_filters(cfg: &RunConfig) -> Result<()> {
    let ckpt = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("export-filters needs --checkpoint"))?;
    if cfg.scale == 0 {
        return Err(Error::config("scale must be positive"));
    }
    let (_, params, _) = load_checkpoint(ckpt)?;
    let out = export_conv1_filters(&params, &cfg.out_dir, cfg.scale)?;
    println!(
        "wrote {} filter images and {} to {}",
        out.filters.len(),
        out.montage.file_name().and_then(|n| n.to_str()).unwrap_or("montage"),
        cfg.out_dir.display()
    );
    Ok(())
}
