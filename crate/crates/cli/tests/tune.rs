//! Scratch calibration runs for picking acceptance-test hyperparameters.
//! Ignored by default; run a single probe with
//! `cargo test -p stpuzzle-cli --test tune -- --ignored <name> --nocapture`.

use std::time::Instant;

use stpuzzle_core::dataset::{split_clips, synthesize_clip, watermark_clip, SyntheticSpec, VideoClip};
use stpuzzle_core::network::{add_puzzle_head, build_backbone, BackboneConfig, BnBuffers};
use stpuzzle_core::params::{NetworkParams, SgdConfig};
use stpuzzle_core::rng::{domain, stream};
use stpuzzle_core::sampler::{AblationFlags, GeometryConfig, PuzzleConfig, make_puzzle_sample};
use stpuzzle_core::trainer::{
    draw_pretrain_batch, finetune_run, pretrain_step, puzzle_eval, FinetuneConfig, FinetuneMode,
    InitSource, Task, TrainConfig,
};
use stpuzzle_core::F;

use rand::Rng as _;

fn desk() -> GeometryConfig {
    GeometryConfig::desk()
}

fn dataset() -> (Vec<VideoClip>, Vec<VideoClip>) {
    let spec = SyntheticSpec { num_classes: 8, clips_per_class: 12, noise_level: 20, seed: 900 };
    let g = desk();
    let mut clips = Vec::new();
    for class in 0..8 {
        for index in 0..12 {
            let mut c = synthesize_clip(&spec, &g, class, index).unwrap();
            c.label = Some(class);
            clips.push(c);
        }
    }
    split_clips(clips, 8, 4).unwrap()
}

fn new_net(num_classes: usize, seed: u64) -> (NetworkParams<F>, BnBuffers<F>) {
    let bb = BackboneConfig::tiny();
    let mut rng = stream([seed, domain::INIT, 0, 0]);
    let (mut p, b) = build_backbone::<F>(&bb, &mut rng).unwrap();
    add_puzzle_head(&mut p, &bb, desk().crop, num_classes, &mut rng).unwrap();
    (p, b)
}

fn pretrain(
    clips: &[VideoClip],
    task: Task,
    flags: AblationFlags,
    seed: u64,
    steps: u64,
    batch: usize,
    lr: f64,
) -> (NetworkParams<F>, BnBuffers<F>) {
    let bb = BackboneConfig::tiny();
    let cfg = TrainConfig {
        task,
        batch_size: batch,
        lr,
        momentum: 0.9,
        weight_decay: 0.0,
        steps,
        seed,
        flags,
        flip_prob: 0.5,
        eval_every: steps,
    };
    let pc = cfg.puzzle_config(&desk());
    let (mut params, mut buffers) = new_net(pc.num_classes(), seed);
    let sgd = SgdConfig { lr, momentum: 0.9, weight_decay: 0.0 };
    let t0 = Instant::now();
    for step in 0..steps {
        let b = draw_pretrain_batch(clips, &pc, seed, step, batch).unwrap();
        let (loss, top1) = pretrain_step(&bb, &mut params, &mut buffers, &b, &sgd).unwrap();
        if step % 100 == 0 || step + 1 == steps {
            println!(
                "  [{task:?} seed {seed}] step {step} loss {loss:.3} top1 {top1:.3} ({:.2}s)",
                t0.elapsed().as_secs_f64()
            );
        }
    }
    (params, buffers)
}

fn probe(
    train: &[VideoClip],
    test: &[VideoClip],
    init: Option<&(NetworkParams<F>, BnBuffers<F>)>,
    seed: u64,
    steps: u64,
    lr: f64,
) -> f64 {
    let bb = BackboneConfig::tiny();
    let cfg = FinetuneConfig {
        mode: FinetuneMode::Probe,
        num_classes: 8,
        batch_size: 32,
        lr,
        momentum: 0.9,
        weight_decay: 5e-4,
        steps,
        seed,
        eval_every: steps,
    };
    let dir = tempfile::tempdir().unwrap();
    let src = match init {
        Some((p, b)) => InitSource::Pretrained(p, b),
        None => InitSource::Random,
    };
    let out = finetune_run(train, test, &bb, &desk(), src, &cfg, dir.path(), true).unwrap();
    out.test_top1
}

#[test]
#[ignore]
fn tune_step_timing() {
    let (train, _) = dataset();
    let pc = PuzzleConfig {
        geometry: desk(),
        mode_prob_spatial: 0.5,
        flip_prob: 0.5,
        flags: AblationFlags::all_on(),
    };
    let bb = BackboneConfig::tiny();
    let (mut params, mut buffers) = new_net(48, 1);
    let sgd = SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 0.0 };
    for &batch in &[8usize, 16] {
        let t0 = Instant::now();
        for step in 0..20 {
            let b = draw_pretrain_batch(&train, &pc, 1, step, batch).unwrap();
            pretrain_step(&bb, &mut params, &mut buffers, &b, &sgd).unwrap();
        }
        println!("batch {batch}: {:.1} ms/step", t0.elapsed().as_secs_f64() * 1000.0 / 20.0);
    }
}

#[test]
#[ignore]
fn tune_probe_margin() {
    let cpc: usize = std::env::var("TUNE_CPC").ok().and_then(|v| v.parse().ok()).unwrap_or(12);
    let (train, test) = dataset_sized(cpc, 20);
    println!("train {} test {}", train.len(), test.len());
    let steps: u64 = std::env::var("TUNE_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(1500);
    let seeds: u64 = std::env::var("TUNE_SEEDS").ok().and_then(|v| v.parse().ok()).unwrap_or(2);
    for seed in 0..seeds {
        let t0 = Instant::now();
        let rand_acc = probe(&train, &test, None, seed, 800, 0.2);
        println!("seed {seed}: random probe {rand_acc:.3} ({:.1}s)", t0.elapsed().as_secs_f64());
        let st = pretrain(&train, Task::StPuzzle, AblationFlags::all_on(), seed, steps, 16, 0.02);
        let st_acc = probe(&train, &test, Some(&st), seed, 800, 0.2);
        println!(
            "seed {seed}: st-full probe {st_acc:.3} margin {:+.1} pts ({:.1}s total)",
            (st_acc - rand_acc) * 100.0,
            t0.elapsed().as_secs_f64()
        );
        let none = pretrain(&train, Task::StPuzzle, AblationFlags::all_off(), seed, steps, 16, 0.02);
        let none_acc = probe(&train, &test, Some(&none), seed, 800, 0.2);
        println!(
            "seed {seed}: st-none probe {none_acc:.3} ablation margin {:+.1} pts ({:.1}s total)",
            (st_acc - none_acc) * 100.0,
            t0.elapsed().as_secs_f64()
        );
    }
}

#[test]
#[ignore]
fn tune_sweep() {
    let (train, _) = dataset();
    let configs: &[(&str, AblationFlags, f64, f64, usize)] = &[
        ("plain lr.05", AblationFlags::all_off(), 0.0, 0.05, 16),
        ("full lr.05", AblationFlags::all_on(), 0.5, 0.05, 16),
        ("full lr.02", AblationFlags::all_on(), 0.5, 0.02, 16),
    ];
    for &(name, flags, flip_prob, lr, batch) in configs {
        let bb = BackboneConfig::tiny();
        let pc = PuzzleConfig { geometry: desk(), mode_prob_spatial: 0.5, flip_prob, flags };
        let (mut params, mut buffers) = new_net(pc.num_classes(), 7);
        let sgd = SgdConfig { lr, momentum: 0.9, weight_decay: 0.0 };
        let t0 = Instant::now();
        let mut recent = Vec::new();
        for step in 0..1000u64 {
            let b = draw_pretrain_batch(&train, &pc, 7, step, batch).unwrap();
            let (loss, top1) = pretrain_step(&bb, &mut params, &mut buffers, &b, &sgd).unwrap();
            recent.push((loss, top1));
            if (step + 1) % 100 == 0 {
                let n = recent.len() as f64;
                let ml = recent.iter().map(|r| r.0).sum::<f64>() / n;
                let mt = recent.iter().map(|r| r.1).sum::<f64>() / n;
                recent.clear();
                println!(
                    "  [{name}] step {} loss {ml:.3} top1 {mt:.3} ({:.0}s)",
                    step + 1,
                    t0.elapsed().as_secs_f64()
                );
            }
        }
    }
}

#[test]
#[ignore]
fn tune_watermark() {
    let g = desk();
    let clip = watermark_clip(&g);
    let flags = AblationFlags::all_off();
    let pc = PuzzleConfig { geometry: g, mode_prob_spatial: 0.5, flip_prob: 0.0, flags };
    let bb = BackboneConfig::tiny();
    let (mut params, mut buffers) = new_net(24, 5);
    let sgd = SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 0.0 };
    let eval_set: Vec<_> = (0..128)
        .map(|i| {
            let mut rng = stream([5, domain::TEST, 9000 + i, 0]);
            make_puzzle_sample(&clip, &pc, &mut rng).unwrap()
        })
        .collect();
    let clips = [clip];
    let t0 = Instant::now();
    for step in 0..1000u64 {
        let b = draw_pretrain_batch(&clips, &pc, 5, step, 16).unwrap();
        pretrain_step(&bb, &mut params, &mut buffers, &b, &sgd).unwrap();
        if (step + 1) % 20 == 0 {
            let (_, acc) = puzzle_eval(&bb, &params, &buffers, &eval_set, 32).unwrap();
            println!("step {} acc {acc:.4} ({:.1}s)", step + 1, t0.elapsed().as_secs_f64());
            if acc == 1.0 {
                return;
            }
        }
    }
    panic!("did not reach 1.0");
}

#[test]
#[ignore]
fn tune_overfit64() {
    let (train, _) = dataset();
    let pc = PuzzleConfig {
        geometry: desk(),
        mode_prob_spatial: 0.5,
        flip_prob: 0.5,
        flags: AblationFlags::all_on(),
    };
    let bb = BackboneConfig::tiny();
    let fixed: Vec<_> = (0..64u64)
        .map(|i| {
            let mut rng = stream([6, domain::TEST, 2000 + i, 0]);
            let idx = rng.gen_range(0..train.len());
            make_puzzle_sample(&train[idx], &pc, &mut rng).unwrap()
        })
        .collect();
    let (mut params, mut buffers) = new_net(48, 6);
    let sgd = SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 0.0 };
    let t0 = Instant::now();
    for step in 0..2000u64 {
        let mut rng = stream([6, domain::TEST, 3000 + step, 0]);
        let batch: Vec<_> = (0..16).map(|_| fixed[rng.gen_range(0..64)].clone()).collect();
        pretrain_step(&bb, &mut params, &mut buffers, &batch, &sgd).unwrap();
        if (step + 1) % 50 == 0 {
            let (_, acc) = puzzle_eval(&bb, &params, &buffers, &fixed, 32).unwrap();
            println!("step {} acc {acc:.4} ({:.1}s)", step + 1, t0.elapsed().as_secs_f64());
            if acc >= 0.90 {
                return;
            }
        }
    }
    panic!("did not reach 0.90");
}

#[test]
#[ignore]
fn tune_modes() {
    let (train, _) = dataset();
    let runs: [(&str, Task, AblationFlags); 3] = [
        ("temporal plain", Task::TPuzzle, AblationFlags::all_off()),
        ("spatial plain", Task::SPuzzle, AblationFlags::all_off()),
        ("mixed full", Task::StPuzzle, AblationFlags::all_on()),
    ];
    for (name, task, flags) in runs {
        println!("== {name} ==");
        let (params, buffers) = pretrain(&train, task, flags, 7, 1200, 16, 0.02);
        let cfg = TrainConfig {
            task,
            batch_size: 16,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 0.0,
            steps: 1200,
            seed: 7,
            flags,
            flip_prob: 0.5,
            eval_every: 1200,
        };
        let pc = cfg.puzzle_config(&desk());
        let fresh: Vec<_> = (0..512u64)
            .map(|i| {
                let mut rng = stream([8, domain::TEST, i, 0]);
                let idx = rng.gen_range(0..train.len());
                make_puzzle_sample(&train[idx], &pc, &mut rng).unwrap()
            })
            .collect();
        let bb = BackboneConfig::tiny();
        let (loss, top1) = puzzle_eval(&bb, &params, &buffers, &fresh, 32).unwrap();
        println!("== {name}: fresh-sample loss {loss:.3} top1 {top1:.3} (chance {:.3})", 1.0 / pc.num_classes() as f64);
    }
}

#[test]
#[ignore]
fn tune_full_long() {
    let (train, _) = dataset();
    let jr = AblationFlags { jitter: true, channel_replication: true, rwc: false };
    let runs: [(&str, Task, AblationFlags, f64); 2] = [
        ("jitter+repl lr.02", Task::StPuzzle, jr, 0.02),
        ("full lr.02", Task::StPuzzle, AblationFlags::all_on(), 0.02),
    ];
    for (name, task, flags, lr) in runs {
        println!("== {name} ==");
        let (params, buffers) = pretrain(&train, task, flags, 7, 3000, 16, lr);
        let cfg = TrainConfig {
            task,
            batch_size: 16,
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
            steps: 3000,
            seed: 7,
            flags,
            flip_prob: 0.5,
            eval_every: 3000,
        };
        let pc = cfg.puzzle_config(&desk());
        let fresh: Vec<_> = (0..512u64)
            .map(|i| {
                let mut rng = stream([8, domain::TEST, i, 0]);
                let idx = rng.gen_range(0..train.len());
                make_puzzle_sample(&train[idx], &pc, &mut rng).unwrap()
            })
            .collect();
        let bb = BackboneConfig::tiny();
        let (loss, top1) = puzzle_eval(&bb, &params, &buffers, &fresh, 32).unwrap();
        println!("== {name}: fresh loss {loss:.3} top1 {top1:.3} (chance {:.3})", 1.0 / pc.num_classes() as f64);
    }
}

fn dataset_noise(noise_level: u8) -> (Vec<VideoClip>, Vec<VideoClip>) {
    let spec = SyntheticSpec { num_classes: 8, clips_per_class: 12, noise_level, seed: 900 };
    let g = desk();
    let mut clips = Vec::new();
    for class in 0..8 {
        for index in 0..12 {
            let mut c = synthesize_clip(&spec, &g, class, index).unwrap();
            c.label = Some(class);
            clips.push(c);
        }
    }
    split_clips(clips, 8, 4).unwrap()
}

#[test]
#[ignore]
fn tune_batch32() {
    let (train, _) = dataset_noise(8);
    let jr = AblationFlags { jitter: true, channel_replication: true, rwc: false };
    let runs: [(&str, AblationFlags, usize, f64, u64); 2] = [
        ("jr b32 lr.03 n8", jr, 32, 0.03, 1500),
        ("full b32 lr.03 n8", AblationFlags::all_on(), 32, 0.03, 1500),
    ];
    for (name, flags, batch, lr, steps) in runs {
        println!("== {name} ==");
        let (params, buffers) = pretrain(&train, Task::StPuzzle, flags, 7, steps, batch, lr);
        let cfg = TrainConfig {
            task: Task::StPuzzle,
            batch_size: batch,
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
            steps,
            seed: 7,
            flags,
            flip_prob: 0.5,
            eval_every: steps,
        };
        let pc = cfg.puzzle_config(&desk());
        let fresh: Vec<_> = (0..512u64)
            .map(|i| {
                let mut rng = stream([8, domain::TEST, i, 0]);
                let idx = rng.gen_range(0..train.len());
                make_puzzle_sample(&train[idx], &pc, &mut rng).unwrap()
            })
            .collect();
        let bb = BackboneConfig::tiny();
        let (loss, top1) = puzzle_eval(&bb, &params, &buffers, &fresh, 32).unwrap();
        println!("== {name}: fresh loss {loss:.3} top1 {top1:.3} (chance {:.3})", 1.0 / pc.num_classes() as f64);
    }
}

#[test]
#[ignore]
fn tune_head2() {
    let (train, _) = dataset();
    let jr = AblationFlags { jitter: true, channel_replication: true, rwc: false };
    let runs: [(&str, AblationFlags); 2] =
        [("jr head2", jr), ("full head2", AblationFlags::all_on())];
    for (name, flags) in runs {
        println!("== {name} ==");
        let (params, buffers) = pretrain(&train, Task::StPuzzle, flags, 7, 1500, 16, 0.02);
        let cfg = TrainConfig {
            task: Task::StPuzzle,
            batch_size: 16,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 0.0,
            steps: 1500,
            seed: 7,
            flags,
            flip_prob: 0.5,
            eval_every: 1500,
        };
        let pc = cfg.puzzle_config(&desk());
        let fresh: Vec<_> = (0..512u64)
            .map(|i| {
                let mut rng = stream([8, domain::TEST, i, 0]);
                let idx = rng.gen_range(0..train.len());
                make_puzzle_sample(&train[idx], &pc, &mut rng).unwrap()
            })
            .collect();
        let bb = BackboneConfig::tiny();
        let (loss, top1) = puzzle_eval(&bb, &params, &buffers, &fresh, 32).unwrap();
        println!("== {name}: fresh loss {loss:.3} top1 {top1:.3} (chance {:.3})", 1.0 / pc.num_classes() as f64);
    }
}

fn dataset_sized(clips_per_class: usize, noise_level: u8) -> (Vec<VideoClip>, Vec<VideoClip>) {
    let spec = SyntheticSpec { num_classes: 8, clips_per_class, noise_level, seed: 900 };
    let g = desk();
    let mut clips = Vec::new();
    for class in 0..8 {
        for index in 0..clips_per_class {
            let mut c = synthesize_clip(&spec, &g, class, index).unwrap();
            c.label = Some(class);
            clips.push(c);
        }
    }
    split_clips(clips, 8, 6).unwrap()
}

#[test]
#[ignore]
fn tune_clips() {
    let (train, _) = dataset_sized(40, 20);
    println!("train clips: {}", train.len());
    let jr = AblationFlags { jitter: true, channel_replication: true, rwc: false };
    let runs: [(&str, AblationFlags); 2] =
        [("jr 40cpc", jr), ("full 40cpc", AblationFlags::all_on())];
    for (name, flags) in runs {
        println!("== {name} ==");
        let (params, buffers) = pretrain(&train, Task::StPuzzle, flags, 7, 1500, 16, 0.02);
        let cfg = TrainConfig {
            task: Task::StPuzzle,
            batch_size: 16,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 0.0,
            steps: 1500,
            seed: 7,
            flags,
            flip_prob: 0.5,
            eval_every: 1500,
        };
        let pc = cfg.puzzle_config(&desk());
        let fresh: Vec<_> = (0..512u64)
            .map(|i| {
                let mut rng = stream([8, domain::TEST, i, 0]);
                let idx = rng.gen_range(0..train.len());
                make_puzzle_sample(&train[idx], &pc, &mut rng).unwrap()
            })
            .collect();
        let bb = BackboneConfig::tiny();
        let (loss, top1) = puzzle_eval(&bb, &params, &buffers, &fresh, 32).unwrap();
        println!("== {name}: fresh loss {loss:.3} top1 {top1:.3} (chance {:.3})", 1.0 / pc.num_classes() as f64);
    }
}
