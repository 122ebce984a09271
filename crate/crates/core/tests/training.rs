use msn_core::checkpoint;
use msn_core::dataio::{generate_synthetic, load_images, SynthSpec};
use msn_core::encoder::ViTConfig;
use msn_core::objective::ObjectiveConfig;
use msn_core::rng::RngKey;
use msn_core::trainer::*;
use msn_core::views::{AugmentConfig, ResizedCrop, ViewConfig};

fn tiny_vit() -> ViTConfig {
    ViTConfig {
        layers: 2,
        hidden_dim: 32,
        mlp_dim: 64,
        heads: 4,
        patch_size: 4,
        max_grid: 4,
    }
}

fn tiny_config(epochs: usize) -> PretrainConfig {
    PretrainConfig {
        train: TrainConfig {
            batch_size: 8,
            epochs,
            ..TrainConfig::default()
        },
        views: ViewConfig {
            global: AugmentConfig {
                random_resized_crop: ResizedCrop {
                    output_size: 16,
                    ..ResizedCrop::default()
                },
                ..AugmentConfig::default()
            },
            focal: AugmentConfig::focal(8),
            patch_size: 4,
            keep_fraction: 0.5,
            n_focal: 2,
        },
        objective: ObjectiveConfig {
            prototypes: 16,
            ..ObjectiveConfig::default()
        },
    }
}

fn tiny_spec(n_videos: usize, frames: usize) -> SynthSpec {
    SynthSpec {
        n_videos,
        frames_per_video: frames,
        n_phases: 4,
        image_size: 16,
        ..SynthSpec::default()
    }
}

#[test]
fn steps_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&tiny_spec(2, 8), dir.path()).unwrap();
    let batch = load_images(&m, &(0..8).collect::<Vec<_>>()).unwrap();
    let cfg = tiny_config(1);
    let init = TrainState::<f32>::init(tiny_vit(), &cfg.objective, Schedule { total_steps: 4, warmup_steps: 1 }, 3).unwrap();
    let mut a = init.clone();
    let mut b = init;
    for _ in 0..2 {
        let ra = train_step(&mut a, &batch, &cfg).unwrap();
        let rb = train_step(&mut b, &batch, &cfg).unwrap();
        assert_eq!(ra.total.to_bits(), rb.total.to_bits());
    }
    assert_eq!(a, b);
}

#[test]
fn unit_momentum_freezes_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&tiny_spec(2, 8), dir.path()).unwrap();
    let batch = load_images(&m, &(0..8).collect::<Vec<_>>()).unwrap();
    let mut cfg = tiny_config(1);
    cfg.train.ema_momentum = MomentumSchedule { start: 1.0, end: 1.0 };
    let mut s = TrainState::<f32>::init(tiny_vit(), &cfg.objective, Schedule { total_steps: 3, warmup_steps: 0 }, 0).unwrap();
    let initial = s.target.clone();
    for _ in 0..3 {
        train_step(&mut s, &batch, &cfg).unwrap();
    }
    assert_eq!(s.target, initial);
    assert_ne!(s.anchor, initial);
}

#[test]
fn target_follows_the_ema_formula_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&tiny_spec(2, 8), dir.path()).unwrap();
    let batch = load_images(&m, &(0..8).collect::<Vec<_>>()).unwrap();
    let cfg = tiny_config(1);
    let mut s = TrainState::<f32>::init(tiny_vit(), &cfg.objective, Schedule { total_steps: 5, warmup_steps: 1 }, 0).unwrap();
    train_step(&mut s, &batch, &cfg).unwrap();
    let before = s.target.clone();
    let r = train_step(&mut s, &batch, &cfg).unwrap();
    let mut expect = before;
    ema_update(&mut expect, &s.anchor, r.momentum).unwrap();
    assert_eq!(s.target, expect);
}

#[test]
fn one_step_descends_in_most_trials() {
    let vit = ViTConfig {
        layers: 1,
        hidden_dim: 16,
        mlp_dim: 32,
        heads: 2,
        patch_size: 4,
        max_grid: 4,
    };
    let mut cfg = tiny_config(1);
    cfg.objective.prototypes = 8;
    let mut descents = 0;
    for trial in 0..100u64 {
        let key = RngKey::new(trial).with("descent");
        let imgs: Vec<_> = (0..4)
            .map(|i| {
                let mut rng = key.with_u64(i).stream();
                ndarray::Array3::from_shape_fn((16, 16, 3), |_| rand::Rng::random::<f32>(&mut rng))
            })
            .collect();
        let batch = msn_core::dataio::ImageBatch::from_images(&imgs, (0..4).map(|i| format!("img{i}")).collect()).unwrap();
        let mut s = TrainState::<f64>::init(vit, &cfg.objective, Schedule { total_steps: 100, warmup_steps: 0 }, trial).unwrap();
        let views = batch_views(&s.key(), 0, &batch, &cfg.views).unwrap();
        let before = evaluate_views(&s, &views, &cfg.objective).unwrap().total;
        train_step_on_views(&mut s, &views, &cfg).unwrap();
        let after = evaluate_views(&s, &views, &cfg.objective).unwrap().total;
        if after < before {
            descents += 1;
        }
    }
    assert!(descents >= 95, "{descents}/100 trials descended");
}

#[test]
fn pretrain_logs_one_line_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&tiny_spec(4, 16), &dir.path().join("data")).unwrap();
    assert_eq!(m.len(), 64);
    let cfg = tiny_config(2);
    let out = pretrain(&m, tiny_vit(), &cfg, &dir.path().join("run"), PretrainOptions::default()).unwrap();
    let log = std::fs::read_to_string(&out.metrics).unwrap();
    assert_eq!(log.lines().count(), 64usize.div_ceil(8) * 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in ["step", "cross_entropy", "me_max", "total", "usage_entropy", "grad_norm", "momentum"] {
            assert!(v[k].as_f64().unwrap().is_finite(), "{k} in {line}");
        }
    }
    let state = checkpoint::load(&out.checkpoint).unwrap();
    assert_eq!(state.step, 16);
}

#[test]
fn pretrain_is_reproducible_and_resumes_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&tiny_spec(2, 12), &dir.path().join("data")).unwrap();
    let mut cfg = tiny_config(2);
    cfg.train.checkpoint_every = 1;
    let a = pretrain(&m, tiny_vit(), &cfg, &dir.path().join("a"), PretrainOptions::default()).unwrap();
    let b = pretrain(&m, tiny_vit(), &cfg, &dir.path().join("b"), PretrainOptions::default()).unwrap();
    let bytes = std::fs::read(&a.checkpoint).unwrap();
    assert_eq!(bytes, std::fs::read(&b.checkpoint).unwrap());
    assert_eq!(std::fs::read(&a.metrics).unwrap(), std::fs::read(&b.metrics).unwrap());

    // resume from the end of epoch 1 into a copy of its log
    let resumed_dir = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed_dir).unwrap();
    let per_epoch = 24usize.div_ceil(8);
    let head: String = std::fs::read_to_string(&a.metrics)
        .unwrap()
        .lines()
        .take(per_epoch)
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(resumed_dir.join(METRICS_FILE), head).unwrap();
    let mid = checkpoint::load(&dir.path().join("a").join("checkpoint_epoch1.bin")).unwrap();
    let c = pretrain(
        &m,
        tiny_vit(),
        &cfg,
        &resumed_dir,
        PretrainOptions {
            resume: Some(mid),
            progress: None,
        },
    )
    .unwrap();
    assert_eq!(std::fs::read(&c.checkpoint).unwrap(), bytes);
    assert_eq!(std::fs::read(&c.metrics).unwrap(), std::fs::read(&a.metrics).unwrap());
}

#[test]
fn checkpoint_roundtrip_resumes_to_identical_report() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&tiny_spec(2, 8), &dir.path().join("data")).unwrap();
    let batch = load_images(&m, &(0..8).collect::<Vec<_>>()).unwrap();
    let cfg = tiny_config(1);
    let mut s = TrainState::<f32>::init(tiny_vit(), &cfg.objective, Schedule { total_steps: 6, warmup_steps: 2 }, 4).unwrap();
    train_step(&mut s, &batch, &cfg).unwrap();
    let path = dir.path().join("c.bin");
    checkpoint::save(&path, &s).unwrap();
    let mut back = checkpoint::load(&path).unwrap();
    assert_eq!(back, s);
    let r1 = train_step(&mut s, &batch, &cfg).unwrap();
    let r2 = train_step(&mut back, &batch, &cfg).unwrap();
    assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
    assert_eq!(s, back);
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&tiny_spec(2, 8), &dir.path().join("data")).unwrap();
    let batch = load_images(&m, &(0..8).collect::<Vec<_>>()).unwrap();
    let cfg = tiny_config(1);
    let mut s = TrainState::<f32>::init(tiny_vit(), &cfg.objective, Schedule { total_steps: 6, warmup_steps: 2 }, 4).unwrap();
    train_step(&mut s, &batch, &cfg).unwrap();
    s.bank.prototypes[[0, 0]] = f32::NAN;
    match train_step(&mut s, &batch, &cfg) {
        Err(msn_core::Error::NonFinite { step, .. }) => assert_eq!(step, Some(1)),
        other => panic!("unexpected {other:?}"),
    }
}
