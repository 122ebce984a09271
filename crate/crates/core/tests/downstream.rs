use msn_core::dataio::{generate_synthetic, SynthSpec};
use msn_core::downstream::*;
use msn_core::encoder::{EncoderParams, Parameters, ViTConfig};
use msn_core::rng::{stream, RngKey};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian_videos(n_videos: usize, frames: usize, n_classes: usize, d: usize, sigma: f64, seed: u64) -> Vec<FeatureSequence> {
    let mut rng = stream(seed, "blobs");
    let means: Vec<Array1<f64>> = (0..n_classes)
        .map(|_| Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    (0..n_videos)
        .map(|v| {
            // contiguous phases in order, equal lengths
            let labels: Vec<usize> = (0..frames).map(|t| t * n_classes / frames).collect();
            let embeddings = Array2::from_shape_fn((frames, d), |(t, j)| {
                (means[labels[t]][j] + sigma * rng.sample::<f64, _>(StandardNormal)) as f32
            });
            FeatureSequence {
                video_id: format!("v{v:02}"),
                embeddings,
                labels,
            }
        })
        .collect()
}

#[test]
fn separated_blobs_are_probed_perfectly() {
    // two classes whose means sit 10σ apart along one axis: margin 5σ each side
    let mut rng = stream(0, "two-blobs");
    let feats: Vec<FeatureSequence> = (0..10)
        .map(|v| {
            let labels: Vec<usize> = (0..30).map(|t| usize::from(t >= 15)).collect();
            let embeddings = Array2::from_shape_fn((30, 4), |(t, j)| {
                let centre = if j == 0 { 10.0 * labels[t] as f64 - 5.0 } else { 0.0 };
                (centre + rng.sample::<f64, _>(StandardNormal)) as f32
            });
            FeatureSequence {
                video_id: format!("v{v}"),
                embeddings,
                labels,
            }
        })
        .collect();
    // the hand classifier `x0 > 0` already separates every frame
    for f in &feats {
        for (row, &l) in f.embeddings.rows().into_iter().zip(&f.labels) {
            assert_eq!(usize::from(row[0] > 0.0), l);
        }
    }
    let out = linear_probe(&feats, 2, &ProbeConfig::default(), 0).unwrap();
    assert_eq!(out.report.macro_f1, 1.0);
    assert_eq!(out.report.video_f1, Some(1.0));
}

#[test]
fn shuffled_labels_score_near_chance() {
    let k = 4;
    let mut feats = gaussian_videos(30, 40, k, 16, 1.0, 1);
    let mut rng = stream(2, "shuffle");
    for f in &mut feats {
        f.labels = (0..f.len()).map(|_| rng.random_range(0..k)).collect();
    }
    let out = linear_probe(&feats, k, &ProbeConfig::default(), 0).unwrap();
    assert!((out.report.macro_f1 - 1.0 / k as f64).abs() <= 0.1, "{}", out.report.macro_f1);
}

#[test]
fn probe_preconditions() {
    let mut feats = gaussian_videos(5, 10, 2, 3, 1.0, 0);
    for f in &mut feats {
        f.labels.iter_mut().for_each(|l| *l = 0);
    }
    assert!(matches!(linear_probe(&feats, 2, &ProbeConfig::default(), 0), Err(msn_core::Error::DegenerateSplit(_))));
    let empty: Vec<FeatureSequence> = (0..5)
        .map(|v| FeatureSequence {
            video_id: format!("v{v}"),
            embeddings: Array2::zeros((4, 0)),
            labels: vec![0, 1, 0, 1],
        })
        .collect();
    assert!(linear_probe(&empty, 2, &ProbeConfig::default(), 0).is_err());
    assert!(matches!(
        linear_probe(&feats[..2], 2, &ProbeConfig::default(), 0),
        Err(msn_core::Error::DegenerateSplit(_))
    ));
}

#[test]
fn probe_is_deterministic() {
    let feats = gaussian_videos(10, 20, 3, 8, 1.5, 4);
    let a = linear_probe(&feats, 3, &ProbeConfig::default(), 7).unwrap();
    let b = linear_probe(&feats, 3, &ProbeConfig::default(), 7).unwrap();
    assert_eq!(a.head, b.head);
    assert_eq!(a.report, b.report);
}

fn small_mstcn() -> MSTCNConfig {
    MSTCNConfig {
        stages: 2,
        layers_per_stage: 4,
        hidden_channels: 6,
        kernel_size: 3,
        dropout: 0.5,
    }
}

#[test]
fn mstcn_accepts_a_single_frame() {
    let p = MSTCNParams::<f32>::init(MSTCNConfig::default(), 5, 3, &mut stream(0, "m")).unwrap();
    let out = mstcn_forward(&p, &Array2::ones((1, 5))).unwrap();
    assert_eq!(out.dim(), (2, 1, 3));
    assert!(out.iter().all(|v| v.is_finite()));
}

#[test]
fn stage_one_receptive_field_matches_dilation_sum() {
    let cfg = MSTCNConfig {
        stages: 1,
        ..small_mstcn()
    };
    let mut p = MSTCNParams::<f64>::init(cfg, 3, 2, &mut stream(1, "rf")).unwrap();
    // large biases keep every ReLU active, so the stage is linear
    for layer in &mut p.stages[0].layers {
        layer.dilated.bias.fill(1e3);
    }
    let t_len = 80;
    let t0 = 40;
    let x = Array2::from_shape_fn((t_len, 3), |(t, j)| ((t * 3 + j) as f64 * 0.37).sin());
    let mut y = x.clone();
    y.row_mut(t0).mapv_inplace(|v| v + 1.0);
    let a = mstcn_forward(&p, &x).unwrap();
    let b = mstcn_forward(&p, &y).unwrap();
    let changed: Vec<usize> = (0..t_len)
        .filter(|&t| (0..2).any(|c| (a[[0, t, c]] - b[[0, t, c]]).abs() > 1e-9))
        .collect();
    let rf = cfg.stage_receptive_field();
    assert_eq!(rf, 1 + 2 * ((1 << 4) - 1));
    assert_eq!(changed.len(), rf);
    assert_eq!(changed[0], t0 - rf / 2);
    assert_eq!(*changed.last().unwrap(), t0 + rf / 2);
}

#[test]
fn mstcn_gradients_match_finite_differences() {
    let p = MSTCNParams::<f64>::init(small_mstcn(), 4, 3, &mut stream(2, "g")).unwrap();
    let x = Array2::from_shape_fn((9, 4), |(t, j)| ((t * 4 + j) as f64 * 0.71).cos());
    let labels = vec![0, 0, 1, 1, 1, 2, 2, 0, 1];
    let (_, grad) = mstcn_loss_and_grad(&p, &x, &labels).unwrap();
    let eps = 1e-5;
    let n_tensors = grad.tensors().len();
    for ti in 0..n_tensors {
        let (name, g) = {
            let (n, t) = grad.tensors().swap_remove(ti);
            (n, t.iter().copied().collect::<Vec<f64>>())
        };
        for (k, &a) in g.iter().enumerate() {
            let mut q = p.clone();
            *q.tensors_mut().swap_remove(ti).1.iter_mut().nth(k).unwrap() += eps;
            let plus = mstcn_loss_and_grad(&q, &x, &labels).unwrap().0;
            *q.tensors_mut().swap_remove(ti).1.iter_mut().nth(k).unwrap() -= 2.0 * eps;
            let minus = mstcn_loss_and_grad(&q, &x, &labels).unwrap().0;
            let n = (plus - minus) / (2.0 * eps);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-4, "{name}[{k}]: analytic {a}, numeric {n}");
        }
    }
}

#[test]
fn dropout_gradients_match_finite_differences_under_a_fixed_mask() {
    let p = MSTCNParams::<f64>::init(small_mstcn(), 3, 2, &mut stream(3, "g")).unwrap();
    let x = Array2::from_shape_fn((7, 3), |(t, j)| ((t * 3 + j) as f64 * 0.43).sin());
    let labels = vec![0, 0, 1, 1, 0, 1, 1];
    let loss = |q: &MSTCNParams<f64>| {
        let mut rng = stream(11, "mask");
        mstcn_train_loss(q, &x, &labels, Some((0.5, &mut rng))).unwrap()
    };
    let (_, grad) = loss(&p);
    let eps = 1e-5;
    let (name, g) = {
        let (n, t) = grad.tensors().swap_remove(2);
        (n, t.iter().copied().collect::<Vec<f64>>())
    };
    for (k, &a) in g.iter().enumerate() {
        let mut q = p.clone();
        *q.tensors_mut().swap_remove(2).1.iter_mut().nth(k).unwrap() += eps;
        let plus = loss(&q).0;
        *q.tensors_mut().swap_remove(2).1.iter_mut().nth(k).unwrap() -= 2.0 * eps;
        let minus = loss(&q).0;
        let n = (plus - minus) / (2.0 * eps);
        assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-6) < 1e-4, "{name}[{k}]: {a} vs {n}");
    }
    // the same mask stream reproduces the same loss; inference ignores dropout
    assert_eq!(loss(&p).0, loss(&p).0);
    let clean = mstcn_loss_and_grad(&p, &x, &labels).unwrap().0;
    assert_ne!(clean, loss(&p).0);
}

#[test]
fn temporal_context_beats_frame_probe_on_noisy_phases() {
    let feats = gaussian_videos(30, 40, 4, 8, 1.6, 5);
    let probe = linear_probe(&feats, 4, &ProbeConfig::default(), 0).unwrap();
    let config = ProbeConfig {
        epochs: 60,
        learning_rate: 3e-3,
        ..ProbeConfig::temporal()
    };
    let tcn = temporal_train(&feats, 4, &small_mstcn(), &config, 0).unwrap();
    assert!(
        tcn.report.macro_f1 >= probe.report.macro_f1 + 0.03,
        "temporal {} vs probe {}",
        tcn.report.macro_f1,
        probe.report.macro_f1
    );
    assert_eq!(tcn.split, probe.split);
}

#[test]
fn lowshot_curve_shape_and_full_fraction() {
    let feats = gaussian_videos(25, 20, 3, 6, 1.2, 6);
    let fractions = [0.12, 0.25, 0.5, 0.75, 1.0];
    let rows = lowshot_curve(&feats, 3, &fractions, 3, &ProbeConfig::default(), 0).unwrap();
    assert_eq!(rows.len(), 5);
    for (r, &f) in rows.iter().zip(&fractions) {
        assert_eq!(r.fraction, f);
        assert_eq!(r.scores.len(), 3);
        assert!(r.std_f1 >= 0.0);
    }
    assert_eq!(rows[4].std_f1, 0.0);
    assert_eq!(rows[4].n_videos, 15);
    let full = linear_probe(&feats, 3, &ProbeConfig::default(), 0).unwrap();
    assert_eq!(rows[4].scores, vec![full.report.macro_f1; 3]);
    let csv = lowshot_csv(&rows);
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("fraction,n_videos,mean_f1,std_f1\n"));
}

#[test]
fn lowshot_cells_match_the_full_step_budget() {
    let steps = |frames: usize, batch: usize| frames.div_ceil(batch);
    for (full, cell, batch) in [(1200, 300, 265), (1200, 1200, 265), (1200, 150, 265), (1000, 333, 10), (50, 7, 8)] {
        let epochs = lowshot_epochs(30, full, cell, batch);
        let budget = 30 * steps(full, batch);
        assert!(epochs * steps(cell, batch) >= budget);
        assert!((epochs - 1) * steps(cell, batch) < budget);
    }
    assert_eq!(lowshot_epochs(30, 1200, 1200, 265), 30);
    assert_eq!(lowshot_epochs(100, 1200, 300, 265), 250);
}

#[test]
fn lowshot_split_keeps_whole_videos() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_videos: 8,
        frames_per_video: 9,
        image_size: 8,
        ..SynthSpec::default()
    };
    let m = generate_synthetic(&spec, dir.path()).unwrap();
    let sub = lowshot_split(&m, 0.5, 3).unwrap();
    assert_eq!(sub.video_ids().len(), 4);
    assert_eq!(sub.len(), 36);
    assert_eq!(lowshot_split(&m, 1.0, 3).unwrap(), m);
    assert!(matches!(lowshot_split(&m, 0.01, 3), Err(msn_core::Error::TooSmall(_))));
    // different repetition seeds give different subsets
    let ids: Vec<String> = (0..50).map(|i| format!("v{i}")).collect();
    let mut seen = std::collections::HashSet::new();
    for s in 0..20 {
        seen.insert(lowshot_videos(&ids, 0.12, s).unwrap());
    }
    assert!(seen.len() > 15);
}

fn tiny_vit() -> ViTConfig {
    ViTConfig {
        layers: 1,
        hidden_dim: 16,
        mlp_dim: 32,
        heads: 2,
        patch_size: 4,
        max_grid: 4,
    }
}

#[test]
fn feature_cache_roundtrip_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_videos: 4,
        frames_per_video: 20,
        image_size: 16,
        ..SynthSpec::default()
    };
    let m = generate_synthetic(&spec, &dir.path().join("data")).unwrap();
    let params = EncoderParams::<f32>::init(tiny_vit(), &mut stream(0, "enc")).unwrap();
    let feats = extract_features(&params, &m, 16).unwrap();
    assert_eq!(feats.len(), 4);
    assert!(feats.iter().all(|f| f.len() == 20 && f.embeddings.ncols() == 16));
    let cache = dir.path().join("cache");
    let first = cached_features(&params, &m, 16, &cache).unwrap();
    let bytes: Vec<Vec<u8>> = first.iter().map(|f| std::fs::read(cache.join(format!("{}.feat", f.video_id))).unwrap()).collect();
    let reread = read_feature_cache(&cache, &m).unwrap();
    for (a, b) in reread.iter().zip(&feats) {
        assert_eq!(a.labels, b.labels);
        let diff = (&a.embeddings - &b.embeddings).iter().fold(0.0f32, |acc, v| acc.max(v.abs()));
        assert!(diff <= 1e-6);
    }
    let cache2 = dir.path().join("cache2");
    write_feature_cache(&cache2, &extract_features(&params, &m, 16).unwrap()).unwrap();
    for (f, b) in first.iter().zip(&bytes) {
        assert_eq!(&std::fs::read(cache2.join(format!("{}.feat", f.video_id))).unwrap(), b);
    }
    // truncated files are rejected
    let path = cache2.join("v000.feat");
    let b = std::fs::read(&path).unwrap();
    std::fs::write(&path, &b[..b.len() - 3]).unwrap();
    assert!(read_feature_cache(&cache2, &m).is_err());
    // patch size must divide the view
    assert!(extract_features(&params, &m, 18).is_err());
}

#[test]
fn finetune_with_zero_encoder_rate_reduces_to_the_probe() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_videos: 6,
        frames_per_video: 14,
        image_size: 16,
        ..SynthSpec::default()
    };
    let m = generate_synthetic(&spec, &dir.path().join("data")).unwrap();
    let params = EncoderParams::<f32>::init(tiny_vit(), &mut stream(0, "enc")).unwrap();
    let probe_cfg = ProbeConfig {
        epochs: 5,
        batch_size: 16,
        ..ProbeConfig::default()
    };
    let feats = extract_features(&params, &m, 16).unwrap();
    let probe = linear_probe(&feats, m.n_classes(), &probe_cfg, 1).unwrap();
    let frozen = finetune(
        &params,
        &m,
        16,
        &FinetuneConfig {
            probe: probe_cfg.clone(),
            encoder_lr_scale: 0.0,
        },
        1,
    )
    .unwrap();
    assert!((frozen.report.macro_f1 - probe.report.macro_f1).abs() <= 0.01);
    assert_eq!(frozen.encoder, params);
    // the trained-encoder path with a vanishing encoder rate agrees as well
    let tiny = finetune(
        &params,
        &m,
        16,
        &FinetuneConfig {
            probe: probe_cfg.clone(),
            encoder_lr_scale: 1e-9,
        },
        1,
    )
    .unwrap();
    assert!((tiny.report.macro_f1 - probe.report.macro_f1).abs() <= 0.01);
    let again = finetune(
        &params,
        &m,
        16,
        &FinetuneConfig {
            probe: probe_cfg,
            encoder_lr_scale: 1e-9,
        },
        1,
    )
    .unwrap();
    assert_eq!(again.report, tiny.report);
    assert_eq!(again.encoder, tiny.encoder);
}

#[test]
fn split_assigns_each_video_once() {
    let ids: Vec<String> = (0..17).map(|i| format!("video-{i}")).collect();
    let mut shuffled = ids.clone();
    shuffled.shuffle(&mut RngKey::new(9).stream());
    // input order does not matter
    assert_eq!(split_videos(&ids, 3).unwrap(), split_videos(&shuffled, 3).unwrap());
    let s = split_videos(&ids, 3).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (11, 3, 3));
}
