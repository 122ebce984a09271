//! Acceptance run: all ten criteria, one PASS/FAIL line each.
//!
//! Criteria 5 to 8 share one default pretraining run; criterion 5 adds a run
//! with both collapse regularizers disabled. Artifacts and the final report go
//! to `target/tmp/acceptance/`. Set `MSN_ACCEPTANCE_ONLY=1,4,9` to run a
//! subset.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use msn_cli::commands::{PretrainSummary, PRETRAIN_DIR, SUMMARY_FILE};
use msn_cli::report::{read_metrics, METRICS_JSONL};
use msn_cli::{dispatch, RunConfig};
use msn_core::dataio::{load_images, load_manifest, DatasetManifest, MANIFEST_FILE};
use msn_core::downstream::{extract_features, linear_probe, macro_f1, FeatureSequence, LowShotRow};
use msn_core::encoder::{parameter_count, ViTConfig};
use msn_core::gradcheck::{toy_msn_check, ToySetup};
use msn_core::objective::{prototype_probs, sinkhorn, ProbMatrix, PrototypeBank, Role};
use msn_core::rng::stream;
use msn_core::trainer::{Schedule, TrainState};
use msn_core::views::{center_view, keep_count, patchify, random_mask, TokenSequence};
use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

struct Outcome {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
    budget: f64,
}

impl Outcome {
    fn line(&self) -> String {
        let runtime = if self.seconds <= self.budget { "within" } else { "OVER" };
        format!(
            "criterion {:>2}  {}  {}: {} [{:.1} s, {} {:.0} s budget]",
            self.id,
            if self.pass { "PASS" } else { "FAIL" },
            self.title,
            self.detail,
            self.seconds,
            runtime,
            self.budget
        )
    }
}

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("msn").chain(args.iter().copied()))
}

fn write_config(path: &Path, config: &RunConfig) {
    std::fs::write(path, config.to_json()).unwrap();
}

// ---------------------------------------------------------------------------
// 1-4, 9: fast checks
// ---------------------------------------------------------------------------

fn gradient_oracle() -> Outcome {
    let t = Instant::now();
    let setup = ToySetup::default();
    let report = toy_msn_check(&setup, 0, 1e-4).expect("toy gradient check runs");
    let pass = report.max_rel_error < 1e-4 && report.target_max_change == 0.0 && report.checked > 0;
    Outcome {
        id: 1,
        title: "gradient oracle",
        pass,
        detail: format!(
            "{} entries, max relative error {:.2e} at {}, target change under unit momentum {:e}",
            report.checked, report.max_rel_error, report.worst, report.target_max_change
        ),
        seconds: t.elapsed().as_secs_f64(),
        budget: 120.0,
    }
}

fn normalization_suite() -> Outcome {
    let t = Instant::now();
    let mut rng = stream(2, "acceptance-normalization");
    let mut worst_row = 0.0f64;
    for draw in 0..1000 {
        let n = rng.random_range(1..64);
        let k = rng.random_range(2..128);
        let d = rng.random_range(1..24);
        let scale = [0.1, 1.0, 10.0][draw % 3];
        let z = Array2::from_shape_simple_fn((n, d), || scale * rng.sample::<f64, _>(StandardNormal));
        let q = Array2::from_shape_simple_fn((k, d), || rng.sample::<f64, _>(StandardNormal));
        let bank = PrototypeBank::new(q, 0.1, 0.025).unwrap();
        let zf = z.mapv(|v| v as f32);
        let bank_f = bank.cast::<f32>();
        for (tau, role) in [(0.1, Role::Anchor), (0.025, Role::Target)] {
            worst_row = worst_row.max(prototype_probs(&bank, &z, tau, role).unwrap().max_row_error());
            worst_row = worst_row.max(prototype_probs(&bank_f, &zf, tau as f32, role).unwrap().max_row_error());
        }
    }
    let (mut sk_row, mut sk_col) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let raw = Array2::from_shape_simple_fn((64, 16), || rng.random_range(1e-3..1.0f64));
        let rows = &raw / &raw.sum_axis(Axis(1)).insert_axis(Axis(1));
        let p = sinkhorn(&ProbMatrix { rows, role: Role::Target }, 30);
        sk_row = sk_row.max(p.max_row_error());
        for c in p.rows.sum_axis(Axis(0)) {
            sk_col = sk_col.max((c - 4.0).abs());
        }
    }
    Outcome {
        id: 2,
        title: "normalization suite",
        pass: worst_row <= 1e-6 && sk_row <= 1e-6 && sk_col <= 1e-2,
        detail: format!(
            "softmax row error {worst_row:.1e} over 1000 draws (f32 and f64); Sinkhorn 64x16 after 30 iterations: row error {sk_row:.1e}, column error {sk_col:.1e}"
        ),
        seconds: t.elapsed().as_secs_f64(),
        budget: 60.0,
    }
}

/// `round(p/q · len)` with halves rounded up, in integers.
fn rational_round(p: u64, q: u64, len: usize) -> usize {
    ((2 * p * len as u64 + q) / (2 * q)) as usize
}

fn masking_exactness() -> Outcome {
    let t = Instant::now();
    let grid: [(u64, u64); 14] = [
        (1, 20),
        (1, 10),
        (1, 4),
        (3, 10),
        (1, 3),
        (2, 5),
        (1, 2),
        (3, 5),
        (2, 3),
        (7, 10),
        (3, 4),
        (9, 10),
        (19, 20),
        (1, 1),
    ];
    let mut rng = stream(3, "acceptance-mask");
    let mut mismatches = 0;
    let mut checked = 0;
    for len in 1..=1024usize {
        let side = (1..).find(|s| s * s >= len).unwrap();
        let seq = TokenSequence {
            tokens: Array2::from_shape_fn((len, 1), |(i, _)| i as f32),
            positions: (0..len).collect(),
            grid_side: side,
            kept: (0..side * side).map(|p| p < len).collect(),
        };
        for &(p, q) in &grid {
            let f = p as f64 / q as f64;
            let want = rational_round(p, q, len);
            checked += 1;
            if keep_count(len, f) != want {
                mismatches += 1;
                continue;
            }
            match random_mask(&seq, f, &mut rng) {
                Ok(m) => {
                    if m.len() != want || m.check().is_err() || want == 0 {
                        mismatches += 1;
                    }
                }
                Err(_) => {
                    if want != 0 {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    let image = Array3::<f32>::zeros((224, 224, 3));
    let tokens = patchify(&image, 16).unwrap();
    let kept = random_mask(&tokens, 0.5, &mut rng).unwrap();
    let paper_case = tokens.len() == 196 && kept.len() == 98;
    Outcome {
        id: 3,
        title: "masking exactness",
        pass: mismatches == 0 && paper_case,
        detail: format!(
            "{checked} (length, fraction) pairs, {mismatches} mismatches; 224 px / 16 px patches: {} tokens, {} kept at 50%",
            tokens.len(),
            kept.len()
        ),
        seconds: t.elapsed().as_secs_f64(),
        budget: 60.0,
    }
}

fn parameter_counts() -> Outcome {
    let t = Instant::now();
    let s = parameter_count(&ViTConfig::small()) as f64;
    let b = parameter_count(&ViTConfig::base()) as f64;
    let rs = (s - 23e6).abs() / 23e6;
    let rb = (b - 86e6).abs() / 86e6;
    Outcome {
        id: 4,
        title: "parameter counts",
        pass: rs <= 0.10 && rb <= 0.10,
        detail: format!(
            "ViT-S {:.2}M ({:+.1}% vs 23M), ViT-B {:.2}M ({:+.1}% vs 86M)",
            s / 1e6,
            100.0 * (s - 23e6) / 23e6,
            b / 1e6,
            100.0 * (b - 86e6) / 86e6
        ),
        seconds: t.elapsed().as_secs_f64(),
        budget: 1.0,
    }
}

/// Macro-F1 from an explicit confusion matrix; classes absent from both sides are skipped.
///
/// With `harmonic` the per-class score is the harmonic mean of precision and
/// recall, otherwise the exact ratio `2·TP / (predicted + actual)` rounded once.
fn brute_force_macro(preds: &[usize], labels: &[usize], k: usize, harmonic: bool) -> f64 {
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let mut scores = Vec::new();
    for c in 0..k {
        let tp = confusion[c][c];
        let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        if predicted + actual == 0 {
            continue;
        }
        scores.push(if !harmonic {
            (2 * tp) as f64 / (predicted + actual) as f64
        } else if tp == 0 {
            0.0
        } else {
            let precision = tp as f64 / predicted as f64;
            let recall = tp as f64 / actual as f64;
            2.0 * precision * recall / (precision + recall)
        });
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn metric_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = stream(9, "acceptance-f1");
    let mut worst = 0.0f64;
    let mut exact = 0;
    for _ in 0..1000 {
        let k = rng.random_range(2..10);
        let n = rng.random_range(1..200);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let got = macro_f1(&preds, &labels, k).unwrap();
        exact += usize::from(got == brute_force_macro(&preds, &labels, k, false));
        worst = worst.max((got - brute_force_macro(&preds, &labels, k, true)).abs());
    }
    // per-class F1 = 1/2, 4/5, 2/3, so the macro mean is 59/90
    let hand = macro_f1(&[0, 1, 1, 1, 2, 0], &[0, 0, 1, 1, 2, 2], 3).unwrap();
    let hand_oracle = (0.5 + 0.8 + 2.0 / 3.0) / 3.0;
    Outcome {
        id: 9,
        title: "metric oracle",
        pass: exact == 1000 && (hand - hand_oracle).abs() <= 1e-5,
        detail: format!(
            "{exact}/1000 random instances bit-identical to the confusion-matrix oracle \
             (precision/recall form within {worst:.1e}); \
             hand example gives {hand:.6} = 59/90, the stated 0.71111 counts class 0 as 2/3 instead of 1/2"
        ),
        seconds: t.elapsed().as_secs_f64(),
        budget: 60.0,
    }
}

// ---------------------------------------------------------------------------
// 5-8, 10: pipeline runs through the CLI
// ---------------------------------------------------------------------------

fn pretrain_summary(run_dir: &Path) -> PretrainSummary {
    let text = std::fs::read_to_string(run_dir.join(PRETRAIN_DIR).join(SUMMARY_FILE)).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn raw_pixel_features(manifest: &DatasetManifest, size: usize) -> Vec<FeatureSequence> {
    manifest
        .frames_by_video()
        .into_iter()
        .map(|(video_id, idx)| {
            let batch = load_images(manifest, &idx).unwrap();
            let mut embeddings = Array2::<f32>::zeros((idx.len(), size * size * 3));
            for i in 0..batch.len() {
                let view = center_view(&batch.image(i), size);
                embeddings.row_mut(i).assign(&Array1::from_iter(view.iter().copied()));
            }
            let labels = idx.iter().map(|&i| manifest.entries[i].label.unwrap()).collect();
            FeatureSequence {
                video_id,
                embeddings,
                labels,
            }
        })
        .collect()
}

struct MainRun {
    dir: PathBuf,
    config: RunConfig,
    pretrain_seconds: f64,
}

fn main_run(root: &Path) -> MainRun {
    let config = RunConfig {
        run_name: "main".into(),
        output_dir: Some(root.to_path_buf()),
        ..RunConfig::default()
    };
    let path = root.join("main.json");
    write_config(&path, &config);
    let c = path.to_str().unwrap();
    assert_eq!(run(&["synth", "--config", c]), 0, "synth");
    let t = Instant::now();
    assert_eq!(run(&["pretrain", "--config", c]), 0, "pretrain");
    MainRun {
        dir: root.join("main"),
        config,
        pretrain_seconds: t.elapsed().as_secs_f64(),
    }
}

fn collapse_ablation(root: &Path, main: &MainRun) -> Outcome {
    let mut config = main.config.clone();
    config.run_name = "collapse-none".into();
    config.objective.sinkhorn_iters = 0;
    config.objective.lambda = 0.0;
    let path = root.join("collapse-none.json");
    write_config(&path, &config);
    let t = Instant::now();
    // reuse the main run's frames instead of rendering them again
    let data = main.dir.join("data");
    let none_dir = root.join("collapse-none");
    std::fs::create_dir_all(&none_dir).unwrap();
    copy_dir(&data, &none_dir.join("data"));
    assert_eq!(run(&["pretrain", "--config", path.to_str().unwrap()]), 0, "pretrain without regularizers");
    let none_seconds = t.elapsed().as_secs_f64();
    let with = pretrain_summary(&main.dir);
    let without = pretrain_summary(&none_dir);
    let ln_k = (config.objective.prototypes as f64).ln();
    Outcome {
        id: 5,
        title: "collapse ablation",
        pass: with.usage_ratio >= 0.75 && without.usage_ratio <= 0.25,
        detail: format!(
            "usage entropy with SK+me-max {:.3} nats ({:.3} ln K), with neither {:.3} nats ({:.3} ln K); ln K = {ln_k:.3}, {} epochs on {} frames, each run",
            with.final_usage_entropy,
            with.usage_ratio,
            without.final_usage_entropy,
            without.usage_ratio,
            with.epochs,
            load_manifest(&main.dir.join("data").join(MANIFEST_FILE)).unwrap().len()
        ),
        seconds: main.pretrain_seconds + none_seconds,
        budget: 900.0,
    }
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

fn ssl_benefit(main: &MainRun) -> Outcome {
    let t = Instant::now();
    let c = main.dir.join("config.resolved.json");
    assert_eq!(run(&["probe", "--config", c.to_str().unwrap(), "--run", main.dir.to_str().unwrap()]), 0, "probe");
    let ssl = read_metrics(&main.dir.join("probe")).unwrap().unwrap();

    let manifest = load_manifest(&main.dir.join("data").join(MANIFEST_FILE)).unwrap();
    let cfg = &main.config;
    let vit = cfg.vit().unwrap();
    let schedule = Schedule::new(manifest.len(), &cfg.trainer);
    let init = TrainState::<f32>::init(vit, &cfg.objective, schedule, cfg.trainer.seed).unwrap();
    let d = &cfg.downstream;
    let random_feats = extract_features(&init.target, &manifest, d.view_size).unwrap();
    let random = linear_probe(&random_feats, manifest.n_classes(), &d.probe, d.seed).unwrap();
    let raw = linear_probe(&raw_pixel_features(&manifest, 16), manifest.n_classes(), &d.probe, d.seed).unwrap();

    let gain = ssl.macro_f1 - random.report.macro_f1;
    Outcome {
        id: 6,
        title: "SSL benefit",
        pass: ssl.macro_f1 >= 0.80 && gain >= 0.15,
        detail: format!(
            "probe macro-F1 on pretrained features {:.4}, on the untrained encoder {:.4} ({:+.1} points); raw 16 px pixels {:.4}",
            ssl.macro_f1,
            random.report.macro_f1,
            100.0 * gain,
            raw.report.macro_f1
        ),
        seconds: main.pretrain_seconds + t.elapsed().as_secs_f64(),
        budget: 1800.0,
    }
}

fn temporal_gain(main: &MainRun) -> Outcome {
    let t = Instant::now();
    let c = main.dir.join("config.resolved.json");
    assert_eq!(run(&["temporal", "--config", c.to_str().unwrap(), "--run", main.dir.to_str().unwrap()]), 0, "temporal");
    let probe = read_metrics(&main.dir.join("probe")).unwrap().unwrap();
    let temporal = read_metrics(&main.dir.join("temporal")).unwrap().unwrap();
    let gain = temporal.macro_f1 - probe.macro_f1;
    Outcome {
        id: 7,
        title: "temporal gain",
        pass: gain >= 0.03,
        detail: format!(
            "MS-TCN test F-F1 {:.4} vs frame probe {:.4} ({:+.1} points; V-F1 {:.4} vs {:.4})",
            temporal.macro_f1,
            probe.macro_f1,
            100.0 * gain,
            temporal.video_f1.unwrap_or(f64::NAN),
            probe.video_f1.unwrap_or(f64::NAN)
        ),
        seconds: t.elapsed().as_secs_f64(),
        budget: 600.0,
    }
}

fn lowshot_robustness(main: &MainRun) -> Outcome {
    let t = Instant::now();
    let c = main.dir.join("config.resolved.json");
    assert_eq!(run(&["lowshot", "--config", c.to_str().unwrap(), "--run", main.dir.to_str().unwrap()]), 0, "lowshot");
    let text = std::fs::read_to_string(main.dir.join("lowshot").join(METRICS_JSONL)).unwrap();
    let rows: Vec<LowShotRow> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let grid = [0.12, 0.25, 0.5, 0.75, 1.0];
    let complete = rows.len() == grid.len()
        && rows.iter().zip(grid).all(|(r, f)| r.fraction == f && r.scores.len() == 3);
    let at = |f: f64| rows.iter().find(|r| r.fraction == f).map(|r| r.mean_f1).unwrap_or(f64::NAN);
    let gap = at(1.0) - at(0.25);
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.0}% {:.4}±{:.4}", 100.0 * r.fraction, r.mean_f1, r.std_f1))
        .collect();
    Outcome {
        id: 8,
        title: "low-shot robustness",
        pass: complete && gap.abs() <= 0.05,
        detail: format!("{}; 25% is {:+.1} points from 100%", table.join(", "), -100.0 * gap),
        seconds: t.elapsed().as_secs_f64(),
        budget: 2700.0,
    }
}

fn determinism(root: &Path, budget: f64) -> Outcome {
    let t = Instant::now();
    let mut config = RunConfig {
        run_name: "det".into(),
        output_dir: Some(root.to_path_buf()),
        ..RunConfig::default()
    };
    config.data.synth.n_videos = 8;
    config.data.synth.frames_per_video = 32;
    config.trainer.epochs = 2;
    let path = root.join("det.json");
    write_config(&path, &config);
    let c = path.to_str().unwrap();
    let dirs = [root.join("det-a"), root.join("det-b")];
    for d in &dirs {
        let r = d.to_str().unwrap();
        assert_eq!(run(&["pretrain", "--config", c, "--run", r, "--strict-deterministic"]), 0);
        assert_eq!(run(&["probe", "--config", c, "--run", r, "--strict-deterministic"]), 0);
    }
    let files = ["pretrain/metrics.jsonl", "pretrain/checkpoint_final.bin", "probe/metrics.jsonl", "probe/metrics.txt"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(dirs[0].join(f)).unwrap() != std::fs::read(dirs[1].join(f)).unwrap())
        .collect();
    Outcome {
        id: 10,
        title: "determinism",
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            format!("two strict-deterministic pretrain + probe runs ({} frames, {} epochs): {} identical", 8 * 32, 2, files.join(", "))
        } else {
            format!("files differ: {}", differing.join(", "))
        },
        seconds: t.elapsed().as_secs_f64(),
        budget,
    }
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("MSN_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|s| s.contains(&id));
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();

    let mut outcomes = Vec::new();
    let mut record = |o: Outcome| {
        println!("{}", o.line());
        outcomes.push(o);
    };
    if wanted(1) {
        record(gradient_oracle());
    }
    if wanted(2) {
        record(normalization_suite());
    }
    if wanted(3) {
        record(masking_exactness());
    }
    if wanted(4) {
        record(parameter_counts());
    }
    if wanted(9) {
        record(metric_oracle());
    }
    if [5, 6, 7, 8].into_iter().any(wanted) {
        let main = main_run(&root);
        if wanted(5) {
            record(collapse_ablation(&root, &main));
        }
        if wanted(6) || wanted(7) || wanted(8) {
            // the probe is shared by 6 and 7
            let six = ssl_benefit(&main);
            if wanted(6) {
                record(six);
            }
        }
        if wanted(7) {
            record(temporal_gain(&main));
        }
        if wanted(8) {
            record(lowshot_robustness(&main));
        }
    }
    if wanted(10) {
        record(determinism(&root, 3600.0));
    }

    outcomes.sort_by_key(|o| o.id);
    let mut report = String::from("acceptance criteria\n");
    for o in &outcomes {
        let _ = writeln!(report, "{}", o.line());
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    let _ = writeln!(report, "{passed}/{} criteria passed", outcomes.len());
    std::fs::write(root.join("acceptance_report.txt"), &report).unwrap();
    println!("\n{report}report written to {}", root.join("acceptance_report.txt").display());
    if passed != outcomes.len() {
        std::process::exit(1);
    }
}
