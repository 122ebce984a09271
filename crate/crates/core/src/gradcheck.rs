//! Central finite-difference verification of the MSN gradients on a toy stack.

use ndarray::Array2;
use serde::Serialize;

use crate::encoder::{Parameters, ViTConfig};
use crate::error::Result;
use crate::objective::{msn_loss, sinkhorn, ObjectiveConfig};
use crate::rng::RngKey;
use crate::trainer::{msn_gradients, PretrainConfig, Schedule, TrainConfig, TrainState};
use crate::views::{make_viewset, AugmentConfig, TokenSequence, ViewConfig, ViewSet};

/// Toy sizes: 2 layers, width 16, 8 prototypes, 2 images with 2 anchors each.
#[derive(Clone, Debug)]
pub struct ToySetup {
    pub vit: ViTConfig,
    pub objective: ObjectiveConfig,
    pub views: ViewConfig,
    pub batch: usize,
    pub image_size: usize,
}

impl Default for ToySetup {
    fn default() -> Self {
        Self {
            vit: ViTConfig {
                layers: 2,
                hidden_dim: 16,
                mlp_dim: 32,
                heads: 2,
                patch_size: 4,
                max_grid: 4,
            },
            objective: ObjectiveConfig {
                prototypes: 8,
                ..ObjectiveConfig::default()
            },
            views: ViewConfig {
                global: AugmentConfig {
                    random_resized_crop: crate::views::ResizedCrop {
                        output_size: 16,
                        ..Default::default()
                    },
                    ..AugmentConfig::default()
                },
                focal: AugmentConfig::focal(8),
                patch_size: 4,
                keep_fraction: 0.5,
                n_focal: 1,
            },
            batch: 2,
            image_size: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
    /// Largest change of any target parameter after one full training step
    /// with EMA momentum 1.
    pub target_max_change: f64,
}

fn toy_state(setup: &ToySetup, seed: u64) -> Result<(TrainState<f64>, Vec<ViewSet>)> {
    let mut state = TrainState::<f64>::init(
        setup.vit,
        &setup.objective,
        Schedule {
            total_steps: 10,
            warmup_steps: 0,
        },
        seed,
    )?;
    // separate the target from the anchor so target probabilities are not a copy
    let mut rng = RngKey::new(seed).with("gradcheck").with("target").stream();
    let nudge = crate::encoder::EncoderParams::<f64>::init(setup.vit, &mut rng)?;
    for ((_, mut t), (_, n)) in state.target.tensors_mut().into_iter().zip(nudge.tensors()) {
        t.scaled_add(0.5, &n);
    }
    let key = RngKey::new(seed).with("gradcheck");
    let views = (0..setup.batch)
        .map(|i| {
            let s = setup.image_size;
            let mut rng = key.with("image").with_u64(i as u64).stream();
            let img = Array2::from_shape_fn((s * s, 3), |_| rand::Rng::random::<f32>(&mut rng))
                .into_shape_with_order((s, s, 3))
                .expect("image shape");
            make_viewset(&img, &setup.views, &key.with("views").with_u64(i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((state, views))
}

fn loss_with_fixed_targets(state: &TrainState<f64>, views: &[ViewSet], objective: &ObjectiveConfig, pt: &crate::objective::ProbMatrix<f64>) -> Result<f64> {
    let m = views[0].n_anchors();
    let mut za = Array2::<f64>::zeros((views.len() * m, state.anchor.config.hidden_dim));
    for (i, v) in views.iter().enumerate() {
        for (j, a) in v.anchors.iter().enumerate() {
            za.row_mut(i * m + j).assign(&state.anchor.encode(a)?);
        }
    }
    let pa = state.bank.anchor_probs(&za)?;
    Ok(msn_loss(&pa, pt, objective.lambda)?.total)
}

/// Compares every analytic gradient entry of the anchor encoder and the
/// prototypes with `(L(θ+ε) − L(θ−ε)) / 2ε` in `f64`, target probabilities held
/// constant. Relative error is `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn toy_msn_check(setup: &ToySetup, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let (state, views) = toy_state(setup, seed)?;
    let targets: Vec<TokenSequence> = views.iter().map(|v| v.target.clone()).collect();
    let pt = sinkhorn(
        &state.bank.target_probs(&state.target.encode_batch(&targets)?)?,
        setup.objective.sinkhorn_iters,
    );
    let g = msn_gradients(&state, &views, &setup.objective)?;

    let mut analytic: Vec<(String, Vec<f64>)> = g
        .encoder
        .tensors()
        .into_iter()
        .map(|(n, t)| (format!("anchor.{n}"), t.iter().copied().collect()))
        .collect();
    analytic.push(("bank.prototypes".into(), g.prototypes.iter().copied().collect()));

    let mut probe = state.clone();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (ti, (name, grads)) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let eval = |delta: f64, p: &mut TrainState<f64>| -> Result<f64> {
                set_entry(p, ti, k, delta);
                let l = loss_with_fixed_targets(p, &views, &setup.objective, &pt);
                set_entry(p, ti, k, -delta);
                l
            };
            let plus = eval(eps, &mut probe)?;
            let minus = eval(-eps, &mut probe)?;
            let n = (plus - minus) / (2.0 * eps);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}]: analytic {a:.6e}, numeric {n:.6e}"));
            }
            checked += 1;
        }
    }

    let mut stepped = state.clone();
    let before = stepped.target.clone();
    let config = PretrainConfig {
        train: TrainConfig {
            ema_momentum: crate::trainer::MomentumSchedule { start: 1.0, end: 1.0 },
            ..TrainConfig::default()
        },
        views: setup.views.clone(),
        objective: setup.objective.clone(),
    };
    crate::trainer::train_step_on_views(&mut stepped, &views, &config)?;
    let target_max_change = before
        .tensors()
        .into_iter()
        .zip(stepped.target.tensors())
        .flat_map(|((_, a), (_, b))| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);

    Ok(GradCheckReport {
        loss: g.loss.total,
        checked,
        max_rel_error: worst.0,
        worst: worst.1,
        target_max_change,
    })
}

fn set_entry(state: &mut TrainState<f64>, tensor: usize, k: usize, delta: f64) {
    let n_enc = state.anchor.tensors().len();
    if tensor < n_enc {
        let (_, mut t) = state.anchor.tensors_mut().swap_remove(tensor);
        let v = t.iter_mut().nth(k).expect("entry index");
        *v += delta;
    } else {
        let v = state.bank.prototypes.iter_mut().nth(k).expect("entry index");
        *v += delta;
    }
}
