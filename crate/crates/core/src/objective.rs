//! Prototype assignment and the masked-siamese objective.
//!
//! Anchor and target embeddings are softly assigned to the rows of a learnable
//! prototype matrix by a temperature softmax over raw inner products. The loss
//! is the mean cross-entropy between each target assignment (a constant) and
//! the assignments of its anchor views, minus `lambda` times the entropy of the
//! mean anchor assignment:
//!
//! ```text
//! total = 1/(M·B) · Σ_i Σ_m H(p_i^t, p_{i,m}^a) − λ · H(p̄^a)
//! ```

use ndarray::{Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::encoder::Parameters;
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::rng::Stream;

/// Lower clamp applied to anchor probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub prototypes: usize,
    pub tau_anchor: f64,
    pub tau_target: f64,
    pub lambda: f64,
    pub sinkhorn_iters: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            prototypes: 1024,
            tau_anchor: 0.1,
            tau_target: 0.025,
            lambda: 1.0,
            sinkhorn_iters: 3,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prototypes < 2 {
            return Err(Error::config("objective.prototypes", "need K > 1 prototypes"));
        }
        validate_temperatures(self.tau_anchor, self.tau_target)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("objective.lambda", "must be finite and non-negative"));
        }
        Ok(())
    }
}

fn validate_temperatures(tau_anchor: f64, tau_target: f64) -> Result<()> {
    if !(tau_target > 0.0 && tau_target < tau_anchor && tau_anchor < 1.0) {
        return Err(Error::config(
            "objective.tau_target",
            format!("temperatures must satisfy 0 < tau_target < tau_anchor < 1, got tau_target={tau_target}, tau_anchor={tau_anchor}"),
        ));
    }
    Ok(())
}

/// The learnable `K × d` prototype matrix and its two temperatures.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<T> {
    pub prototypes: Array2<T>,
    pub tau_anchor: T,
    pub tau_target: T,
}

impl<T: Scalar> PrototypeBank<T> {
    pub fn new(prototypes: Array2<T>, tau_anchor: T, tau_target: T) -> Result<Self> {
        if prototypes.nrows() < 2 {
            return Err(Error::config("objective.prototypes", "need K > 1 prototypes"));
        }
        if !prototypes.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                location: "prototypes".into(),
                step: None,
            });
        }
        validate_temperatures(tau_anchor.to_f64_lossy(), tau_target.to_f64_lossy())?;
        Ok(Self {
            prototypes,
            tau_anchor,
            tau_target,
        })
    }

    /// Gaussian prototypes with std 0.02.
    pub fn init(config: &ObjectiveConfig, dim: usize, rng: &mut Stream) -> Result<Self> {
        config.validate()?;
        use rand::Rng;
        use rand_distr::StandardNormal;
        let q = Array2::from_shape_simple_fn((config.prototypes, dim), || {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(0.02 * z)
        });
        Self::new(q, T::lit(config.tau_anchor), T::lit(config.tau_target))
    }

    pub fn len(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn anchor_probs(&self, z: &Array2<T>) -> Result<ProbMatrix<T>> {
        prototype_probs(self, z, self.tau_anchor, Role::Anchor)
    }

    pub fn target_probs(&self, z: &Array2<T>) -> Result<ProbMatrix<T>> {
        prototype_probs(self, z, self.tau_target, Role::Target)
    }

    pub fn cast<U: Scalar>(&self) -> PrototypeBank<U> {
        PrototypeBank {
            prototypes: self.prototypes.mapv(|v| U::lit(v.to_f64_lossy())),
            tau_anchor: U::lit(self.tau_anchor.to_f64_lossy()),
            tau_target: U::lit(self.tau_target.to_f64_lossy()),
        }
    }
}

impl<T: Scalar> Parameters<T> for PrototypeBank<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        vec![("prototypes".into(), self.prototypes.view().into_dyn())]
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        vec![("prototypes".into(), self.prototypes.view_mut().into_dyn())]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Anchor,
    Target,
}

/// Row-stochastic assignment of `N` embeddings to `K` prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMatrix<T> {
    pub rows: Array2<T>,
    pub role: Role,
}

impl<T: Scalar> ProbMatrix<T> {
    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_error(&self) -> f64 {
        self.rows
            .sum_axis(Axis(1))
            .iter()
            .map(|s| (s.to_f64_lossy() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Mean row: the average assignment.
    pub fn mean_row(&self) -> Array1<T> {
        self.rows.mean_axis(Axis(0)).expect("non-empty probability matrix")
    }
}

pub fn softmax_rows<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// `softmax(Q z_i / temperature)` for every row `z_i` of `z`.
pub fn prototype_probs<T: Scalar>(
    bank: &PrototypeBank<T>,
    z: &Array2<T>,
    temperature: T,
    role: Role,
) -> Result<ProbMatrix<T>> {
    if temperature <= T::zero() {
        return Err(Error::config("temperature", "must be positive"));
    }
    if z.ncols() != bank.dim() {
        return Err(Error::Dimension(format!(
            "embedding dim {} does not match prototype dim {}",
            z.ncols(),
            bank.dim()
        )));
    }
    let logits = z.dot(&bank.prototypes.t()) / temperature;
    Ok(ProbMatrix {
        rows: softmax_rows(&logits),
        role,
    })
}

/// Alternating column (to `N/K`) and row (to 1) normalization, ending on rows.
pub fn sinkhorn<T: Scalar>(probs: &ProbMatrix<T>, iterations: usize) -> ProbMatrix<T> {
    let mut p = probs.rows.clone();
    let (n, k) = p.dim();
    let col_target = T::from_usize(n).unwrap() / T::from_usize(k).unwrap();
    for _ in 0..iterations {
        let cols = p.sum_axis(Axis(0));
        for mut row in p.rows_mut() {
            Zip::from(&mut row)
                .and(&cols)
                .for_each(|v, &c| *v = *v * col_target / c);
        }
        for mut row in p.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
    }
    ProbMatrix {
        rows: p,
        role: probs.role,
    }
}

/// Shannon entropy in nats, `0 · ln 0 = 0`.
pub fn entropy<T: Scalar>(p: ArrayView1<'_, T>) -> Result<T> {
    let mut h = T::zero();
    for &v in p.iter() {
        if v < T::zero() || !v.is_finite() {
            return Err(Error::Domain(format!("probability entry {v} is not a valid probability")));
        }
        if v > T::zero() {
            h -= v * v.ln();
        }
    }
    Ok(h)
}

/// `−Σ t_k ln a_k` with anchor entries clamped below at [`LOG_CLAMP`].
pub fn cross_entropy<T: Scalar>(target: ArrayView1<'_, T>, anchor: ArrayView1<'_, T>) -> T {
    let floor = T::lit(LOG_CLAMP);
    target
        .iter()
        .zip(anchor.iter())
        .map(|(&t, &a)| -t * a.max(floor).ln())
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub me_max: f64,
    pub lambda: f64,
    pub total: f64,
}

fn check_groups<T: Scalar>(anchor: &ProbMatrix<T>, target: &ProbMatrix<T>, lambda: f64) -> Result<usize> {
    let b = target.n_rows();
    let mb = anchor.n_rows();
    if b == 0 || mb == 0 || !mb.is_multiple_of(b) {
        return Err(Error::Dimension(format!(
            "{mb} anchor rows cannot be grouped over {b} target rows"
        )));
    }
    if anchor.rows.ncols() != target.rows.ncols() {
        return Err(Error::Dimension("anchor and target prototype counts differ".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config("lambda", "must be finite and non-negative"));
    }
    Ok(mb / b)
}

/// Loss value. Anchor row `i·M + m` is anchor view `m` of sample `i`.
pub fn msn_loss<T: Scalar>(anchor: &ProbMatrix<T>, target: &ProbMatrix<T>, lambda: f64) -> Result<LossBreakdown> {
    let m = check_groups(anchor, target, lambda)?;
    let mb = anchor.n_rows();
    let mut ce = T::zero();
    for (j, a) in anchor.rows.rows().into_iter().enumerate() {
        ce += cross_entropy(target.rows.row(j / m), a);
    }
    let cross = ce.to_f64_lossy() / mb as f64;
    let me_max = entropy(anchor.mean_row().view())?.to_f64_lossy();
    Ok(LossBreakdown {
        cross_entropy: cross,
        me_max,
        lambda,
        total: cross - lambda * me_max,
    })
}

/// Gradient of the loss with respect to the anchor logits (`Q z / tau_anchor`).
/// Targets are constants.
pub fn msn_loss_logit_grad<T: Scalar>(anchor: &ProbMatrix<T>, target: &ProbMatrix<T>, lambda: f64) -> Result<Array2<T>> {
    let m = check_groups(anchor, target, lambda)?;
    let mb = T::from_usize(anchor.n_rows()).unwrap();
    let lam = T::lit(lambda);
    let log_mean = anchor.mean_row().mapv(|v| v.max(T::lit(LOG_CLAMP)).ln());
    let mut grad = Array2::<T>::zeros(anchor.rows.raw_dim());
    for (j, (mut g, p)) in grad.rows_mut().into_iter().zip(anchor.rows.rows()).enumerate() {
        let t = target.rows.row(j / m);
        let t_sum = t.sum();
        let mean_dot = p.iter().zip(log_mean.iter()).map(|(&a, &b)| a * b).sum::<T>();
        Zip::from(&mut g)
            .and(&p)
            .and(&t)
            .and(&log_mean)
            .for_each(|g, &p, &t, &lm| {
                let ce = p * t_sum - t;
                let me = lam * p * (lm - mean_dot);
                *g = (ce + me) / mb;
            });
    }
    Ok(grad)
}

/// Loss plus gradients with respect to the anchor embeddings and the prototypes.
pub struct AnchorGradients<T> {
    pub loss: LossBreakdown,
    pub probs: ProbMatrix<T>,
    /// `M·B × d`.
    pub embeddings: Array2<T>,
    /// `K × d`.
    pub prototypes: Array2<T>,
}

pub fn anchor_gradients<T: Scalar>(
    bank: &PrototypeBank<T>,
    anchor_z: &Array2<T>,
    target: &ProbMatrix<T>,
    lambda: f64,
) -> Result<AnchorGradients<T>> {
    let probs = bank.anchor_probs(anchor_z)?;
    let loss = msn_loss(&probs, target, lambda)?;
    let dlogits = msn_loss_logit_grad(&probs, target, lambda)? / bank.tau_anchor;
    let embeddings = dlogits.dot(&bank.prototypes);
    let prototypes = dlogits.t().dot(anchor_z);
    Ok(AnchorGradients {
        loss,
        probs,
        embeddings,
        prototypes,
    })
}
