//! First-order update rules shared by pretraining and the downstream heads.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with L2 decay folded into the gradient.
    Adam,
    /// Adam with decoupled decay scaled by the learning rate.
    #[default]
    AdamW,
    /// Heavy-ball SGD with L2 decay.
    Sgd,
}

/// Per-tensor optimizer state: first and second moments (SGD uses only the first).
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
    /// Updates taken so far.
    pub t: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, tensors: &[ArrayViewD<'_, T>]) -> Self {
        let z: Vec<ArrayD<T>> = tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect();
        Self {
            kind,
            m: z.clone(),
            v: z,
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<ArrayViewMutD<'_, T>>, grads: Vec<ArrayViewD<'_, T>>, lr: f64, weight_decay: f64) -> Result<()> {
        self.t += 1;
        update(self.kind, params, grads, &mut self.m, &mut self.v, self.t, lr, weight_decay)
    }
}

/// Applies one update of `kind` in place. `t` counts updates from 1.
#[allow(clippy::too_many_arguments)]
pub fn update<T: Scalar>(
    kind: OptimizerKind,
    params: Vec<ArrayViewMutD<'_, T>>,
    grads: Vec<ArrayViewD<'_, T>>,
    m: &mut [ArrayD<T>],
    v: &mut [ArrayD<T>],
    t: u64,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != m.len() || grads.len() != m.len() || v.len() != m.len() {
        return Err(Error::Dimension("optimizer state does not match parameters".into()));
    }
    let one = T::one();
    let lr_t = T::lit(lr);
    let wd = T::lit(weight_decay);
    let b1 = T::lit(BETA1);
    let b2 = T::lit(BETA2);
    let c1 = T::lit(1.0 - BETA1.powf(t as f64));
    let c2 = T::lit(1.0 - BETA2.powf(t as f64));
    let eps = T::lit(EPS);
    let decay = one - T::lit(lr * weight_decay);
    let mu = T::lit(SGD_MOMENTUM);
    for (((mut p, g), m), v) in params.into_iter().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Dimension("optimizer tensor shape mismatch".into()));
        }
        let z = Zip::from(&mut p).and(&g).and(m).and(v);
        match kind {
            OptimizerKind::AdamW => z.for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p = *p * decay - lr_t * (*m / c1) / ((*v / c2).sqrt() + eps);
            }),
            OptimizerKind::Adam => z.for_each(|p, &g, m, v| {
                let g = g + wd * *p;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= lr_t * (*m / c1) / ((*v / c2).sqrt() + eps);
            }),
            OptimizerKind::Sgd => z.for_each(|p, &g, m, _| {
                *m = mu * *m + g + wd * *p;
                *p -= lr_t * *m;
            }),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one_step(kind: OptimizerKind, p0: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let mut p = array![p0];
        let g = array![g];
        let mut opt = Optimizer::new(kind, &[p.view().into_dyn()]);
        opt.step(vec![p.view_mut().into_dyn()], vec![g.view().into_dyn()], lr, wd)
            .unwrap();
        p[0]
    }

    #[test]
    fn first_steps_by_hand() {
        // AdamW: decay then a unit-magnitude Adam step
        assert!((one_step(OptimizerKind::AdamW, 1.0, 2.0, 0.1, 0.5) - (0.95 - 0.1)).abs() < 1e-7);
        // Adam: decay enters the gradient, first step is still lr·sign
        assert!((one_step(OptimizerKind::Adam, 1.0, -2.0, 0.1, 0.5) - 1.1).abs() < 1e-7);
        // SGD: p − lr·(g + wd·p)
        assert!((one_step(OptimizerKind::Sgd, 1.0, 2.0, 0.1, 0.5) - (1.0 - 0.1 * 2.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_a_no_op_for_every_kind() {
        for kind in [OptimizerKind::Adam, OptimizerKind::AdamW, OptimizerKind::Sgd] {
            assert_eq!(one_step(kind, 0.7, 3.0, 0.0, 0.1), 0.7);
        }
    }
}
