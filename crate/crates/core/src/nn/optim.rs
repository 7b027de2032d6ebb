use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamSet;
use crate::pruning::SparsityMask;

/// SGD with classical momentum: `v <- mu*v + g`, `theta <- theta - lr*v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f32,
    pub momentum: f32,
    velocity: Option<ParamSet>,
}

impl OptimizerState {
    pub fn new(learning_rate: f32, momentum: f32) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", format!("{learning_rate} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("momentum", format!("{momentum} must lie in [0, 1)")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: None,
        })
    }

    /// Drops the velocity buffers, as when a fresh optimizer is built.
    pub fn reset(&mut self) {
        self.velocity = None;
    }

    pub fn velocity(&self) -> Option<&ParamSet> {
        self.velocity.as_ref()
    }
}

/// One momentum step on the learnable entries of `params`.
///
/// With a mask, gradients and velocity at pruned positions are zeroed and the
/// pruned weights are pinned to exactly `0.0`. Running BN statistics are not
/// touched.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    opt: &mut OptimizerState,
    mask: Option<&SparsityMask>,
) -> Result<()> {
    params.check_congruent(grads)?;
    if let Some(m) = mask {
        m.check_params(params)?;
    }
    let velocity = opt.velocity.get_or_insert_with(|| params.zeros_like());
    velocity.check_congruent(params)?;
    let (lr, mu) = (opt.learning_rate, opt.momentum);
    for (i, ((p, g), v)) in params
        .entries_mut()
        .iter_mut()
        .zip(grads.entries())
        .zip(velocity.entries_mut())
        .enumerate()
    {
        if !p.role.is_learnable() {
            continue;
        }
        let bits = mask.map(|m| m.bits(i));
        let (pd, gd, vd) = (p.tensor.data_mut(), g.tensor.data(), v.tensor.data_mut());
        for j in 0..pd.len() {
            if bits.is_some_and(|b| !b[j]) {
                vd[j] = 0.0;
                pd[j] = 0.0;
                continue;
            }
            vd[j] = mu * vd[j] + gd[j];
            pd[j] -= lr * vd[j];
        }
    }
    Ok(())
}
