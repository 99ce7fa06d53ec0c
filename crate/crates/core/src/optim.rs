//! SGD with momentum and Adam, with per-parameter learning-rate and
//! weight-decay multipliers, plus step-decay schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-5,
        }
    }
}

/// Step decay: `base_lr · factor^(number of decay epochs ≤ epoch)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub epochs: Vec<usize>,
    pub factor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: Vec::new(),
            factor: 0.1,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::config(format!("decay factor {} outside (0, 1]", self.factor)));
        }
        if self.epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("decay epochs must be strictly increasing"));
        }
        Ok(())
    }

    pub fn lr(&self, base_lr: f64, epoch: usize) -> f64 {
        let decays = self.epochs.iter().filter(|&&e| e <= epoch).count();
        base_lr * self.factor.powi(decays as i32)
    }

    pub fn is_decay_epoch(&self, epoch: usize) -> bool {
        self.epochs.contains(&epoch)
    }
}

pub fn schedule_lr(schedule: &Schedule, base_lr: f64, epoch: usize) -> f64 {
    schedule.lr(base_lr, epoch)
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroupState<T> {
    Momentum(Vec<T>),
    Adam { m: Vec<T>, v: Vec<T>, t: u64 },
}

/// Optimizer state and multipliers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup<T> {
    pub lr_factor: f64,
    pub wd_factor: f64,
    pub state: GroupState<T>,
}

impl<T: Scalar> ParamGroup<T> {
    pub fn sgd(len: usize, lr_factor: f64, wd_factor: f64) -> Self {
        Self {
            lr_factor,
            wd_factor,
            state: GroupState::Momentum(vec![T::zero(); len]),
        }
    }

    pub fn adam(len: usize, lr_factor: f64, wd_factor: f64) -> Self {
        Self {
            lr_factor,
            wd_factor,
            state: GroupState::Adam {
                m: vec![T::zero(); len],
                v: vec![T::zero(); len],
                t: 0,
            },
        }
    }

    fn len(&self) -> usize {
        match &self.state {
            GroupState::Momentum(v) => v.len(),
            GroupState::Adam { m, .. } => m.len(),
        }
    }
}

fn check_lengths(group_len: usize, param: usize, grad: usize) -> Result<()> {
    if group_len != param || param != grad {
        return Err(Error::shape(format!(
            "optimizer state {group_len}, parameter {param} and gradient {grad} lengths differ"
        )));
    }
    Ok(())
}

/// `v ← μ·v + g + wd_factor·wd·θ;  θ ← θ − lr·lr_factor·v`
pub fn sgd_momentum_step<T: Scalar>(
    group: &mut ParamGroup<T>,
    param: &mut [T],
    grad: &[T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_lengths(group.len(), param.len(), grad.len())?;
    let GroupState::Momentum(velocity) = &mut group.state else {
        return Err(Error::config("sgd step on a group holding Adam state"));
    };
    let mu = T::of(momentum);
    let decay = T::of(group.wd_factor * weight_decay);
    let step = T::of(lr * group.lr_factor);
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g + decay * *p;
        *p -= step * *v;
    }
    Ok(())
}

/// Bias-corrected Adam with coupled weight decay added to the gradient.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Scalar>(
    group: &mut ParamGroup<T>,
    param: &mut [T],
    grad: &[T],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    check_lengths(group.len(), param.len(), grad.len())?;
    let GroupState::Adam { m, v, t } = &mut group.state else {
        return Err(Error::config("adam step on a group holding momentum state"));
    };
    *t += 1;
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let c1 = T::of(1.0 - beta1.powi(*t as i32));
    let c2 = T::of(1.0 - beta2.powi(*t as i32));
    let decay = T::of(group.wd_factor * weight_decay);
    let step = T::of(lr * group.lr_factor);
    let eps = T::of(eps);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g + decay * *p;
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= step * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Owns one [`ParamGroup`] per model parameter, in the model's parameter order.
pub struct Optimizer<T> {
    config: OptimConfig,
    groups: Vec<ParamGroup<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimConfig, params: &[&Param<T>]) -> Self {
        let groups = params
            .iter()
            .map(|p| match config.kind {
                OptimizerKind::Sgd => ParamGroup::sgd(p.len(), p.lr_factor, p.wd_factor),
                OptimizerKind::Adam => ParamGroup::adam(p.len(), p.lr_factor, p.wd_factor),
            })
            .collect();
        Self { config, groups }
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    pub fn groups(&self) -> &[ParamGroup<T>] {
        &self.groups
    }

    /// Number of scalar parameters registered.
    pub fn registered_len(&self) -> usize {
        self.groups.iter().map(ParamGroup::len).sum()
    }

    /// Applies one update at learning rate `lr` using each parameter's gradient.
    pub fn step(&mut self, params: Vec<&mut Param<T>>, lr: f64) -> Result<()> {
        if params.len() != self.groups.len() {
            return Err(Error::shape(format!(
                "optimizer holds {} groups, model exposes {} parameters",
                self.groups.len(),
                params.len()
            )));
        }
        let c = &self.config;
        for (group, p) in self.groups.iter_mut().zip(params) {
            let grad = p.grad.data().to_vec();
            match c.kind {
                OptimizerKind::Sgd => {
                    sgd_momentum_step(group, p.value.data_mut(), &grad, lr, c.momentum, c.weight_decay)?
                }
                OptimizerKind::Adam => adam_step(
                    group,
                    p.value.data_mut(),
                    &grad,
                    lr,
                    c.beta1,
                    c.beta2,
                    c.eps,
                    c.weight_decay,
                )?,
            }
        }
        Ok(())
    }
}
