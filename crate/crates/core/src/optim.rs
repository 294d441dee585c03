//! Step-size schedules and agent-local update rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::ParamBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Constant,
    /// `eta0 / (1 + t / tau)`.
    Diminishing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    #[serde(default)]
    pub kind: ScheduleKind,
    pub eta0: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    100.0
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Constant,
            eta0: 0.1,
            tau: default_tau(),
        }
    }
}

impl ScheduleSpec {
    pub fn constant(eta0: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Constant,
            eta0,
            tau: default_tau(),
        }
    }

    pub fn diminishing(eta0: f64, tau: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Diminishing,
            eta0,
            tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::param(format!("eta0 must be positive, got {}", self.eta0)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::param(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

pub fn step_size(schedule: &ScheduleSpec, t: usize) -> f64 {
    match schedule.kind {
        ScheduleKind::Constant => schedule.eta0,
        ScheduleKind::Diminishing => schedule.eta0 / (1.0 + t as f64 / schedule.tau),
    }
}

/// Local update rule applied by each agent before mixing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Gd,
    Momentum {
        #[serde(default = "default_momentum")]
        beta: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Gd
    }
}

impl OptimizerKind {
    pub fn momentum() -> Self {
        OptimizerKind::Momentum {
            beta: default_momentum(),
        }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Per-agent optimizer memory. Never shared between agents.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Gd,
    Momentum { buffer: ParamBank },
    Adam { first: ParamBank, second: ParamBank, step: u32 },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, like: &ParamBank) -> Self {
        let zeros = || like.scaled(0.0);
        match kind {
            OptimizerKind::Gd => OptimizerState::Gd,
            OptimizerKind::Momentum { .. } => OptimizerState::Momentum { buffer: zeros() },
            OptimizerKind::Adam { .. } => OptimizerState::Adam {
                first: zeros(),
                second: zeros(),
                step: 0,
            },
        }
    }
}

/// Returns the local estimate `psi = w - eta * direction`, updating optimizer memory.
pub fn local_step(
    params: &ParamBank,
    grad: &ParamBank,
    eta: f64,
    kind: OptimizerKind,
    state: &mut OptimizerState,
) -> Result<ParamBank> {
    if !(eta > 0.0) {
        return Err(Error::param(format!("step size must be positive, got {eta}")));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let mut psi = params.clone();
    match (kind, state) {
        (OptimizerKind::Gd, OptimizerState::Gd) => psi.axpy(-eta, grad),
        (OptimizerKind::Momentum { beta }, OptimizerState::Momentum { buffer }) => {
            *buffer = buffer.scaled(beta);
            buffer.axpy(1.0, grad);
            psi.axpy(-eta, buffer);
        }
        (OptimizerKind::Adam { beta1, beta2, eps }, OptimizerState::Adam { first, second, step }) => {
            *step += 1;
            let c1 = 1.0 - beta1.powi(*step as i32);
            let c2 = 1.0 - beta2.powi(*step as i32);
            let iter = psi
                .layers
                .iter_mut()
                .flatten()
                .zip(grad.layers.iter().flatten())
                .zip(first.layers.iter_mut().flatten().zip(second.layers.iter_mut().flatten()));
            for ((w, g), (m, v)) in iter {
                for idx in 0..w.len() {
                    let gi = g[idx];
                    m[idx] = beta1 * m[idx] + (1.0 - beta1) * gi;
                    v[idx] = beta2 * v[idx] + (1.0 - beta2) * gi * gi;
                    let mhat = m[idx] / c1;
                    let vhat = v[idx] / c2;
                    w[idx] -= eta * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        (kind, _) => {
            return Err(Error::param(format!(
                "optimizer state does not match optimizer {kind:?}"
            )))
        }
    }
    Ok(psi)
}
