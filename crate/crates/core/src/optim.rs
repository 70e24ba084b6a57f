//! Per-party optimizers. Every party owns its own [`Optimizer`]; nothing
//! here is shared between parties.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adagrad,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" | "sgdm" => Ok(OptimizerKind::Momentum),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(OptimError::InvalidConfig(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Adam denominator term.
    pub adam_eps: f64,
    /// Adagrad denominator term.
    pub adagrad_eps: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            adagrad_eps: 1e-10,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(OptimError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(OptimError::InvalidConfig(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.adam_eps <= 0.0 || self.adagrad_eps <= 0.0 {
            return Err(OptimError::InvalidConfig("epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter tensor {0}")]
    NonFiniteGradient(usize),
    #[error("gradient tensor {index} has shape {grad:?}, parameter has {param:?}")]
    ShapeMismatch {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("expected {expected} gradient tensors, got {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
}

/// Accumulators mirroring the parameter list.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    /// Velocity (momentum), squared-gradient sums (Adagrad) or first moments (Adam).
    pub first: Vec<Tensor>,
    /// Second moments (Adam only).
    pub second: Vec<Tensor>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self, OptimError> {
        config.validate()?;
        Ok(Self {
            config,
            state: OptimizerState::default(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// Applies one update in place. Nothing is modified on error.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), OptimError> {
        if params.len() != grads.len() {
            return Err(OptimError::CountMismatch {
                expected: params.len(),
                actual: grads.len(),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(OptimError::ShapeMismatch {
                    index: i,
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(OptimError::NonFiniteGradient(i));
            }
        }
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect::<Vec<_>>();
        let kind = self.config.kind;
        if self.state.first.len() != params.len() && kind != OptimizerKind::Sgd {
            self.state.first = zeros();
            if kind == OptimizerKind::Adam {
                self.state.second = zeros();
            }
        }
        self.state.step += 1;
        let c = &self.config;
        let lr = c.learning_rate;
        match kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Momentum => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.state.first) {
                    for ((w, d), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vel = c.momentum * *vel + d;
                        *w -= lr * *vel;
                    }
                }
            }
            OptimizerKind::Adagrad => {
                for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut self.state.first) {
                    for ((w, d), s) in p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
                        *s += d * d;
                        *w -= lr * d / (s.sqrt() + c.adagrad_eps);
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.state.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                let moments = self.state.first.iter_mut().zip(self.state.second.iter_mut());
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(moments) {
                    let lanes = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
                    for ((w, d), (mi, vi)) in lanes {
                        *mi = c.beta1 * *mi + (1.0 - c.beta1) * d;
                        *vi = c.beta2 * *vi + (1.0 - c.beta2) * d * d;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + c.adam_eps);
                    }
                }
            }
        }
        Ok(())
    }
}
