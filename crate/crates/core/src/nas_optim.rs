//! Weight and architecture update rules.
//!
//! [`bilevel_step`] performs the first-order bilevel iteration (architecture
//! on a validation batch, then weights on a training batch, two exchanges);
//! [`mixlevel_step`] performs the fused mixed-level iteration (one exchange
//! carrying both batches). The model side is abstracted by [`SearchProblem`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamSet, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("gradient for {name} has shape {grad:?}, parameter has {param:?}")]
    ShapeMismatch {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("parameter {0} became non-finite")]
    NonFinite(String),
    #[error("{0} batch is empty")]
    EmptyBatch(&'static str),
    #[error("train and validation batches share sample {0}")]
    OverlappingBatches(usize),
    #[error("invalid optimizer setting: {0}")]
    InvalidConfig(String),
}

/// SGD with optional heavy-ball momentum:
/// `buf = mu * buf + g; p -= lr * buf` (plain `p -= lr * g` when `mu = 0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self, OptimError> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(OptimError::InvalidConfig(format!("learning rate {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(OptimError::InvalidConfig(format!("momentum {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            buffers: BTreeMap::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<(), OptimError> {
        if param.shape() != grad.shape() {
            return Err(OptimError::ShapeMismatch {
                name: name.to_string(),
                param: param.shape().to_vec(),
                grad: grad.shape().to_vec(),
            });
        }
        if self.momentum == 0.0 {
            for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                *p -= self.lr * g;
            }
        } else {
            let buf = self
                .buffers
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.numel()]);
            for ((p, b), g) in param.data_mut().iter_mut().zip(buf.iter_mut()).zip(grad.data()) {
                *b = self.momentum * *b + g;
                *p -= self.lr * *b;
            }
        }
        if !param.is_finite() {
            return Err(OptimError::NonFinite(name.to_string()));
        }
        Ok(())
    }

    /// Steps every parameter that has a gradient in `grads`.
    pub fn step_all(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), OptimError> {
        for (name, p) in params.iter_mut() {
            if let Some(g) = grads.get(name) {
                self.step(name, p, g)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    Bilevel,
    Mixlevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr_w: f64,
    pub momentum_w: f64,
    pub lr_alpha: f64,
    pub momentum_alpha: f64,
    pub lambda: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_w: 0.025,
            momentum_w: 0.9,
            lr_alpha: 3e-4,
            momentum_alpha: 0.0,
            lambda: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        Sgd::new(self.lr_w, self.momentum_w)?;
        Sgd::new(self.lr_alpha, self.momentum_alpha)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(OptimError::InvalidConfig(format!("lambda {}", self.lambda)));
        }
        Ok(())
    }
}

/// What one exchange updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum UpdateRule {
    /// `alpha -= lr_alpha * grad_alpha(l_val)`.
    Alpha,
    /// `w -= lr_w * grad_w(l_trn)`.
    Weights,
    /// `w -= lr_w * grad_w(l_trn)` and
    /// `alpha -= lr_alpha * (grad_alpha(l_trn) + lambda * grad_alpha(l_val))`.
    Joint { lambda: f64 },
}

/// Optimizers for one party's two parameter groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupOptimizer {
    pub w: Sgd,
    pub alpha: Sgd,
}

impl GroupOptimizer {
    pub fn new(cfg: &OptimConfig) -> Result<Self, OptimError> {
        Ok(Self {
            w: Sgd::new(cfg.lr_w, cfg.momentum_w)?,
            alpha: Sgd::new(cfg.lr_alpha, cfg.momentum_alpha)?,
        })
    }

    /// Applies `rule` given gradients of the training and validation losses.
    /// `alpha_grad_*` are the gradients of the architecture logits; weight
    /// gradients come from `train`.
    pub fn apply(
        &mut self,
        rule: UpdateRule,
        weights: &mut ParamSet,
        alpha: Option<&mut Tensor>,
        train: Option<&BTreeMap<String, Tensor>>,
        alpha_grad_train: Option<&Tensor>,
        alpha_grad_val: Option<&Tensor>,
    ) -> Result<(), OptimError> {
        if matches!(rule, UpdateRule::Weights | UpdateRule::Joint { .. }) {
            if let Some(g) = train {
                self.w.step_all(weights, g)?;
            }
        }
        let Some(alpha) = alpha else {
            return Ok(());
        };
        let grad = match rule {
            UpdateRule::Weights => None,
            UpdateRule::Alpha => alpha_grad_val.cloned(),
            UpdateRule::Joint { lambda } => match (alpha_grad_train, alpha_grad_val) {
                (Some(t), Some(v)) => {
                    let mut g = t.clone();
                    for (a, b) in g.data_mut().iter_mut().zip(v.data()) {
                        *a += lambda * b;
                    }
                    Some(g)
                }
                (Some(t), None) => Some(t.clone()),
                (None, Some(v)) => Some(v.scaled(lambda)),
                (None, None) => None,
            },
        };
        if let Some(g) = grad {
            self.alpha.step(crate::search_space::ALPHA, alpha, &g)?;
        }
        Ok(())
    }
}

/// Losses observed during one exchange.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExchangeReport {
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

/// Model side of a search iteration: one call to `exchange` is one complete
/// forward and backward pass of the (possibly federated) model that applies
/// `rule` to every party.
pub trait SearchProblem {
    type Error: From<OptimError>;

    fn exchange(
        &mut self,
        train: Option<&[usize]>,
        val: Option<&[usize]>,
        rule: UpdateRule,
    ) -> Result<ExchangeReport, Self::Error>;

    /// Communication rounds consumed so far.
    fn rounds(&self) -> u64;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub mode: StepMode,
    pub train_loss: f64,
    pub val_loss: f64,
    pub rounds: u64,
}

fn check_batches(train: &[usize], val: &[usize]) -> Result<(), OptimError> {
    if train.is_empty() {
        return Err(OptimError::EmptyBatch("train"));
    }
    if val.is_empty() {
        return Err(OptimError::EmptyBatch("validation"));
    }
    let seen: std::collections::HashSet<usize> = train.iter().copied().collect();
    if let Some(&i) = val.iter().find(|i| seen.contains(i)) {
        return Err(OptimError::OverlappingBatches(i));
    }
    Ok(())
}

/// First-order bilevel iteration: architecture step on `val`, then weight
/// step on `train`.
pub fn bilevel_step<P: SearchProblem>(
    problem: &mut P,
    train: &[usize],
    val: &[usize],
) -> Result<StepReport, P::Error> {
    check_batches(train, val)?;
    let before = problem.rounds();
    let a = problem.exchange(None, Some(val), UpdateRule::Alpha)?;
    let w = problem.exchange(Some(train), None, UpdateRule::Weights)?;
    Ok(StepReport {
        mode: StepMode::Bilevel,
        train_loss: w.train_loss.unwrap_or(f64::NAN),
        val_loss: a.val_loss.unwrap_or(f64::NAN),
        rounds: problem.rounds() - before,
    })
}

/// Mixed-level iteration: one fused exchange over both batches.
pub fn mixlevel_step<P: SearchProblem>(
    problem: &mut P,
    train: &[usize],
    val: &[usize],
    lambda: f64,
) -> Result<StepReport, P::Error> {
    check_batches(train, val)?;
    let before = problem.rounds();
    let r = problem.exchange(Some(train), Some(val), UpdateRule::Joint { lambda })?;
    Ok(StepReport {
        mode: StepMode::Mixlevel,
        train_loss: r.train_loss.unwrap_or(f64::NAN),
        val_loss: r.val_loss.unwrap_or(f64::NAN),
        rounds: problem.rounds() - before,
    })
}

pub fn search_step<P: SearchProblem>(
    problem: &mut P,
    mode: StepMode,
    train: &[usize],
    val: &[usize],
    lambda: f64,
) -> Result<StepReport, P::Error> {
    match mode {
        StepMode::Bilevel => bilevel_step(problem, train, val),
        StepMode::Mixlevel => mixlevel_step(problem, train, val, lambda),
    }
}
