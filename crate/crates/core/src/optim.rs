//! Deterministic first-order update rules on flat parameter vectors.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOperator {
    Plain {
        lr: f64,
    },
    /// Heavy ball: `v <- beta v + g`, `p <- p - lr v`.
    Momentum {
        lr: f64,
        beta: f64,
    },
    /// Bias-corrected Adam.
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl StepOperator {
    pub fn adam(lr: f64) -> Self {
        StepOperator::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepOperator::Plain { lr } => lr > 0.0,
            StepOperator::Momentum { lr, beta } => lr > 0.0 && (0.0..1.0).contains(&beta),
            StepOperator::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("invalid step operator {self:?}")))
        }
    }
}

/// Per-parameter memory of a [`StepOperator`].
#[derive(Debug, Clone)]
pub struct OptimizerState {
    op: StepOperator,
    first: Vec<f64>,
    second: Vec<f64>,
    count: i32,
}

impl OptimizerState {
    pub fn new(op: StepOperator, n: usize) -> Self {
        let second = if matches!(op, StepOperator::Adam { .. }) { vec![0.0; n] } else { Vec::new() };
        Self { op, first: vec![0.0; n], second, count: 0 }
    }

    pub fn operator(&self) -> StepOperator {
        self.op
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.count += 1;
        match self.op {
            StepOperator::Plain { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            StepOperator::Momentum { lr, beta } => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.first) {
                    *v = beta * *v + g;
                    *p -= lr * *v;
                }
            }
            StepOperator::Adam { lr, beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.count);
                let c2 = 1.0 - beta2.powi(self.count);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.first).zip(&mut self.second) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}
