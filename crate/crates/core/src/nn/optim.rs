use std::fmt;
use std::str::FromStr;

use super::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    /// Adaptive moments (beta1 0.9, beta2 0.999, eps 1e-8), bias-corrected.
    #[default]
    Adam,
    /// Heavy-ball SGD with momentum 0.9.
    SgdMomentum,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgdMomentum => "sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::SgdMomentum),
            other => Err(format!("unknown optimizer {other:?} (expected adam or sgd)")),
        }
    }
}

const MOMENTUM: f64 = 0.9;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub struct Optimizer {
    kind: OptimizerKind,
    first: ParamSet,
    second: Option<ParamSet>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        Self {
            kind,
            first: params.zeros_like(),
            second: (kind == OptimizerKind::Adam).then(|| params.zeros_like()),
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Updates every tensor whose `frozen` flag is unset (missing flags mean
    /// trainable).
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64, frozen: &[bool]) {
        self.steps += 1;
        let t = self.steps;
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            if frozen.get(id.0).copied().unwrap_or(false) {
                continue;
            }
            let g = grads.get(id).data();
            let m = self.first.get_mut(id).data_mut();
            let p = params.get_mut(id).data_mut();
            match (self.kind, self.second.as_mut()) {
                (OptimizerKind::Adam, Some(second)) => {
                    let v = second.get_mut(id).data_mut();
                    let c1 = 1.0 - BETA1.powi(t);
                    let c2 = 1.0 - BETA2.powi(t);
                    for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
                _ => {
                    for ((p, m), &g) in p.iter_mut().zip(m.iter_mut()).zip(g) {
                        *m = MOMENTUM * *m + g;
                        *p -= lr * *m;
                    }
                }
            }
        }
    }
}
