//! Joint training objectives: frontend, predictor and backend in one graph.

use serde::{Deserialize, Serialize};

use super::losses::{se_loss, snri_target_loss, task_loss};
use super::{Backend, ModelConfig, ModelError, PredNet, SnriNet};
use crate::grad::{Bound, Graph, ParamSet, Tensor, Var};
use crate::metrics::ThresholdConfig;
use crate::rng::{purpose, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointMode {
    /// λ-conditioned frontend with the predictor, plus η·L^SNRi.
    Proposed,
    /// Unconditioned frontend plus γ·L^SE.
    Baseline,
}

impl JointMode {
    pub fn name(&self) -> &'static str {
        match self {
            JointMode::Proposed => "proposed",
            JointMode::Baseline => "baseline",
        }
    }
}

/// What the frontend does for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrontendDecision {
    /// The backend sees the raw mixture; no auxiliary term.
    Skip,
    /// Proposed mode only: condition on this λ (dB) instead of λ̂.
    RandomLambda(f64),
    /// Run the frontend (with λ̂ in proposed mode).
    Frontend,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointWeights {
    /// Weight of L^SNRi in proposed mode.
    pub eta: f64,
    /// Weight of L^SE in baseline mode.
    pub gamma: f64,
}

impl Default for JointWeights {
    fn default() -> Self {
        Self { eta: 0.01, gamma: 0.25 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct JointInput<'a> {
    pub x: &'a [f64],
    pub s: &'a [f64],
    pub n: &'a [f64],
    pub label: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct JointTerms {
    pub total: Var,
    pub task: Var,
    /// Unweighted L^SNRi (proposed) or L^SE (baseline), when computed.
    pub aux: Option<Var>,
    pub lambda_hat: Option<Var>,
}

/// All four networks plus the loss settings they are trained with.
#[derive(Debug, Clone)]
pub struct Models {
    pub config: ModelConfig,
    pub snri_net: SnriNet,
    pub se_net: SnriNet,
    pub pred_net: PredNet,
    pub backend: Backend,
    pub thresholds: ThresholdConfig,
    pub weights: JointWeights,
}

impl Models {
    pub fn new(config: &ModelConfig, thresholds: ThresholdConfig, weights: JointWeights) -> Result<Self, ModelError> {
        thresholds.validate()?;
        if !(weights.eta >= 0.0 && weights.gamma >= 0.0) {
            return Err(ModelError::InvalidConfig("eta and gamma must be non-negative".into()));
        }
        Ok(Self {
            config: *config,
            snri_net: SnriNet::conditioned(config)?,
            se_net: SnriNet::unconditioned(config)?,
            pred_net: PredNet::new(config)?,
            backend: Backend::new(config)?,
            thresholds,
            weights,
        })
    }

    /// Fresh parameters for every network, each from its own seed stream.
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut p = self.snri_net.init(&mut rng_for(seed, &[purpose::INIT, 0]));
        p.extend(self.se_net.init(&mut rng_for(seed, &[purpose::INIT, 1])));
        p.extend(self.pred_net.init(&mut rng_for(seed, &[purpose::INIT, 2])));
        p.extend(self.backend.init(&mut rng_for(seed, &[purpose::INIT, 3])));
        p
    }

    /// Builds the joint objective for one example.
    ///
    /// In proposed mode with a predicted target, L^SNRi is computed on a
    /// second frontend pass conditioned on `stop_gradient(λ̂)`, so that term
    /// reaches the frontend and not the predictor; the task term reaches both.
    pub fn joint_terms(
        &self,
        g: &mut Graph,
        b: &Bound,
        input: JointInput<'_>,
        mode: JointMode,
        decision: FrontendDecision,
    ) -> Result<JointTerms, ModelError> {
        let x = g.constant(Tensor::column(input.x.to_vec()));
        if decision == FrontendDecision::Skip {
            let lp = self.backend.forward(g, b, x)?;
            let task = task_loss(g, lp, input.label)?;
            return Ok(JointTerms { total: task, task, aux: None, lambda_hat: None });
        }
        match mode {
            JointMode::Proposed => {
                let (lambda, lambda_hat) = match decision {
                    FrontendDecision::RandomLambda(l) => (g.constant(Tensor::full(&[1, 1], l)), None),
                    _ => {
                        let l = self.pred_net.forward(g, b, x)?;
                        (l, Some(l))
                    }
                };
                let (y1, _) = self.snri_net.forward(g, b, x, Some(lambda))?;
                let lp = self.backend.forward(g, b, y1)?;
                let task = task_loss(g, lp, input.label)?;
                if self.weights.eta == 0.0 {
                    return Ok(JointTerms { total: task, task, aux: None, lambda_hat });
                }
                let (aux_y1, aux_lambda) = match lambda_hat {
                    Some(l) => {
                        let barred = g.stop_gradient(l)?;
                        let (y1b, _) = self.snri_net.forward(g, b, x, Some(barred))?;
                        (y1b, barred)
                    }
                    None => (y1, lambda),
                };
                let aux = snri_target_loss(g, input.s, input.n, aux_y1, aux_lambda, &self.thresholds)?.total;
                let weighted = g.affine(aux, self.weights.eta, 0.0)?;
                let total = g.add(task, weighted)?;
                Ok(JointTerms { total, task, aux: Some(aux), lambda_hat })
            }
            JointMode::Baseline => {
                if let FrontendDecision::RandomLambda(_) = decision {
                    return Err(ModelError::InvalidConfig("baseline frontend takes no target".into()));
                }
                let (y1, y2) = self.se_net.forward(g, b, x, None)?;
                let lp = self.backend.forward(g, b, y1)?;
                let task = task_loss(g, lp, input.label)?;
                let aux = se_loss(g, input.s, input.n, y1, y2, &self.thresholds)?;
                let weighted = g.affine(aux, self.weights.gamma, 0.0)?;
                let total = g.add(task, weighted)?;
                Ok(JointTerms { total, task, aux: Some(aux), lambda_hat: None })
            }
        }
    }
}
