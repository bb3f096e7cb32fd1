//! Predicts the target SNRi that suits the downstream task.

use rand::Rng;

use super::blocks::{dense, init_dense, init_stack, stack};
use super::{group, ModelConfig, ModelError, PredNetConfig, FEATURE_SCALE, FEATURE_SHIFT};
use crate::audio::LogMel;
use crate::grad::{Bound, Graph, ParamSet, Tensor, Var};

/// Differentiable log-mel of `x: (T, 1)` after the fixed feature affine.
pub(crate) fn scaled_logmel(g: &mut Graph, logmel: &LogMel, x: Var) -> Result<Var, ModelError> {
    let len = g.value(x).shape()[0];
    if logmel.frame_count(len) == 0 {
        return Err(ModelError::TooShort { len, win: logmel.filterbank().win() });
    }
    let feats = logmel.apply(g, x)?;
    Ok(g.affine(feats, FEATURE_SCALE, FEATURE_SHIFT)?)
}

#[derive(Debug, Clone)]
pub struct PredNet {
    cfg: PredNetConfig,
    logmel: LogMel,
}

impl PredNet {
    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self { cfg: cfg.pred_net, logmel: LogMel::new(&cfg.mel)? })
    }

    pub fn lambda_range(&self) -> (f64, f64) {
        (self.cfg.lambda_min, self.cfg.lambda_max)
    }

    fn name(n: &str) -> String {
        format!("{}{n}", group::PRED_NET)
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        let h = self.cfg.hidden;
        init_dense(&mut p, &Self::name("in_"), self.logmel.filterbank().n_mels(), h, 1.0, rng);
        init_stack(&mut p, group::PRED_NET, self.cfg.n_blocks, h, h, rng);
        init_dense(&mut p, &Self::name("out_"), h, 1, 1.0, rng);
        p
    }

    /// `λ̂` as a `(1, 1)` node for `x: (T, 1)`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var, ModelError> {
        let feats = scaled_logmel(g, &self.logmel, x)?;
        self.forward_features(g, b, feats)
    }

    /// `λ̂` from already-scaled features `(frames, n_mels)`.
    pub fn forward_features(&self, g: &mut Graph, b: &Bound, feats: Var) -> Result<Var, ModelError> {
        let h = dense(g, b, &Self::name("in_"), feats)?;
        let h = stack(g, b, group::PRED_NET, self.cfg.n_blocks, h)?;
        let pooled = g.mean_pool_time(h)?;
        let logit = dense(g, b, &Self::name("out_"), pooled)?;
        let sigma = g.sigmoid(logit)?;
        let (lo, hi) = self.lambda_range();
        Ok(g.affine(sigma, hi - lo, lo)?)
    }

    pub fn predict(&self, params: &ParamSet, x: &[f64]) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let xv = g.constant(Tensor::column(x.to_vec()));
        let lambda = self.forward(&mut g, &b, xv)?;
        Ok(g.value(lambda).item())
    }
}
