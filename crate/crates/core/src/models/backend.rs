//! Toy keyword classifier standing in for the recognizer.

use rand::Rng;

use super::blocks::{dense, init_dense, init_stack, stack};
use super::pred_net::scaled_logmel;
use super::{group, BackendConfig, ModelConfig, ModelError};
use crate::audio::LogMel;
use crate::grad::{Bound, Graph, ParamSet, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Backend {
    cfg: BackendConfig,
    logmel: LogMel,
}

impl Backend {
    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self { cfg: cfg.backend, logmel: LogMel::new(&cfg.mel)? })
    }

    pub fn n_classes(&self) -> usize {
        self.cfg.n_classes
    }

    fn name(n: &str) -> String {
        format!("{}{n}", group::BACKEND)
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut p = ParamSet::new();
        let h = self.cfg.hidden;
        init_dense(&mut p, &Self::name("in_"), self.logmel.filterbank().n_mels(), h, 1.0, rng);
        init_stack(&mut p, group::BACKEND, self.cfg.n_blocks, h, h, rng);
        init_dense(&mut p, &Self::name("out_"), h, self.cfg.n_classes, 1.0, rng);
        p
    }

    /// Class log-probabilities `(1, K)` for a signal `y: (T, 1)`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, y: Var) -> Result<Var, ModelError> {
        let feats = scaled_logmel(g, &self.logmel, y)?;
        let h = dense(g, b, &Self::name("in_"), feats)?;
        let h = stack(g, b, group::BACKEND, self.cfg.n_blocks, h)?;
        let pooled = g.mean_pool_time(h)?;
        let logits = dense(g, b, &Self::name("out_"), pooled)?;
        Ok(g.log_softmax(logits)?)
    }

    pub fn log_probs(&self, params: &ParamSet, y: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let yv = g.constant(Tensor::column(y.to_vec()));
        let lp = self.forward(&mut g, &b, yv)?;
        Ok(g.value(lp).data().to_vec())
    }

    pub fn classify(&self, params: &ParamSet, y: &[f64]) -> Result<usize, ModelError> {
        let lp = self.log_probs(params, y)?;
        Ok((0..lp.len()).max_by(|a, b| lp[*a].total_cmp(&lp[*b])).unwrap_or(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_probabilities_normalize() {
        let net = Backend::new(&ModelConfig::default()).unwrap();
        let p = net.init(&mut ChaCha8Rng::seed_from_u64(0));
        let y: Vec<f64> = (0..3000).map(|i| (i as f64 * 0.02).sin() * (i as f64 * 0.0007).cos()).collect();
        let lp = net.log_probs(&p, &y).unwrap();
        assert_eq!(lp.len(), 10);
        assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
