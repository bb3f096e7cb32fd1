//! Mask-based time-domain enhancer, optionally conditioned on a target SNRi.

use rand::Rng;

use super::blocks::{dense, init_dense, init_stack, stack};
use super::{group, ModelConfig, ModelError, SnriNetConfig};
use crate::grad::{Bound, Conv1dSpec, Graph, ParamSet, Tensor, Var};
use crate::metrics::SeparatedPair;

#[derive(Debug, Clone)]
pub struct SnriNet {
    cfg: SnriNetConfig,
    prefix: &'static str,
    /// `Some((λ_min, λ_max))` for the conditioned network.
    lambda_range: Option<(f64, f64)>,
    win: usize,
    hop: usize,
}

impl SnriNet {
    /// The λ-conditioned enhancer.
    pub fn conditioned(cfg: &ModelConfig) -> Result<Self, ModelError> {
        Self::build(cfg, group::SNRI_NET, Some(cfg.lambda_range()))
    }

    /// The same architecture without the λ input, trained with the
    /// conventional separation loss.
    pub fn unconditioned(cfg: &ModelConfig) -> Result<Self, ModelError> {
        Self::build(cfg, group::SE_NET, None)
    }

    fn build(cfg: &ModelConfig, prefix: &'static str, lambda_range: Option<(f64, f64)>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let rate = cfg.mel.sample_rate as f64;
        let win = (cfg.snri_net.window_ms * rate / 1000.0).round() as usize;
        let hop = (cfg.snri_net.hop_ms * rate / 1000.0).round() as usize;
        if hop == 0 || win < hop {
            return Err(ModelError::InvalidConfig(format!("encoder window {win} / hop {hop} samples")));
        }
        Ok(Self { cfg: cfg.snri_net, prefix, lambda_range, win, hop })
    }

    pub fn prefix(&self) -> &'static str {
        self.prefix
    }

    pub fn is_conditioned(&self) -> bool {
        self.lambda_range.is_some()
    }

    pub fn window(&self) -> usize {
        self.win
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    fn name(&self, n: &str) -> String {
        format!("{}{n}", self.prefix)
    }

    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let c = &self.cfg;
        let width = c.bottleneck + usize::from(self.is_conditioned());
        let mut p = ParamSet::new();
        p.insert_normal(&self.name("enc_w"), &[self.win, c.encoder_basis], self.win, 2f64.sqrt(), rng);
        init_dense(&mut p, &self.name("bottleneck_"), c.encoder_basis, c.bottleneck, 1.0, rng);
        init_stack(&mut p, self.prefix, c.n_blocks, width, c.hidden, rng);
        init_dense(&mut p, &self.name("mask_"), width, 2 * c.encoder_basis, 1.0, rng);
        p.insert_normal(&self.name("dec_w"), &[c.encoder_basis, self.win], c.encoder_basis, 1.0, rng);
        p
    }

    /// Frames covering `len` samples, and the right padding that makes the
    /// decoder's overlap-add reach the last sample.
    fn framing(&self, len: usize) -> (usize, usize) {
        let frames = (len - self.win).div_ceil(self.hop) + 1;
        (frames, (frames - 1) * self.hop + self.win - len)
    }

    /// `x: (T, 1)`, `lambda: (1, 1)` in dB for the conditioned network.
    /// Returns the consistent pair `(y1, y2)`, each `(T, 1)`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var, lambda: Option<Var>) -> Result<(Var, Var), ModelError> {
        let len = g.value(x).shape()[0];
        if len < self.win {
            return Err(ModelError::TooShort { len, win: self.win });
        }
        let (frames, pad_right) = self.framing(len);
        let spec = Conv1dSpec { kernel: self.win, stride: self.hop, dilation: 1, pad_left: 0, pad_right };
        let enc_w = b.var(&self.name("enc_w"))?;
        let enc = g.conv1d(x, enc_w, spec)?;
        let enc = g.relu(enc)?;

        let h = g.layer_norm(enc)?;
        let mut h = dense(g, b, &self.name("bottleneck_"), h)?;
        match (self.lambda_range, lambda) {
            (Some((lo, hi)), Some(lambda)) => {
                let scaled = g.affine(lambda, 1.0 / (hi - lo), -lo / (hi - lo))?;
                let column = g.expand_rows(scaled, frames)?;
                h = g.concat(&[h, column], 1)?;
            }
            (None, None) => {}
            (Some(_), None) => return Err(ModelError::InvalidConfig("conditioned network needs a target".into())),
            (None, Some(_)) => return Err(ModelError::InvalidConfig("unconditioned network takes no target".into())),
        }
        let h = stack(g, b, self.prefix, self.cfg.n_blocks, h)?;
        let masks = dense(g, b, &self.name("mask_"), h)?;
        let masks = g.sigmoid(masks)?;
        let d = self.cfg.encoder_basis;
        let dec_w = b.var(&self.name("dec_w"))?;
        let mut decoded = [x; 2];
        for (i, out) in decoded.iter_mut().enumerate() {
            let m = g.slice(masks, 1, i * d, d)?;
            let masked = g.mul(enc, m)?;
            let y = g.conv_transpose1d(masked, dec_w, self.win, self.hop)?;
            *out = g.slice(y, 0, 0, len)?;
        }
        let [y1, y2] = decoded;

        // Mixture consistency: share x − (y1 + y2) between the two outputs.
        let sum = g.add(y1, y2)?;
        let residual = g.sub(x, sum)?;
        let zeta = g.scalar(self.cfg.zeta);
        let share = g.mul(residual, zeta)?;
        let y1 = g.add(y1, share)?;
        let y2 = g.sub(x, y1)?;
        Ok((y1, y2))
    }

    /// Inference on a plain signal.
    pub fn enhance(&self, params: &ParamSet, x: &[f64], lambda_db: Option<f64>) -> Result<SeparatedPair, ModelError> {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let xv = g.constant(Tensor::column(x.to_vec()));
        let lambda = lambda_db.map(|l| g.constant(Tensor::full(&[1, 1], l)));
        let (y1, y2) = self.forward(&mut g, &b, xv, lambda)?;
        Ok(SeparatedPair::new(g.value(y1).data().to_vec(), g.value(y2).data().to_vec())?)
    }
}
