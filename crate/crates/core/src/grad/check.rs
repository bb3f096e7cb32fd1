//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Bound, GradError, Graph, ParamSet, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Perturbation half-width.
    pub h: f64,
    /// Largest acceptable relative error.
    pub tol: f64,
    /// Denominator floor for the relative error, so coordinates with a
    /// vanishing gradient are judged on absolute error.
    pub abs_floor: f64,
    /// Coordinates sampled per parameter tensor; smaller tensors are checked
    /// exhaustively.
    pub max_coords: usize,
    pub seed: u64,
    /// Hold every `stop_gradient` output at its unperturbed value while
    /// probing. Without this, parameters behind a barrier are excluded.
    pub freeze_barriers: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-4, abs_floor: 1e-6, max_coords: 16, seed: 0, freeze_barriers: false }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    /// Parameters skipped because a barrier sits between them and the loss.
    pub excluded: Vec<String>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the analytic gradient of `build` against central differences.
///
/// `build` must construct the same graph for every parameter value it is
/// handed; it is called once for the analytic pass and twice per probed
/// coordinate.
pub fn grad_check<F, E>(params: &ParamSet, build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var, E>,
    E: From<GradError>,
{
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, true);
    let loss = build(&mut graph, &bound)?;
    let barrier_values = graph.barrier_values().to_vec();
    let barriered: Vec<String> = {
        let behind = graph.barriered_leaves(loss);
        bound.iter().filter(|(_, v)| behind.contains(v)).map(|(k, _)| k.clone()).collect()
    };
    let mut grads = graph.backward(loss)?;
    let analytic = bound.collect(&mut grads);

    let eval = |p: &ParamSet| -> Result<f64, E> {
        let mut g = if cfg.freeze_barriers {
            Graph::with_frozen_barriers(barrier_values.clone())
        } else {
            Graph::new()
        };
        let b = p.bind(&mut g, false);
        let l = build(&mut g, &b)?;
        Ok(g.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        params: Vec::new(),
        excluded: Vec::new(),
        max_rel_error: 0.0,
        tol: cfg.tol,
        passed: true,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        if !cfg.freeze_barriers && barriered.contains(name) {
            report.excluded.push(name.clone());
            continue;
        }
        let grad = &analytic[name];
        let n = tensor.numel();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut entry = ParamCheck {
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &coords {
            let original = tensor.data()[i];
            probe.get_mut(name).expect("same names").data_mut()[i] = original + cfg.h;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("same names").data_mut()[i] = original - cfg.h;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("same names").data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            if rel >= entry.max_rel_error {
                entry.max_rel_error = rel;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.max_rel_error = report.max_rel_error.max(entry.max_rel_error);
        report.params.push(entry);
    }
    report.passed = report.max_rel_error <= cfg.tol;
    Ok(report)
}
