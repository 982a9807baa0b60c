//! Finite-difference verification of the analytic backward pass.
//!
//! The numeric side only ever calls the forward pass, so it shares no code
//! with the gradient it checks.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{gradients, init_params, ModelConfig, Parameters};
use crate::error::ModelError;
use crate::seeds;
use crate::vocab::TokenId;

/// Central-difference step, applied in double precision.
pub const FD_STEP: f64 = 1e-3;

/// Below this magnitude both gradients are treated as zero and compared
/// absolutely; keeps round-off on exactly-zero coordinates (e.g. key biases,
/// whose gradient vanishes by softmax shift invariance) from dominating.
pub const ABS_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        return 0.0;
    }
    (analytic - numeric).abs() / scale
}

pub type Batch = Vec<(Vec<TokenId>, Vec<f64>)>;

/// Fourth-order central differences of the mean weighted NLL of `batch`:
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
pub fn finite_difference(p: &Parameters, batch: &[(Vec<TokenId>, Vec<f64>)], step: f64) -> Result<Vec<f64>, ModelError> {
    let total: f64 = batch.iter().flat_map(|(_, w)| w).sum();
    if total == 0.0 {
        return Ok(vec![0.0; p.count()]);
    }
    let loss = |q: &Parameters| -> Result<f64, ModelError> {
        let mut s = 0.0;
        for (ids, w) in batch {
            s += q.weighted_nll(ids, w)?;
        }
        Ok(s / total)
    };
    let mut q = p.clone();
    let mut out = Vec::with_capacity(p.count());
    for i in 0..p.count() {
        let x = q.data()[i];
        let mut at = |dx: f64| -> Result<f64, ModelError> {
            q.data_mut()[i] = x + dx;
            loss(&q)
        };
        let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
        q.data_mut()[i] = x;
        out.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckCase {
    pub config: ModelConfig,
    pub n_params: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
    pub max_relative_error: f64,
}

/// Std of the Gaussian noise added on top of the initialisation.
pub const PERTURB_STD: f64 = 0.3;

/// Random small instance: config, perturbed parameters and a masked batch.
pub fn random_case(seed: u64, index: u64) -> (Parameters, Batch) {
    let mut rng = seeds::indexed_rng(seed, "gradcheck", index);
    let d_model = [4usize, 6, 8][rng.gen_range(0..3)];
    let n_heads = if d_model % 2 == 0 && rng.gen_bool(0.5) { 2 } else { 1 };
    let config = ModelConfig {
        vocab_size: rng.gen_range(6..=16),
        context_len: rng.gen_range(6..=10),
        d_model,
        n_heads,
        n_layers: rng.gen_range(1..=2),
        init_seed: rng.gen(),
    };
    let mut p = init_params(&config).expect("generated config is valid");
    for x in p.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *x += PERTURB_STD * z;
    }
    let n_seq = rng.gen_range(1..=3);
    let batch = (0..n_seq)
        .map(|_| {
            let len = rng.gen_range(2..=config.context_len);
            let ids: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..config.vocab_size as TokenId)).collect();
            let mut w: Vec<f64> = (0..len).map(|t| if t > 0 && rng.gen_bool(0.7) { 1.0 } else { 0.0 }).collect();
            w[len - 1] = 1.0;
            (ids, w)
        })
        .collect();
    (p, batch)
}

pub fn check_case(p: &Parameters, batch: &[(Vec<TokenId>, Vec<f64>)]) -> Result<GradcheckCase, ModelError> {
    let analytic = gradients(p, batch)?.grad;
    let numeric = finite_difference(p, batch, FD_STEP)?;
    let (worst_index, max_relative_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradcheckCase { config: p.config().clone(), n_params: p.count(), max_relative_error, worst_index })
}

pub fn run_gradcheck(n_cases: usize, seed: u64) -> Result<GradcheckReport, ModelError> {
    let cases = (0..n_cases as u64)
        .map(|i| {
            let (p, batch) = random_case(seed, i);
            check_case(&p, &batch)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let max_relative_error = cases.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
    Ok(GradcheckReport { cases, max_relative_error })
}
