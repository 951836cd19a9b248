//! Adam optimizer with bias correction and global-norm gradient clipping.

use hyperssm_core::params::ParamSet;
use hyperssm_core::tensor::Tensor;
use hyperssm_core::Tensor64;

use crate::error::{CliError, CliResult};

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment accumulators, aligned with the
/// registration order of the `ParamSet` they were built from.
pub struct OptimState {
    pub cfg: AdamConfig,
    pub step: usize,
    m: Vec<Tensor64>,
    v: Vec<Tensor64>,
}

impl OptimState {
    pub fn new(params: &ParamSet<f64>, cfg: AdamConfig) -> Self {
        let zeros: Vec<Tensor64> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Scales all gradients by `max_norm / norm` when the global Euclidean
/// norm exceeds `max_norm`. Returns `(global_norm, clipped)`.
pub fn clip_global_norm(grads: &mut [Tensor64], max_norm: f64) -> (f64, bool) {
    let norm_sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| x * x)
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
        (norm, true)
    } else {
        (norm, false)
    }
}

/// One Adam update over all parameters, in registration order. Gradients
/// must align with the parameter set; a non-finite gradient aborts with
/// the parameter's name.
pub fn adam_step(
    params: &mut ParamSet<f64>,
    grads: &[Tensor64],
    state: &mut OptimState,
) -> CliResult<()> {
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    if grads.len() != names.len() {
        return Err(CliError::Usage(format!(
            "gradient count {} does not match parameter count {}",
            grads.len(),
            names.len()
        )));
    }
    for (name, g) in names.iter().zip(grads) {
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(CliError::NonFiniteGrad {
                step: state.step,
                param: name.clone(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c = state.cfg;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);

    for (i, (_, param)) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = param.data_mut();
        for j in 0..p.len() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}
