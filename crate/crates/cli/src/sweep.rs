//! Hyperparameter sweeps: initial curvature and block count. Each sweep
//! value trains a fresh model with the shared seed and dataset, then
//! evaluates; results come back as summary rows.

use hyperssm_core::data::DatasetManifest;
use hyperssm_core::model::{count_params, ModelConfig};

use crate::config::TrainSettings;
use crate::error::{CliError, CliResult};
use crate::train::{evaluate, train_loop};

/// One curvature-sweep row.
#[derive(Debug, Clone)]
pub struct CurvatureRow {
    pub k0: f64,
    pub eval_acc: f64,
}

/// One block-count-sweep row.
#[derive(Debug, Clone)]
pub struct BlocksRow {
    pub n_blocks: usize,
    pub eval_acc: f64,
    pub param_count: usize,
}

/// Trains one model per `k0` (shared seed and data) and reports final
/// evaluation accuracy per value.
pub fn sweep_curvature(
    k0s: &[f64],
    base_cfg: &ModelConfig,
    train: &TrainSettings,
    manifest: &DatasetManifest,
    eval_manifest: &DatasetManifest,
    seed: u64,
) -> CliResult<Vec<CurvatureRow>> {
    if k0s.is_empty() {
        return Err(CliError::Usage("need at least one k0 value".into()));
    }
    if let Some(&bad) = k0s.iter().find(|&&k| k >= 0.0 || !k.is_finite()) {
        return Err(CliError::Usage(format!(
            "initial curvature must be negative, got {bad}"
        )));
    }
    let mut rows = Vec::with_capacity(k0s.len());
    for &k0 in k0s {
        let mut cfg = base_cfg.clone();
        cfg.k0 = k0;
        let out = train_loop(manifest, cfg, train, seed, None, None, None)?;
        let report = evaluate(&out.model, eval_manifest, train.batch_size)?;
        rows.push(CurvatureRow {
            k0,
            eval_acc: report.overall,
        });
    }
    Ok(rows)
}

/// Trains one model per block count and reports final evaluation accuracy
/// and the learnable-parameter count. `n = 0` removes the per-modality
/// sequence stacks entirely (the fusion block remains).
pub fn sweep_blocks(
    ns: &[usize],
    base_cfg: &ModelConfig,
    train: &TrainSettings,
    manifest: &DatasetManifest,
    eval_manifest: &DatasetManifest,
    seed: u64,
) -> CliResult<Vec<BlocksRow>> {
    if ns.is_empty() {
        return Err(CliError::Usage("need at least one block count".into()));
    }
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let mut cfg = base_cfg.clone();
        cfg.n_blocks = n;
        let params = count_params(&cfg).total;
        let out = train_loop(manifest, cfg, train, seed, None, None, None)?;
        let report = evaluate(&out.model, eval_manifest, train.batch_size)?;
        rows.push(BlocksRow {
            n_blocks: n,
            eval_acc: report.overall,
            param_count: params,
        });
    }
    Ok(rows)
}
