//! Two-stream cross-fusion block.
//!
//! Audio and visual token sequences run through modality-specific scan
//! pipelines; both scan outputs are gated by a single SiLU gate derived
//! from the normalized visual stream (configurably the audio stream, for
//! ablation), summed, and projected back per modality with residuals. The
//! shared gate and the cross-injected sum are what move information across
//! modalities.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{register_linear, BoundParams, ParamSet};
use crate::real::Real;
use crate::ssm::{
    bind_layer_norm, bind_scan_core, layer_norm_t, register_layer_norm, register_scan_core,
    scan_core_t, LayerNormVars, ScanCoreVars, SsmDims,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which stream the shared gate is derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSource {
    /// Gate from the normalized visual stream (the default).
    #[default]
    Visual,
    /// Gate from the normalized audio stream (ablation).
    Audio,
}

/// One modality's tape handles inside the fusion block.
pub struct ModalityVars {
    pub ln: LayerNormVars,
    pub in_w: Var,
    pub in_b: Var,
    pub core: ScanCoreVars,
    pub out_w: Var,
    pub out_b: Var,
}

/// Tape handles of the whole fusion block.
pub struct CrossFusionVars {
    pub audio: ModalityVars,
    pub visual: ModalityVars,
    pub gate_w: Var,
    pub gate_b: Var,
}

/// Forward handles: both residual outputs plus the shared gate node
/// (exposed so provenance properties are directly observable).
pub struct CrossFusionOut {
    pub audio: Var,
    pub visual: Var,
    pub gate: Var,
}

/// Registers fusion-block parameters under `prefix`: per-modality layer
/// norm, input projection, scan core, and output projection, plus the
/// shared gate projection.
pub fn register_cross_fusion<F: Real>(
    params: &mut ParamSet<F>,
    prefix: &str,
    dims: &SsmDims,
    rng: &mut impl Rng,
) -> Result<()> {
    dims.validate()?;
    let (c, m) = (dims.channels, dims.inner);
    for modality in ["audio", "visual"] {
        let p = format!("{prefix}.{modality}");
        register_layer_norm(params, &format!("{p}.ln"), c)?;
        register_linear(params, &format!("{p}.in"), c, m, rng)?;
        register_scan_core(params, &p, dims, rng)?;
        register_linear(params, &format!("{p}.out"), m, c, rng)?;
    }
    register_linear(params, &format!("{prefix}.gate"), c, m, rng)
}

pub fn bind_cross_fusion<F: Real>(
    tape: &mut Tape<F>,
    bound: &BoundParams,
    prefix: &str,
) -> Result<CrossFusionVars> {
    let modality = |tape: &mut Tape<F>, name: &str| -> Result<ModalityVars> {
        let p = format!("{prefix}.{name}");
        Ok(ModalityVars {
            ln: bind_layer_norm(bound, &format!("{p}.ln"))?,
            in_w: bound.var(&format!("{p}.in.weight"))?,
            in_b: bound.var(&format!("{p}.in.bias"))?,
            core: bind_scan_core(tape, bound, &p)?,
            out_w: bound.var(&format!("{p}.out.weight"))?,
            out_b: bound.var(&format!("{p}.out.bias"))?,
        })
    };
    Ok(CrossFusionVars {
        audio: modality(tape, "audio")?,
        visual: modality(tape, "visual")?,
        gate_w: bound.var(&format!("{prefix}.gate.weight"))?,
        gate_b: bound.var(&format!("{prefix}.gate.bias"))?,
    })
}

/// Fusion-block forward. Both inputs are `(B, N, C)` with equal shapes.
pub fn cross_fusion_t<F: Real>(
    tape: &mut Tape<F>,
    t_audio: Var,
    t_visual: Var,
    p: &CrossFusionVars,
    gate_source: GateSource,
) -> Result<CrossFusionOut> {
    let (sa, sv) = (tape.shape(t_audio).to_vec(), tape.shape(t_visual).to_vec());
    if sa != sv || sa.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "cross_fusion",
            lhs: sa,
            rhs: sv,
        });
    }

    let normed_a = layer_norm_t(tape, t_audio, p.audio.ln.gamma, p.audio.ln.beta)?;
    let normed_v = layer_norm_t(tape, t_visual, p.visual.ln.gamma, p.visual.ln.beta)?;

    let xa = tape.linear(normed_a, p.audio.in_w, p.audio.in_b)?;
    let xv = tape.linear(normed_v, p.visual.in_w, p.visual.in_b)?;
    let ya = scan_core_t(tape, xa, &p.audio.core)?;
    let yv = scan_core_t(tape, xv, &p.visual.core)?;

    let gate_input = match gate_source {
        GateSource::Visual => normed_v,
        GateSource::Audio => normed_a,
    };
    let z = tape.linear(gate_input, p.gate_w, p.gate_b)?;
    let gate = tape.silu(z)?;

    let gated_a = tape.mul(ya, gate)?;
    let gated_v = tape.mul(yv, gate)?;
    let summed = tape.add(gated_a, gated_v)?;

    let out_a = tape.linear(summed, p.audio.out_w, p.audio.out_b)?;
    let out_a = tape.add(out_a, t_audio)?;
    let out_v = tape.linear(summed, p.visual.out_w, p.visual.out_b)?;
    let out_v = tape.add(out_v, t_visual)?;

    Ok(CrossFusionOut {
        audio: out_a,
        visual: out_v,
        gate,
    })
}

/// Value-level fusion forward over parameters registered under `prefix`.
pub fn cross_fusion_forward<F: Real>(
    t_audio: &Tensor<F>,
    t_visual: &Tensor<F>,
    params: &ParamSet<F>,
    prefix: &str,
    gate_source: GateSource,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let vars = bind_cross_fusion(&mut tape, &bound, prefix)?;
    let a = tape.constant(t_audio.clone());
    let v = tape.constant(t_visual.clone());
    let out = cross_fusion_t(&mut tape, a, v, &vars, gate_source)?;
    Ok((tape.value(out.audio).clone(), tape.value(out.visual).clone()))
}
