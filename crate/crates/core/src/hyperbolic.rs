//! Poincare-ball geometry with adaptive curvature and the similarity
//! alignment loss.
//!
//! Conventions: for curvature `k < 0` the ball has radius `1/sqrt(|k|)`,
//! points are kept at norm at most `(1 - eps)/sqrt(|k|)` with a fixed
//! `eps = 1e-5`, and log/exp maps are taken at the origin. Tangent-space
//! similarity matrices are normalized row-wise by default (Frobenius
//! normalization is selectable).
//!
//! Every operation exists in two forms: a typed value-level form over
//! [`PoincarePoint`]/[`TangentVector`] (used for geometry identities), and
//! a tape form (`*_t`) that builds the differentiable loss pipeline.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{ReduceMode, Tape, UnaryFn, Var};
use crate::tensor::Tensor;

/// Default interior margin of the ball.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Guard applied to the inverse-tanh argument for points that were
/// produced by projection (already interior); raw tensors outside the
/// domain error instead.
const ATANH_CLAMP: f64 = 1.0 - 1e-12;

/// Normalization applied to similarity matrices before differencing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityNorm {
    /// Each row scaled to unit Euclidean norm (default).
    #[default]
    RowL2,
    /// Whole matrix scaled to unit Frobenius norm.
    Frobenius,
}

/// Negative-curvature context: the realized curvature `k`, the interior
/// margin `eps`, and the initial curvature `k0` the adaptive module
/// shrinks from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curvature<F> {
    k: F,
    eps: F,
    k0: F,
}

impl<F: Real> Curvature<F> {
    /// Fixed curvature with the default interior margin.
    pub fn new(k: F, k0: F) -> Result<Self> {
        Self::with_eps(k, k0, F::of(DEFAULT_EPS))
    }

    pub fn with_eps(k: F, k0: F, eps: F) -> Result<Self> {
        if !(k < F::zero() && k.is_finite()) {
            return Err(Error::InvalidArgument {
                detail: format!("curvature must be negative and finite, got {k}"),
            });
        }
        if !(k0 < F::zero() && k0.is_finite()) {
            return Err(Error::InvalidArgument {
                detail: format!("initial curvature must be negative, got {k0}"),
            });
        }
        if !(eps > F::zero() && eps < F::of(1e-2)) {
            return Err(Error::InvalidArgument {
                detail: format!("eps must lie in (0, 1e-2), got {eps}"),
            });
        }
        Ok(Self { k, eps, k0 })
    }

    /// Curvature produced by the adaptive module; must lie strictly
    /// inside `(k0, 0)`.
    pub fn adaptive(k: F, k0: F) -> Result<Self> {
        let c = Self::new(k, k0)?;
        if k <= k0 {
            return Err(Error::InvalidArgument {
                detail: format!("adaptive curvature {k} not strictly inside ({k0}, 0)"),
            });
        }
        Ok(c)
    }

    pub fn k(&self) -> F {
        self.k
    }

    pub fn k0(&self) -> F {
        self.k0
    }

    pub fn eps(&self) -> F {
        self.eps
    }

    pub fn abs_k(&self) -> F {
        -self.k
    }

    pub fn sqrt_abs_k(&self) -> F {
        (-self.k).sqrt()
    }

    /// Ball radius `1/sqrt(|k|)`.
    pub fn radius(&self) -> F {
        F::one() / self.sqrt_abs_k()
    }

    /// Largest admissible point norm, `(1 - eps)/sqrt(|k|)`.
    pub fn max_norm(&self) -> F {
        (F::one() - self.eps) / self.sqrt_abs_k()
    }
}

/// Point(s) on the Poincare ball. The last axis holds coordinates;
/// leading axes are batch. Construction goes through [`project_to_ball`]
/// or a validating [`PoincarePoint::new`], so values always satisfy the
/// interior bound.
#[derive(Debug, Clone, PartialEq)]
pub struct PoincarePoint<F> {
    v: Tensor<F>,
    curvature: Curvature<F>,
}

impl<F: Real> PoincarePoint<F> {
    /// Validates the interior bound per row.
    pub fn new(v: Tensor<F>, curvature: Curvature<F>) -> Result<Self> {
        let max = curvature.max_norm();
        for (row, norm) in row_norms(&v) {
            if norm > max {
                return Err(Error::Domain {
                    op: "poincare_point",
                    detail: format!("row {row} has norm {norm} > bound {max}"),
                });
            }
        }
        Ok(Self { v, curvature })
    }

    pub fn coords(&self) -> &Tensor<F> {
        &self.v
    }

    pub fn curvature(&self) -> &Curvature<F> {
        &self.curvature
    }

    /// Pointwise negation (stays on the ball).
    pub fn negate(&self) -> Self {
        Self {
            v: self.v.map("neg", |x| -x).expect("negation preserves finiteness"),
            curvature: self.curvature,
        }
    }
}

/// Tangent vector(s) at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector<F> {
    v: Tensor<F>,
    curvature: Curvature<F>,
}

impl<F: Real> TangentVector<F> {
    pub fn new(v: Tensor<F>, curvature: Curvature<F>) -> Result<Self> {
        v.ensure_finite("tangent_vector")?;
        Ok(Self { v, curvature })
    }

    pub fn coords(&self) -> &Tensor<F> {
        &self.v
    }

    pub fn curvature(&self) -> &Curvature<F> {
        &self.curvature
    }

    /// Conformal factor `lambda_k(z) = 2/(1 - |k| ||z||^2)` of the metric
    /// at a base point `z`; equals 2 at the origin.
    pub fn conformal_factor(curvature: &Curvature<F>, z: &Tensor<F>) -> F {
        let norm_sq = z.data().iter().map(|&x| x * x).fold(F::zero(), |a, b| a + b);
        F::of(2.0) / (F::one() - curvature.abs_k() * norm_sq)
    }
}

/// Batch cosine-similarity matrix in tangent space.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<F> {
    w: Tensor<F>,
}

impl<F: Real> SimilarityMatrix<F> {
    pub fn matrix(&self) -> &Tensor<F> {
        &self.w
    }

    pub fn order(&self) -> usize {
        self.w.shape()[0]
    }
}

fn row_norms<F: Real>(v: &Tensor<F>) -> impl Iterator<Item = (usize, F)> + '_ {
    let d = *v.shape().last().unwrap_or(&1);
    let rows = if d == 0 { 0 } else { v.numel() / d };
    (0..rows).map(move |r| {
        let row = &v.data()[r * d..(r + 1) * d];
        (
            r,
            row.iter().map(|&x| x * x).fold(F::zero(), |a, b| a + b).sqrt(),
        )
    })
}

/// Projects rows into the ball: rows already inside pass through
/// unchanged, rows outside are rescaled to the boundary margin with the
/// direction preserved.
pub fn project_to_ball<F: Real>(x: &Tensor<F>, c: &Curvature<F>) -> Result<PoincarePoint<F>> {
    x.ensure_finite("project_to_ball")?;
    let max = c.max_norm();
    let d = *x.shape().last().unwrap_or(&1);
    let mut data = x.data().to_vec();
    for (r, norm) in row_norms(x) {
        if norm > max {
            let s = max / norm;
            for v in &mut data[r * d..(r + 1) * d] {
                *v *= s;
            }
        }
    }
    Ok(PoincarePoint {
        v: Tensor::new(x.shape().to_vec(), data)?,
        curvature: *c,
    })
}

/// Möbius addition `z (+) x` with shared curvature, re-projected to guard
/// against roundoff drifting outside the ball.
pub fn mobius_add<F: Real>(
    z: &PoincarePoint<F>,
    x: &PoincarePoint<F>,
) -> Result<PoincarePoint<F>> {
    if z.curvature != x.curvature {
        return Err(Error::CurvatureMismatch {
            lhs: z.curvature.k().as_f64(),
            rhs: x.curvature.k().as_f64(),
        });
    }
    if z.v.shape() != x.v.shape() {
        return Err(Error::ShapeMismatch {
            op: "mobius_add",
            lhs: z.v.shape().to_vec(),
            rhs: x.v.shape().to_vec(),
        });
    }
    let ak = z.curvature.abs_k();
    let d = *z.v.shape().last().unwrap_or(&1);
    let rows = z.v.numel() / d.max(1);
    let mut out = vec![F::zero(); z.v.numel()];
    for r in 0..rows {
        let zr = &z.v.data()[r * d..(r + 1) * d];
        let xr = &x.v.data()[r * d..(r + 1) * d];
        let dot = zr
            .iter()
            .zip(xr)
            .map(|(&a, &b)| a * b)
            .fold(F::zero(), |p, q| p + q);
        let zn = zr.iter().map(|&a| a * a).fold(F::zero(), |p, q| p + q);
        let xn = xr.iter().map(|&a| a * a).fold(F::zero(), |p, q| p + q);
        let two = F::of(2.0);
        let coeff_z = F::one() + two * ak * dot + ak * xn;
        let coeff_x = F::one() - ak * zn;
        let den = F::one() + two * ak * dot + ak * ak * zn * xn;
        for j in 0..d {
            out[r * d + j] = (coeff_z * zr[j] + coeff_x * xr[j]) / den;
        }
    }
    let raw = Tensor::new(z.v.shape().to_vec(), out)?;
    project_to_ball(&raw, &z.curvature)
}

fn log_rows<F: Real>(
    v: &Tensor<F>,
    c: &Curvature<F>,
    clamp: bool,
) -> Result<Tensor<F>> {
    let sqrt_k = c.sqrt_abs_k();
    let d = *v.shape().last().unwrap_or(&1);
    let mut data = v.data().to_vec();
    for (r, norm) in row_norms(v) {
        if norm == F::zero() {
            continue; // removable singularity: the origin maps to itself
        }
        let mut arg = sqrt_k * norm;
        if arg >= F::one() {
            if clamp {
                arg = F::of(ATANH_CLAMP);
            } else {
                return Err(Error::Domain {
                    op: "log_map_zero",
                    detail: format!("row {r}: inverse tanh argument {arg} >= 1"),
                });
            }
        }
        let coeff = arg.atanh() / (sqrt_k * norm);
        for x in &mut data[r * d..(r + 1) * d] {
            *x *= coeff;
        }
    }
    Tensor::new(v.shape().to_vec(), data)
}

/// Origin log map of a projected point. Interiority is guaranteed by the
/// [`PoincarePoint`] type, so the inverse-tanh argument is clamped against
/// roundoff rather than errored.
pub fn log_map_zero<F: Real>(x: &PoincarePoint<F>) -> Result<TangentVector<F>> {
    Ok(TangentVector {
        v: log_rows(&x.v, &x.curvature, true)?,
        curvature: x.curvature,
    })
}

/// Origin log map of a raw tensor: rows with `sqrt(|k|)·norm >= 1` are a
/// domain error rather than being silently clamped.
pub fn log_map_zero_raw<F: Real>(v: &Tensor<F>, c: &Curvature<F>) -> Result<TangentVector<F>> {
    v.ensure_finite("log_map_zero")?;
    Ok(TangentVector {
        v: log_rows(v, c, false)?,
        curvature: *c,
    })
}

/// Origin exp map, the inverse of [`log_map_zero`]. The result is
/// re-projected so the interior bound holds even for very long tangents.
pub fn exp_map_zero<F: Real>(v: &TangentVector<F>) -> Result<PoincarePoint<F>> {
    let sqrt_k = v.curvature.sqrt_abs_k();
    let d = *v.v.shape().last().unwrap_or(&1);
    let mut data = v.v.data().to_vec();
    for (r, norm) in row_norms(&v.v) {
        if norm == F::zero() {
            continue;
        }
        let arg = sqrt_k * norm;
        let coeff = arg.tanh() / arg;
        for x in &mut data[r * d..(r + 1) * d] {
            *x *= coeff;
        }
    }
    let raw = Tensor::new(v.v.shape().to_vec(), data)?;
    project_to_ball(&raw, &v.curvature)
}

/// Cosine-similarity matrix of batch features `(B, D)`, `B >= 2`.
/// Zero-norm rows are a degenerate-feature error.
pub fn cosine_similarity_matrix<F: Real>(feats: &Tensor<F>) -> Result<SimilarityMatrix<F>> {
    let mut tape = Tape::new();
    let f = tape.constant(feats.clone());
    let w = cosine_similarity_t(&mut tape, f)?;
    Ok(SimilarityMatrix {
        w: tape.value(w).clone(),
    })
}

/// Adaptive curvature from batch features: `k = k0 * sigmoid(w·K + b)`
/// where `K` concatenates the batch/time means of the two modalities.
pub fn adaptive_curvature<F: Real>(
    a: &Tensor<F>,
    v: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    k0: F,
) -> Result<Curvature<F>> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let vv = tape.constant(v.clone());
    let w = tape.constant(weight.clone());
    let b = tape.constant(bias.clone());
    let k = adaptive_curvature_t(&mut tape, av, vv, w, b, k0)?;
    Curvature::adaptive(tape.value(k).item()?, k0)
}

/// Alignment loss between two modality feature stacks `(B, T, H)` under a
/// fixed curvature. See [`alignment_loss_t`] for the pipeline.
pub fn alignment_loss<F: Real>(
    v_feats: &Tensor<F>,
    a_feats: &Tensor<F>,
    c: &Curvature<F>,
    norm: SimilarityNorm,
) -> Result<F> {
    let mut tape = Tape::new();
    let vv = tape.constant(v_feats.clone());
    let av = tape.constant(a_feats.clone());
    let k = tape.constant(Tensor::scalar(c.k())?);
    let loss = alignment_loss_t(&mut tape, vv, av, k, c.eps(), norm)?;
    tape.value(loss).item()
}

// ---------------------------------------------------------------------------
// Tape builders
// ---------------------------------------------------------------------------

/// `(1 - eps)/sqrt(-k)` as a one-element node.
pub fn ball_radius_t<F: Real>(tape: &mut Tape<F>, k: Var, eps: F) -> Result<Var> {
    let nk = tape.neg(k)?;
    let s = tape.sqrt(nk)?;
    let inv = tape.recip(s)?;
    tape.mul_scalar(inv, F::one() - eps)
}

/// Differentiable ball projection of `x` under curvature node `k`.
pub fn project_to_ball_t<F: Real>(tape: &mut Tape<F>, x: Var, k: Var, eps: F) -> Result<Var> {
    let radius = ball_radius_t(tape, k, eps)?;
    tape.ball_project(x, radius)
}

/// Differentiable origin log map of projected rows under curvature node `k`.
pub fn log_map_zero_t<F: Real>(tape: &mut Tape<F>, x: Var, k: Var) -> Result<Var> {
    let nk = tape.neg(k)?;
    let s = tape.sqrt(nk)?;
    let norms = tape.row_norm(x)?;
    let arg = tape.scale_by_scalar(norms, s)?;
    let ratio = tape.unary(arg, UnaryFn::AtanhRatio)?;
    tape.mul_rows(x, ratio)
}

/// Differentiable cosine-similarity matrix of `(B, D)` features.
pub fn cosine_similarity_t<F: Real>(tape: &mut Tape<F>, feats: Var) -> Result<Var> {
    let shape = tape.shape(feats).to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::InvalidArgument {
            detail: format!("cosine similarity needs a (B >= 2, D) batch, got {shape:?}"),
        });
    }
    let b = shape[0];
    let norms = tape.row_norm(feats)?;
    if let Some(row) = tape.value(norms).data().iter().position(|&n| n == F::zero()) {
        return Err(Error::DegenerateFeature { row });
    }
    let ft = tape.transpose(feats)?;
    let gram = tape.matmul(feats, ft)?;
    let col = tape.reshape(norms, vec![b, 1])?;
    let rowv = tape.reshape(norms, vec![1, b])?;
    let outer = tape.matmul(col, rowv)?;
    tape.div(gram, outer)
}

/// Normalizes a similarity matrix row-wise or by Frobenius norm.
pub fn normalize_similarity_t<F: Real>(
    tape: &mut Tape<F>,
    w: Var,
    mode: SimilarityNorm,
) -> Result<Var> {
    match mode {
        SimilarityNorm::RowL2 => {
            let norms = tape.row_norm(w)?;
            let inv = tape.recip(norms)?;
            tape.mul_rows(w, inv)
        }
        SimilarityNorm::Frobenius => {
            let n = tape.value(w).numel();
            let flat = tape.reshape(w, vec![n])?;
            let frob = tape.row_norm(flat)?;
            let inv = tape.recip(frob)?;
            tape.scale_by_scalar(w, inv)
        }
    }
}

/// Mean over all entries of the squared difference of two equal-shape
/// matrices: the final stage of the alignment loss.
pub fn mean_squared_difference_t<F: Real>(tape: &mut Tape<F>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    let n = tape.value(sq).numel();
    let flat = tape.reshape(sq, vec![n])?;
    tape.reduce(flat, 0, ReduceMode::Mean)
}

/// Differentiable adaptive curvature: batch/time means of each modality
/// are concatenated and passed through a one-output linear layer and a
/// sigmoid, scaled by `k0 < 0`.
///
/// The sigmoid output is squeezed into `[1e-12, 1 - 1e-12]` so the result
/// stays strictly inside `(k0, 0)` even when the sigmoid saturates in
/// floating point.
pub fn adaptive_curvature_t<F: Real>(
    tape: &mut Tape<F>,
    a: Var,
    v: Var,
    weight: Var,
    bias: Var,
    k0: F,
) -> Result<Var> {
    if k0 >= F::zero() {
        return Err(Error::InvalidArgument {
            detail: format!("initial curvature must be negative, got {k0}"),
        });
    }
    let (sa, sv) = (tape.shape(a).to_vec(), tape.shape(v).to_vec());
    if sa != sv || sa.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "adaptive_curvature",
            lhs: sa,
            rhs: sv,
        });
    }
    let h = sa[2];
    let mean_bt = |tape: &mut Tape<F>, x: Var| -> Result<Var> {
        let over_b = tape.mean_axis(x, 0)?;
        tape.mean_axis(over_b, 0)
    };
    let ma = mean_bt(tape, a)?;
    let mv = mean_bt(tape, v)?;
    let cat = tape.concat_last(ma, mv)?;
    let row = tape.reshape(cat, vec![1, 2 * h])?;
    let lin = tape.matmul(row, weight)?;
    let lin = tape.add_bias(lin, bias)?;
    let scalar = tape.reshape(lin, vec![])?;
    let sig = tape.sigmoid(scalar)?;
    let delta = F::of(1e-12);
    let squeezed = tape.mul_scalar(sig, F::one() - F::of(2.0) * delta)?;
    let squeezed = tape.add_scalar(squeezed, delta)?;
    tape.mul_scalar(squeezed, k0)
}

/// Differentiable alignment loss between two `(B, T, H)` feature stacks
/// under curvature node `k`:
/// time mean-pool -> ball projection -> origin log map -> per-modality
/// cosine similarity -> normalization -> mean squared entry difference.
pub fn alignment_loss_t<F: Real>(
    tape: &mut Tape<F>,
    v_feats: Var,
    a_feats: Var,
    k: Var,
    eps: F,
    norm: SimilarityNorm,
) -> Result<Var> {
    let (sv, sa) = (tape.shape(v_feats).to_vec(), tape.shape(a_feats).to_vec());
    if sv.len() != 3 || sa.len() != 3 || sv[0] != sa[0] || sv[0] < 2 {
        return Err(Error::ShapeMismatch {
            op: "alignment_loss",
            lhs: sv,
            rhs: sa,
        });
    }
    let radius = ball_radius_t(tape, k, eps)?;
    let tangent = |tape: &mut Tape<F>, feats: Var| -> Result<Var> {
        let pooled = tape.mean_axis(feats, 1)?;
        let projected = tape.ball_project(pooled, radius)?;
        log_map_zero_t(tape, projected, k)
    };
    let tv = tangent(tape, v_feats)?;
    let ta = tangent(tape, a_feats)?;
    let wv = cosine_similarity_t(tape, tv)?;
    let wa = cosine_similarity_t(tape, ta)?;
    let wvn = normalize_similarity_t(tape, wv, norm)?;
    let wan = normalize_similarity_t(tape, wa, norm)?;
    mean_squared_difference_t(tape, wvn, wan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn curv(k: f64) -> Curvature<f64> {
        Curvature::new(k, -0.1).unwrap()
    }

    #[test]
    fn projection_inside_is_identity_and_origin_fixed() {
        let c = curv(-1.0);
        let x = t(&[1, 2], &[0.3, 0.1]);
        let p = project_to_ball(&x, &c).unwrap();
        assert_eq!(p.coords(), &x);

        let zero = Tensor::zeros(vec![1, 2]);
        let p0 = project_to_ball(&zero, &c).unwrap();
        assert_eq!(p0.coords().data(), &[0.0, 0.0]);
    }

    #[test]
    fn projection_clips_to_margin_radius() {
        // k = -0.1, eps = 1e-5, ||x|| = 5: clipped norm is (1 - 1e-5)/sqrt(0.1).
        let c = curv(-0.1);
        let x = t(&[1, 2], &[5.0, 0.0]);
        let p = project_to_ball(&x, &c).unwrap();
        let expect = (1.0 - 1e-5) / 0.1f64.sqrt();
        assert!((p.coords().data()[0] - expect).abs() < 1e-12);
        assert_eq!(p.coords().data()[1], 0.0);
    }

    #[test]
    fn mobius_zero_left_identity() {
        let c = curv(-1.0);
        let z = project_to_ball(&Tensor::zeros(vec![1, 2]), &c).unwrap();
        let x = project_to_ball(&t(&[1, 2], &[0.3, -0.2]), &c).unwrap();
        let sum = mobius_add(&z, &x).unwrap();
        assert_eq!(sum.coords(), x.coords());
    }

    #[test]
    fn mobius_collinear_matches_scalar_oracle() {
        // Collinear points reduce to (a + b)/(1 + |k| a b).
        let c = curv(-1.0);
        let z = project_to_ball(&t(&[1, 2], &[0.3, 0.0]), &c).unwrap();
        let x = project_to_ball(&t(&[1, 2], &[0.2, 0.0]), &c).unwrap();
        let sum = mobius_add(&z, &x).unwrap();
        let oracle = (0.3 + 0.2) / (1.0 + 0.3 * 0.2);
        assert!((sum.coords().data()[0] - oracle).abs() < 1e-12);
        assert!((oracle - 0.471698).abs() < 1e-6);
    }

    #[test]
    fn mobius_additive_inverse_cancels() {
        let c = curv(-0.5);
        let x = project_to_ball(&t(&[1, 3], &[0.4, -0.3, 0.2]), &c).unwrap();
        let sum = mobius_add(&x, &x.negate()).unwrap();
        assert!(sum.coords().norm() < 1e-9);
    }

    #[test]
    fn mobius_curvature_mismatch_rejected() {
        let a = project_to_ball(&t(&[1, 2], &[0.1, 0.0]), &curv(-1.0)).unwrap();
        let b = project_to_ball(&t(&[1, 2], &[0.1, 0.0]), &curv(-0.5)).unwrap();
        assert!(matches!(
            mobius_add(&a, &b).unwrap_err(),
            Error::CurvatureMismatch { .. }
        ));
    }

    #[test]
    fn log_map_scalar_oracles() {
        let c = curv(-1.0);
        let x = project_to_ball(&t(&[1, 2], &[0.5, 0.0]), &c).unwrap();
        let tv = log_map_zero(&x).unwrap();
        assert!((tv.coords().data()[0] - 0.5f64.atanh()).abs() < 1e-12);

        // k = -0.25: sqrt(|k|) = 0.5, so the coefficient doubles.
        let c = curv(-0.25);
        let x = project_to_ball(&t(&[1, 2], &[1.0, 0.0]), &c).unwrap();
        let tv = log_map_zero(&x).unwrap();
        assert!((tv.coords().data()[0] - 2.0 * 0.5f64.atanh()).abs() < 1e-12);

        let zero = project_to_ball(&Tensor::zeros(vec![1, 2]), &c).unwrap();
        assert_eq!(log_map_zero(&zero).unwrap().coords().data(), &[0.0, 0.0]);
    }

    #[test]
    fn log_map_raw_boundary_is_domain_error() {
        let c = curv(-1.0);
        let err = log_map_zero_raw(&t(&[1, 2], &[1.0, 0.0]), &c).unwrap_err();
        assert!(matches!(err, Error::Domain { op: "log_map_zero", .. }));
    }

    #[test]
    fn exp_map_scalar_oracle_and_inverse() {
        let c = curv(-1.0);
        let v = TangentVector::new(t(&[1, 2], &[0.5f64.atanh(), 0.0]), c).unwrap();
        let p = exp_map_zero(&v).unwrap();
        assert!((p.coords().data()[0] - 0.5).abs() < 1e-12);

        let zero = TangentVector::new(Tensor::zeros(vec![1, 2]), c).unwrap();
        assert_eq!(exp_map_zero(&zero).unwrap().coords().data(), &[0.0, 0.0]);

        let x = project_to_ball(&t(&[1, 2], &[0.3, -0.6]), &c).unwrap();
        let rt = exp_map_zero(&log_map_zero(&x).unwrap()).unwrap();
        assert!(rt.coords().max_abs_diff(x.coords()).unwrap() < 1e-9);
    }

    #[test]
    fn conformal_factor_is_two_at_origin() {
        let c = curv(-1.0);
        let lambda = TangentVector::conformal_factor(&c, &Tensor::zeros(vec![2]));
        assert_eq!(lambda, 2.0);
        let lambda = TangentVector::conformal_factor(&c, &t(&[2], &[0.5, 0.0]));
        assert!((lambda - 2.0 / (1.0 - 0.25)).abs() < 1e-12);
    }

    #[test]
    fn cosine_similarity_oracles() {
        let id = cosine_similarity_matrix(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert!(id.matrix().max_abs_diff(&Tensor::eye(2)).unwrap() < 1e-12);

        let same = cosine_similarity_matrix(&t(&[2, 2], &[0.3, 0.4, 0.3, 0.4])).unwrap();
        assert!((same.matrix().data()[1] - 1.0).abs() < 1e-12);

        let w = cosine_similarity_matrix(&t(&[2, 2], &[1.0, 0.0, 1.0, 1.0])).unwrap();
        assert!((w.matrix().data()[1] - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn similarity_entries_bounded_and_unit_diagonal() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let b = 4;
            let f = Tensor::<f64>::uniform(vec![b, 5], -1.0, 1.0, &mut rng);
            let w = cosine_similarity_matrix(&f).unwrap();
            for i in 0..b {
                assert!((w.matrix().data()[i * b + i] - 1.0).abs() < 1e-9);
                for j in 0..b {
                    assert!(w.matrix().data()[i * b + j].abs() <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn cosine_similarity_rejects_zero_rows() {
        let err = cosine_similarity_matrix(&t(&[2, 2], &[1.0, 0.0, 0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::DegenerateFeature { row: 1 }));
    }

    #[test]
    fn adaptive_curvature_zero_weights_halves_k0() {
        let a = Tensor::zeros(vec![2, 3, 4]);
        let v = Tensor::zeros(vec![2, 3, 4]);
        let w = Tensor::<f64>::zeros(vec![8, 1]);
        let b = Tensor::zeros(vec![1]);
        let c = adaptive_curvature(&a, &v, &w, &b, -0.1).unwrap();
        assert!((c.k() + 0.05).abs() < 1e-12);
    }

    #[test]
    fn adaptive_curvature_saturation_stays_strict() {
        // Huge bias saturates the sigmoid; k must still be strictly
        // inside (k0, 0).
        let a = Tensor::zeros(vec![1, 1, 2]);
        let v = Tensor::zeros(vec![1, 1, 2]);
        let w = Tensor::zeros(vec![4, 1]);
        let k0 = -0.1f64;
        for bias in [500.0, -500.0] {
            let b = t(&[1], &[bias]);
            let c = adaptive_curvature(&a, &v, &w, &b, k0).unwrap();
            assert!(c.k() > k0 && c.k() < 0.0, "k = {} at bias {bias}", c.k());
        }
        // Large positive pre-activation drives k toward k0.
        let b = t(&[1], &[30.0]);
        let c = adaptive_curvature(&a, &v, &w, &b, k0).unwrap();
        assert!((c.k() - k0).abs() < 1e-9);
    }

    #[test]
    fn alignment_loss_identical_inputs_is_zero() {
        let f = t(&[2, 2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2]);
        let c = curv(-0.1);
        let l = alignment_loss(&f, &f, &c, SimilarityNorm::RowL2).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn alignment_loss_is_symmetric() {
        let a = t(&[2, 2, 2], &[0.1, 0.4, 0.2, 0.3, -0.2, 0.5, 0.3, 0.1]);
        let v = t(&[2, 2, 2], &[0.3, 0.1, -0.1, 0.2, 0.4, 0.2, 0.1, -0.3]);
        let c = curv(-0.1);
        let lav = alignment_loss(&a, &v, &c, SimilarityNorm::RowL2).unwrap();
        let lva = alignment_loss(&v, &a, &c, SimilarityNorm::RowL2).unwrap();
        assert!((lav - lva).abs() < 1e-15);
        assert!(lav >= 0.0);
    }

    #[test]
    fn injected_normalized_matrices_give_exact_mean() {
        // ((1-1)^2 + (0.5-0)^2 + (0.5-0)^2 + (1-1)^2) / 4 = 0.125.
        let mut tape = Tape::new();
        let wv = tape.constant(t(&[2, 2], &[1.0, 0.5, 0.5, 1.0]));
        let wa = tape.constant(Tensor::eye(2));
        let loss = mean_squared_difference_t(&mut tape, wv, wa).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.125);
    }

    #[test]
    fn frobenius_normalization_mode_runs() {
        let a = t(&[2, 2, 2], &[0.1, 0.4, 0.2, 0.3, -0.2, 0.5, 0.3, 0.1]);
        let v = t(&[2, 2, 2], &[0.3, 0.1, -0.1, 0.2, 0.4, 0.2, 0.1, -0.3]);
        let c = curv(-0.1);
        let l = alignment_loss(&a, &v, &c, SimilarityNorm::Frobenius).unwrap();
        assert!(l >= 0.0 && l.is_finite());
    }
}
