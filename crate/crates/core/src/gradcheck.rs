//! Finite-difference verification of tape gradients.
//!
//! The checker is the independent oracle for every differentiable operation
//! in this crate: it compares the reverse-mode gradient against central
//! differences evaluated through fresh tapes, so the two routes share no
//! code beyond the forward evaluation itself.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences at `point`.
///
/// `f` receives a fresh tape and the registered point and must return a
/// one-element node. `eps` must lie in `[1e-7, 1e-3]`. Returns the maximum
/// over coordinates of `|g_tape - g_fd| / max(1, |g_fd|)`.
pub fn grad_check<F: Real>(
    mut f: impl FnMut(&mut Tape<F>, Var) -> Result<Var>,
    point: &Tensor<F>,
    eps: F,
) -> Result<F> {
    if eps < F::of(1e-7) || eps > F::of(1e-3) {
        return Err(Error::InvalidArgument {
            detail: format!("finite-difference eps {eps} outside [1e-7, 1e-3]"),
        });
    }

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let out = f(&mut tape, x)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: tape.value(out).shape().to_vec(),
        });
    }
    let grads = tape.backward(out)?;
    let g_tape = grads
        .wrt(x)
        .expect("requires_grad leaf always has a gradient entry")
        .clone();

    let mut eval = |data: Vec<F>| -> Result<F> {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(point.shape().to_vec(), data)?, false);
        let out = f(&mut tape, x)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut max_rel = F::zero();
    let base = point.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (F::of(2.0) * eps);
        let diff = (g_tape.data()[i] - fd).abs();
        let rel = diff / F::one().max(fd.abs());
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// Seeded uniform tensor in `[-0.5, 0.5]`, the sampling window the
/// gradient suites use.
pub fn random_point<F: Real>(shape: Vec<usize>, seed: u64) -> Tensor<F> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -0.5, 0.5, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::ReduceMode;

    #[test]
    fn sum_of_squares_is_exact_up_to_roundoff() {
        let point = random_point::<f64>(vec![5], 41);
        let err = grad_check(
            |tape, x| {
                let sq = tape.square(x)?;
                tape.reduce(sq, 0, ReduceMode::Sum)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn eps_outside_window_rejected() {
        let point = random_point::<f64>(vec![2], 1);
        let err = grad_check(|tape, x| tape.square(x).and_then(|s| tape.sum_axis(s, 0)), &point, 1e-2);
        assert!(matches!(err.unwrap_err(), Error::InvalidArgument { .. }));
    }

    #[test]
    fn non_finite_probe_reported() {
        // log crosses zero under perturbation -> domain error surfaces.
        let point = Tensor::new(vec![1], vec![5e-7]).unwrap();
        let result = grad_check(
            |tape, x| {
                let l = tape.unary(x, crate::tape::UnaryFn::Log)?;
                tape.sum_axis(l, 0)
            },
            &point,
            1e-5,
        );
        assert!(result.is_err());
    }
}
