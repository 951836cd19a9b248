//! Dense n-dimensional array with row-major storage.
//!
//! `Tensor` is the universal value type of the crate. It is plain data:
//! gradient tracking lives on the [`crate::tape::Tape`], which stores
//! tensors per node. Construction and every mutating helper enforce the
//! finiteness invariant: no NaN or infinity ever lives inside a `Tensor`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;

/// Dense row-major tensor of `Real` scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    /// Builds a tensor from a shape and flat row-major data.
    ///
    /// Errors if `product(shape) != data.len()` or any element is non-finite.
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument {
                detail: format!(
                    "shape {:?} implies {} elements, data has {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        let t = Self { shape, data };
        t.ensure_finite("tensor construction")?;
        Ok(t)
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(v: F) -> Result<Self> {
        Self::new(vec![], vec![v])
    }

    /// All-zeros tensor.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); numel],
        }
    }

    /// Constant-filled tensor. `v` must be finite.
    pub fn full(shape: Vec<usize>, v: F) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![v; numel])
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![F::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = F::one();
        }
        Self {
            shape: vec![n, n],
            data,
        }
    }

    /// Element-wise construction from a flat-index function.
    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> F) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::new(shape, (0..numel).map(f).collect())
    }

    /// Uniform samples in `[lo, hi)`, drawn as `f64` then narrowed.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| F::of(rng.gen_range(lo..hi)))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Mutable access for optimizers. Callers must keep values finite;
    /// [`Tensor::ensure_finite`] re-checks after bulk edits.
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NonScalarLoss {
                shape: self.shape.clone(),
            })
        }
    }

    /// Same data, new shape. Element count must match.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Euclidean norm of the whole tensor.
    pub fn norm(&self) -> F {
        self.data
            .iter()
            .map(|&x| x * x)
            .fold(F::zero(), |a, b| a + b)
            .sqrt()
    }

    /// Errors with the given op name if any element is NaN or ±Inf.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Element-wise map into a new tensor; the result is finiteness-checked.
    pub fn map(&self, op: &'static str, f: impl Fn(F) -> F) -> Result<Self> {
        let t = Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        };
        t.ensure_finite(op)?;
        Ok(t)
    }

    /// Widens/narrows the scalar type through `f64`.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::of(x.as_f64())).collect(),
        }
    }

    /// Maximum absolute element-wise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Result<F> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max))
    }
}

/// Splits a shape at `axis` into `(outer, len, inner)` strides for
/// row-major reduction loops.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument { .. }));
    }

    #[test]
    fn non_finite_construction_rejected() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert_eq!(err, Error::NonFinite { op: "tensor construction" });
        let err = Tensor::new(vec![1], vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn eye_is_identity() {
        let i = Tensor::<f64>::eye(3);
        assert_eq!(i.shape(), &[3, 3]);
        assert_eq!(i.data()[0], 1.0);
        assert_eq!(i.data()[1], 0.0);
        assert_eq!(i.data()[4], 1.0);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let r = t.reshape(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(vec![4]).is_err());
    }

    #[test]
    fn scalar_item_roundtrip() {
        let s = Tensor::scalar(2.5f64).unwrap();
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item().unwrap(), 2.5);
        let v = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(v.item().is_err());
    }

    #[test]
    fn cast_widens_through_f64() {
        let t = Tensor::<f32>::new(vec![2], vec![0.5, -1.25]).unwrap();
        let w: Tensor<f64> = t.cast();
        assert_eq!(w.data(), &[0.5, -1.25]);
    }
}
