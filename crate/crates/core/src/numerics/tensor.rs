//! Dense row-major tensors with optional gradient-tape participation.

use std::rc::Rc;

use super::error::{NumericsError, Result};
use super::rng::RngStream;
use super::scalar::Scalar;
use super::tape::Tape;

/// Reference to the tape node a tensor was produced by (or watched at).
#[derive(Clone)]
pub(crate) struct NodeRef<T: Scalar> {
    pub(crate) tape: Tape<T>,
    pub(crate) id: usize,
}

/// Dense row-major numeric array. Values are immutable once created;
/// `data_mut` copies-on-write if the buffer is shared, so snapshots held
/// elsewhere (e.g. by a recorded tape) are never disturbed.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    pub(crate) node: Option<NodeRef<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::BadShape {
                op: "from_vec",
                expected: format!("{expected} elements"),
                got: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: "from_vec" });
        }
        Ok(Self {
            shape,
            data: Rc::new(data),
            node: None,
        })
    }

    /// Construction bypassing the finiteness scan, for op outputs whose
    /// inputs were already validated.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Rc::new(data),
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_op(shape, vec![T::ZERO; n])
    }

    pub fn scalar(v: T) -> Self {
        Self::from_op(vec![1], vec![v])
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self::from_op(shape, vec![v; n])
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut RngStream) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.normal() * std)).collect();
        Self::from_op(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the underlying buffer (copy-on-write when shared).
    pub fn data_mut(&mut self) -> &mut [T] {
        let v: &mut Vec<T> = Rc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.data)
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(NumericsError::BadShape {
                op: "item",
                expected: "scalar".into(),
                got: self.shape.clone(),
            })
        }
    }

    /// Interprets the tensor as a matrix, returning (rows, cols).
    /// Vectors count as a single row.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(NumericsError::BadShape {
                op,
                expected: "matrix".into(),
                got: self.shape.clone(),
            }),
        }
    }

    /// Same data viewed under a different shape.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(NumericsError::BadShape {
                op: "reshape",
                expected: format!("{} elements", self.data.len()),
                got: shape,
            });
        }
        Ok(Self {
            shape,
            data: Rc::clone(&self.data),
            node: self.node.clone(),
        })
    }

    /// Copy of this tensor severed from any tape.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn validate_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            Err(NumericsError::NonFinite { op })
        } else {
            Ok(())
        }
    }

    /// Casts every element, dropping tape participation.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_op(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        )
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor{:?}(grad={}, [",
            self.shape,
            self.node.is_some()
        )?;
        for (i, v) in self.data.iter().take(8).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > 8 {
            write!(f, ", …")?;
        }
        write!(f, "])")
    }
}
