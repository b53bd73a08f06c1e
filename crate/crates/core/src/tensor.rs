//! Dense tensors: row-major contiguous `f32` storage plus shape metadata.
//!
//! A [`Tensor`] is the currency of every numeric operation in this crate.
//! Values are immutable once constructed except through explicit mutable
//! access (used by the optimizer between steps).

use std::fmt;

/// Error type shared by tensor construction and all tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes do not satisfy the operation's contract.
    Shape { op: &'static str, message: String },
    /// A non-shape precondition was violated (non-scalar loss, bad
    /// hyperparameter, non-binary mask, ...).
    Contract { op: &'static str, message: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::Shape { op, message } => write!(f, "shape error in {op}: {message}"),
            TensorError::Contract { op, message } => write!(f, "contract error in {op}: {message}"),
        }
    }
}

impl std::error::Error for TensorError {}

pub(crate) fn shape_err(op: &'static str, message: impl Into<String>) -> TensorError {
    TensorError::Shape { op, message: message.into() }
}

pub(crate) fn contract_err(op: &'static str, message: impl Into<String>) -> TensorError {
    TensorError::Contract { op, message: message.into() }
}

/// Dense N-dimensional array of `f32` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that `product(shape) == data.len()`.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false }
    }

    /// Marks the tensor as trainable when registered on a tape.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f32, TensorError> {
        if self.numel() != 1 {
            return Err(contract_err(
                "Tensor::item",
                format!("expected scalar, got shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// Surfaces NaN/Inf propagation as an error instead of letting it travel
    /// silently through downstream ops.
    pub fn validate_finite(&self, context: &str) -> Result<(), TensorError> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(contract_err(
                    "validate_finite",
                    format!("{context}: non-finite value {v} at flat index {i}"),
                ));
            }
        }
        Ok(())
    }

    /// Interprets the tensor as `[N, C, H, W]`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize), TensorError> {
        match *self.shape {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err(op, format!("expected 4-d tensor, got shape {:?}", self.shape))),
        }
    }

    /// Interprets the tensor as `[rows, cols]`.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match *self.shape {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err(op, format!("expected 2-d tensor, got shape {:?}", self.shape))),
        }
    }

    /// True when every element is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::Shape { .. }));
    }

    #[test]
    fn zero_extent_shapes_are_representable() {
        // An empty-channel tensor is a valid degenerate value (used by
        // channel concatenation).
        let t = Tensor::new(vec![1, 0, 4, 4], vec![]).unwrap();
        assert_eq!(t.numel(), 0);
    }

    #[test]
    fn item_requires_scalar() {
        assert_eq!(Tensor::scalar(2.5).item().unwrap(), 2.5);
        assert!(Tensor::zeros(vec![2]).item().is_err());
    }

    #[test]
    fn validate_finite_reports_index() {
        let t = Tensor::new(vec![3], vec![1.0, f32::NAN, 2.0]).unwrap();
        let err = t.validate_finite("loss").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("index 1"), "{msg}");
        Tensor::zeros(vec![3]).validate_finite("ok").unwrap();
    }
}
