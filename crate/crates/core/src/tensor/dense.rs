use super::{Precision, Scalar, TensorError};

/// Dense row-major tensor.
///
/// `grad` is populated for leaves that take part in a backward pass with
/// `requires_grad` set, and accumulates until [`Tensor::zero_grad`].
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} holds {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {shape:?}", self.shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += *d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossless widening/narrowing copy to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| U::from_f64(v.to_f64())).collect()),
        }
    }

    /// Shape and values equal, bit for bit.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::<f32>::zeros(&[2, 3]).numel(), 6);
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let mut t = Tensor::<f64>::zeros(&[2]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 4.0][..]));
        t.zero_grad();
        assert!(t.grad.is_none());
    }
}
