//! Dense row-major tensors.
//!
//! Plain storage with shape metadata; all operator math lives in
//! [`crate::autodiff`]. Rank 0 is a scalar (one element).

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Wraps `data` with `shape`. Panics if the element count disagrees.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(
            len,
            data.len(),
            "shape {:?} wants {} elements, got {}",
            shape,
            len,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// (n, c, h, w) of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.rank(), 4, "expected rank 4, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    /// Stacks equally shaped tensors along a fresh leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Self {
        assert!(!items.is_empty(), "stack of zero tensors");
        let shape = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            assert_eq!(t.shape, shape, "stack of mismatched shapes");
            data.extend_from_slice(&t.data);
        }
        let mut out_shape = Vec::with_capacity(shape.len() + 1);
        out_shape.push(items.len());
        out_shape.extend_from_slice(&shape);
        Tensor {
            shape: out_shape,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_len() {
        let t = Tensor::from_vec(&[2, 3], vec![0.0_f32; 6]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.len(), 6);
    }

    #[test]
    #[should_panic(expected = "wants 6 elements")]
    fn from_vec_rejects_bad_len() {
        let _ = Tensor::from_vec(&[2, 3], vec![0.0_f32; 5]);
    }

    #[test]
    fn scalar_is_rank0_with_one_element() {
        let t = Tensor::scalar(2.5_f64);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.item(), 2.5);
    }

    #[test]
    fn stack_prepends_axis() {
        let a = Tensor::full(&[2, 2], 1.0_f32);
        let b = Tensor::full(&[2, 2], 2.0_f32);
        let s = Tensor::stack(&[a, b]);
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.data()[0], 1.0);
        assert_eq!(s.data()[4], 2.0);
    }

    #[test]
    fn cast_narrows_and_widens() {
        let t = Tensor::from_vec(&[2], vec![1.5_f64, -2.0]);
        let f: Tensor<f32> = t.cast();
        assert_eq!(f.data(), &[1.5_f32, -2.0]);
    }
}
