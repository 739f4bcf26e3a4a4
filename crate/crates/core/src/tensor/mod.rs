//! Dense tensors and the layer kernels built on them.

mod activation;
mod batchnorm;
mod conv;
pub mod gradcheck;
mod init;
mod layers;
mod sgd;

pub use activation::{relu, relu_backward, relu_backward_inplace, relu_inplace};
pub use batchnorm::{BatchNorm, BnCache, BnGrads, BnMode};
pub use conv::{conv2d, conv2d_backward, conv2d_backward_input, conv_output_size, ConvWeights};
pub use init::{he_normal_init, normal_init};
pub use layers::{global_avg_pool, global_avg_pool_backward, linear, linear_backward, softmax_cross_entropy, Linear};
pub use sgd::{sgd_step, Sgd};

use crate::{Error, Result, Scalar};

/// Dense row-major N-d array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor needs at least one dimension"));
    }
    if let Some(d) = shape.iter().position(|&d| d == 0) {
        return Err(Error::shape(format!("dimension {d} of {shape:?} is zero")));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = validate_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!("shape {shape:?} holds {len} elements, buffer has {}", data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Panics on an empty or zero-sized shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = validate_shape(shape).expect("invalid tensor shape");
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn zeros_like(other: &Tensor<T>) -> Self {
        Tensor { shape: other.shape.clone(), data: vec![T::zero(); other.data.len()] }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(N, C, H, W)` of a 4-d tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!("expected a 4-d NCHW tensor, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = validate_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    fn check_same_shape(&self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Mean and population variance, accumulated in f64.
    pub fn moments(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|v| {
                let d = v.to_f64().unwrap() - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        (mean, var)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), T::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.to_f64().unwrap())).collect() }
    }

    /// Copy of samples `idx` along the leading axis.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let n = self.shape[0];
        let row = self.data.len() / n;
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= n {
                return Err(Error::shape(format!("row {i} out of range for {n} rows")));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor::from_vec(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_zero_dims_and_length_mismatch() {
        assert!(Tensor::<f32>::from_vec(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(&[], vec![]).is_err());
    }

    #[test]
    fn select_rows_picks_samples() {
        let t = Tensor::<f64>::from_vec(&[3, 2], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let s = t.select_rows(&[2, 0]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[4., 5., 0., 1.]);
    }

    proptest! {
        #[test]
        fn product_of_shape_equals_len(dims in proptest::collection::vec(1usize..5, 1..5)) {
            let t = Tensor::<f32>::zeros(&dims);
            prop_assert_eq!(t.len(), dims.iter().product::<usize>());
            let flat = t.clone().reshape(&[t.len()]).unwrap();
            prop_assert_eq!(flat.len(), t.len());
        }
    }
}
