use crate::{Error, Result, Scalar, Tensor};

/// Elementwise `max(x, slope * x)`; `slope = 0` is the plain rectifier.
pub fn relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    let mut out = x.clone();
    relu_inplace(&mut out, slope);
    out
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>, slope: T) {
    if slope >= T::zero() && slope <= T::one() {
        // Branch-free form; signs of activations are close to random.
        for v in x.data_mut() {
            *v = v.max(*v * slope);
        }
    } else {
        for v in x.data_mut() {
            if *v <= T::zero() {
                *v *= slope;
            }
        }
    }
}

/// Gradient through [`relu`], given the pre-activation it was applied to.
pub fn relu_backward<T: Scalar>(pre: &Tensor<T>, grad_out: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
    let mut g = grad_out.clone();
    relu_backward_inplace(pre, &mut g, slope)?;
    Ok(g)
}

pub fn relu_backward_inplace<T: Scalar>(pre: &Tensor<T>, grad: &mut Tensor<T>, slope: T) -> Result<()> {
    if pre.shape() != grad.shape() {
        return Err(Error::shape(format!("relu backward: {:?} vs {:?}", pre.shape(), grad.shape())));
    }
    for (g, &p) in grad.data_mut().iter_mut().zip(pre.data()) {
        let factor = if p > T::zero() { T::one() } else { slope };
        *g *= factor;
    }
    Ok(())
}
