use crate::{Error, Result, Scalar};

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step<T: Scalar>(&self, param: &mut [T], grad: &[T], velocity: &mut [T]) -> Result<()> {
        sgd_step(param, grad, velocity, self.lr, self.momentum, self.weight_decay)
    }
}

/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`
pub fn sgd_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::invalid(format!("learning rate {lr} is negative")));
    }
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(format!(
            "sgd: {} params, {} grads, {} velocities",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    let (lr, mom, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mom * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}
