use crate::{Error, Result, Rng, Scalar, Tensor};

/// He-normal initialization: i.i.d. `Normal(0, 2 / fan_in)`, where the
/// second parameter is the variance.
pub fn he_normal_init<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::invalid("fan_in must be positive"));
    }
    normal_init(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// I.i.d. `Normal(0, std^2)` entries.
pub fn normal_init<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    let mut t = Tensor::from_vec(shape, vec![T::zero(); shape.iter().product()])?;
    rng.fill_normal(t.data_mut(), 0.0, std);
    Ok(t)
}
