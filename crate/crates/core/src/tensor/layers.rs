use crate::{Error, Result, Rng, Scalar, Tensor};

/// Fully connected layer `y = x W^T + b` on `(N, in)` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// He-normal weights, zero bias.
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let mut weight = Tensor::zeros(&[outputs, inputs]);
        rng.fill_normal(weight.data_mut(), 0.0, (2.0 / inputs as f64).sqrt());
        Linear { weight, bias: Tensor::zeros(&[outputs]) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }
}

fn rows<T: Scalar>(x: &Tensor<T>, features: usize) -> Result<usize> {
    match *x.shape() {
        [n, f] if f == features => Ok(n),
        _ => Err(Error::shape(format!("expected (N, {features}) features, got {:?}", x.shape()))),
    }
}

pub fn linear<T: Scalar>(x: &Tensor<T>, layer: &Linear<T>) -> Result<Tensor<T>> {
    let n = rows(x, layer.inputs())?;
    let out_f = layer.outputs();
    let mut y = Tensor::zeros(&[n, out_f]);
    for row in y.data_mut().chunks_mut(out_f) {
        row.copy_from_slice(layer.bias.data());
    }
    T::gemm(n, layer.inputs(), out_f, T::one(), x.data(), false, layer.weight.data(), true, T::one(), y.data_mut());
    Ok(y)
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    layer: &Linear<T>,
    grad_y: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let n = rows(x, layer.inputs())?;
    if rows(grad_y, layer.outputs())? != n {
        return Err(Error::shape("linear backward: batch size mismatch"));
    }
    let (fi, fo) = (layer.inputs(), layer.outputs());
    let mut gx = Tensor::zeros(&[n, fi]);
    T::gemm(n, fo, fi, T::one(), grad_y.data(), false, layer.weight.data(), false, T::zero(), gx.data_mut());
    let mut gw = Tensor::zeros(&[fo, fi]);
    T::gemm(fo, n, fi, T::one(), grad_y.data(), true, x.data(), false, T::zero(), gw.data_mut());
    let mut gb = Tensor::zeros(&[fo]);
    for row in grad_y.data().chunks(fo) {
        for (b, &g) in gb.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok((gx, gw, gb))
}

/// Spatial mean: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let inv = T::lit(1.0 / plane as f64);
    let data = x.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(grad: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let [n, c, h, w] = *input_shape else {
        return Err(Error::shape("pool backward needs an NCHW shape"));
    };
    if grad.shape() != [n, c] {
        return Err(Error::shape(format!("pool gradient {:?} vs ({n}, {c})", grad.shape())));
    }
    let plane = h * w;
    let inv = T::lit(1.0 / plane as f64);
    let mut out = Tensor::zeros(input_shape);
    for (dst, &g) in out.data_mut().chunks_mut(plane).zip(grad.data()) {
        dst.fill(g * inv);
    }
    Ok(out)
}

/// Mean softmax cross-entropy over the batch.
///
/// Returns `(loss, grad_logits, correct)`, where `correct` counts rows whose
/// arg-max equals the label.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>, usize)> {
    let [n, k] = *logits.shape() else {
        return Err(Error::shape("logits must be (N, classes)"));
    };
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, (row, &label)) in logits.data().chunks(k).zip(labels).enumerate() {
        if label >= k {
            return Err(Error::invalid(format!("label {label} out of range for {k} classes")));
        }
        let vals: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap()).collect();
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = vals.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + z.ln();
        loss += log_z - vals[label];
        let argmax = vals
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
            .0;
        if argmax == label {
            correct += 1;
        }
        for (j, g) in grad.data_mut()[i * k..(i + 1) * k].iter_mut().enumerate() {
            let p = (vals[j] - log_z).exp();
            *g = T::lit((p - if j == label { 1.0 } else { 0.0 }) / n as f64);
        }
    }
    Ok((loss / n as f64, grad, correct))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(&[3, 10]);
        let (loss, grad, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        for row in grad.data().chunks(10) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let logits = Tensor::<f32>::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn pool_averages_planes() {
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0f64, 3.0, -2.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.0, 1.0]);
    }

    #[test]
    fn linear_applies_bias() {
        let layer = Linear {
            weight: Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 2.0]).unwrap(),
            bias: Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap(),
        };
        let x = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(linear(&x, &layer).unwrap().data(), &[3.5, 7.0]);
    }
}
