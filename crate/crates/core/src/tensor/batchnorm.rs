use crate::{Error, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch normalization over NCHW tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// Forward state needed by [`BatchNorm::backward`].
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    mode: BnMode,
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// estimates (unbiased variance); eval mode uses the running estimates.
    pub fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, BnCache<T>)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels() {
            return Err(Error::shape(format!("batch norm over {} channels got {c}", self.channels())));
        }
        if mode == BnMode::Train && n < 2 {
            return Err(Error::invalid("batch norm in train mode needs a batch of at least 2"));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut xhat = Tensor::zeros_like(x);
        let mut out = Tensor::zeros_like(x);
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mut sum = 0.0;
                    let mut sq = 0.0;
                    for b in 0..n {
                        for &v in &x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                            let v = v.to_f64().unwrap();
                            sum += v;
                            sq += v * v;
                        }
                    }
                    let mean = sum / count;
                    let var = (sq / count - mean * mean).max(0.0);
                    let m = self.momentum;
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = T::lit((1.0 - m) * rm.to_f64().unwrap() + m * mean);
                    let rv = &mut self.running_var.data_mut()[ch];
                    let unbiased = var * count / (count - 1.0).max(1.0);
                    *rv = T::lit((1.0 - m) * rv.to_f64().unwrap() + m * unbiased);
                    (mean, var)
                }
                BnMode::Eval => {
                    (self.running_mean.data()[ch].to_f64().unwrap(), self.running_var.data()[ch].to_f64().unwrap())
                }
            };
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let g = self.gamma.data()[ch].to_f64().unwrap();
            let bta = self.beta.data()[ch].to_f64().unwrap();
            for b in 0..n {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for i in r {
                    let xh = (x.data()[i].to_f64().unwrap() - mean) * istd;
                    xhat.data_mut()[i] = T::lit(xh);
                    out.data_mut()[i] = T::lit(g * xh + bta);
                }
            }
        }
        Ok((out, BnCache { mode, xhat, inv_std }))
    }

    pub fn backward(&self, cache: &BnCache<T>, grad_out: &Tensor<T>) -> Result<BnGrads<T>> {
        if grad_out.shape() != cache.xhat.shape() {
            return Err(Error::shape(format!(
                "batch norm backward: {:?} vs {:?}",
                grad_out.shape(),
                cache.xhat.shape()
            )));
        }
        let (n, c, h, w) = grad_out.dims4()?;
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut gin = Tensor::zeros_like(grad_out);
        let mut ggamma = Tensor::zeros(&[c]);
        let mut gbeta = Tensor::zeros(&[c]);
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for b in 0..n {
                for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                    let dy = grad_out.data()[i].to_f64().unwrap();
                    sum_dy += dy;
                    sum_dy_xhat += dy * cache.xhat.data()[i].to_f64().unwrap();
                }
            }
            ggamma.data_mut()[ch] = T::lit(sum_dy_xhat);
            gbeta.data_mut()[ch] = T::lit(sum_dy);
            let g = self.gamma.data()[ch].to_f64().unwrap();
            let istd = cache.inv_std[ch];
            for b in 0..n {
                for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                    let dy = grad_out.data()[i].to_f64().unwrap();
                    let dx = match cache.mode {
                        BnMode::Train => {
                            let xh = cache.xhat.data()[i].to_f64().unwrap();
                            g * istd * (dy - sum_dy / count - xh * sum_dy_xhat / count)
                        }
                        BnMode::Eval => g * istd * dy,
                    };
                    gin.data_mut()[i] = T::lit(dx);
                }
            }
        }
        Ok(BnGrads { input: gin, gamma: ggamma, beta: gbeta })
    }
}
