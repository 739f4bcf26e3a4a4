use crate::{Error, Result, Rng};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `max(0, Normal(loc, scale^2))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RectifiedGaussian {
    pub loc: f64,
    pub scale: f64,
}

/// Mean and variance of `max(0, Normal(alpha, 1))`.
fn unit_moments(alpha: f64) -> (f64, f64) {
    let cdf = normal_cdf(alpha);
    let pdf = normal_pdf(alpha);
    let mean = alpha * cdf + pdf;
    let second = (alpha * alpha + 1.0) * cdf + alpha * pdf;
    (mean, (second - mean * mean).max(0.0))
}

impl RectifiedGaussian {
    /// Mean and standard deviation of the rectified variable.
    pub fn moments(&self) -> (f64, f64) {
        let (m, v) = unit_moments(self.loc / self.scale);
        (m * self.scale, v.sqrt() * self.scale)
    }

    /// Finds the pre-rectification parameters whose rectified distribution
    /// has the requested mean and standard deviation.
    pub fn matching(mean: f64, std: f64) -> Result<Self> {
        if !(mean > 0.0 && std > 0.0) {
            return Err(Error::invalid(format!("rectified gaussian needs positive mean and std, got {mean}, {std}")));
        }
        let target = std / mean;
        // std/mean of the rectified unit gaussian decreases monotonically in alpha.
        let ratio = |alpha: f64| {
            let (m, v) = unit_moments(alpha);
            v.sqrt() / m
        };
        let (mut lo, mut hi) = (-30.0, 1e7);
        if ratio(hi) > target || ratio(lo) < target {
            return Err(Error::invalid(format!("std/mean ratio {target} is out of reach")));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if ratio(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let alpha = 0.5 * (lo + hi);
        let scale = mean / unit_moments(alpha).0;
        Ok(RectifiedGaussian { loc: alpha * scale, scale })
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        (self.loc + self.scale * rng.normal()).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-14);
        assert!((normal_cdf(-3.0) - 0.001_349_898_031_630_094_6).abs() < 1e-15);
    }

    #[test]
    fn standard_rectified_moments() {
        let (m, s) = RectifiedGaussian { loc: 0.0, scale: 1.0 }.moments();
        assert!((m - INV_SQRT_2PI).abs() < 1e-15);
        // E[X^2] = 1/2
        assert!((s * s - (0.5 - m * m)).abs() < 1e-15);
    }

    #[test]
    fn matching_round_trips() {
        for &(mu, sigma) in &[(1.0, 0.1), (1.0, 0.01), (0.5, 0.3), (2.0, 3.0)] {
            let r = RectifiedGaussian::matching(mu, sigma).unwrap();
            let (m, s) = r.moments();
            assert!((m - mu).abs() / mu < 1e-9, "{mu} {sigma}: {m}");
            assert!((s - sigma).abs() / sigma < 1e-9, "{mu} {sigma}: {s}");
        }
    }

    #[test]
    fn sampled_moments_agree() {
        let r = RectifiedGaussian::matching(0.5, 0.4).unwrap();
        let mut rng = Rng::new(2);
        let xs: Vec<f64> = (0..400_000).map(|_| r.sample(&mut rng)).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
        assert!((m - 0.5).abs() < 0.005);
        assert!((v.sqrt() - 0.4).abs() < 0.005);
    }
}
