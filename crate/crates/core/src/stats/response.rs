use serde::Serialize;

use super::{InputStats, LayerKind, RectifiedGaussian};
use crate::tensor::{conv2d, he_normal_init, relu_inplace};
use crate::{ConvWeights, Error, Result, Rng, Tensor};

/// Fewer trials than this give statistically meaningless moments.
pub const MIN_TRIALS: usize = 1000;

/// Elementwise distribution of the doublet input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InputDistribution {
    Rectified(RectifiedGaussian),
    Constant(f64),
}

impl InputDistribution {
    /// Rectified gaussian whose moments equal `stats`.
    pub fn matched(stats: InputStats) -> Result<Self> {
        RectifiedGaussian::matching(stats.mu_x, stats.sigma_x).map(InputDistribution::Rectified)
    }

    fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            InputDistribution::Rectified(r) => r.sample(rng),
            InputDistribution::Constant(v) => *v,
        }
    }
}

/// Monte Carlo estimate of the pre-rectification response of a randomly
/// initialized Conv-ReLU-Conv doublet (plus the identity skip for residual
/// layers). No normalization, no bias.
///
/// Each trial draws fresh He-normal filters, then pushes
/// `inputs_per_trial` independent input patches through them and reads
/// `outputs_per_trial` output channels at the center position.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseProbe {
    pub kind: LayerKind,
    pub channels: usize,
    pub k: usize,
    pub trials: usize,
    pub inputs_per_trial: usize,
    pub outputs_per_trial: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResponseStats {
    /// Mean response over all trials and inputs.
    pub mean: f64,
    /// Input-driven variance: spread of the response across inputs with the
    /// filters held fixed, averaged over filter draws.
    pub variance: f64,
    /// Variance across both inputs and filter draws.
    pub total_variance: f64,
    /// Share of strictly positive responses.
    pub surviving_fraction: f64,
    /// Standard error of `surviving_fraction`, from per-trial fractions.
    pub survival_std_error: f64,
    pub trials: usize,
    pub samples: usize,
}

impl ResponseProbe {
    pub fn new(kind: LayerKind, channels: usize, k: usize, trials: usize) -> Self {
        ResponseProbe { kind, channels, k, trials, inputs_per_trial: 4, outputs_per_trial: 8.min(channels) }
    }

    fn validate(&self) -> Result<()> {
        if self.trials < MIN_TRIALS {
            return Err(Error::invalid(format!("{} trials is below the minimum of {MIN_TRIALS}", self.trials)));
        }
        if self.channels == 0 || self.k == 0 || self.k.is_multiple_of(2) {
            return Err(Error::invalid("channels must be positive and k odd"));
        }
        if self.inputs_per_trial < 2 {
            return Err(Error::invalid("need at least two inputs per trial"));
        }
        if self.outputs_per_trial == 0 || self.outputs_per_trial > self.channels {
            return Err(Error::invalid("outputs per trial must lie in 1..=channels"));
        }
        Ok(())
    }

    pub fn run(&self, input: InputDistribution, rng: &Rng) -> Result<ResponseStats> {
        let [plain, residual] = self.run_both(input, rng)?;
        Ok(match self.kind {
            LayerKind::Plain => plain,
            LayerKind::Residual => residual,
        })
    }

    /// Plain and residual statistics from one set of draws; `self.kind` is
    /// ignored. The residual responses are the plain ones plus the skip.
    pub fn run_both(&self, input: InputDistribution, rng: &Rng) -> Result<[ResponseStats; 2]> {
        self.validate()?;
        let (c, k, m, o) = (self.channels, self.k, self.inputs_per_trial, self.outputs_per_trial);
        let span = 2 * k - 1;
        let fan_in = c * k * k;
        let center = (k - 1) * span + (k - 1);

        let mut acc = [Accumulator::default(), Accumulator::default()];
        let mut responses = vec![0.0f64; m * o];
        for t in 0..self.trials {
            let mut r = rng.fork(t as u64);
            let w1 = ConvWeights::new(he_normal_init::<f32>(&[c, c, k, k], fan_in, &mut r)?, 1, 0, 1)?;
            let w2 = ConvWeights::new(he_normal_init::<f32>(&[o, c, k, k], fan_in, &mut r)?, 1, 0, 1)?;
            let mut x = Tensor::<f32>::zeros(&[m, c, span, span]);
            for v in x.data_mut() {
                *v = input.sample(&mut r) as f32;
            }
            let mut h = conv2d(&x, &w1)?;
            relu_inplace(&mut h, 0.0);
            let y = conv2d(&h, &w2)?;
            for (i, v) in responses.iter_mut().enumerate() {
                *v = y.data()[i] as f64;
            }
            acc[0].add_trial(&responses, m, o);
            for s in 0..m {
                for ch in 0..o {
                    responses[s * o + ch] += x.data()[(s * c + ch) * span * span + center] as f64;
                }
            }
            acc[1].add_trial(&responses, m, o);
        }
        Ok(acc.map(|a| a.finish(self.trials, m, o)))
    }
}

/// Running sums over trials for one layer kind.
#[derive(Default)]
struct Accumulator {
    sum: f64,
    sum_sq: f64,
    cond_var: f64,
    positive: usize,
    frac_sum: f64,
    frac_sq: f64,
}

impl Accumulator {
    /// `responses` is `m` inputs by `o` output channels, input-major.
    fn add_trial(&mut self, responses: &[f64], m: usize, o: usize) {
        for ch in 0..o {
            let col = (0..m).map(|s| responses[s * o + ch]);
            let mean = col.clone().sum::<f64>() / m as f64;
            self.cond_var += col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64;
        }
        let mut alive = 0usize;
        for &v in responses {
            self.sum += v;
            self.sum_sq += v * v;
            if v > 0.0 {
                alive += 1;
            }
        }
        self.positive += alive;
        let frac = alive as f64 / (m * o) as f64;
        self.frac_sum += frac;
        self.frac_sq += frac * frac;
    }

    fn finish(self, trials: usize, m: usize, o: usize) -> ResponseStats {
        let samples = trials * m * o;
        let n = samples as f64;
        let mean = self.sum / n;
        let t = trials as f64;
        let frac_mean = self.frac_sum / t;
        let frac_var = (self.frac_sq / t - frac_mean * frac_mean).max(0.0) * t / (t - 1.0);
        ResponseStats {
            mean,
            variance: self.cond_var / (trials * o) as f64,
            total_variance: (self.sum_sq / n - mean * mean).max(0.0),
            surviving_fraction: self.positive as f64 / n,
            survival_std_error: (frac_var / t).sqrt(),
            trials,
            samples,
        }
    }
}

/// Response moments of a doublet fed with rectified gaussians matched to
/// `stats`.
pub fn response_stats_mc(
    kind: LayerKind,
    stats: InputStats,
    channels: usize,
    k: usize,
    trials: usize,
    rng: &Rng,
) -> Result<ResponseStats> {
    ResponseProbe::new(kind, channels, k, trials).run(InputDistribution::matched(stats)?, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_too_few_trials() {
        let stats = InputStats::new(1.0, 0.1).unwrap();
        assert!(response_stats_mc(LayerKind::Plain, stats, 8, 3, 999, &Rng::new(0)).is_err());
    }

    #[test]
    fn zero_input_gives_zero_response() {
        let probe = ResponseProbe::new(LayerKind::Plain, 8, 3, 1000);
        let s = probe.run(InputDistribution::Constant(0.0), &Rng::new(0)).unwrap();
        assert_eq!(s.mean, 0.0);
        assert_eq!(s.variance, 0.0);
        assert_eq!(s.surviving_fraction, 0.0);
    }

    #[test]
    fn deterministic_under_seed() {
        let stats = InputStats::new(1.0, 0.2).unwrap();
        let a = response_stats_mc(LayerKind::Residual, stats, 8, 3, 1000, &Rng::new(4)).unwrap();
        let b = response_stats_mc(LayerKind::Residual, stats, 8, 3, 1000, &Rng::new(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn residual_shifts_mean_by_input_mean() {
        let stats = InputStats::new(1.0, 0.1).unwrap();
        let rng = Rng::new(6);
        let p = response_stats_mc(LayerKind::Plain, stats, 16, 3, 4000, &rng).unwrap();
        let r = response_stats_mc(LayerKind::Residual, stats, 16, 3, 4000, &rng).unwrap();
        // same filters and inputs: the difference is exactly the skip term
        assert!((r.mean - p.mean - 1.0).abs() < 0.01, "{} {}", p.mean, r.mean);
    }

    #[test]
    fn run_both_matches_separate_runs() {
        let input = InputDistribution::matched(InputStats::new(0.5, 0.2).unwrap()).unwrap();
        let rng = Rng::new(8);
        let both = ResponseProbe::new(LayerKind::Plain, 8, 3, 1000).run_both(input, &rng).unwrap();
        for (kind, got) in [LayerKind::Plain, LayerKind::Residual].into_iter().zip(both) {
            assert_eq!(ResponseProbe::new(kind, 8, 3, 1000).run(input, &rng).unwrap(), got);
        }
    }
}
