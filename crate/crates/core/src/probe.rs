//! Forward-only probe of information loss through deep random stacks.

use serde::{Deserialize, Serialize};

use crate::coder::{identity_init, make_coder, CoderSpec, CoderWeights};
use crate::stats::LayerKind;
use crate::tensor::{conv2d, he_normal_init, relu_inplace};
use crate::{ConvWeights, Error, Result, Rng, Scalar, Tensor};

/// Ridge term of the decodability regression.
pub const RIDGE: f64 = 1e-3;
pub const MIN_NOISE_SAMPLES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackKind {
    Plain,
    Residual,
    /// Learner plus an identity-initialized frozen coder over half the channels.
    Pnnh,
}

impl StackKind {
    pub const ALL: [StackKind; 3] = [StackKind::Plain, StackKind::Residual, StackKind::Pnnh];

    pub fn name(self) -> &'static str {
        match self {
            StackKind::Plain => "plain",
            StackKind::Residual => "residual",
            StackKind::Pnnh => "pnnh",
        }
    }

    /// Survival bound that applies to the block's output neurons.
    pub fn bound_kind(self) -> LayerKind {
        match self {
            StackKind::Plain => LayerKind::Plain,
            StackKind::Residual | StackKind::Pnnh => LayerKind::Residual,
        }
    }
}

impl std::str::FromStr for StackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(StackKind::Plain),
            "residual" => Ok(StackKind::Residual),
            "pnnh" => Ok(StackKind::Pnnh),
            other => Err(Error::invalid(format!("unknown stack kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "slope")]
pub enum Activation {
    Relu,
    Leaky(f64),
}

impl Activation {
    pub fn slope(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Leaky(s) => s,
        }
    }

    pub fn name(self) -> String {
        match self {
            Activation::Relu => "relu".into(),
            Activation::Leaky(s) => format!("leaky({s})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackSpec {
    pub kind: StackKind,
    pub depth: usize,
    pub channels: usize,
    pub spatial: usize,
    pub k: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl StackSpec {
    pub fn new(kind: StackKind, depth: usize) -> Self {
        StackSpec { kind, depth, channels: 16, spatial: 16, k: 3, activation: Activation::Relu, seed: 0 }
    }
}

/// Random stack of Conv-act-Conv blocks. Block weights depend only on the
/// seed and block index, so stacks of different kinds share them.
#[derive(Clone, Debug)]
pub struct Stack<T> {
    pub spec: StackSpec,
    pub blocks: Vec<(ConvWeights<T>, ConvWeights<T>)>,
    pub coder: Option<CoderWeights<T>>,
}

pub fn build_random_stack<T: Scalar>(spec: StackSpec) -> Result<Stack<T>> {
    if spec.depth == 0 {
        return Err(Error::invalid("stack depth must be at least 1"));
    }
    if spec.channels == 0 || spec.k.is_multiple_of(2) {
        return Err(Error::invalid("stack needs channels and an odd kernel"));
    }
    let root = Rng::new(spec.seed);
    let (c, k) = (spec.channels, spec.k);
    let blocks = (0..spec.depth)
        .map(|i| {
            let mut rng = root.fork(i as u64);
            let w1 = he_normal_init(&[c, c, k, k], c * k * k, &mut rng)?;
            let w2 = he_normal_init(&[c, c, k, k], c * k * k, &mut rng)?;
            Ok((ConvWeights::same(w1, 1)?, ConvWeights::same(w2, 1)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let coder = match spec.kind {
        StackKind::Pnnh => {
            let mut spec_c = CoderSpec::vanilla(c);
            spec_c.k = k;
            Some(identity_init(&make_coder(spec_c, &mut root.fork(u64::MAX))?))
        }
        _ => None,
    };
    Ok(Stack { spec, blocks, coder })
}

impl<T: Scalar> Stack<T> {
    /// Code width of the coder path; channels at or above it get no skip.
    pub fn retained_channels(&self) -> usize {
        self.coder.as_ref().map_or(self.spec.channels, |c| c.spec.c_b)
    }

    fn block(&self, i: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let slope = T::lit(self.spec.activation.slope());
        let (w1, w2) = &self.blocks[i];
        let mut h = conv2d(x, w1)?;
        relu_inplace(&mut h, slope);
        let mut h = conv2d(&h, w2)?;
        match self.spec.kind {
            StackKind::Plain => {}
            StackKind::Residual => h.add_assign(x)?,
            StackKind::Pnnh => h.add_assign(&self.coder.as_ref().expect("pnnh stack has a coder").forward(x)?)?,
        }
        relu_inplace(&mut h, slope);
        Ok(h)
    }

    /// Activations after every block.
    pub fn forward_all(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.spec.channels {
            return Err(Error::shape(format!("stack expects {} channels, got {c}", self.spec.channels)));
        }
        let mut out: Vec<Tensor<T>> = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            let y = self.block(i, out.last().unwrap_or(x))?;
            if !y.all_finite() {
                return Err(Error::Diverged {
                    stage: "probe layer",
                    index: i + 1,
                    detail: "non-finite activation".into(),
                });
            }
            out.push(y);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    /// 1-based block index.
    pub layer: usize,
    pub surviving_fraction: f64,
    /// Mean R^2 over all input channels.
    pub r2: f64,
    /// Mean R^2 over the channels the coder path keeps.
    pub r2_retained: f64,
    pub mean: f64,
    pub variance: f64,
    /// Mean and standard deviation of the block's input.
    pub input_mean: f64,
    pub input_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: StackKind,
    pub activation: Activation,
    pub records: Vec<LayerRecord>,
    pub noise_floor: f64,
}

impl ProbeReport {
    pub fn final_record(&self) -> &LayerRecord {
        self.records.last().expect("probe has at least one layer")
    }
}

/// Rectified-normal probe input of shape `(batch, C, S, S)`.
pub fn probe_input<T: Scalar>(spec: &StackSpec, batch: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    let shape = [batch, spec.channels, spec.spatial, spec.spatial];
    let mut x = Tensor::from_vec(&shape, vec![T::zero(); shape.iter().product()])?;
    for v in x.data_mut() {
        *v = T::lit(rng.normal().max(0.0));
    }
    Ok(x)
}

/// Runs `input` through the stack and records per-layer statistics.
/// `noise_samples` fresh random activations estimate the R^2 noise floor.
pub fn probe_forward<T: Scalar>(
    stack: &Stack<T>,
    input: &Tensor<T>,
    noise_samples: usize,
    rng: &mut Rng,
) -> Result<ProbeReport> {
    if input.data().iter().any(|v| *v < T::zero()) {
        return Err(Error::invalid("probe input must be non-negative"));
    }
    let acts = stack.forward_all(input)?;
    let keep = stack.retained_channels();
    let mut records = Vec::with_capacity(acts.len());
    for (i, y) in acts.iter().enumerate() {
        let prev = if i == 0 { input } else { &acts[i - 1] };
        let (input_mean, input_var) = prev.moments();
        let (mean, variance) = y.moments();
        let per_channel = channel_r2(y, input)?;
        let alive = y.data().iter().filter(|v| **v > T::zero()).count();
        records.push(LayerRecord {
            layer: i + 1,
            surviving_fraction: alive as f64 / y.len() as f64,
            r2: per_channel.iter().sum::<f64>() / per_channel.len() as f64,
            r2_retained: per_channel[..keep].iter().sum::<f64>() / keep as f64,
            mean,
            variance,
            input_mean,
            input_std: input_var.sqrt(),
        });
    }
    Ok(ProbeReport {
        kind: stack.spec.kind,
        activation: stack.spec.activation,
        records,
        noise_floor: noise_floor(input, stack.spec.channels, noise_samples, rng)?,
    })
}

/// Mean over input channels of the in-sample R^2 of a ridge regression
/// predicting each input value from the activation vector at the same
/// spatial position. Rows pool batch and pixels.
pub fn decodability_r2<T: Scalar>(activation: &Tensor<T>, input: &Tensor<T>) -> Result<f64> {
    let r = channel_r2(activation, input)?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// Per-input-channel R^2 behind [`decodability_r2`].
pub fn channel_r2<T: Scalar>(activation: &Tensor<T>, input: &Tensor<T>) -> Result<Vec<f64>> {
    let (n, ca, h, w) = activation.dims4()?;
    let (n2, ci, h2, w2) = input.dims4()?;
    if (n, h, w) != (n2, h2, w2) {
        return Err(Error::shape(format!(
            "activation {:?} and input {:?} differ outside channels",
            activation.shape(),
            input.shape()
        )));
    }
    let hw = h * w;
    let p = ca + 1;
    // Normal equations with an intercept column in the last slot.
    let mut gram = vec![0.0f64; p * p];
    let mut cross = vec![0.0f64; p * ci];
    let mut sum_y = vec![0.0f64; ci];
    let mut sum_yy = vec![0.0f64; ci];
    let mut row = vec![0.0f64; p];
    let mut target = vec![0.0f64; ci];
    for b in 0..n {
        let abase = b * ca * hw;
        let ibase = b * ci * hw;
        for s in 0..hw {
            for c in 0..ca {
                row[c] = activation.data()[abase + c * hw + s].to_f64().unwrap();
            }
            row[ca] = 1.0;
            for c in 0..ci {
                target[c] = input.data()[ibase + c * hw + s].to_f64().unwrap();
                sum_y[c] += target[c];
                sum_yy[c] += target[c] * target[c];
            }
            for i in 0..p {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                for j in i..p {
                    gram[i * p + j] += ri * row[j];
                }
                for c in 0..ci {
                    cross[i * ci + c] += ri * target[c];
                }
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            gram[i * p + j] = gram[j * p + i];
        }
    }
    let rows = (n * hw) as f64;
    let sst: Vec<f64> = (0..ci).map(|c| sum_yy[c] - sum_y[c] * sum_y[c] / rows).collect();
    if let Some(c) = sst.iter().position(|&v| v <= 1e-12 * rows) {
        return Err(Error::invalid(format!("input channel {c} has zero variance")));
    }
    for i in 0..ca {
        gram[i * p + i] += RIDGE;
    }
    let chol = cholesky(&gram, p)?;
    (0..ci)
        .map(|c| {
            let rhs: Vec<f64> = (0..p).map(|i| cross[i * ci + c]).collect();
            let beta = cholesky_solve(&chol, p, &rhs);
            // SSE = y'y - 2 b'X'y + b'X'X b, with the unregularized Gram.
            let xty: f64 = beta.iter().zip(&rhs).map(|(b, r)| b * r).sum();
            let mut quad = 0.0;
            for i in 0..p {
                let mut gi = 0.0;
                for j in 0..p {
                    let g = gram[i * p + j] - if i == j && i < ca { RIDGE } else { 0.0 };
                    gi += g * beta[j];
                }
                quad += beta[i] * gi;
            }
            let sse = (sum_yy[c] - 2.0 * xty + quad).max(0.0);
            Ok(1.0 - sse / sst[c])
        })
        .collect()
}

fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = a[i * n + i] - s;
                if d <= 0.0 {
                    return Err(Error::invalid("regression system is not positive definite"));
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (a[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    x
}

/// Mean R^2 obtained from `samples` activations that are independent of
/// `input`: the level a fully dissipated stack sits at.
pub fn noise_floor<T: Scalar>(input: &Tensor<T>, channels: usize, samples: usize, rng: &mut Rng) -> Result<f64> {
    if samples < MIN_NOISE_SAMPLES {
        return Err(Error::invalid(format!("noise floor needs at least {MIN_NOISE_SAMPLES} samples, got {samples}")));
    }
    let (n, _, h, w) = input.dims4()?;
    let shape = [n, channels, h, w];
    let mut total = 0.0;
    for _ in 0..samples {
        let mut noise = Tensor::from_vec(&shape, vec![T::zero(); shape.iter().product()])?;
        for v in noise.data_mut() {
            *v = T::lit(rng.normal().max(0.0));
        }
        total += decodability_r2(&noise, input)?;
    }
    Ok(total / samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: StackKind, depth: usize) -> StackSpec {
        StackSpec { channels: 4, spatial: 6, ..StackSpec::new(kind, depth) }
    }

    #[test]
    fn zero_depth_is_an_error() {
        assert!(build_random_stack::<f32>(StackSpec::new(StackKind::Plain, 0)).is_err());
    }

    #[test]
    fn kinds_share_block_weights() {
        let a = build_random_stack::<f32>(small(StackKind::Plain, 3)).unwrap();
        let b = build_random_stack::<f32>(small(StackKind::Pnnh, 3)).unwrap();
        assert_eq!(a.blocks, b.blocks);
        assert!(a.coder.is_none());
        assert_eq!(b.retained_channels(), 2);
    }

    #[test]
    fn r2_of_input_itself_is_one() {
        let mut rng = Rng::new(0);
        let x: Tensor<f64> = probe_input(&small(StackKind::Plain, 1), 8, &mut rng).unwrap();
        assert!((decodability_r2(&x, &x).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn r2_is_invariant_to_affine_maps_of_features() {
        let mut rng = Rng::new(1);
        let x: Tensor<f64> = probe_input(&small(StackKind::Plain, 1), 8, &mut rng).unwrap();
        let y: Tensor<f64> = probe_input(&small(StackKind::Plain, 1), 8, &mut rng).unwrap();
        let mixed = x.scale(0.5).add(&y).unwrap().map(|v| v + 3.0);
        let a = decodability_r2(&mixed, &x).unwrap();
        let b = decodability_r2(&mixed.scale(4.0), &x).unwrap();
        assert!(a > 0.05 && a < 1.0);
        assert!((a - b).abs() < 1e-4);
    }

    #[test]
    fn zero_variance_input_is_an_error() {
        let x = Tensor::<f64>::full(&[2, 4, 3, 3], 1.0);
        assert!(decodability_r2(&x, &x).is_err());
    }

    #[test]
    fn noise_floor_needs_enough_samples() {
        let mut rng = Rng::new(2);
        let x: Tensor<f64> = probe_input(&small(StackKind::Plain, 1), 4, &mut rng).unwrap();
        assert!(noise_floor(&x, 4, 15, &mut rng).is_err());
        let f = noise_floor(&x, 4, 16, &mut rng).unwrap();
        assert!(f > 0.0 && f < 0.1);
    }

    #[test]
    fn negative_input_is_rejected() {
        let stack = build_random_stack::<f64>(small(StackKind::Plain, 1)).unwrap();
        let mut x = Tensor::<f64>::full(&[2, 4, 6, 6], 1.0);
        x.data_mut()[0] = -1.0;
        assert!(probe_forward(&stack, &x, 16, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn overflowing_stack_reports_layer() {
        let mut stack = build_random_stack::<f32>(small(StackKind::Residual, 3)).unwrap();
        for (w1, w2) in &mut stack.blocks {
            w1.weight_mut().data_mut().iter_mut().for_each(|v| *v = 1e20);
            w2.weight_mut().data_mut().iter_mut().for_each(|v| *v = 1e20);
        }
        let x = probe_input(&stack.spec, 2, &mut Rng::new(0)).unwrap();
        match probe_forward(&stack, &x, 16, &mut Rng::new(0)) {
            Err(Error::Diverged { index, .. }) => assert!(index >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn identity_coder_stack_matches_residual_on_kept_channels_at_depth_one() {
        // With zero learner weights both stacks are relu(skip(x)).
        let mut r = build_random_stack::<f64>(small(StackKind::Residual, 1)).unwrap();
        let mut p = build_random_stack::<f64>(small(StackKind::Pnnh, 1)).unwrap();
        for s in [&mut r, &mut p] {
            s.blocks[0].1.weight_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = probe_input(&r.spec, 2, &mut Rng::new(3)).unwrap();
        let yr = &r.forward_all(&x).unwrap()[0];
        let yp = &p.forward_all(&x).unwrap()[0];
        assert_eq!(yr, &x);
        for (i, (&a, &b)) in yr.data().iter().zip(yp.data()).enumerate() {
            assert_eq!(b, if (i / 36) % 4 < 2 { a } else { 0.0 });
        }
    }
}
