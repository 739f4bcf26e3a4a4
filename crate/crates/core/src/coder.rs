//! Frozen autoencoder paths ("coders") that carry input information
//! through a block: construction, identity initialization, pretext
//! training and filter-norm analysis.

use serde::{Deserialize, Serialize};

use crate::tensor::{
    conv2d, conv2d_backward, conv2d_backward_input, he_normal_init, normal_init, relu, relu_backward_inplace,
};
use crate::{ConvWeights, Error, Result, Rng, Scalar, Tensor};

/// Standard deviation of the random encoder/decoder initialization.
pub const CODER_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoderKind {
    /// `dec(relu(enc(x)))` with 3x3 filters.
    Vanilla,
    /// Squeeze, fixed 3x3 identity, expand.
    Bottleneck,
    /// Squeeze, fixed depthwise 3x3 identity, expand.
    Inverted,
    /// Vanilla form with 1x1 filters.
    Mlp,
}

impl CoderKind {
    pub fn name(self) -> &'static str {
        match self {
            CoderKind::Vanilla => "vanilla",
            CoderKind::Bottleneck => "bottleneck",
            CoderKind::Inverted => "inverted",
            CoderKind::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for CoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(CoderKind::Vanilla),
            "bottleneck" => Ok(CoderKind::Bottleneck),
            "inverted" => Ok(CoderKind::Inverted),
            "mlp" => Ok(CoderKind::Mlp),
            other => Err(Error::invalid(format!("unknown coder kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoderSpec {
    pub kind: CoderKind,
    pub c_in: usize,
    /// Width of the code.
    pub c_b: usize,
    /// Squeezed width of the host bottleneck block.
    pub c_low: Option<usize>,
    /// Expanded width of the host inverted-bottleneck block.
    pub c_high: Option<usize>,
    /// Encoder/decoder kernel size.
    pub k: usize,
}

impl CoderSpec {
    pub fn vanilla(c_in: usize) -> Self {
        CoderSpec { kind: CoderKind::Vanilla, c_in, c_b: c_in / 2, c_low: None, c_high: None, k: 3 }
    }

    pub fn mlp(c_in: usize) -> Self {
        CoderSpec { kind: CoderKind::Mlp, k: 1, ..Self::vanilla(c_in) }
    }

    pub fn bottleneck(c_in: usize, c_low: usize) -> Self {
        CoderSpec { kind: CoderKind::Bottleneck, c_in, c_b: c_low / 2, c_low: Some(c_low), c_high: None, k: 1 }
    }

    pub fn inverted(c_in: usize, c_high: usize) -> Self {
        CoderSpec { kind: CoderKind::Inverted, c_in, c_b: c_in / 2, c_low: None, c_high: Some(c_high), k: 1 }
    }

    /// Default spec of `kind` for a block with `c_in` channels.
    pub fn for_block(kind: CoderKind, c_in: usize) -> Self {
        match kind {
            CoderKind::Vanilla => Self::vanilla(c_in),
            CoderKind::Mlp => Self::mlp(c_in),
            CoderKind::Bottleneck => Self::bottleneck(c_in, (c_in / 4).max(2)),
            CoderKind::Inverted => Self::inverted(c_in, 6 * c_in),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_b == 0 {
            return Err(Error::invalid(format!("code width is zero for {} channels", self.c_in)));
        }
        if self.c_b >= self.c_in {
            return Err(Error::invalid(format!("code width {} does not compress {} channels", self.c_b, self.c_in)));
        }
        if self.k.is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size {} must be odd", self.k)));
        }
        if self.kind == CoderKind::Mlp && self.k != 1 {
            return Err(Error::invalid("mlp coders use 1x1 filters"));
        }
        Ok(())
    }

    fn mid_groups(&self) -> Option<usize> {
        match self.kind {
            CoderKind::Bottleneck => Some(1),
            CoderKind::Inverted => Some(self.c_b),
            CoderKind::Vanilla | CoderKind::Mlp => None,
        }
    }
}

/// Encoder, optional fixed middle filter, decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct CoderWeights<T> {
    pub spec: CoderSpec,
    pub enc: ConvWeights<T>,
    pub mid: Option<ConvWeights<T>>,
    pub dec: ConvWeights<T>,
}

fn center_identity<T: Scalar>(rows: usize, cols: usize, k: usize, depthwise: bool) -> Tensor<T> {
    let mut t = Tensor::zeros(&[rows, if depthwise { 1 } else { cols }, k, k]);
    let c = k / 2;
    for i in 0..rows.min(cols) {
        let j = if depthwise { 0 } else { i };
        let inner = if depthwise { 1 } else { cols };
        t.data_mut()[((i * inner + j) * k + c) * k + c] = T::one();
    }
    t
}

fn mid_kernel<T: Scalar>(spec: &CoderSpec) -> Result<Option<ConvWeights<T>>> {
    spec.mid_groups()
        .map(|groups| {
            let depthwise = groups > 1 || spec.kind == CoderKind::Inverted;
            ConvWeights::same(center_identity(spec.c_b, spec.c_b, 3, depthwise), groups)
        })
        .transpose()
}

/// Random coder: encoder and decoder `~ Normal(0, 0.01^2)`, middle filter
/// at its identity pattern.
pub fn make_coder<T: Scalar>(spec: CoderSpec, rng: &mut Rng) -> Result<CoderWeights<T>> {
    spec.validate()?;
    let k = spec.k;
    let enc = normal_init(&[spec.c_b, spec.c_in, k, k], CODER_INIT_STD, rng)?;
    let dec = normal_init(&[spec.c_in, spec.c_b, k, k], CODER_INIT_STD, rng)?;
    Ok(CoderWeights { spec, enc: ConvWeights::same(enc, 1)?, mid: mid_kernel(&spec)?, dec: ConvWeights::same(dec, 1)? })
}

/// He-normal encoder and decoder; the untrained-coder baseline.
pub fn make_he_coder<T: Scalar>(spec: CoderSpec, rng: &mut Rng) -> Result<CoderWeights<T>> {
    spec.validate()?;
    let k = spec.k;
    let enc = he_normal_init(&[spec.c_b, spec.c_in, k, k], spec.c_in * k * k, rng)?;
    let dec = he_normal_init(&[spec.c_in, spec.c_b, k, k], spec.c_b * k * k, rng)?;
    Ok(CoderWeights { spec, enc: ConvWeights::same(enc, 1)?, mid: mid_kernel(&spec)?, dec: ConvWeights::same(dec, 1)? })
}

/// Sets every filter to a center tap on matching channels, which turns the
/// coder into a skip connection over the first `c_b` channels.
pub fn identity_init<T: Scalar>(coder: &CoderWeights<T>) -> CoderWeights<T> {
    let s = coder.spec;
    let build =
        |rows, cols| ConvWeights::same(center_identity(rows, cols, s.k, false), 1).expect("valid identity filter");
    CoderWeights {
        spec: s,
        enc: build(s.c_b, s.c_in),
        mid: mid_kernel(&s).expect("valid middle filter"),
        dec: build(s.c_in, s.c_b),
    }
}

/// Activations kept by [`CoderWeights::forward_cached`] for the backward pass.
#[derive(Clone, Debug)]
pub struct CoderCache<T> {
    input: Tensor<T>,
    enc_pre: Tensor<T>,
    enc_act: Tensor<T>,
    mid_pre: Option<Tensor<T>>,
    mid_act: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct CoderGrads<T> {
    pub input: Tensor<T>,
    pub enc: Option<Tensor<T>>,
    pub dec: Option<Tensor<T>>,
}

impl<T: Scalar> CoderWeights<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, CoderCache<T>)> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.spec.c_in {
            return Err(Error::shape(format!("coder expects {} channels, got {c}", self.spec.c_in)));
        }
        let enc_pre = conv2d(x, &self.enc)?;
        let enc_act = relu(&enc_pre, T::zero());
        let (mid_pre, mid_act) = match &self.mid {
            Some(mid) => {
                let pre = conv2d(&enc_act, mid)?;
                let act = relu(&pre, T::zero());
                (Some(pre), Some(act))
            }
            None => (None, None),
        };
        let out = conv2d(mid_act.as_ref().unwrap_or(&enc_act), &self.dec)?;
        Ok((out, CoderCache { input: x.clone(), enc_pre, enc_act, mid_pre, mid_act }))
    }

    /// Backpropagates `grad_out`; filter gradients only when `weights` is set.
    /// The middle filter never receives a gradient.
    pub fn backward(&self, cache: &CoderCache<T>, grad_out: &Tensor<T>, weights: bool) -> Result<CoderGrads<T>> {
        let last = cache.mid_act.as_ref().unwrap_or(&cache.enc_act);
        let (mut g, g_dec) = if weights {
            let (gi, gw) = conv2d_backward(last, &self.dec, grad_out)?;
            (gi, Some(gw))
        } else {
            (conv2d_backward_input(last, &self.dec, grad_out)?, None)
        };
        if let (Some(mid), Some(pre)) = (&self.mid, &cache.mid_pre) {
            relu_backward_inplace(pre, &mut g, T::zero())?;
            g = conv2d_backward_input(&cache.enc_act, mid, &g)?;
        }
        relu_backward_inplace(&cache.enc_pre, &mut g, T::zero())?;
        let (input, enc) = if weights {
            let (gi, gw) = conv2d_backward(&cache.input, &self.enc, &g)?;
            (gi, Some(gw))
        } else {
            (conv2d_backward_input(&cache.input, &self.enc, &g)?, None)
        };
        Ok(CoderGrads { input, enc, dec: g_dec })
    }

    pub fn parameter_count(&self) -> usize {
        self.enc.weight().len() + self.dec.weight().len()
    }

    pub fn cast<U: Scalar>(&self) -> CoderWeights<U> {
        let conv = |w: &ConvWeights<T>| {
            ConvWeights::new(w.weight().cast(), w.stride(), w.padding(), w.groups()).expect("same geometry")
        };
        CoderWeights { spec: self.spec, enc: conv(&self.enc), mid: self.mid.as_ref().map(conv), dec: conv(&self.dec) }
    }
}

pub fn coder_forward<T: Scalar>(coder: &CoderWeights<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    coder.forward(x)
}

/// `||x - coder(x)||^2` summed over all elements, averaged over the batch.
pub fn coder_loss<T: Scalar>(x: &Tensor<T>, coder: &CoderWeights<T>) -> Result<f64> {
    let (n, _, _, _) = x.dims4()?;
    let recon = coder.forward(x)?;
    let sse: f64 = x
        .data()
        .iter()
        .zip(recon.data())
        .map(|(&a, &b)| {
            let d = (a - b).to_f64().unwrap();
            d * d
        })
        .sum();
    Ok(sse / n as f64)
}

/// Loss and encoder/decoder gradients on one batch.
pub fn coder_loss_and_grads<T: Scalar>(x: &Tensor<T>, coder: &CoderWeights<T>) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    let (n, _, _, _) = x.dims4()?;
    let (recon, cache) = coder.forward_cached(x)?;
    let scale = T::lit(-2.0 / n as f64);
    let mut sse = 0.0;
    let mut grad = Tensor::zeros_like(x);
    for ((g, &a), &b) in grad.data_mut().iter_mut().zip(x.data()).zip(recon.data()) {
        let d = a - b;
        sse += d.to_f64().unwrap().powi(2);
        *g = scale * d;
    }
    let grads = coder.backward(&cache, &grad, true)?;
    Ok((sse / n as f64, grads.enc.expect("encoder gradient"), grads.dec.expect("decoder gradient")))
}

/// Synthetic reconstruction task for coder training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretextTask {
    /// `max(0, Normal(0, 1))`
    RectifiedNormal,
    /// `Normal(0, 1)`
    Normal,
    /// `Uniform(0, 1)`
    Uniform,
    /// No training: identity filters.
    #[serde(alias = "identity")]
    IdentityInitOnly,
    /// No training: frozen He-normal filters.
    Untrained,
}

impl PretextTask {
    pub const ALL: [PretextTask; 5] = [
        PretextTask::RectifiedNormal,
        PretextTask::Normal,
        PretextTask::Uniform,
        PretextTask::IdentityInitOnly,
        PretextTask::Untrained,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PretextTask::RectifiedNormal => "rectified_normal",
            PretextTask::Normal => "normal",
            PretextTask::Uniform => "uniform",
            PretextTask::IdentityInitOnly => "identity",
            PretextTask::Untrained => "untrained",
        }
    }

    pub fn is_sampling(self) -> bool {
        matches!(self, PretextTask::RectifiedNormal | PretextTask::Normal | PretextTask::Uniform)
    }
}

impl std::str::FromStr for PretextTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectified_normal" => Ok(PretextTask::RectifiedNormal),
            "normal" => Ok(PretextTask::Normal),
            "uniform" => Ok(PretextTask::Uniform),
            "identity" | "identity_init_only" => Ok(PretextTask::IdentityInitOnly),
            "untrained" | "no_task" => Ok(PretextTask::Untrained),
            other => Err(Error::invalid(format!("unknown pretext task {other:?}"))),
        }
    }
}

pub fn sample_pretext<T: Scalar>(task: PretextTask, shape: &[usize], rng: &mut Rng) -> Result<Tensor<T>> {
    let mut t = Tensor::from_vec(shape, vec![T::zero(); shape.iter().product()])?;
    match task {
        PretextTask::RectifiedNormal => {
            for v in t.data_mut() {
                *v = T::lit(rng.normal().max(0.0));
            }
        }
        PretextTask::Normal => rng.fill_normal(t.data_mut(), 0.0, 1.0),
        PretextTask::Uniform => {
            for v in t.data_mut() {
                *v = T::lit(rng.uniform());
            }
        }
        PretextTask::IdentityInitOnly | PretextTask::Untrained => {
            return Err(Error::invalid(format!("{} does not sample data", task.name())));
        }
    }
    Ok(t)
}

/// Pretext training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoderTraining {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Side of the square training patches.
    pub patch: usize,
}

impl Default for CoderTraining {
    fn default() -> Self {
        CoderTraining { lr: 1e-4, steps: 5000, batch_size: 64, patch: 8 }
    }
}

/// Plain SGD on the encoder and decoder; the middle filter stays fixed.
/// Returns the trained coder and the per-step batch loss.
pub fn train_coder<T: Scalar>(
    coder: &CoderWeights<T>,
    task: PretextTask,
    cfg: &CoderTraining,
    rng: &mut Rng,
) -> Result<(CoderWeights<T>, Vec<f64>)> {
    if !task.is_sampling() {
        return Err(Error::invalid(format!("{} is not a training task", task.name())));
    }
    if cfg.lr < 0.0 || cfg.batch_size == 0 || cfg.patch == 0 {
        return Err(Error::invalid("coder training needs lr >= 0 and non-empty batches"));
    }
    let mut coder = coder.clone();
    let mut curve = Vec::with_capacity(cfg.steps);
    let shape = [cfg.batch_size, coder.spec.c_in, cfg.patch, cfg.patch];
    let lr = T::lit(cfg.lr);
    for step in 0..cfg.steps {
        let x = sample_pretext::<T>(task, &shape, rng)?;
        let (loss, g_enc, g_dec) = coder_loss_and_grads(&x, &coder)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { stage: "coder step", index: step, detail: format!("loss {loss}") });
        }
        curve.push(loss);
        for (w, &g) in coder.enc.weight_mut().data_mut().iter_mut().zip(g_enc.data()) {
            *w -= lr * g;
        }
        for (w, &g) in coder.dec.weight_mut().data_mut().iter_mut().zip(g_dec.data()) {
            *w -= lr * g;
        }
    }
    Ok((coder, curve))
}

/// Coder for `spec` prepared according to `task`: trained from the small
/// random init for sampling tasks, identity filters, or frozen He-normal.
pub fn prepare_coder<T: Scalar>(
    spec: CoderSpec,
    task: PretextTask,
    cfg: &CoderTraining,
    rng: &mut Rng,
) -> Result<(CoderWeights<T>, Vec<f64>)> {
    match task {
        PretextTask::IdentityInitOnly => Ok((identity_init(&make_coder(spec, rng)?), Vec::new())),
        PretextTask::Untrained => Ok((make_he_coder(spec, rng)?, Vec::new())),
        _ => {
            let init = make_coder(spec, rng)?;
            train_coder(&init, task, cfg, rng)
        }
    }
}

/// Mean reconstruction loss on `samples` fresh rectified-normal patches.
pub fn heldout_loss<T: Scalar>(coder: &CoderWeights<T>, samples: usize, patch: usize, rng: &mut Rng) -> Result<f64> {
    const CHUNK: usize = 500;
    let mut total = 0.0;
    let mut done = 0;
    while done < samples {
        let n = CHUNK.min(samples - done);
        let x = sample_pretext::<T>(PretextTask::RectifiedNormal, &[n, coder.spec.c_in, patch, patch], rng)?;
        total += coder_loss(&x, coder)? * n as f64;
        done += n;
    }
    Ok(total / samples as f64)
}

/// `(C_out, C_in / groups)` matrix of per-filter L1 norms.
pub fn filter_norm_matrix<T: Scalar>(w: &ConvWeights<T>) -> Tensor<f64> {
    let shape = w.weight().shape();
    let (rows, cols, kk) = (shape[0], shape[1], shape[2] * shape[3]);
    let data = w.weight().data().chunks(kk).map(|f| f.iter().map(|v| v.to_f64().unwrap().abs()).sum()).collect();
    Tensor::from_vec(&[rows, cols], data).expect("filter bank shape")
}
