//! Plain, residual and PNNH convolutional classifiers with explicit
//! forward/backward passes.

mod block;
mod train;

pub use block::{Block, BlockCache, BlockKind, Shortcut};
pub use train::{
    cosine_lr, evaluate, train_coders, train_learner, train_pnnh, EpochMetrics, EvalMetrics, TrainConfig, TrainReport,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::coder::{CoderKind, CoderSpec, CoderWeights};
use crate::tensor::{
    conv2d, conv2d_backward, global_avg_pool, global_avg_pool_backward, he_normal_init, linear, linear_backward, relu,
    relu_backward_inplace, softmax_cross_entropy, BatchNorm, BnCache, BnMode, Linear,
};
use crate::{ConvWeights, Error, Result, Rng, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Plain,
    Residual,
    Pnnh,
}

impl NetKind {
    pub fn name(self) -> &'static str {
        match self {
            NetKind::Plain => "plain",
            NetKind::Residual => "residual",
            NetKind::Pnnh => "pnnh",
        }
    }
}

impl std::str::FromStr for NetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(NetKind::Plain),
            "residual" | "resnet" => Ok(NetKind::Residual),
            "pnnh" => Ok(NetKind::Pnnh),
            other => Err(Error::invalid(format!("unknown network kind {other:?}"))),
        }
    }
}

/// Where batch norm sits in a PNNH block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnPolicy {
    /// After both learner convolutions.
    Both,
    /// After the first learner convolution only; the merge sees raw conv output.
    FirstOnly,
}

impl std::str::FromStr for BnPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(BnPolicy::Both),
            "first_only" => Ok(BnPolicy::FirstOnly),
            other => Err(Error::invalid(format!("unknown bn policy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    pub kind: NetKind,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channel width of each stage; stages after the first halve resolution.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub stem_stride: usize,
    pub coder_kind: CoderKind,
    pub bn_policy: BnPolicy,
}

impl NetworkSpec {
    /// The 6n+2 CIFAR family: widths 16/32/64, `n` blocks per stage.
    pub fn cifar(kind: NetKind, n: usize) -> Self {
        NetworkSpec {
            kind,
            in_channels: 3,
            num_classes: 10,
            widths: vec![16, 32, 64],
            blocks_per_stage: n,
            stem_stride: 1,
            coder_kind: CoderKind::Vanilla,
            bn_policy: BnPolicy::FirstOnly,
        }
    }

    /// Reduced-width grayscale variant: widths 8/16/32 and a strided stem.
    pub fn mnist(kind: NetKind, n: usize) -> Self {
        NetworkSpec { in_channels: 1, widths: vec![8, 16, 32], stem_stride: 2, ..Self::cifar(kind, n) }
    }

    pub fn depth(&self) -> usize {
        2 * self.widths.len() * self.blocks_per_stage + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.blocks_per_stage == 0 {
            return Err(Error::Config("network needs at least one stage and block".into()));
        }
        if self.in_channels == 0 || self.num_classes < 2 || self.stem_stride == 0 {
            return Err(Error::Config("network needs inputs, two classes and a stem stride".into()));
        }
        if self.widths.iter().any(|&w| w < 2) {
            return Err(Error::Config("stage widths must be at least 2".into()));
        }
        Ok(())
    }

    /// One entry per block: `(c_in, c_out, stride)`.
    pub fn block_layout(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let mut c_in = self.widths[0];
        for (s, &w) in self.widths.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                out.push((c_in, w, stride));
                c_in = w;
            }
        }
        out
    }

    /// Input widths that need a coder.
    pub fn coder_widths(&self) -> Vec<usize> {
        if self.kind != NetKind::Pnnh {
            return Vec::new();
        }
        let mut w: Vec<usize> =
            self.block_layout().into_iter().filter(|&(ci, co, s)| ci == co && s == 1).map(|(ci, _, _)| ci).collect();
        w.dedup();
        w
    }

    pub fn coder_spec(&self, c_in: usize) -> CoderSpec {
        CoderSpec::for_block(self.coder_kind, c_in)
    }
}

/// Frozen coders keyed by input width; every block of that width shares one.
pub type CoderRegistry<T> = BTreeMap<usize, CoderWeights<T>>;

/// Convolution followed by batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn<T> {
    pub conv: ConvWeights<T>,
    pub bn: Option<BatchNorm<T>>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn new(c_in: usize, c_out: usize, stride: usize, bn: bool, rng: &mut Rng) -> Result<Self> {
        let w = he_normal_init(&[c_out, c_in, 3, 3], c_in * 9, rng)?;
        Ok(ConvBn { conv: ConvWeights::new(w, stride, 1, 1)?, bn: bn.then(|| BatchNorm::new(c_out)) })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, Option<BnCache<T>>)> {
        let h = conv2d(x, &self.conv)?;
        match &mut self.bn {
            Some(bn) => {
                let (y, c) = bn.forward(&h, mode)?;
                Ok((y, Some(c)))
            }
            None => Ok((h, None)),
        }
    }

    /// Returns the input gradient and appends parameter gradients in
    /// [`ConvBn::params_mut`] order.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        cache: &Option<BnCache<T>>,
        grad: &Tensor<T>,
        grads: &mut Vec<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut g_bn = None;
        let g_h = match (&self.bn, cache) {
            (Some(bn), Some(c)) => {
                let g = bn.backward(c, grad)?;
                g_bn = Some((g.gamma, g.beta));
                g.input
            }
            _ => grad.clone(),
        };
        let (g_x, g_w) = conv2d_backward(x, &self.conv, &g_h)?;
        grads.push(g_w);
        if let Some((g, b)) = g_bn {
            grads.push(g);
            grads.push(b);
        }
        Ok(g_x)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![self.conv.weight_mut()];
        if let Some(bn) = &mut self.bn {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
        v
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![self.conv.weight()];
        if let Some(bn) = &self.bn {
            v.push(&bn.gamma);
            v.push(&bn.beta);
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub stem: ConvBn<T>,
    pub blocks: Vec<Block<T>>,
    pub head: Linear<T>,
    pub coders: CoderRegistry<T>,
}

/// Forward state of a whole network.
pub struct NetCache<T> {
    input: Tensor<T>,
    stem_bn: Option<BnCache<T>>,
    stem_pre: Tensor<T>,
    blocks: Vec<(Tensor<T>, BlockCache<T>)>,
    pooled: Tensor<T>,
    last_shape: Vec<usize>,
}

/// Builds a network; PNNH networks take their frozen coders from `coders`.
pub fn build_network<T: Scalar>(spec: &NetworkSpec, coders: CoderRegistry<T>, rng: &mut Rng) -> Result<Network<T>> {
    spec.validate()?;
    for w in spec.coder_widths() {
        match coders.get(&w) {
            None => return Err(Error::MissingCoder(w)),
            Some(c) if c.spec != spec.coder_spec(w) => {
                return Err(Error::Config(format!("coder for width {w} has spec {:?}", c.spec)))
            }
            Some(_) => {}
        }
    }
    let stem = ConvBn::new(spec.in_channels, spec.widths[0], spec.stem_stride, true, rng)?;
    let blocks = spec
        .block_layout()
        .into_iter()
        .map(|(ci, co, stride)| Block::new(spec, ci, co, stride, rng))
        .collect::<Result<Vec<_>>>()?;
    let last = *spec.widths.last().expect("validated");
    Ok(Network { spec: spec.clone(), stem, blocks, head: Linear::new(last, spec.num_classes, rng), coders })
}

impl<T: Scalar> Network<T> {
    pub fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, NetCache<T>)> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::shape(format!("network expects {} channels, got {c}", self.spec.in_channels)));
        }
        let (stem_pre, stem_bn) = self.stem.forward(x, mode)?;
        let mut h = relu(&stem_pre, T::zero());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (y, cache) = block.forward(&h, mode, &self.coders)?;
            caches.push((h, cache));
            h = y;
        }
        let last_shape = h.shape().to_vec();
        let pooled = global_avg_pool(&h)?;
        let logits = linear(&pooled, &self.head)?;
        Ok((logits, NetCache { input: x.clone(), stem_bn, stem_pre, blocks: caches, pooled, last_shape }))
    }

    /// Gradients of the learnable parameters, in [`Network::params_mut`] order.
    pub fn backward(&self, cache: &NetCache<T>, grad_logits: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self.backward_full(cache, grad_logits)?.0)
    }

    /// Parameter gradients plus the gradient with respect to the input.
    pub fn backward_full(&self, cache: &NetCache<T>, grad_logits: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let (g_pool, g_fc_w, g_fc_b) = linear_backward(&cache.pooled, &self.head, grad_logits)?;
        let mut g = global_avg_pool_backward(&g_pool, &cache.last_shape)?;
        let mut per_block = Vec::with_capacity(self.blocks.len());
        for (block, (x, bc)) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut grads = Vec::new();
            g = block.backward(x, bc, &g, &self.coders, &mut grads)?;
            per_block.push(grads);
        }
        relu_backward_inplace(&cache.stem_pre, &mut g, T::zero())?;
        let mut out = Vec::new();
        let g_in = self.stem.backward(&cache.input, &cache.stem_bn, &g, &mut out)?;
        for grads in per_block.into_iter().rev() {
            out.extend(grads);
        }
        out.push(g_fc_w);
        out.push(g_fc_b);
        Ok((out, g_in))
    }

    /// Learnable parameters; frozen coders are excluded.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.stem.params_mut();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.push(&mut self.head.weight);
        v.push(&mut self.head.bias);
        v
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = self.stem.params();
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.push(&self.head.weight);
        v.push(&self.head.bias);
        v
    }

    pub fn learnable_parameters(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Weights of all learnable convolutions (stem and blocks).
    pub fn conv_parameters(&self) -> usize {
        self.stem.conv.weight().len() + self.blocks.iter().map(|b| b.conv_parameters()).sum::<usize>()
    }

    /// Stored frozen coder weights, counted once per shared coder.
    pub fn coder_parameters(&self) -> usize {
        self.coders.values().map(|c| c.parameter_count()).sum()
    }

    /// Mean cross-entropy, gradients and correct count on one batch.
    pub fn loss_and_grads(&mut self, x: &Tensor<T>, labels: &[usize]) -> Result<(f64, Vec<Tensor<T>>, usize)> {
        let (logits, cache) = self.forward(x, BnMode::Train)?;
        let (loss, g, correct) = softmax_cross_entropy(&logits, labels)?;
        Ok((loss, self.backward(&cache, &g)?, correct))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coder::{identity_init, make_coder};

    fn registry(spec: &NetworkSpec) -> CoderRegistry<f64> {
        spec.coder_widths()
            .into_iter()
            .map(|w| (w, identity_init(&make_coder(spec.coder_spec(w), &mut Rng::new(0)).unwrap())))
            .collect()
    }

    #[test]
    fn cifar_depths() {
        assert_eq!(NetworkSpec::cifar(NetKind::Residual, 18).depth(), 110);
        assert_eq!(NetworkSpec::cifar(NetKind::Residual, 3).depth(), 20);
        let layout = NetworkSpec::cifar(NetKind::Plain, 2).block_layout();
        assert_eq!(layout, vec![(16, 16, 1), (16, 16, 1), (16, 32, 2), (32, 32, 1), (32, 64, 2), (64, 64, 1)]);
    }

    #[test]
    fn coder_widths_only_for_pnnh() {
        assert!(NetworkSpec::cifar(NetKind::Residual, 2).coder_widths().is_empty());
        assert_eq!(NetworkSpec::cifar(NetKind::Pnnh, 2).coder_widths(), vec![16, 32, 64]);
        assert_eq!(NetworkSpec::cifar(NetKind::Pnnh, 1).coder_widths(), vec![16]);
    }

    #[test]
    fn missing_coder_is_reported() {
        let spec = NetworkSpec::cifar(NetKind::Pnnh, 2);
        let mut reg = registry(&spec);
        reg.remove(&32);
        match build_network(&spec, reg, &mut Rng::new(0)) {
            Err(Error::MissingCoder(32)) => {}
            other => panic!("expected missing coder, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn forward_shapes() {
        for kind in [NetKind::Plain, NetKind::Residual, NetKind::Pnnh] {
            let spec = NetworkSpec::mnist(kind, 1);
            let mut net = build_network(&spec, registry(&spec), &mut Rng::new(1)).unwrap();
            let x = Tensor::full(&[2, 1, 28, 28], 0.5);
            let (logits, _) = net.forward(&x, BnMode::Train).unwrap();
            assert_eq!(logits.shape(), &[2, 10]);
            let (_, grads, _) = net.loss_and_grads(&x, &[1, 2]).unwrap();
            let shapes: Vec<_> = net.params().iter().map(|p| p.shape().to_vec()).collect();
            assert_eq!(grads.iter().map(|g| g.shape().to_vec()).collect::<Vec<_>>(), shapes);
        }
    }

    #[test]
    fn pnnh_learner_is_about_half_of_residual() {
        let res = build_network::<f32>(&NetworkSpec::cifar(NetKind::Residual, 18), BTreeMap::new(), &mut Rng::new(0))
            .unwrap();
        let spec = NetworkSpec::cifar(NetKind::Pnnh, 18);
        let coders = spec
            .coder_widths()
            .into_iter()
            .map(|w| (w, make_coder(spec.coder_spec(w), &mut Rng::new(0)).unwrap()))
            .collect();
        let pnnh = build_network::<f32>(&spec, coders, &mut Rng::new(0)).unwrap();
        let ratio = pnnh.conv_parameters() as f64 / res.conv_parameters() as f64;
        assert!((0.45..0.6).contains(&ratio), "ratio {ratio}");
        assert_eq!(pnnh.coder_parameters(), 2 * 9 * (16 * 8 + 32 * 16 + 64 * 32));
    }

    #[test]
    fn frozen_coders_are_not_parameters() {
        let spec = NetworkSpec::mnist(NetKind::Pnnh, 2);
        let mut net = build_network(&spec, registry(&spec), &mut Rng::new(2)).unwrap();
        let before = net.coders.clone();
        for p in net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        assert_eq!(net.coders, before);
    }
}
