use crate::coder::CoderCache;
use crate::tensor::{relu, relu_backward_inplace, BnCache, BnMode};
use crate::{Error, Result, Rng, Scalar, Tensor};

use super::{BnPolicy, CoderRegistry, ConvBn, NetKind, NetworkSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Plain,
    Residual,
    Pnnh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shortcut {
    None,
    Identity,
    /// Spatial subsampling by `stride` plus zero channels up to `c_out`.
    Pad {
        stride: usize,
        c_out: usize,
    },
    /// Frozen coder shared by all blocks of input width `c_in`.
    Coder {
        c_in: usize,
    },
}

/// `relu(conv_bn(relu(conv_bn(x))) + shortcut(x))`
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub kind: BlockKind,
    pub first: ConvBn<T>,
    pub second: ConvBn<T>,
    pub shortcut: Shortcut,
}

pub struct BlockCache<T> {
    first_bn: Option<BnCache<T>>,
    first_pre: Tensor<T>,
    mid: Tensor<T>,
    second_bn: Option<BnCache<T>>,
    merged: Tensor<T>,
    coder: Option<CoderCache<T>>,
}

impl<T: Scalar> Block<T> {
    pub(super) fn new(spec: &NetworkSpec, c_in: usize, c_out: usize, stride: usize, rng: &mut Rng) -> Result<Self> {
        let same = c_in == c_out && stride == 1;
        let kind = match spec.kind {
            NetKind::Plain => BlockKind::Plain,
            NetKind::Pnnh if same => BlockKind::Pnnh,
            // Downsampling blocks of PNNH networks keep a residual shortcut.
            NetKind::Residual | NetKind::Pnnh => BlockKind::Residual,
        };
        let shortcut = match kind {
            BlockKind::Plain => Shortcut::None,
            BlockKind::Residual if same => Shortcut::Identity,
            BlockKind::Residual => Shortcut::Pad { stride, c_out },
            BlockKind::Pnnh => Shortcut::Coder { c_in },
        };
        let (mid, second_bn) = match kind {
            BlockKind::Pnnh => (c_out / 2, spec.bn_policy == BnPolicy::Both),
            _ => (c_out, true),
        };
        Ok(Block {
            kind,
            first: ConvBn::new(c_in, mid, stride, true, rng)?,
            second: ConvBn::new(mid, c_out, 1, second_bn, rng)?,
            shortcut,
        })
    }

    pub fn forward(
        &mut self,
        x: &Tensor<T>,
        mode: BnMode,
        coders: &CoderRegistry<T>,
    ) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (first_pre, first_bn) = self.first.forward(x, mode)?;
        let mid = relu(&first_pre, T::zero());
        let (mut merged, second_bn) = self.second.forward(&mid, mode)?;
        let mut coder_cache = None;
        match self.shortcut {
            Shortcut::None => {}
            Shortcut::Identity => merged.add_assign(x)?,
            Shortcut::Pad { stride, .. } => {
                let (n, c, h, w) = x.dims4()?;
                let (_, co, ho, wo) = merged.dims4()?;
                let out = merged.data_mut();
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let (si, sj) = (i * stride, j * stride);
                                if si < h && sj < w {
                                    out[((b * co + ch) * ho + i) * wo + j] +=
                                        x.data()[((b * c + ch) * h + si) * w + sj];
                                }
                            }
                        }
                    }
                }
            }
            Shortcut::Coder { c_in } => {
                let coder = coders.get(&c_in).ok_or(Error::MissingCoder(c_in))?;
                let (y, cache) = coder.forward_cached(x)?;
                merged.add_assign(&y)?;
                coder_cache = Some(cache);
            }
        }
        let y = relu(&merged, T::zero());
        Ok((y, BlockCache { first_bn, first_pre, mid, second_bn, merged, coder: coder_cache }))
    }

    /// Input gradient; parameter gradients are appended in `params_mut` order.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        cache: &BlockCache<T>,
        grad: &Tensor<T>,
        coders: &CoderRegistry<T>,
        grads: &mut Vec<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        relu_backward_inplace(&cache.merged, &mut g, T::zero())?;
        let mut second = Vec::new();
        let mut g_mid = self.second.backward(&cache.mid, &cache.second_bn, &g, &mut second)?;
        relu_backward_inplace(&cache.first_pre, &mut g_mid, T::zero())?;
        let mut g_x = self.first.backward(x, &cache.first_bn, &g_mid, grads)?;
        grads.extend(second);
        match self.shortcut {
            Shortcut::None => {}
            Shortcut::Identity => g_x.add_assign(&g)?,
            Shortcut::Pad { stride, .. } => {
                let (n, c, h, w) = x.dims4()?;
                let (_, co, ho, wo) = g.dims4()?;
                let gx = g_x.data_mut();
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let (si, sj) = (i * stride, j * stride);
                                if si < h && sj < w {
                                    gx[((b * c + ch) * h + si) * w + sj] += g.data()[((b * co + ch) * ho + i) * wo + j];
                                }
                            }
                        }
                    }
                }
            }
            Shortcut::Coder { c_in } => {
                let coder = coders.get(&c_in).ok_or(Error::MissingCoder(c_in))?;
                let cc = cache.coder.as_ref().expect("coder cache present");
                g_x.add_assign(&coder.backward(cc, &g, false)?.input)?;
            }
        }
        Ok(g_x)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.first.params_mut();
        v.extend(self.second.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut v = self.first.params();
        v.extend(self.second.params());
        v
    }

    pub fn conv_parameters(&self) -> usize {
        self.first.conv.weight().len() + self.second.conv.weight().len()
    }
}
