use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::coder::{prepare_coder, CoderTraining, PretextTask};
use crate::data::Dataset;
use crate::tensor::{softmax_cross_entropy, BnMode, Sgd};
use crate::{Error, Result, Rng, Scalar, Tensor};

use super::{build_network, CoderRegistry, NetKind, Network, NetworkSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub seed: u64,
    pub coder_task: PretextTask,
    pub coder: CoderTraining,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            epochs: 20,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 3e-4,
            augment: false,
            seed: 0,
            coder_task: PretextTask::RectifiedNormal,
            coder: CoderTraining::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config("training needs lr > 0, epochs > 0 and batches of at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate for 0-based `epoch` of `total` under a cosine schedule.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// Pretext loss curve of each coder, keyed by input width.
    pub coder_curves: BTreeMap<usize, Vec<f64>>,
}

/// Mean cross-entropy and top-1 accuracy with batch norm in eval mode.
pub fn evaluate<T: Scalar>(net: &mut Network<T>, data: &Dataset, batch_size: usize) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk, None)?;
        let (logits, _) = net.forward(&x.cast(), BnMode::Eval)?;
        let (l, _, c) = softmax_cross_entropy(&logits, &labels)?;
        loss += l * chunk.len() as f64;
        correct += c;
    }
    Ok(EvalMetrics { loss: loss / data.len() as f64, accuracy: correct as f64 / data.len() as f64 })
}

/// Phase one: one coder per distinct block width.
pub fn train_coders<T: Scalar>(
    spec: &NetworkSpec,
    task: PretextTask,
    cfg: &CoderTraining,
    rng: &Rng,
) -> Result<(CoderRegistry<T>, BTreeMap<usize, Vec<f64>>)> {
    let mut registry = BTreeMap::new();
    let mut curves = BTreeMap::new();
    for w in spec.coder_widths() {
        let (coder, curve) = prepare_coder(spec.coder_spec(w), task, cfg, &mut rng.fork(w as u64))?;
        registry.insert(w, coder);
        curves.insert(w, curve);
    }
    Ok((registry, curves))
}

/// Phase two: SGD with momentum on the learnable parameters; coders stay
/// frozen. A non-finite batch loss aborts with the epoch index.
pub fn train_learner<T: Scalar>(
    net: &mut Network<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::invalid("training set needs at least two images"));
    }
    let mut velocity: Vec<Vec<T>> = net.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let sgd = Sgd { lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay };
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            // Batch statistics need two samples.
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = train.batch(chunk, cfg.augment.then_some(&mut *rng))?;
            let x: Tensor<T> = x.cast();
            let (loss, grads, c) = net.loss_and_grads(&x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    stage: "learner epoch",
                    index: epoch + 1,
                    detail: format!("batch loss {loss}"),
                });
            }
            for ((p, g), v) in net.params_mut().into_iter().zip(&grads).zip(&mut velocity) {
                sgd.step(p.data_mut(), g.data(), v)?;
            }
            loss_sum += loss * chunk.len() as f64;
            correct += c;
            seen += chunk.len();
        }
        let val_metrics = evaluate(net, val, 500)?;
        let m = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss: val_metrics.loss,
            val_acc: val_metrics.accuracy,
        };
        if !m.val_loss.is_finite() {
            return Err(Error::Diverged {
                stage: "learner epoch",
                index: epoch + 1,
                detail: "validation loss is not finite".into(),
            });
        }
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

/// Two-phase training: pretext-trained frozen coders, then the learner.
/// Plain and residual specs skip phase one.
pub fn train_pnnh(
    spec: &NetworkSpec,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Network<f32>, TrainReport)> {
    cfg.validate()?;
    if train.channels() != spec.in_channels || train.num_classes != spec.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} channels / {} classes, network expects {} / {}",
            train.channels(),
            train.num_classes,
            spec.in_channels,
            spec.num_classes
        )));
    }
    let root = Rng::new(cfg.seed);
    let (coders, coder_curves) = if spec.kind == NetKind::Pnnh {
        train_coders(spec, cfg.coder_task, &cfg.coder, &root.fork(1))?
    } else {
        (BTreeMap::new(), BTreeMap::new())
    };
    let mut net = build_network(spec, coders, &mut root.fork(2))?;
    let epochs = train_learner(&mut net, train, val, cfg, &mut root.fork(3), on_epoch)?;
    Ok((net, TrainReport { epochs, coder_curves }))
}
