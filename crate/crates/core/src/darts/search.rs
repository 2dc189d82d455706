//! First-order alternating optimization of weights and architecture logits.

use super::supernet::Supernet;
use crate::error::{Error, Result};
use crate::tensor::{Adam, ExecMode, Gradients, Graph, ParamGroup, Sgd, Tensor};

/// A labeled mini-batch of images `[n, c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Weight optimizer (training split) and architecture optimizer (validation
/// split).
#[derive(Debug, Clone)]
pub struct BilevelOptimizers {
    pub weights: Sgd,
    pub arch: Adam,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_acc: f64,
    /// Mean validation loss over the architecture steps, if any were taken.
    pub arch_loss: Option<f64>,
    pub steps: usize,
}

/// Number of rows whose largest logit is at the label.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == l
        })
        .count()
}

/// Loss and gradient of one batch with respect to one parameter group.
fn loss_and_grads(
    net: &mut Supernet,
    batch: &Batch,
    group: ParamGroup,
    mode: &ExecMode,
) -> Result<(f64, usize, Gradients)> {
    let (mut s, layers) = net.session(Graph::trainable(&[group]), mode.clone(), true);
    let x = s.graph.input(batch.images.clone());
    let logits = layers.forward(&mut s, x)?;
    let loss = s.graph.softmax_cross_entropy(logits, &batch.labels)?;
    let grads = s.graph.backward(loss)?;
    let correct = count_correct(s.graph.value(logits), &batch.labels);
    Ok((s.graph.value(loss).data()[0], correct, grads))
}

/// One pass over `train`. Each weight step on a training batch is preceded,
/// when `update_arch` is set, by one architecture step on the paired
/// validation batch; the validation batches are cycled independently.
pub fn bilevel_epoch(
    net: &mut Supernet,
    train: &[Batch],
    val: &[Batch],
    opt: &mut BilevelOptimizers,
    lr: f64,
    update_arch: bool,
    mode: &ExecMode,
) -> Result<EpochStats> {
    if train.is_empty() {
        return Err(Error::Data("training split yields no batches".into()));
    }
    if update_arch && val.is_empty() {
        return Err(Error::Data("validation split yields no batches".into()));
    }
    let mut stats = EpochStats::default();
    let (mut seen, mut correct, mut arch_loss) = (0usize, 0usize, 0.0);
    for (i, batch) in train.iter().enumerate() {
        if update_arch {
            let vb = &val[i % val.len()];
            let (loss, _, grads) = loss_and_grads(net, vb, ParamGroup::Arch, mode)?;
            opt.arch.step(&mut net.store, &grads);
            arch_loss += loss;
        }
        let (loss, c, grads) = loss_and_grads(net, batch, ParamGroup::Weight, mode)?;
        opt.weights.step(&mut net.store, &grads, lr);
        stats.train_loss += loss * batch.labels.len() as f64;
        seen += batch.labels.len();
        correct += c;
        stats.steps += 1;
    }
    stats.train_loss /= seen as f64;
    stats.train_acc = correct as f64 / seen as f64;
    stats.arch_loss = update_arch.then(|| arch_loss / train.len() as f64);
    Ok(stats)
}
