//! The two stages: architecture search on a supernet and final training of
//! the derived network.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::cutout_batch;
use super::config::{EvalConfig, SearchConfig};
use super::data::{DataSplits, Dataset};
use super::network::{build_network, DropState, Network, NetworkConfig};
use crate::darts::{
    bilevel_epoch, build_supernet, count_correct, derive_genotype, ArchParams, Batch,
    BilevelOptimizers, Genotype, Supernet, SupernetConfig,
};
use crate::error::{Error, Result};
use crate::mult::{
    build_builtin_multiplier, load_multiplier, reference_multiplier, BuiltinKind, MultiplierSpec,
};
use crate::tensor::{cosine_lr, Adam, ExecMode, Gradients, Graph, ParamGroup, Sgd, Tensor};

/// Multiplier setting meaning real-valued arithmetic.
pub const FP32: &str = "fp32";

/// Resolves `fp32`, a builtin multiplier name, or a table file. Files take
/// their energy from `energy`, else from the known reference multipliers
/// matching the file stem.
pub fn resolve_multiplier(spec: &str, energy: Option<f64>) -> Result<Option<MultiplierSpec>> {
    if spec == FP32 {
        return Ok(None);
    }
    let m = if let Ok(kind) = spec.parse::<BuiltinKind>() {
        build_builtin_multiplier(kind)
    } else if Path::new(spec).is_file() {
        let stem = Path::new(spec)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let energy = energy
            .or_else(|| reference_multiplier(&stem).map(|r| r.energy))
            .ok_or_else(|| {
                Error::Multiplier(format!(
                    "no energy known for `{spec}`; pass it explicitly (--energy)"
                ))
            })?;
        return load_multiplier(spec, energy).map(Some);
    } else {
        return Err(Error::Multiplier(format!(
            "unknown multiplier `{spec}`: not `{FP32}`, a builtin (exact, trunc_1..trunc_4) or an existing file"
        )));
    };
    match energy {
        Some(e) => m.with_energy(e).map(Some),
        None => Ok(Some(m)),
    }
}

pub fn exec_mode(multiplier: Option<MultiplierSpec>) -> ExecMode {
    multiplier.map_or(ExecMode::Fp32Exact, ExecMode::quant8)
}

/// One row of a run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Writes the log as CSV. Wall-clock time is left out so that runs with the
/// same seed produce identical files.
pub fn write_log_csv(path: impl AsRef<Path>, rows: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    writeln!(out, "epoch,train_loss,val_loss,val_acc,lr").expect("write to vec");
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6e}",
            r.epoch, r.train_loss, r.val_loss, r.val_acc, r.lr
        )
        .expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub initial_alphas: ArchParams,
    pub final_alphas: ArchParams,
    pub log: Vec<EpochLog>,
    pub seconds: f64,
    pub supernet: Supernet,
}

fn materialize(ds: &Dataset, index_batches: &[Vec<usize>]) -> Vec<Batch> {
    index_batches.iter().map(|idx| ds.batch(idx)).collect()
}

/// Mean loss and accuracy of `logits_fn` over `ds` in chunks of `batch_size`.
fn evaluate(
    ds: &Dataset,
    batch_size: usize,
    mut logits_fn: impl FnMut(Tensor) -> Result<Tensor>,
) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for idx in ds.ordered_batches(batch_size) {
        let b = ds.batch(&idx);
        let logits = logits_fn(b.images)?;
        correct += count_correct(&logits, &b.labels);
        let mut g = Graph::inference();
        let l = g.input(logits);
        let ce = g.softmax_cross_entropy(l, &b.labels)?;
        loss += g.value(ce).data()[0] * b.labels.len() as f64;
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

pub fn run_search(cfg: &SearchConfig, mode: &ExecMode, data: &Dataset) -> Result<SearchOutcome> {
    run_search_with(cfg, mode, data, |_| {})
}

/// Splits `data` into equal training and validation halves, alternates
/// weight and architecture steps for `cfg.epochs` epochs (weights only
/// during warmup) and derives the genotype of the final logits.
pub fn run_search_with(
    cfg: &SearchConfig,
    mode: &ExecMode,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<SearchOutcome> {
    if cfg.warmup_epochs > cfg.epochs {
        return Err(Error::Config(
            "`search.warmup_epochs` must not exceed `search.epochs`".into(),
        ));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [channels, _, _] = data.image_shape();
    let net_cfg = SupernetConfig {
        cells: cfg.cells,
        intermediate_nodes: cfg.intermediate_nodes,
        init_channels: cfg.init_channels,
        num_classes: data.num_classes(),
        in_channels: channels,
        approximate_preprocessing: cfg.approximate_preprocessing,
    };
    let mut net = build_supernet(&net_cfg, &mut rng)?;
    let initial_alphas = net.arch_params();
    let (train, val) = data.split_half(&mut rng);
    if train.len() < cfg.batch_size {
        return Err(Error::Data(format!(
            "{} images per search half cannot fill a batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let mut opt = BilevelOptimizers {
        weights: Sgd::new(cfg.w_opt.optimizer_config(), ParamGroup::Weight),
        arch: Adam::new(cfg.a_opt.optimizer_config(), ParamGroup::Arch),
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.w_opt.lr0);
        let train_batches = materialize(&train, &train.shuffled_batches(cfg.batch_size, &mut rng)?);
        let val_batches = materialize(&val, &val.shuffled_batches(cfg.batch_size, &mut rng)?);
        let update_arch = epoch >= cfg.warmup_epochs;
        let stats = bilevel_epoch(
            &mut net,
            &train_batches,
            &val_batches,
            &mut opt,
            lr,
            update_arch,
            mode,
        )?;
        let (val_loss, val_acc) = evaluate(&val, cfg.batch_size, |x| {
            net.predict(x, mode.clone(), false)
        })?;
        let row = EpochLog {
            epoch,
            train_loss: stats.train_loss,
            val_loss,
            val_acc,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        log.push(row);
    }
    let final_alphas = net.arch_params();
    Ok(SearchOutcome {
        genotype: derive_genotype(&final_alphas)?,
        initial_alphas,
        final_alphas,
        log,
        seconds: start.elapsed().as_secs_f64(),
        supernet: net,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub network: Network,
    pub test_loss: f64,
    pub test_acc: f64,
    pub param_count: usize,
    pub log: Vec<EpochLog>,
    pub seconds: f64,
}

/// Summary of a final-training run. Contains nothing time-dependent, so
/// identical runs serialize to identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub param_count: usize,
    pub epochs: usize,
    pub multiplier: String,
    pub seed: u64,
    pub config_hash: String,
}

impl TrainReport {
    pub fn new(outcome: &EvalOutcome, cfg: &EvalConfig, config_hash: &str) -> Self {
        TrainReport {
            test_accuracy: outcome.test_acc,
            test_loss: outcome.test_loss,
            param_count: outcome.param_count,
            epochs: cfg.epochs,
            multiplier: cfg.multiplier.clone(),
            seed: cfg.seed,
            config_hash: config_hash.to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Network configuration of the final-training stage for a dataset.
pub fn eval_network_config(cfg: &EvalConfig, data: &Dataset) -> NetworkConfig {
    let [channels, side, _] = data.image_shape();
    NetworkConfig {
        cells: cfg.cells,
        init_channels: cfg.init_channels,
        num_classes: data.num_classes(),
        in_channels: channels,
        image_size: side,
        auxiliary: cfg.aux_weight > 0.0,
        approximate_preprocessing: cfg.approximate_preprocessing,
    }
}

/// Training loss (main plus weighted auxiliary) of one batch, its weight
/// gradients and the number of correct main predictions.
pub fn eval_loss_and_grads(
    net: &mut Network,
    batch: &Batch,
    aux_weight: f64,
    mode: &ExecMode,
    drop: Option<&mut DropState>,
) -> Result<(f64, usize, Gradients)> {
    let (mut s, layers) = net.session(Graph::trainable(&[ParamGroup::Weight]), mode.clone(), true);
    let x = s.graph.input(batch.images.clone());
    let (logits, aux) = layers.forward(&mut s, x, drop)?;
    let mut loss = s.graph.softmax_cross_entropy(logits, &batch.labels)?;
    if let Some(aux) = aux.filter(|_| aux_weight > 0.0) {
        let aux_loss = s.graph.softmax_cross_entropy(aux, &batch.labels)?;
        let scaled = s.graph.scale(aux_loss, aux_weight)?;
        loss = s.graph.add(&[loss, scaled])?;
    }
    let grads = s.graph.backward(loss)?;
    let correct = count_correct(s.graph.value(logits), &batch.labels);
    Ok((s.graph.value(loss).data()[0], correct, grads))
}

pub fn run_eval(
    genotype: &Genotype,
    cfg: &EvalConfig,
    mode: &ExecMode,
    data: &DataSplits,
) -> Result<EvalOutcome> {
    run_eval_with(genotype, cfg, mode, data, |_| {})
}

/// Trains the network of `genotype` from scratch with cutout, drop path and
/// the auxiliary head, evaluating on the test split after every epoch.
pub fn run_eval_with(
    genotype: &Genotype,
    cfg: &EvalConfig,
    mode: &ExecMode,
    data: &DataSplits,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<EvalOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = build_network(genotype, &eval_network_config(cfg, &data.train), &mut rng)?;
    let mut drop = DropState {
        prob: cfg.drop_path_prob,
        rng: ChaCha8Rng::from_rng(&mut rng),
    };
    let mut sgd = Sgd::new(cfg.w_opt.optimizer_config(), ParamGroup::Weight);
    let mut log = Vec::with_capacity(cfg.epochs);
    let (mut test_loss, mut test_acc) = (f64::NAN, f64::NAN);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.w_opt.lr0);
        let (mut total, mut seen) = (0.0, 0usize);
        for idx in data.train.shuffled_batches(cfg.batch_size, &mut rng)? {
            let mut batch = data.train.batch(&idx);
            if cfg.cutout_size > 0 {
                cutout_batch(&mut batch.images, cfg.cutout_size, &mut rng)?;
            }
            let (loss, _, grads) =
                eval_loss_and_grads(&mut net, &batch, cfg.aux_weight, mode, Some(&mut drop))?;
            sgd.step(&mut net.store, &grads, lr);
            total += loss * idx.len() as f64;
            seen += idx.len();
        }
        (test_loss, test_acc) =
            evaluate(&data.test, cfg.batch_size, |x| net.predict(x, mode.clone()))?;
        let row = EpochLog {
            epoch,
            train_loss: total / seen as f64,
            val_loss: test_loss,
            val_acc: test_acc,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        log.push(row);
    }
    if cfg.epochs == 0 {
        (test_loss, test_acc) =
            evaluate(&data.test, cfg.batch_size, |x| net.predict(x, mode.clone()))?;
    }
    Ok(EvalOutcome {
        param_count: net.param_count(),
        network: net,
        test_loss,
        test_acc,
        log,
        seconds: start.elapsed().as_secs_f64(),
    })
}
