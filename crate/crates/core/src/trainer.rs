//! Mini-batch SGD with classical momentum, dataset splitting, and the two
//! evaluation protocols: intra-operative (held-out views of the same
//! phantoms) and leave-one-phantom-out.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{group_by_phantom, stack_inputs, stack_targets, DecompositionSample, SampleId};
use crate::error::{Error, Result};
use crate::losses::{total_loss_node, LossBreakdown, LossWeights, NormMode};
use crate::metrics::{evaluate_predictions, predict_all, MetricReport, PeakPolicy};
use crate::model::{build_network, forward_graph, register_params, Model, NetworkConfig, NetworkParams};
use crate::ndtensor::{Element, Graph, Mode, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// One run; train, validation and test use disjoint view sets of all phantoms.
    IntraOp,
    /// One run per phantom, tested on that phantom and trained on the others.
    Lopo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub protocol: Protocol,
    #[serde(default)]
    pub norm_mode: NormMode,
    /// Checkpoint to start from instead of a fresh initialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<PathBuf>,
}

impl TrainConfig {
    /// Small-scale defaults: 64×64 images, a few hundred samples.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 4,
            epochs: 30,
            weights: LossWeights::new(0.5, 0.1).expect("valid weights"),
            seed: 42,
            split: [0.6, 0.2, 0.2],
            protocol: Protocol::IntraOp,
            norm_mode: NormMode::Mean,
            warm_start: None,
        }
    }

    /// Optimizer settings of the original full-resolution setup.
    pub fn paper() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-6,
            batch_size: 16,
            epochs: 200,
            protocol: Protocol::Lopo,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::param("epochs must be >= 1"));
        }
        self.weights.validate()?;
        validate_fractions(&self.split)
    }
}

fn validate_fractions(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::param(format!("split fractions must be finite and >= 0, got {f:?}")));
    }
    let sum: f64 = f.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("split fractions must sum to 1, got {sum}")));
    }
    Ok(())
}

/// Seeded shuffle of `0..n` partitioned into train, validation and test
/// index sets of sizes `round(n·f₀)`, `round(n·f₁)` and the remainder.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    validate_fractions(&fractions)?;
    if n == 0 {
        return Err(Error::param("cannot split an empty dataset"));
    }
    let n_train = (n as f64 * fractions[0]).round() as usize;
    let n_val = (n as f64 * fractions[1]).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::param(format!(
            "split {fractions:?} of {n} items leaves a set empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok([order, val, test])
}

/// [`split_indices`] applied to `items`.
pub fn split_dataset<T: Clone>(items: &[T], fractions: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let [a, b, c] = split_indices(items.len(), fractions, seed)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| items[i].clone()).collect();
    Ok((pick(a), pick(b), pick(c)))
}

/// Classical momentum: `v ← m·v − lr·g`, then `p ← p + v`.
pub fn sgd_step<T: Element>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    velocity: &mut [Tensor<T>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape("sgd_step: parameter, gradient and velocity counts differ"));
    }
    let (lr, m) = (T::from_f64(lr), T::from_f64(momentum));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(format!("sgd_step: shapes {:?}, {:?}, {:?}", p.shape(), g.shape(), v.shape())));
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = m * *vv - lr * gv;
            *pv = *pv + *vv;
        }
    }
    Ok(())
}

fn epoch_stream(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * epoch as u64 + purpose);
    rng
}

/// Order in which the training samples are visited during `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_stream(seed, epoch, 0));
    order
}

/// Generator for the dropout masks drawn during `epoch`.
pub fn dropout_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    epoch_stream(seed, epoch, 1)
}

struct Pass {
    loss: LossBreakdown,
    grads: Option<Vec<Tensor<f32>>>,
}

fn batch_pass(
    params: &NetworkParams<f32>,
    net: &NetworkConfig,
    batch: &[&DecompositionSample],
    weights: LossWeights,
    norm: NormMode,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    want_grads: bool,
) -> Result<Pass> {
    let mut g = Graph::<f32>::new();
    let vars = register_params(&mut g, params, net);
    let x = g.input(stack_inputs(batch)?);
    let (dec, rec) = forward_graph(&mut g, &vars, net, x, mode, rng)?;
    let target = g.input(stack_targets(batch)?);
    let (dl, rl, total) = total_loss_node(&mut g, dec, target, rec, x, weights, norm)?;
    let loss = LossBreakdown {
        decomposition: g.scalar_value(dl)?,
        reconstruction: g.scalar_value(rl)?,
        total: g.scalar_value(total)?,
    };
    if !loss.total.is_finite() || !want_grads {
        return Ok(Pass { loss, grads: None });
    }
    let mut grads = g.backward(total)?;
    let grads = vars
        .iter()
        .zip(&params.tensors)
        .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
        .collect();
    Ok(Pass { loss, grads: Some(grads) })
}

/// Sample-weighted mean objective of `params` over `samples`, taken in
/// consecutive batches of `batch_size`.
pub fn evaluate_loss(
    params: &NetworkParams<f32>,
    net: &NetworkConfig,
    samples: &[&DecompositionSample],
    batch_size: usize,
    weights: LossWeights,
    norm: NormMode,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let mut acc = LossAccumulator::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let pass = batch_pass(params, net, chunk, weights, norm, mode, rng, false)?;
        acc.add(&pass.loss, chunk.len());
    }
    acc.mean()
}

#[derive(Default)]
struct LossAccumulator {
    dec: f64,
    rec: f64,
    total: f64,
    n: usize,
}

impl LossAccumulator {
    fn add(&mut self, l: &LossBreakdown, count: usize) {
        let w = count as f64;
        self.dec += w * l.decomposition;
        self.rec += w * l.reconstruction;
        self.total += w * l.total;
        self.n += count;
    }

    fn mean(&self) -> Result<LossBreakdown> {
        if self.n == 0 {
            return Err(Error::param("no samples to average the loss over"));
        }
        let n = self.n as f64;
        Ok(LossBreakdown {
            decomposition: self.dec / n,
            reconstruction: self.rec / n,
            total: self.total / n,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the batch objectives seen during the epoch,
    /// each taken before its update.
    pub train_loss: f64,
    pub train_decomposition: f64,
    pub train_reconstruction: f64,
    pub val_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub config: TrainConfig,
    pub network: NetworkConfig,
    pub train_ids: Vec<SampleId>,
    pub val_ids: Vec<SampleId>,
    pub test_ids: Vec<SampleId>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (lowest validation loss).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub report: Option<MetricReport>,
    pub checkpoint: Option<String>,
}

impl RunRecord {
    pub fn validate(&self) -> Result<()> {
        if self.epochs.len() != self.config.epochs {
            return Err(Error::Contract(format!(
                "record has {} epochs, config asks for {}",
                self.epochs.len(),
                self.config.epochs
            )));
        }
        if self.epochs.iter().any(|e| !e.train_loss.is_finite() || !e.val_loss.is_finite()) {
            return Err(Error::Contract("record contains non-finite losses".into()));
        }
        Ok(())
    }

    /// `epoch,train_loss,val_loss` rows.
    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:e},{:e}", e.epoch, e.train_loss, e.val_loss);
        }
        out
    }
}

/// A finished run: its record and the best-validation parameters.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: Model,
}

fn ids(set: &[&DecompositionSample]) -> Vec<SampleId> {
    set.iter().map(|s| s.id()).collect()
}

/// Trains `net` on `train_set`, selecting the epoch with the lowest
/// validation loss. Starts from `init` when given, otherwise from a fresh
/// initialization seeded by `cfg.seed`.
pub fn train(
    cfg: &TrainConfig,
    net: &NetworkConfig,
    train_set: &[&DecompositionSample],
    val_set: &[&DecompositionSample],
    init: Option<&NetworkParams<f32>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::param("training and validation sets must be non-empty"));
    }
    if let Some(s) = train_set.iter().chain(val_set).find(|s| s.components() != net.components) {
        return Err(Error::shape(format!(
            "sample {:?} has {} components, network predicts {}",
            s.id(),
            s.components(),
            net.components
        )));
    }
    let mut params = match init {
        Some(p) => {
            p.validate(net)?;
            p.clone()
        }
        None => build_network::<f32>(net, cfg.seed)?,
    };
    let mut velocity: Vec<Tensor<f32>> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let trainable: Vec<bool> = (0..params.tensors.len()).map(|i| params.is_trainable(net, i)).collect();

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best = (usize::MAX, f64::INFINITY, params.clone());
    let started = Instant::now();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        let mut rng = dropout_rng(cfg.seed, epoch);
        let mut acc = LossAccumulator::default();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&DecompositionSample> = chunk.iter().map(|&i| train_set[i]).collect();
            let pass = batch_pass(&params, net, &batch, cfg.weights, cfg.norm_mode, Mode::Train, &mut rng, true)?;
            if !pass.loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    decomposition: pass.loss.decomposition,
                    reconstruction: pass.loss.reconstruction,
                });
            }
            acc.add(&pass.loss, batch.len());
            let mut grads = pass.grads.expect("gradients requested");
            for (g, &t) in grads.iter_mut().zip(&trainable) {
                if !t {
                    *g = Tensor::zeros(g.shape());
                }
            }
            sgd_step(&mut params.tensors, &grads, &mut velocity, cfg.learning_rate, cfg.momentum)?;
        }
        let train_loss = acc.mean()?;
        let val = evaluate_loss(&params, net, val_set, cfg.batch_size, cfg.weights, cfg.norm_mode, Mode::Eval, &mut rng)?;
        if !val.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                decomposition: val.decomposition,
                reconstruction: val.reconstruction,
            });
        }
        if val.total < best.1 {
            best = (epoch, val.total, params.clone());
        }
        let record = EpochRecord {
            epoch,
            train_loss: train_loss.total,
            train_decomposition: train_loss.decomposition,
            train_reconstruction: train_loss.reconstruction,
            val_loss: val.total,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {:>3}/{}: train {:.6} (dec {:.6}, rec {:.6}) val {:.6}",
            epoch + 1,
            cfg.epochs,
            record.train_loss,
            record.train_decomposition,
            record.train_reconstruction,
            record.val_loss
        );
        epochs.push(record);
    }

    let (best_epoch, best_val_loss, best_params) = best;
    let record = RunRecord {
        name: String::from("run"),
        config: cfg.clone(),
        network: net.clone(),
        train_ids: ids(train_set),
        val_ids: ids(val_set),
        test_ids: Vec::new(),
        epochs,
        best_epoch,
        best_val_loss,
        report: None,
        checkpoint: None,
    };
    record.validate()?;
    Ok(TrainOutcome {
        record,
        model: Model::new(net.clone(), best_params)?,
    })
}

/// Train/validation/test membership of one protocol run.
#[derive(Clone, Debug)]
pub struct RunSplit<'a> {
    pub name: String,
    pub train: Vec<&'a DecompositionSample>,
    pub val: Vec<&'a DecompositionSample>,
    pub test: Vec<&'a DecompositionSample>,
}

/// Rejects splits where a sample, or for the protocol's unit (view or
/// phantom) any shared key, appears both in training data and the test set.
pub fn check_no_leakage(split: &RunSplit<'_>, protocol: Protocol) -> Result<()> {
    let key = |s: &DecompositionSample| match protocol {
        Protocol::IntraOp => s.view.to_string(),
        Protocol::Lopo => s.phantom.clone(),
    };
    let seen: BTreeSet<SampleId> = split.train.iter().chain(&split.val).map(|s| s.id()).collect();
    let keys: BTreeSet<String> = split.train.iter().chain(&split.val).map(|s| key(s)).collect();
    let train_ids: BTreeSet<SampleId> = split.train.iter().map(|s| s.id()).collect();
    if split.val.iter().any(|s| train_ids.contains(&s.id())) {
        return Err(Error::Contract(format!("{}: validation overlaps training", split.name)));
    }
    for s in &split.test {
        if seen.contains(&s.id()) || keys.contains(&key(s)) {
            return Err(Error::Contract(format!(
                "{}: test sample {:?} leaks into training data",
                split.name,
                s.id()
            )));
        }
    }
    Ok(())
}

/// Builds the per-run splits of `protocol` over `samples`.
pub fn protocol_splits<'a>(
    protocol: Protocol,
    samples: &'a [DecompositionSample],
    fractions: [f64; 3],
    seed: u64,
) -> Result<Vec<RunSplit<'a>>> {
    validate_fractions(&fractions)?;
    let groups = group_by_phantom(samples);
    let splits = match protocol {
        Protocol::IntraOp => {
            let views: Vec<usize> = samples.iter().map(|s| s.view).collect::<BTreeSet<_>>().into_iter().collect();
            let [tr, va, te] = split_indices(views.len(), fractions, seed)?;
            let set = |idx: &[usize]| idx.iter().map(|&i| views[i]).collect::<BTreeSet<usize>>();
            let (tr, va, te) = (set(&tr), set(&va), set(&te));
            let pick = |vs: &BTreeSet<usize>| samples.iter().filter(|s| vs.contains(&s.view)).collect();
            vec![RunSplit {
                name: "intra_op".into(),
                train: pick(&tr),
                val: pick(&va),
                test: pick(&te),
            }]
        }
        Protocol::Lopo => {
            if groups.len() < 3 {
                return Err(Error::param(format!(
                    "leave-one-phantom-out needs at least 3 phantoms, got {}",
                    groups.len()
                )));
            }
            let fit = fractions[0] + fractions[1];
            if fractions[0] == 0.0 || fractions[1] == 0.0 {
                return Err(Error::param("leave-one-phantom-out needs non-zero train and validation fractions"));
            }
            let share = fractions[0] / fit;
            let mut runs = Vec::with_capacity(groups.len());
            for (held_out, test) in &groups {
                let rest: Vec<&DecompositionSample> =
                    samples.iter().filter(|s| &s.phantom != held_out).collect();
                let n_train = (rest.len() as f64 * share).round() as usize;
                if n_train == 0 || n_train >= rest.len() {
                    return Err(Error::param(format!(
                        "split of {} training samples leaves a set empty",
                        rest.len()
                    )));
                }
                let mut order: Vec<usize> = (0..rest.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let (tr, va) = order.split_at(n_train);
                runs.push(RunSplit {
                    name: format!("lopo:{held_out}"),
                    train: tr.iter().map(|&i| rest[i]).collect(),
                    val: va.iter().map(|&i| rest[i]).collect(),
                    test: test.clone(),
                });
            }
            runs
        }
    };
    for s in &splits {
        check_no_leakage(s, protocol)?;
    }
    Ok(splits)
}

/// All runs of a protocol and the report over their pooled test predictions.
#[derive(Clone, Debug)]
pub struct ProtocolOutcome {
    pub runs: Vec<TrainOutcome>,
    pub overall: MetricReport,
}

/// Trains and evaluates every run of `cfg.protocol` on `samples`.
pub fn run_protocol(
    cfg: &TrainConfig,
    net: &NetworkConfig,
    samples: &[DecompositionSample],
    init: Option<&NetworkParams<f32>>,
) -> Result<ProtocolOutcome> {
    cfg.validate()?;
    let splits = protocol_splits(cfg.protocol, samples, cfg.split, cfg.seed)?;
    let mut runs = Vec::with_capacity(splits.len());
    let mut pooled_samples = Vec::new();
    let mut pooled_predictions = Vec::new();
    for split in &splits {
        log::info!(
            "{}: {} train, {} val, {} test samples",
            split.name,
            split.train.len(),
            split.val.len(),
            split.test.len()
        );
        let mut outcome = train(cfg, net, &split.train, &split.val, init)?;
        let test: Vec<DecompositionSample> = split.test.iter().map(|&s| s.clone()).collect();
        let predictions = predict_all(&outcome.model, &test)?;
        outcome.record.name = split.name.clone();
        outcome.record.test_ids = ids(&split.test);
        outcome.record.report = Some(evaluate_predictions(&test, &predictions, PeakPolicy::GroundTruthMax)?);
        pooled_samples.extend(test);
        pooled_predictions.extend(predictions);
        runs.push(outcome);
    }
    let overall = evaluate_predictions(&pooled_samples, &pooled_predictions, PeakPolicy::GroundTruthMax)?;
    Ok(ProtocolOutcome { runs, overall })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{Label, ProjectionImage};

    #[test]
    fn split_sizes() {
        let [a, b, c] = split_indices(1200, [0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (720, 240, 240));
        let [a, b, c] = split_indices(45, [0.6, 0.2, 0.2], 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (27, 9, 9));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..45).collect::<Vec<_>>());
    }

    #[test]
    fn split_is_seeded() {
        let items: Vec<u32> = (0..50).collect();
        assert_eq!(split_dataset(&items, [0.6, 0.2, 0.2], 3).unwrap(), split_dataset(&items, [0.6, 0.2, 0.2], 3).unwrap());
        assert_ne!(split_dataset(&items, [0.6, 0.2, 0.2], 3).unwrap(), split_dataset(&items, [0.6, 0.2, 0.2], 4).unwrap());
    }

    #[test]
    fn split_errors() {
        assert!(split_indices(0, [0.6, 0.2, 0.2], 0).is_err());
        assert!(split_indices(2, [0.6, 0.2, 0.2], 0).is_err());
        assert!(split_indices(10, [0.5, 0.2, 0.2], 0).is_err());
        assert!(split_indices(10, [1.0, 0.0, 0.0], 0).is_err());
        assert!(split_indices(10, [1.2, -0.1, -0.1], 0).is_err());
    }

    #[test]
    fn sgd_recurrence() {
        let mut p = vec![Tensor::new(&[1], vec![0.0f64]).unwrap()];
        let g = vec![Tensor::new(&[1], vec![1.0]).unwrap()];
        let mut v = vec![Tensor::zeros(&[1])];
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9).unwrap();
        assert!((p[0].data()[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9).unwrap();
        assert!((p[0].data()[0] + 0.29).abs() < 1e-15);

        let mut p = vec![Tensor::new(&[1], vec![5.0f64]).unwrap()];
        let mut v = vec![Tensor::zeros(&[1])];
        sgd_step(&mut p, &[Tensor::new(&[1], vec![2.0]).unwrap()], &mut v, 1.0, 0.0).unwrap();
        assert_eq!(p[0].data()[0], 3.0);
        for _ in 0..5 {
            sgd_step(&mut p, &[Tensor::zeros(&[1])], &mut v, 1.0, 0.0).unwrap();
        }
        assert_eq!(p[0].data()[0], 3.0);
        assert!(sgd_step(&mut p, &[Tensor::zeros(&[2])], &mut v, 1.0, 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig::paper().validate().is_ok());
        let mut c = TrainConfig::desk();
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.split = [0.6, 0.2, 0.1];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    fn toy_samples(phantoms: &[&str], views: usize) -> Vec<DecompositionSample> {
        let mut out = Vec::new();
        for (pi, p) in phantoms.iter().enumerate() {
            for v in 0..views {
                let img = |s: f32, label| {
                    let data = (0..64).map(|i| s * ((i + v + pi) % 7) as f32 * 0.1).collect();
                    ProjectionImage::new(8, 8, data, label).unwrap()
                };
                out.push(DecompositionSample {
                    phantom: p.to_string(),
                    view: v,
                    input: img(3.0, Label::Total),
                    targets: vec![img(1.0, Label::Component(0)), img(2.0, Label::Component(1))],
                });
            }
        }
        out
    }

    #[test]
    fn lopo_splits_are_phantom_disjoint() {
        let samples = toy_samples(&["a", "b", "c"], 10);
        let splits = protocol_splits(Protocol::Lopo, &samples, [0.6, 0.2, 0.2], 0).unwrap();
        assert_eq!(splits.len(), 3);
        for s in &splits {
            let held: BTreeSet<&str> = s.test.iter().map(|x| x.phantom.as_str()).collect();
            assert_eq!(held.len(), 1);
            assert!(s.train.iter().chain(&s.val).all(|x| !held.contains(x.phantom.as_str())));
            assert_eq!(s.train.len() + s.val.len(), 20);
        }
        assert!(protocol_splits(Protocol::Lopo, &samples[..20], [0.6, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn intra_op_splits_are_view_disjoint() {
        let samples = toy_samples(&["a", "b", "c"], 10);
        let splits = protocol_splits(Protocol::IntraOp, &samples, [0.6, 0.2, 0.2], 0).unwrap();
        assert_eq!(splits.len(), 1);
        let s = &splits[0];
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (18, 6, 6));
        let train_views: BTreeSet<usize> = s.train.iter().map(|x| x.view).collect();
        assert!(s.test.iter().all(|x| !train_views.contains(&x.view)));
    }

    #[test]
    fn leakage_is_rejected() {
        let samples = toy_samples(&["a", "b", "c"], 4);
        let split = RunSplit {
            name: "bad".into(),
            train: samples[..6].iter().collect(),
            val: samples[6..8].iter().collect(),
            test: samples[5..9].iter().collect(),
        };
        assert!(matches!(check_no_leakage(&split, Protocol::IntraOp), Err(Error::Contract(_))));
    }

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            input_size: [8, 8],
            levels: 1,
            base_channels: 2,
            components: 2,
            dropout_p: 0.0,
            fusion: crate::model::FusionMode::Learnable,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let samples = toy_samples(&["a"], 6);
        let refs: Vec<&DecompositionSample> = samples.iter().collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 2,
            ..TrainConfig::desk()
        };
        let out = train(&cfg, &tiny_net(), &refs[..4], &refs[4..], None).unwrap();
        // Batches are regrouped every epoch, so only the f64 summation order changes.
        let first = out.record.epochs[0].train_loss;
        assert!(out.record.epochs.iter().all(|e| (e.train_loss - first).abs() <= 1e-12 * first));
        assert!(out.record.epochs.iter().all(|e| e.val_loss == out.record.epochs[0].val_loss));
        assert_eq!(out.record.epochs.len(), 3);
    }

    #[test]
    fn training_is_deterministic() {
        let samples = toy_samples(&["a"], 6);
        let refs: Vec<&DecompositionSample> = samples.iter().collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            ..TrainConfig::desk()
        };
        let mut net = tiny_net();
        net.dropout_p = 0.5;
        let a = train(&cfg, &net, &refs[..4], &refs[4..], None).unwrap();
        let b = train(&cfg, &net, &refs[..4], &refs[4..], None).unwrap();
        let losses = |o: &TrainOutcome| o.record.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn diverging_run_reports_batch() {
        let samples = toy_samples(&["a"], 6);
        let refs: Vec<&DecompositionSample> = samples.iter().collect();
        let cfg = TrainConfig {
            learning_rate: 1e30,
            epochs: 5,
            batch_size: 2,
            ..TrainConfig::desk()
        };
        let err = train(&cfg, &tiny_net(), &refs[..4], &refs[4..], None).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }

    #[test]
    fn loss_curve_csv_has_header_and_rows() {
        let samples = toy_samples(&["a"], 6);
        let refs: Vec<&DecompositionSample> = samples.iter().collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            ..TrainConfig::desk()
        };
        let out = train(&cfg, &tiny_net(), &refs[..4], &refs[4..], None).unwrap();
        let csv = out.record.loss_curve_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("epoch,train_loss,val_loss\n0,"));
    }
}
