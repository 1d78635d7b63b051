//! Lasso-regularized cross-entropy training, evaluation and magnitude pruning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset_io::Sample;
use crate::error::{Error, Result};
use crate::graph_builder::{build_grid_graph, GridGraph};
use crate::model::{forward, ModelParams, ParamKind, UpdateRule};
use crate::tensor::{Tape, Tensor, Var};

// ChaCha stream ids: every consumer of the run seed draws from its own stream.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_SHUFFLE: u64 = 1;
pub const STREAM_SYNTHETIC: u64 = 2;
pub const STREAM_SPLIT: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// L1 coefficient on weight matrices (biases excluded).
    pub lambda: f64,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub prune_threshold: f64,
    pub update_rule: UpdateRule,
    /// Samples whose gradients are averaged into one optimizer step.
    pub accumulation: usize,
    /// Masked fine-tuning epochs after pruning.
    pub retrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            lambda: 1e-5,
            epochs: 10,
            optimizer: Optimizer::adam(),
            seed: 0,
            prune_threshold: 1e-3,
            update_rule: UpdateRule::Product,
            accumulation: 8,
            retrain_epochs: 0,
        }
    }
}

impl TrainConfig {
    /// Full user-facing validation: learning rate must be strictly positive.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        self.validate_relaxed()
    }

    /// Like [`validate`](Self::validate) but accepts a zero learning rate.
    fn validate_relaxed(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lasso coefficient must be >= 0, got {}", self.lambda));
        }
        if !(self.prune_threshold >= 0.0 && self.prune_threshold.is_finite()) {
            return bad(format!("prune threshold must be >= 0, got {}", self.prune_threshold));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.accumulation == 0 {
            return bad("accumulation window must be >= 1".into());
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return bad("adam needs 0 <= beta < 1 and eps > 0".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub mean_loss: f64,
}

impl Metrics {
    fn from_counts(confusion: Vec<Vec<usize>>, loss_sum: f64) -> Self {
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
        Metrics {
            accuracy: correct as f64 / total.max(1) as f64,
            mean_loss: loss_sum / total.max(1) as f64,
            confusion,
        }
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Argmax with ties going to the lowest class index.
pub fn predict_class(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// `Σ |w|` over every weight matrix.
pub fn l1_norm(model: &ModelParams) -> f64 {
    model
        .tensors()
        .iter()
        .filter(|p| p.kind == ParamKind::Weight)
        .flat_map(|p| p.tensor.data())
        .map(|v| v.abs())
        .sum()
}

/// `-log softmax(logits)[true_class] + λ Σ |w|`, evaluated directly.
pub fn loss_ce_lasso(logits: &[f64], true_class: usize, model: &ModelParams, lambda: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(Tensor::new(vec![logits.len()], logits.to_vec())?);
    let ce = tape.cross_entropy(l, true_class)?;
    let ce = tape.value(ce).item()?;
    Ok(if lambda == 0.0 { ce } else { ce + lambda * l1_norm(model) })
}

/// Records the regularized loss on `tape`; `params` are the bound model tensors.
pub fn loss_on_tape(
    tape: &mut Tape,
    logits: Var,
    true_class: usize,
    model: &ModelParams,
    params: &[Var],
    lambda: f64,
) -> Result<Var> {
    let ce = tape.cross_entropy(logits, true_class)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    let mut penalty: Option<Var> = None;
    for (p, &var) in model.tensors().iter().zip(params) {
        if p.kind != ParamKind::Weight {
            continue;
        }
        let term = tape.abs_sum(var)?;
        penalty = Some(match penalty {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    match penalty {
        Some(pen) => {
            let scaled = tape.scale(pen, lambda)?;
            tape.add(ce, scaled)
        }
        None => Ok(ce),
    }
}

/// Loss value, logits and per-tensor gradients (declaration order) for one sample.
pub struct SampleGradients {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: Vec<Tensor>,
}

pub fn sample_gradients(model: &ModelParams, graph: &GridGraph, label: usize, lambda: f64) -> Result<SampleGradients> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let run = crate::model::forward::run(model, &mut tape, &bound, graph, false)?;
    let logits = tape.value(run.logits).data().to_vec();
    let loss_var = loss_on_tape(&mut tape, run.logits, label, model, &bound.vars, lambda)?;
    let loss = tape.value(loss_var).item()?;
    let mut grads = tape.backward(loss_var)?;
    let grads = bound
        .vars
        .iter()
        .zip(model.tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape())))
        .collect();
    Ok(SampleGradients { loss, logits, grads })
}

/// Per-tensor keep masks; `None` means the tensor is not masked.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    keep: Vec<Option<Vec<bool>>>,
}

impl PruneMask {
    /// Keeps exactly the non-zero entries of every weight matrix.
    pub fn from_zeros(model: &ModelParams) -> Self {
        PruneMask {
            keep: model
                .tensors()
                .iter()
                .map(|p| (p.kind == ParamKind::Weight).then(|| p.tensor.data().iter().map(|&v| v != 0.0).collect()))
                .collect(),
        }
    }

    fn apply(&self, model: &mut ModelParams) {
        for ((_, t), keep) in model.tensors_mut().into_iter().zip(&self.keep) {
            if let Some(keep) = keep {
                for (v, &k) in t.data_mut().iter_mut().zip(keep) {
                    if !k {
                        *v = 0.0;
                    }
                }
            }
        }
    }
}

enum OptState {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl OptState {
    fn new(kind: Optimizer, model: &ModelParams) -> Self {
        match kind {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam { beta1, beta2, eps } => {
                let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
                OptState::Adam {
                    beta1,
                    beta2,
                    eps,
                    step: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    fn step(&mut self, model: &mut ModelParams, grads: &[Vec<f64>], lr: f64) {
        match self {
            OptState::Sgd => {
                for ((_, t), g) in model.tensors_mut().into_iter().zip(grads) {
                    for (p, gv) in t.data_mut().iter_mut().zip(g) {
                        *p -= lr * gv;
                    }
                }
            }
            OptState::Adam {
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for ((((_, t), g), m), v) in model.tensors_mut().into_iter().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for (((p, gv), mv), vv) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mv = *beta1 * *mv + (1.0 - *beta1) * gv;
                        *vv = *beta2 * *vv + (1.0 - *beta2) * gv * gv;
                        *p -= lr * (*mv / c1) / ((*vv / c2).sqrt() + *eps);
                    }
                }
            }
        }
    }
}

fn sample_graphs(model: &ModelParams, dataset: &[Sample]) -> Result<Vec<GridGraph>> {
    let arch = &model.arch;
    dataset
        .iter()
        .map(|s| {
            if s.label >= model.num_classes() {
                return Err(Error::InvalidInput(format!(
                    "sample {} has label {} but the model has {} classes",
                    s.source,
                    s.label,
                    model.num_classes()
                )));
            }
            if (s.image.height(), s.image.width()) != (arch.input_height, arch.input_width) {
                return Err(Error::InvalidInput(format!(
                    "sample {} is {}x{} but the model expects {}x{}",
                    s.source,
                    s.image.height(),
                    s.image.width(),
                    arch.input_height,
                    arch.input_width
                )));
            }
            build_grid_graph(&s.image)
        })
        .collect()
}

/// Trains with default options (no mask, no epoch callback).
pub fn train(model: ModelParams, dataset: &[Sample], cfg: &TrainConfig) -> Result<(ModelParams, Vec<Metrics>)> {
    train_with(model, dataset, cfg, None, &mut |_, _| {})
}

/// Shuffled per-sample gradients averaged over windows of `cfg.accumulation`.
///
/// Gradients inside a window are computed in parallel and summed in sample
/// order, so results do not depend on the thread count. Pruned entries stay
/// zero when `mask` is given. `on_epoch` sees the 1-based epoch number and
/// the training-pass metrics.
pub fn train_with(
    mut model: ModelParams,
    dataset: &[Sample],
    cfg: &TrainConfig,
    mask: Option<&PruneMask>,
    on_epoch: &mut dyn FnMut(usize, &Metrics),
) -> Result<(ModelParams, Vec<Metrics>)> {
    cfg.validate_relaxed()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let graphs = sample_graphs(&model, dataset)?;
    let k = model.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_SHUFFLE);
    let mut opt = OptState::new(cfg.optimizer, &model);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut confusion = vec![vec![0usize; k]; k];
        let mut loss_sum = 0.0;
        for window in order.chunks(cfg.accumulation) {
            let results: Vec<Result<SampleGradients>> = window
                .par_iter()
                .map(|&i| sample_gradients(&model, &graphs[i], dataset[i].label, cfg.lambda))
                .collect();
            let mut acc: Option<Vec<Vec<f64>>> = None;
            for (&i, result) in window.iter().zip(results) {
                let sg = match result {
                    Ok(sg) => sg,
                    Err(Error::Integrity(_)) => {
                        return Err(Error::Diverged {
                            epoch,
                            sample: i,
                            loss: f64::NAN,
                        })
                    }
                    Err(e) => return Err(e),
                };
                if !sg.loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        sample: i,
                        loss: sg.loss,
                    });
                }
                loss_sum += sg.loss;
                confusion[dataset[i].label][predict_class(&sg.logits)] += 1;
                match &mut acc {
                    None => acc = Some(sg.grads.into_iter().map(Tensor::into_data).collect()),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&sg.grads) {
                            a.iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut acc = acc.expect("window is non-empty");
            let inv = 1.0 / window.len() as f64;
            acc.iter_mut().flatten().for_each(|g| *g *= inv);
            opt.step(&mut model, &acc, cfg.learning_rate);
            if let Some(mask) = mask {
                mask.apply(&mut model);
            }
        }
        let metrics = Metrics::from_counts(confusion, loss_sum);
        on_epoch(epoch, &metrics);
        history.push(metrics);
    }
    Ok((model, history))
}

/// Argmax predictions over `dataset`; `mean_loss` is plain cross-entropy.
pub fn evaluate(model: &ModelParams, dataset: &[Sample]) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let graphs = sample_graphs(model, dataset)?;
    let outcomes: Vec<Result<(usize, f64)>> = graphs
        .par_iter()
        .zip(dataset)
        .map(|(g, s)| {
            let (logits, _) = forward(model, g, false)?;
            let loss = loss_ce_lasso(logits.data(), s.label, model, 0.0)?;
            Ok((predict_class(logits.data()), loss))
        })
        .collect();
    let k = model.num_classes();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut loss_sum = 0.0;
    for (s, outcome) in dataset.iter().zip(outcomes) {
        let (pred, loss) = outcome?;
        confusion[s.label][pred] += 1;
        loss_sum += loss;
    }
    Ok(Metrics::from_counts(confusion, loss_sum))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSparsity {
    pub name: String,
    pub zero_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub threshold: f64,
    pub matrices: Vec<MatrixSparsity>,
    /// Zero fraction over all weight entries together.
    pub overall: f64,
}

/// Zeroes every weight with `|w| < τ`; biases are untouched.
pub fn prune_weights(mut model: ModelParams, threshold: f64) -> (ModelParams, SparsityReport) {
    for (kind, t) in model.tensors_mut() {
        if kind == ParamKind::Weight {
            for v in t.data_mut() {
                if v.abs() < threshold {
                    *v = 0.0;
                }
            }
        }
    }
    let report = sparsity(&model, threshold);
    (model, report)
}

pub fn sparsity(model: &ModelParams, threshold: f64) -> SparsityReport {
    let (mut zeros, mut total) = (0usize, 0usize);
    let matrices = model
        .tensors()
        .iter()
        .filter(|p| p.kind == ParamKind::Weight)
        .map(|p| {
            let z = p.tensor.data().iter().filter(|&&v| v == 0.0).count();
            zeros += z;
            total += p.tensor.len();
            MatrixSparsity {
                name: p.name.clone(),
                zero_fraction: z as f64 / p.tensor.len().max(1) as f64,
            }
        })
        .collect();
    SparsityReport {
        threshold,
        matrices,
        overall: zeros as f64 / total.max(1) as f64,
    }
}

/// Fraction of weight entries with `|w| < bound`.
pub fn small_weight_fraction(model: &ModelParams, bound: f64) -> f64 {
    let (mut small, mut total) = (0usize, 0usize);
    for p in model.tensors().iter().filter(|p| p.kind == ParamKind::Weight) {
        small += p.tensor.data().iter().filter(|v| v.abs() < bound).count();
        total += p.tensor.len();
    }
    small as f64 / total.max(1) as f64
}
