//! Fitting the projector's low-rank adapters to weak-teacher soft labels and
//! the original hard labels. Base encoder weights and the text head stay
//! frozen throughout.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayView4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{HyperParams, OutputSpace, TeacherConfig, TransferSection};
use crate::data::LabeledDataset;
use crate::error::{validate, Error, Result};
use crate::graph::{log_sum_exp, Graph, Var};
use crate::nn::{argmax_rows, one_hot, ParamMap};
use crate::optim::{cosine_lr, Adam};
use crate::projector::{LabelOutput, Projector};
use crate::rng::{child_rng, streams};
use crate::teachers::{ensemble_soft_labels_batched, TeacherEnsemble};

const TARGET_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub lambda_ce: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub cosine: bool,
    pub space: OutputSpace,
    pub temperature: f64,
    pub holdout_fraction: f64,
    pub patience: usize,
}

impl TransferConfig {
    pub fn from_sections(hyper: &HyperParams, transfer: &TransferSection, teachers: &TeacherConfig) -> Self {
        Self {
            lambda_ce: hyper.lambda_ce,
            batch_size: transfer.batch_size,
            epochs: transfer.epochs,
            lr: transfer.lr,
            cosine: transfer.cosine,
            space: teachers.space,
            temperature: transfer.temperature,
            holdout_fraction: transfer.holdout_fraction,
            patience: transfer.patience,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate(self.lambda_ce >= 0.0 && self.lambda_ce.is_finite(), || "lambda must be finite and >= 0".into())?;
        validate(self.batch_size >= 1, || "transfer batch size must be positive".into())?;
        validate(self.lr > 0.0 && self.lr.is_finite(), || "transfer lr must be positive".into())?;
        validate(self.temperature > 0.0 && self.temperature.is_finite(), || "temperature must be positive".into())?;
        validate((0.0..0.5).contains(&self.holdout_fraction), || "holdout fraction must be in [0, 0.5)".into())?;
        Ok(())
    }
}

fn check_targets(pred: &Array2<f64>, y_soft: &Array2<f64>, y_hard: &[usize]) -> Result<()> {
    if pred.dim() != y_soft.dim() {
        return Err(Error::Shape(format!("pred {:?} vs soft labels {:?}", pred.dim(), y_soft.dim())));
    }
    if pred.nrows() != y_hard.len() {
        return Err(Error::Shape(format!("{} rows but {} hard labels", pred.nrows(), y_hard.len())));
    }
    if let Some(&bad) = y_hard.iter().find(|&&y| y >= pred.ncols()) {
        return Err(Error::Validation(format!("hard label {bad} out of range")));
    }
    if pred.iter().chain(y_soft.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite prediction or target".into()));
    }
    Ok(())
}

/// `(mse, ce)`: mean squared error over every element, and mean over rows of
/// `-log softmax(pred)[y]`.
pub fn transfer_terms(pred: &Array2<f64>, y_soft: &Array2<f64>, y_hard: &[usize]) -> Result<(f64, f64)> {
    check_targets(pred, y_soft, y_hard)?;
    let mse = (pred - y_soft).mapv(|d| d * d).mean().unwrap_or(0.0);
    let ce = pred
        .outer_iter()
        .zip(y_hard)
        .map(|(row, &y)| log_sum_exp(&row.to_vec()) - row[y])
        .sum::<f64>()
        / y_hard.len().max(1) as f64;
    Ok((mse, ce))
}

pub fn transfer_loss(pred: &Array2<f64>, y_soft: &Array2<f64>, y_hard: &[usize], lambda: f64) -> Result<f64> {
    validate(lambda >= 0.0, || "lambda must be >= 0".into())?;
    let (mse, ce) = transfer_terms(pred, y_soft, y_hard)?;
    Ok(mse + lambda * ce)
}

/// Graph form of the training objective on projector logits `z`: the MSE
/// term compares `rep(z / τ)` with the soft targets, the CE term uses
/// `z / τ` as logits. Returns `(total, mse, ce)`.
pub fn transfer_objective_graph(
    g: &mut Graph,
    z: Var,
    y_soft: &Array2<f64>,
    y_hard: &[usize],
    lambda: f64,
    output: LabelOutput,
) -> (Var, Var, Var) {
    let c = y_soft.ncols();
    let zs = g.scale(z, 1.0 / output.temperature);
    let rep = match output.space {
        OutputSpace::Probabilities => g.softmax(zs),
        OutputSpace::Logits => zs,
    };
    let target = g.constant(y_soft.clone().into_dyn());
    let mse = g.mse(rep, target);
    let ce = g.soft_cross_entropy(zs, one_hot(y_hard, c));
    let wce = g.scale(ce, lambda);
    (g.add(mse, wce), mse, ce)
}

/// Objective value and adapter gradients for one batch.
pub fn transfer_grads(
    projector: &Projector,
    images: &Array4<f64>,
    y_soft: &Array2<f64>,
    y_hard: &[usize],
    lambda: f64,
) -> Result<(f64, f64, f64, ParamMap)> {
    let mut g = Graph::new();
    let vars = projector.bind_adapters(&mut g);
    let x = g.constant(images.clone().into_dyn());
    let z = projector.graph_forward(&mut g, x, &vars)?;
    let (total, mse, ce) = transfer_objective_graph(&mut g, z, y_soft, y_hard, lambda, projector.meta.output);
    let mut grads = g.backward(total);
    let mut out = ParamMap::new();
    for (target, (a, b)) in vars {
        if let Some(ga) = grads.take(a) {
            out.insert(format!("lora/{target}/A"), ga);
        }
        if let Some(gb) = grads.take(b) {
            out.insert(format!("lora/{target}/B"), gb);
        }
    }
    Ok((g.scalar(total), g.scalar(mse), g.scalar(ce), out))
}

/// Same objective evaluated without the tape, from `Projector::forward`.
pub fn transfer_objective(
    projector: &Projector,
    images: ArrayView4<f64>,
    y_soft: &Array2<f64>,
    y_hard: &[usize],
    lambda: f64,
) -> Result<f64> {
    let out = projector.meta.output;
    let z = projector.forward(images)?;
    let zs = &z / out.temperature;
    let rep = out.apply(&z);
    let (mse, _) = transfer_terms(&rep, y_soft, y_hard)?;
    let (_, ce) = transfer_terms(&zs, &zs, y_hard)?;
    Ok(mse + lambda * ce)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub step: usize,
    pub epoch: usize,
    pub mse: f64,
    pub ce: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferLog {
    pub steps: Vec<TransferRecord>,
    pub holdout: Vec<HoldoutRecord>,
    /// Epoch whose adapters were kept (0 = initial adapters).
    pub best_epoch: usize,
}

impl TransferLog {
    /// One JSON record per optimization step.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.steps {
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Mean total loss over the first and last `window` steps.
    pub fn running_loss_ends(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.steps.len();
        if n == 0 || window == 0 {
            return None;
        }
        let w = window.min(n);
        let mean = |rs: &[TransferRecord]| rs.iter().map(|r| r.total).sum::<f64>() / rs.len() as f64;
        Some((mean(&self.steps[..w]), mean(&self.steps[n - w..])))
    }
}

struct Split {
    train: Vec<usize>,
    holdout: Vec<usize>,
}

fn split_holdout(n: usize, fraction: f64, rng: &mut impl rand::Rng) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let k = if fraction > 0.0 && n > 1 {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let holdout = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    train.sort_unstable();
    Split { train, holdout }
}

fn holdout_eval(p: &Projector, x: &Array4<f64>, y_soft: &Array2<f64>, y: &[usize], lambda: f64) -> Result<HoldoutRecord> {
    let loss = transfer_objective(p, x.view(), y_soft, y, lambda)?;
    let pred = argmax_rows(&p.forward(x.view())?);
    let correct = pred.iter().zip(y).filter(|(a, b)| a == b).count();
    Ok(HoldoutRecord {
        epoch: 0,
        loss,
        accuracy: correct as f64 / y.len() as f64,
    })
}

/// Trains the adapters with Adam on cached ensemble targets. A held-out
/// slice of the data drives early stopping; the adapters with the lowest
/// held-out objective are returned.
pub fn fit_projector(
    projector: &Projector,
    dataset: &LabeledDataset,
    ensemble: &TeacherEnsemble,
    cfg: &TransferConfig,
    seed: u64,
) -> Result<(Projector, TransferLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Validation("cannot fit the projector on an empty dataset".into()));
    }
    if projector.adapters().is_empty() {
        return Err(Error::State("attach adapters before fitting".into()));
    }
    validate(ensemble.space == cfg.space, || "ensemble and transfer disagree on the averaging space".into())?;
    validate(ensemble.num_classes() == projector.num_classes(), || "ensemble and projector class counts differ".into())?;

    let mut p = projector.clone();
    p.meta.output = LabelOutput {
        space: cfg.space,
        temperature: cfg.temperature,
    };
    let mut log = TransferLog::default();
    if cfg.epochs == 0 {
        return Ok((projector.clone(), log));
    }

    let mut rng = child_rng(seed, streams::TRANSFER_SHUFFLE);
    let split = split_holdout(dataset.len(), cfg.holdout_fraction, &mut rng);
    let targets = ensemble_soft_labels_batched(ensemble, dataset.images.view(), TARGET_BATCH)?;
    let hold_x = dataset.images.select(Axis(0), &split.holdout);
    let hold_soft = targets.select(Axis(0), &split.holdout);
    let hold_y: Vec<usize> = split.holdout.iter().map(|&i| dataset.labels[i]).collect();

    let mut params = p.adapter_params();
    let mut opt = Adam::new();
    let steps_per_epoch = split.train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut best: Option<(f64, ParamMap)> = None;
    if !split.holdout.is_empty() {
        let r = holdout_eval(&p, &hold_x, &hold_soft, &hold_y, cfg.lambda_ce)?;
        log.holdout.push(r.clone());
        best = Some((r.loss, params.clone()));
    }
    let mut stale = 0usize;
    let mut order = split.train.clone();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = dataset.images.select(Axis(0), chunk);
            let ys = targets.select(Axis(0), chunk);
            let yh: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let (total, mse, ce, grads) = transfer_grads(&p, &x, &ys, &yh, cfg.lambda_ce)?;
            if !total.is_finite() {
                return Err(Error::Divergence {
                    stage: "transfer",
                    index: step,
                    loss: total,
                });
            }
            let lr = if cfg.cosine { cosine_lr(cfg.lr, step, total_steps) } else { cfg.lr };
            opt.step(&mut params, &grads, lr)?;
            p.set_adapter_params(&params)?;
            log.steps.push(TransferRecord {
                step,
                epoch,
                mse,
                ce,
                total,
                lr,
            });
            step += 1;
        }
        if split.holdout.is_empty() {
            continue;
        }
        let mut r = holdout_eval(&p, &hold_x, &hold_soft, &hold_y, cfg.lambda_ce)?;
        r.epoch = epoch;
        log::info!("transfer epoch {epoch}: holdout loss {:.5} acc {:.3}", r.loss, r.accuracy);
        let improved = best.as_ref().is_none_or(|(b, _)| r.loss < *b);
        log.holdout.push(r.clone());
        if improved {
            best = Some((r.loss, params.clone()));
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                break;
            }
        }
    }
    match best {
        Some((_, b)) => p.set_adapter_params(&b)?,
        None => log.best_epoch = cfg.epochs,
    }
    Ok((p, log))
}
