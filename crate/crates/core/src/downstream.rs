//! Student training on the synthetic set with soft labels generated on the
//! fly by the projector for every augmented batch. No label tensor is ever
//! written to disk.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::config::{AugmentConfig, HardTargetMode, LabelArm, OutputSpace, PipelineConfig};
use crate::data::LabeledDataset;
use crate::error::{validate, Error, Result};
use crate::evalsuite::evaluate_masked;
use crate::graph::{Graph, Var};
use crate::nn::{one_hot, ConvNet, ConvNetSpec, ParamMap};
use crate::optim::{cosine_lr, Sgd};
use crate::projector::Projector;
use crate::rng::{child_rng, streams};

/// Pairing produced by mixup or cutmix: sample `i` is blended with
/// `perm[i]`, and `lam` is the weight of the original sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Mix {
    pub lam: f64,
    pub perm: Vec<usize>,
}

impl Mix {
    pub fn identity(n: usize) -> Self {
        Self {
            lam: 1.0,
            perm: (0..n).collect(),
        }
    }
}

fn random_perm(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// `lam · x + (1 − lam) · x[perm]`
pub fn mixup_with(x: &Array4<f64>, lam: f64, perm: &[usize]) -> Array4<f64> {
    let partner = x.select(Axis(0), perm);
    x * lam + &(partner * (1.0 - lam))
}

pub fn mixup(x: &Array4<f64>, alpha: f64, rng: &mut impl Rng) -> Result<(Array4<f64>, Mix)> {
    let n = x.dim().0;
    validate(n >= 2, || "mixup needs a batch of at least 2".into())?;
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixup alpha: {e}")))?;
    let lam = beta.sample(rng);
    let perm = random_perm(n, rng);
    Ok((mixup_with(x, lam, &perm), Mix { lam, perm }))
}

/// Rectangle `(x, y, w, h)` in pixel units.
pub type CutBox = (usize, usize, usize, usize);

/// Pastes the box region from `x[perm]`; returns the realized weight
/// `1 − area / (H · W)`.
pub fn cutmix_with(x: &Array4<f64>, bx: CutBox, perm: &[usize]) -> (Array4<f64>, f64) {
    let (_, _, h, w) = x.dim();
    let (x0, y0, bw, bh) = bx;
    let partner = x.select(Axis(0), perm);
    let mut out = x.clone();
    if bw > 0 && bh > 0 {
        out.slice_mut(s![.., .., y0..y0 + bh, x0..x0 + bw])
            .assign(&partner.slice(s![.., .., y0..y0 + bh, x0..x0 + bw]));
    }
    let lam = 1.0 - (bw * bh) as f64 / (h * w) as f64;
    (out, lam)
}

pub fn cutmix(x: &Array4<f64>, alpha: f64, rng: &mut impl Rng) -> Result<(Array4<f64>, Mix)> {
    let (n, _, h, w) = x.dim();
    validate(n >= 2, || "cutmix needs a batch of at least 2".into())?;
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("cutmix alpha: {e}")))?;
    let lam: f64 = beta.sample(rng);
    let r = (1.0 - lam).sqrt();
    let (cw, ch) = ((w as f64 * r).round() as usize, (h as f64 * r).round() as usize);
    let cx = rng.random_range(0..w);
    let cy = rng.random_range(0..h);
    let x0 = cx.saturating_sub(cw / 2);
    let y0 = cy.saturating_sub(ch / 2);
    let x1 = (cx + cw.div_ceil(2)).min(w);
    let y1 = (cy + ch.div_ceil(2)).min(h);
    let perm = random_perm(n, rng);
    let (out, lam) = cutmix_with(x, (x0, y0, x1 - x0, y1 - y0), &perm);
    Ok((out, Mix { lam, perm }))
}

/// Random horizontal flips and zero-padded translations, per sample.
pub fn flip_shift(x: &Array4<f64>, flip: bool, shift: usize, rng: &mut impl Rng) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, h, w));
    let sh = shift as i64;
    for i in 0..n {
        let f = flip && rng.random_bool(0.5);
        let (dx, dy) = if shift > 0 {
            (rng.random_range(-sh..=sh), rng.random_range(-sh..=sh))
        } else {
            (0, 0)
        };
        for ch in 0..c {
            for yy in 0..h {
                let sy = yy as i64 - dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for xx in 0..w {
                    let mut sx = xx as i64 - dx;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    if f {
                        sx = w as i64 - 1 - sx;
                    }
                    out[[i, ch, yy, xx]] = x[[i, ch, sy as usize, sx as usize]];
                }
            }
        }
    }
    out
}

/// Applies the policy: flips and shifts, then at most one of mixup/cutmix.
pub fn augment_batch(x: &Array4<f64>, policy: &AugmentConfig, rng: &mut impl Rng) -> Result<(Array4<f64>, Mix)> {
    let n = x.dim().0;
    let base = if policy.flip || policy.shift > 0 {
        flip_shift(x, policy.flip, policy.shift, rng)
    } else {
        x.clone()
    };
    if n < 2 || policy.mixup_prob + policy.cutmix_prob <= 0.0 {
        return Ok((base, Mix::identity(n)));
    }
    let u: f64 = rng.random();
    if u < policy.mixup_prob {
        mixup(&base, policy.mixup_alpha, rng)
    } else if u < policy.mixup_prob + policy.cutmix_prob {
        cutmix(&base, policy.cutmix_alpha, rng)
    } else {
        Ok((base, Mix::identity(n)))
    }
}

/// Hard targets as rows of a `[n, C]` matrix, mixed with the batch weights
/// or left as plain one-hot rows.
pub fn hard_targets(labels: &[usize], classes: usize, mix: &Mix, mode: HardTargetMode) -> Array2<f64> {
    let own = one_hot(labels, classes);
    match mode {
        HardTargetMode::Unmixed => own,
        HardTargetMode::Mixed => {
            let partner: Vec<usize> = mix.perm.iter().map(|&j| labels[j]).collect();
            own * mix.lam + &(one_hot(&partner, classes) * (1.0 - mix.lam))
        }
    }
}

/// Soft labels for exactly this batch, computed fresh, in `space`.
pub fn online_labels(projector: &Projector, batch: &Array4<f64>, space: OutputSpace) -> Result<Array2<f64>> {
    let [c, h, w] = projector.input_shape();
    let (_, bc, bh, bw) = batch.dim();
    if [bc, bh, bw] != [c, h, w] {
        return Err(Error::Shape(format!("projector expects {:?}, batch is {:?}", [c, h, w], [bc, bh, bw])));
    }
    projector.labels_in(batch.view(), space)
}

/// Scalar student loss on logits `z` for the chosen arm. The online MSE term
/// compares in `space`, the representation the projector's labels are in.
#[allow(clippy::too_many_arguments)]
pub fn student_objective_graph(
    g: &mut Graph,
    z: Var,
    arm: LabelArm,
    space: OutputSpace,
    y_star: Option<&Array2<f64>>,
    hard: &Array2<f64>,
    beta: f64,
) -> Result<Var> {
    match arm {
        LabelArm::Online => {
            let y = y_star.ok_or_else(|| Error::State("online arm needs projector labels".into()))?;
            let t = g.constant(y.clone().into_dyn());
            let rep = match space {
                OutputSpace::Probabilities => g.softmax(z),
                OutputSpace::Logits => z,
            };
            let mse = g.mse(rep, t);
            let ce = g.soft_cross_entropy(z, hard.clone());
            let ce = g.scale(ce, beta);
            Ok(g.add(mse, ce))
        }
        LabelArm::HardOnly => Ok(g.soft_cross_entropy(z, hard.clone())),
        LabelArm::OneHotMse => {
            let t = g.constant(hard.clone().into_dyn());
            Ok(g.mse(z, t))
        }
    }
}

/// Loss and parameter gradients for one batch.
pub fn student_grads(
    student: &ConvNet,
    x: &Array4<f64>,
    arm: LabelArm,
    space: OutputSpace,
    y_star: Option<&Array2<f64>>,
    hard: &Array2<f64>,
    beta: f64,
) -> Result<(f64, ParamMap)> {
    let mut err = None;
    let (loss, grads) = student.loss_and_grads(x, |g, z| match student_objective_graph(g, z, arm, space, y_star, hard, beta) {
        Ok(v) => v,
        Err(e) => {
            err = Some(e);
            z
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok((loss, grads)),
    }
}

/// One optimizer step; returns the pre-step loss.
#[allow(clippy::too_many_arguments)]
pub fn student_step(
    student: &mut ConvNet,
    opt: &mut Sgd,
    x: &Array4<f64>,
    arm: LabelArm,
    space: OutputSpace,
    y_star: Option<&Array2<f64>>,
    hard: &Array2<f64>,
    beta: f64,
    lr: f64,
) -> Result<f64> {
    validate(beta >= 0.0, || "beta must be >= 0".into())?;
    let (loss, grads) = student_grads(student, x, arm, space, y_star, hard, beta)?;
    if !loss.is_finite() {
        return Ok(loss);
    }
    opt.step(&mut student.params, &grads, lr)?;
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentRun {
    pub arch: String,
    pub epochs: usize,
    pub lr: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub arm: LabelArm,
    /// Space the online MSE term compares in.
    pub label_space: OutputSpace,
    pub hard_targets: HardTargetMode,
    pub augment: AugmentConfig,
    /// Test-set evaluation cadence in epochs; the last epoch is always
    /// evaluated.
    pub eval_every: usize,
}

impl StudentRun {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        let d = &cfg.downstream;
        Self {
            arch: d.arch.clone(),
            epochs: cfg.hyper.epochs_k,
            lr: cfg.hyper.alpha_lr,
            beta: cfg.hyper.beta_ce,
            batch_size: d.batch_size,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            arm: d.arm,
            label_space: d.label_space,
            hard_targets: d.hard_targets,
            augment: d.augment.clone(),
            eval_every: d.eval_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StudentLog {
    pub epochs: Vec<EpochRecord>,
}

impl StudentLog {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|r| r.test_accuracy)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.epochs {
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Evaluation target for `train_student`: a test set and optionally the
/// subset of classes predictions are restricted to.
#[derive(Clone, Copy)]
pub struct EvalTarget<'a> {
    pub test: &'a LabeledDataset,
    pub classes: Option<&'a [usize]>,
}

/// Trains a freshly initialized student for `run.epochs` epochs. Every batch
/// is augmented anew and, for the online arm, relabeled by the projector.
pub fn train_student(
    synthetic: &LabeledDataset,
    projector: Option<&Projector>,
    eval: Option<EvalTarget<'_>>,
    run: &StudentRun,
    seed: u64,
) -> Result<(ConvNet, StudentLog)> {
    validate(run.epochs >= 1, || "student epochs must be at least 1".into())?;
    validate(run.batch_size >= 1, || "student batch size must be positive".into())?;
    if synthetic.is_empty() {
        return Err(Error::Validation("synthetic set is empty".into()));
    }
    let c = synthetic.num_classes();
    if run.arm == LabelArm::Online {
        let p = projector.ok_or_else(|| Error::State("online labels need a projector".into()))?;
        validate(p.num_classes() == c, || "projector and synthetic set disagree on classes".into())?;
    }
    let space = run.label_space;
    let spec = ConvNetSpec::named(&run.arch, synthetic.image_shape(), c)?;
    let mut student = ConvNet::init(spec, &mut child_rng(seed, streams::STUDENT_INIT))?;
    let mut opt = Sgd::new(run.momentum, run.weight_decay);
    let mut order_rng = child_rng(seed, streams::STUDENT_SHUFFLE);
    let mut aug_rng = child_rng(seed, streams::AUGMENT);
    let mut order: Vec<usize> = (0..synthetic.len()).collect();
    let steps_per_epoch = synthetic.len().div_ceil(run.batch_size);
    let total = steps_per_epoch * run.epochs;
    let mut log = StudentLog::default();
    let mut step = 0usize;

    for epoch in 1..=run.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        let mut lr = run.lr;
        for (b, chunk) in order.chunks(run.batch_size).enumerate() {
            let x = synthetic.images.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| synthetic.labels[i]).collect();
            let (xa, mix) = augment_batch(&x, &run.augment, &mut aug_rng)?;
            let y_star = match run.arm {
                LabelArm::Online => Some(online_labels(projector.unwrap(), &xa, space)?),
                _ => None,
            };
            let hard = hard_targets(&labels, c, &mix, run.hard_targets);
            lr = cosine_lr(run.lr, step, total);
            let loss = student_step(&mut student, &mut opt, &xa, run.arm, space, y_star.as_ref(), &hard, run.beta, lr)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: "student",
                    index: (epoch - 1) * steps_per_epoch + b,
                    loss,
                });
            }
            sum += loss * chunk.len() as f64;
            step += 1;
        }
        let test_accuracy = match eval {
            Some(t) if epoch == run.epochs || (run.eval_every > 0 && epoch % run.eval_every == 0) => {
                Some(evaluate_masked(&student, t.test, t.classes)?)
            }
            _ => None,
        };
        if let Some(a) = test_accuracy {
            log::debug!("student epoch {epoch}: test accuracy {a:.4}");
        }
        log.epochs.push(EpochRecord {
            epoch,
            loss: sum / synthetic.len() as f64,
            lr,
            test_accuracy,
        });
    }
    Ok((student, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn mixup_examples() {
        let x = Array4::from_shape_fn((2, 1, 2, 2), |(n, ..)| n as f64);
        assert_eq!(mixup_with(&x, 1.0, &[1, 0]), x);
        let m = mixup_with(&x, 0.5, &[1, 0]);
        assert!(m.iter().all(|&v| v == 0.5));
        assert!(mixup(&x.slice(s![..1, .., .., ..]).to_owned(), 0.8, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn cutmix_examples() {
        let x = Array4::from_shape_fn((2, 1, 4, 4), |(n, ..)| n as f64);
        let (same, lam) = cutmix_with(&x, (1, 1, 0, 3), &[1, 0]);
        assert_eq!((same, lam), (x.clone(), 1.0));
        let (full, lam) = cutmix_with(&x, (0, 0, 4, 4), &[1, 0]);
        assert_eq!(lam, 0.0);
        assert_eq!(full, x.select(Axis(0), &[1, 0]));
    }

    #[test]
    fn cutmix_area_matches_lambda() {
        let x = Array4::from_shape_fn((4, 1, 16, 16), |(n, ..)| if n % 2 == 0 { 0.0 } else { 1.0 });
        let mut rng = seeded_rng(9);
        for _ in 0..20 {
            let (out, mix) = cutmix(&x, 1.0, &mut rng).unwrap();
            for i in 0..4 {
                if mix.perm[i] % 2 == i % 2 {
                    continue;
                }
                let changed = out
                    .index_axis(Axis(0), i)
                    .iter()
                    .zip(x.index_axis(Axis(0), i).iter())
                    .filter(|(a, b)| a != b)
                    .count();
                assert_eq!(changed as f64 / 256.0, 1.0 - mix.lam);
            }
        }
    }

    #[test]
    fn mixed_hard_targets() {
        let mix = Mix { lam: 0.25, perm: vec![1, 0] };
        let t = hard_targets(&[0, 2], 3, &mix, HardTargetMode::Mixed);
        assert_eq!(t.row(0).to_vec(), vec![0.25, 0.0, 0.75]);
        let u = hard_targets(&[0, 2], 3, &mix, HardTargetMode::Unmixed);
        assert_eq!(u.row(0).to_vec(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn flip_only_mirrors() {
        let x = Array4::from_shape_fn((8, 1, 2, 3), |(_, _, h, w)| (h * 3 + w) as f64);
        let y = flip_shift(&x, true, 0, &mut seeded_rng(2));
        for i in 0..8 {
            let a = y.index_axis(Axis(0), i);
            assert!(a == x.index_axis(Axis(0), i) || a[[0, 0, 0]] == 2.0);
        }
    }
}
