//! Weak teachers: checkpoints harvested from one supervised training run on
//! the original data, and ensemble soft labels drawn from a window of them.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archive::{load_archive, save_archive, ElementWidth};
use crate::config::{OutputSpace, TeacherConfig};
use crate::data::LabeledDataset;
use crate::error::{validate, Error, Result};
use crate::graph::softmax_rows;
use crate::nn::{one_hot, ConvNet, ConvNetSpec};
use crate::optim::Sgd;
use crate::rng::{child_rng, streams};

const NET_PREFIX: &str = "net/";

#[derive(Clone, Debug)]
pub struct TeacherCheckpoint {
    pub epoch: usize,
    pub net: ConvNet,
}

impl TeacherCheckpoint {
    pub fn arch(&self) -> &str {
        &self.net.spec.arch
    }

    pub fn file_name(epoch: usize) -> String {
        format!("{epoch}.arc")
    }

    pub fn save(&self, dir: impl AsRef<Path>, width: ElementWidth) -> Result<PathBuf> {
        let path = dir.as_ref().join("teacher").join(Self::file_name(self.epoch));
        let mut a = self.net.to_archive(NET_PREFIX, width)?;
        a.insert_scalars("meta/epoch", &[self.epoch as f64], ElementWidth::Eight)?;
        save_archive(&path, &a)?;
        Ok(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let a = load_archive(&path)?;
        let epoch = a.scalars("meta/epoch")?.first().copied().unwrap_or(0.0) as usize;
        Ok(Self {
            epoch,
            net: ConvNet::from_archive(&a, NET_PREFIX)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub checkpoints: Vec<TeacherCheckpoint>,
    /// Mean training loss of each epoch, in order.
    pub epoch_losses: Vec<f64>,
}

/// Plain minibatch SGD with cross-entropy on the hard labels. A checkpoint is
/// kept after every `save_every`-th epoch and after the final one.
pub fn train_trajectory(dataset: &LabeledDataset, cfg: &TeacherConfig, seed: u64) -> Result<Trajectory> {
    validate(cfg.total_epochs >= 1, || "total_epochs must be at least 1".into())?;
    validate(cfg.save_every >= 1, || "save_every must be at least 1".into())?;
    validate(cfg.batch_size >= 1, || "batch size must be positive".into())?;
    if dataset.is_empty() {
        return Err(Error::Validation("cannot train teachers on an empty dataset".into()));
    }
    let c = dataset.num_classes();
    let spec = ConvNetSpec::named(&cfg.arch, dataset.image_shape(), c)?;
    let mut net = ConvNet::init(spec, &mut child_rng(seed, streams::TEACHER_INIT))?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut shuffle = child_rng(seed, streams::TEACHER_SHUFFLE);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut checkpoints = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.total_epochs);

    for epoch in 1..=cfg.total_epochs {
        order.shuffle(&mut shuffle);
        let mut sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = dataset.images.select(ndarray::Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[i]).collect();
            let target = one_hot(&labels, c);
            let (loss, grads) = net.loss_and_grads(&x, |g, z| g.soft_cross_entropy(z, target));
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    stage: "teachers",
                    index: epoch,
                    loss,
                });
            }
            opt.step(&mut net.params, &grads, cfg.lr)?;
            sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let mean = sum / seen as f64;
        log::debug!("teacher epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
        if epoch % cfg.save_every == 0 || epoch == cfg.total_epochs {
            checkpoints.push(TeacherCheckpoint { epoch, net: net.clone() });
        }
    }
    Ok(Trajectory {
        checkpoints,
        epoch_losses,
    })
}

#[derive(Clone, Debug)]
pub struct TeacherEnsemble {
    pub members: Vec<TeacherCheckpoint>,
    /// Inclusive epoch window.
    pub window: (usize, usize),
    pub space: OutputSpace,
}

/// Picks `count` checkpoints inside the inclusive window whose epochs are as
/// close as possible to `count` evenly spaced targets, keeping epochs
/// strictly increasing. Ties prefer the earlier epoch.
pub fn select_teachers(
    checkpoints: &[TeacherCheckpoint],
    window: (usize, usize),
    count: usize,
    space: OutputSpace,
) -> Result<TeacherEnsemble> {
    let (lo, hi) = window;
    validate(lo <= hi, || format!("teacher window ({lo}, {hi}) is empty"))?;
    validate(count >= 1, || "teacher count must be positive".into())?;
    let mut inside: Vec<&TeacherCheckpoint> =
        checkpoints.iter().filter(|c| c.epoch >= lo && c.epoch <= hi).collect();
    inside.sort_by_key(|c| c.epoch);
    inside.dedup_by_key(|c| c.epoch);
    if inside.len() < count {
        return Err(Error::InsufficientTeachers {
            lo,
            hi,
            needed: count,
            available: inside.len(),
        });
    }
    if let Some(first) = inside.first() {
        let arch = first.arch();
        validate(inside.iter().all(|c| c.arch() == arch), || "checkpoints mix architectures".into())?;
    }
    let n = inside.len();
    let mut picked = Vec::with_capacity(count);
    let mut next = 0usize;
    for i in 0..count {
        let target = if count == 1 {
            (lo + hi) as f64 / 2.0
        } else {
            lo as f64 + i as f64 * (hi - lo) as f64 / (count - 1) as f64
        };
        // leave room for the remaining picks
        let last = n - (count - i);
        let mut best = next;
        for j in next..=last {
            let d = (inside[j].epoch as f64 - target).abs();
            if d < (inside[best].epoch as f64 - target).abs() {
                best = j;
            }
        }
        picked.push(inside[best].clone());
        next = best + 1;
    }
    Ok(TeacherEnsemble {
        members: picked,
        window,
        space,
    })
}

impl TeacherEnsemble {
    pub fn epochs(&self) -> Vec<usize> {
        self.members.iter().map(|m| m.epoch).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.members.first().map_or(0, |m| m.net.spec.out_dim)
    }
}

/// Converts raw logits into the chosen averaging space.
pub fn to_space(logits: Array2<f64>, space: OutputSpace) -> Array2<f64> {
    match space {
        OutputSpace::Probabilities => softmax_rows(&logits.view()),
        OutputSpace::Logits => logits,
    }
}

/// Arithmetic mean of member outputs, accumulated in member order.
pub fn ensemble_soft_labels(ensemble: &TeacherEnsemble, images: ArrayView4<f64>) -> Result<Array2<f64>> {
    if ensemble.members.is_empty() {
        return Err(Error::Validation("teacher ensemble is empty".into()));
    }
    let mut acc: Option<Array2<f64>> = None;
    for m in &ensemble.members {
        let out = to_space(m.net.predict(images)?, ensemble.space);
        acc = Some(match acc {
            None => out,
            Some(a) => a + &out,
        });
    }
    Ok(acc.unwrap() / ensemble.members.len() as f64)
}

/// Batched wrapper used when caching targets for a whole dataset.
pub fn ensemble_soft_labels_batched(ensemble: &TeacherEnsemble, images: ArrayView4<f64>, batch: usize) -> Result<Array2<f64>> {
    let n = images.dim().0;
    let mut out = Array2::zeros((n, ensemble.num_classes()));
    let mut start = 0;
    while start < n {
        let end = (start + batch.max(1)).min(n);
        let y = ensemble_soft_labels(ensemble, images.slice(s![start..end, .., .., ..]))?;
        out.slice_mut(s![start..end, ..]).assign(&y);
        start = end;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub epoch: usize,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub arch: String,
    pub window: (usize, usize),
    pub count: usize,
    pub space: OutputSpace,
    pub members: Vec<ManifestEntry>,
}

impl EnsembleManifest {
    /// Paths are stored relative to `root`.
    pub fn for_ensemble(ensemble: &TeacherEnsemble) -> Self {
        Self {
            arch: ensemble.members.first().map(|m| m.arch().to_string()).unwrap_or_default(),
            window: ensemble.window,
            count: ensemble.members.len(),
            space: ensemble.space,
            members: ensemble
                .members
                .iter()
                .map(|m| ManifestEntry {
                    epoch: m.epoch,
                    path: format!("teacher/{}", TeacherCheckpoint::file_name(m.epoch)),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads every member archive, resolving paths against `root`.
    pub fn load_ensemble(&self, root: impl AsRef<Path>) -> Result<TeacherEnsemble> {
        let mut members = Vec::with_capacity(self.members.len());
        for e in &self.members {
            let ck = TeacherCheckpoint::load(root.as_ref().join(&e.path))?;
            validate(ck.epoch == e.epoch, || format!("{} holds epoch {} not {}", e.path, ck.epoch, e.epoch))?;
            validate(ck.arch() == self.arch, || format!("{} has architecture {}", e.path, ck.arch()))?;
            members.push(ck);
        }
        Ok(TeacherEnsemble {
            members,
            window: self.window,
            space: self.space,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn fake(epochs: impl IntoIterator<Item = usize>) -> Vec<TeacherCheckpoint> {
        let spec = ConvNetSpec::named("convnet-xs", [3, 8, 8], 3).unwrap();
        let net = ConvNet::init(spec, &mut seeded_rng(0)).unwrap();
        epochs.into_iter().map(|epoch| TeacherCheckpoint { epoch, net: net.clone() }).collect()
    }

    #[test]
    fn even_spacing_over_41() {
        let e = select_teachers(&fake(1..=41), (1, 41), 9, OutputSpace::Probabilities).unwrap();
        assert_eq!(e.epochs(), vec![1, 6, 11, 16, 21, 26, 31, 36, 41]);
    }

    #[test]
    fn exact_cover_and_deficit() {
        let e = select_teachers(&fake(1..=20), (5, 13), 9, OutputSpace::Probabilities).unwrap();
        assert_eq!(e.epochs(), (5..=13).collect::<Vec<_>>());
        match select_teachers(&fake(1..=20), (15, 20), 9, OutputSpace::Probabilities) {
            Err(Error::InsufficientTeachers { needed: 9, available: 6, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sparse_checkpoints_stay_increasing() {
        let e = select_teachers(&fake([1, 2, 3, 40]), (1, 41), 3, OutputSpace::Logits).unwrap();
        assert_eq!(e.epochs(), vec![1, 3, 40]);
    }

    #[test]
    fn empty_ensemble_rejected() {
        let e = TeacherEnsemble {
            members: vec![],
            window: (1, 1),
            space: OutputSpace::Logits,
        };
        let x = ndarray::Array4::zeros((1, 3, 8, 8));
        assert!(ensemble_soft_labels(&e, x.view()).is_err());
    }
}
