//! Accuracy evaluation, the cross-architecture and continual-learning
//! harnesses, and label-storage arithmetic.

use std::fmt;

use ndarray::{Array2, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::archive::ElementWidth;
use crate::config::SynthesisConfig;
use crate::data::LabeledDataset;
use crate::downstream::{train_student, EvalTarget, StudentRun};
use crate::error::{validate, Error, Result};
use crate::nn::{argmax_rows, ConvNet};
use crate::projector::{count_projector_storage, Projector, ProjectorArtifact};
use crate::synthesis::init_synthetic_classes;

pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn logits(&self, images: ArrayView4<f64>) -> Result<Array2<f64>>;
}

impl Classifier for ConvNet {
    fn num_classes(&self) -> usize {
        self.spec.out_dim
    }

    fn logits(&self, images: ArrayView4<f64>) -> Result<Array2<f64>> {
        self.predict(images)
    }
}

impl Classifier for Projector {
    fn num_classes(&self) -> usize {
        Projector::num_classes(self)
    }

    fn logits(&self, images: ArrayView4<f64>) -> Result<Array2<f64>> {
        self.forward(images)
    }
}

/// Top-1 accuracy; ties in the logits go to the lowest class index.
pub fn evaluate(model: &dyn Classifier, test: &LabeledDataset) -> Result<f64> {
    evaluate_masked(model, test, None)
}

/// Top-1 accuracy with the argmax restricted to `classes` when given.
pub fn evaluate_masked(model: &dyn Classifier, test: &LabeledDataset, classes: Option<&[usize]>) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty test set".into()));
    }
    validate(model.num_classes() == test.num_classes(), || {
        format!("model has {} classes, test set {}", model.num_classes(), test.num_classes())
    })?;
    let mut z = model.logits(test.images.view())?;
    if let Some(keep) = classes {
        validate(!keep.is_empty(), || "class mask is empty".into())?;
        for mut row in z.outer_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                if !keep.contains(&j) {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
    }
    let pred = argmax_rows(&z);
    let correct = pred.iter().zip(&test.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchRow {
    pub arch: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossArchTable {
    pub projector_fingerprint: String,
    pub rows: Vec<ArchRow>,
}

impl fmt::Display for CrossArchTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>8} {:>8}  per-seed", "arch", "mean", "std")?;
        for r in &self.rows {
            let seeds: Vec<String> = r.accuracies.iter().map(|a| format!("{:.4}", a)).collect();
            writeln!(f, "{:<14} {:>8.4} {:>8.4}  {}", r.arch, r.mean, r.std, seeds.join(" "))?;
        }
        Ok(())
    }
}

fn projector_fingerprint(p: &Projector) -> Result<String> {
    let art = p.artifact()?;
    let bytes = art.to_archive(ElementWidth::Eight)?.to_bytes();
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Trains one student per architecture and seed on the same synthetic set
/// and projector, verifying the projector artifact is identical throughout.
pub fn cross_arch_eval(
    synthetic: &LabeledDataset,
    projector: &Projector,
    archs: &[String],
    test: &LabeledDataset,
    run: &StudentRun,
    seeds: &[u64],
) -> Result<CrossArchTable> {
    validate(!archs.is_empty(), || "no architectures given".into())?;
    validate(!seeds.is_empty(), || "no seeds given".into())?;
    let fp = projector_fingerprint(projector)?;
    let mut rows = Vec::with_capacity(archs.len());
    for arch in archs {
        let mut r = run.clone();
        r.arch = arch.clone();
        let mut accs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            if projector_fingerprint(projector)? != fp {
                return Err(Error::State("projector changed during cross-architecture evaluation".into()));
            }
            let eval = EvalTarget { test, classes: None };
            let (_, log) = train_student(synthetic, Some(projector), Some(eval), &r, seed)?;
            accs.push(log.final_accuracy().unwrap_or(f64::NAN));
        }
        let (mean, std) = mean_std(&accs);
        rows.push(ArchRow {
            arch: arch.clone(),
            accuracies: accs,
            mean,
            std,
        });
    }
    Ok(CrossArchTable {
        projector_fingerprint: fp,
        rows,
    })
}

/// Splits `classes` into `steps` contiguous groups; earlier groups take the
/// remainder.
pub fn partition_classes(classes: usize, steps: usize) -> Result<Vec<Vec<usize>>> {
    validate(steps >= 1 && steps <= classes, || format!("cannot split {classes} classes into {steps} steps"))?;
    let base = classes / steps;
    let extra = classes % steps;
    let mut out = Vec::with_capacity(steps);
    let mut next = 0;
    for s in 0..steps {
        let n = base + usize::from(s < extra);
        out.push((next..next + n).collect());
        next += n;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualRun {
    pub steps: usize,
    pub partition: Vec<Vec<usize>>,
    pub ipc: usize,
    /// Memory size after each step.
    pub memory_sizes: Vec<usize>,
    /// Accuracy over the classes seen so far, after each step.
    pub accuracies: Vec<f64>,
}

/// Class-incremental schedule in the GDumb style: the memory gains `ipc`
/// distilled images per newly seen class, and a student is retrained from
/// scratch on the whole memory with online projector labels at every step.
#[allow(clippy::too_many_arguments)]
pub fn gdumb_run(
    train: &LabeledDataset,
    test: &LabeledDataset,
    steps: usize,
    projector: &Projector,
    synthesis: &SynthesisConfig,
    run: &StudentRun,
    seed: u64,
) -> Result<ContinualRun> {
    let partition = partition_classes(train.num_classes(), steps)?;
    let mut memory: Option<LabeledDataset> = None;
    let mut seen: Vec<usize> = Vec::new();
    let mut memory_sizes = Vec::with_capacity(steps);
    let mut accuracies = Vec::with_capacity(steps);
    for (s, group) in partition.iter().enumerate() {
        let new_data = train.restrict_to(group);
        for &c in group {
            let have = new_data.indices_of_class(c).len();
            if have < synthesis.ipc {
                return Err(Error::InsufficientPool {
                    needed: synthesis.ipc,
                    available: have,
                });
            }
        }
        let distilled = init_synthetic_classes(&new_data, projector, synthesis, group, seed)?.data;
        memory = Some(match memory {
            None => distilled,
            Some(m) => concat(&m, &distilled)?,
        });
        seen.extend_from_slice(group);
        let mem = memory.as_ref().unwrap();
        validate(mem.len() == synthesis.ipc * seen.len(), || {
            format!("memory holds {} images after step {}, expected {}", mem.len(), s + 1, synthesis.ipc * seen.len())
        })?;
        let seen_test = test.restrict_to(&seen);
        let eval = EvalTarget {
            test: &seen_test,
            classes: Some(&seen),
        };
        let (_, log) = train_student(mem, Some(projector), Some(eval), run, seed)?;
        let acc = log.final_accuracy().unwrap_or(f64::NAN);
        log::info!("continual step {}/{}: {} classes, accuracy {:.4}", s + 1, steps, seen.len(), acc);
        memory_sizes.push(mem.len());
        accuracies.push(acc);
    }
    Ok(ContinualRun {
        steps,
        partition,
        ipc: synthesis.ipc,
        memory_sizes,
        accuracies,
    })
}

fn concat(a: &LabeledDataset, b: &LabeledDataset) -> Result<LabeledDataset> {
    let images = ndarray::concatenate(ndarray::Axis(0), &[a.images.view(), b.images.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    let mut labels = a.labels.clone();
    labels.extend_from_slice(&b.labels);
    LabeledDataset::new(images, labels, a.class_names.clone(), a.split)
}

/// Byte counts behind a label-storage comparison, with the inputs echoed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub epochs_k: u64,
    pub n_synthetic: u64,
    pub classes: u64,
    pub element_width: u64,
    pub ipc: u64,
    /// `K · N_s · C · width`
    pub soft_label_bytes: u64,
    pub projector_bytes: u64,
    pub synthetic_image_bytes: u64,
    /// `projector_bytes / soft_label_bytes`
    pub ratio: f64,
}

pub const MIB: f64 = 1024.0 * 1024.0;

impl StorageReport {
    pub fn soft_label_mib(&self) -> f64 {
        self.soft_label_bytes as f64 / MIB
    }
}

impl fmt::Display for StorageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "K={} N_s={} C={} width={} IPC={}",
            self.epochs_k, self.n_synthetic, self.classes, self.element_width, self.ipc
        )?;
        writeln!(f, "soft labels     {:>16} B  {:>12.1} MiB", self.soft_label_bytes, self.soft_label_mib())?;
        writeln!(f, "projector       {:>16} B  {:>12.4} MiB", self.projector_bytes, self.projector_bytes as f64 / MIB)?;
        writeln!(
            f,
            "synthetic imgs  {:>16} B  {:>12.4} MiB",
            self.synthetic_image_bytes,
            self.synthetic_image_bytes as f64 / MIB
        )?;
        write!(f, "ratio (projector / labels) {:.6e}", self.ratio)
    }
}

const STORAGE_LIMIT: u128 = 1 << 63;

fn checked(v: u128, what: &str) -> Result<u64> {
    if v >= STORAGE_LIMIT {
        return Err(Error::Overflow(format!("{what} = {v} bytes exceeds 2^63")));
    }
    Ok(v as u64)
}

/// Pure integer arithmetic, checked up to 2⁶³ bytes.
pub fn storage_report(
    epochs_k: u64,
    n_synthetic: u64,
    classes: u64,
    width: ElementWidth,
    ipc: u64,
    projector: Option<&ProjectorArtifact>,
    synthetic: Option<&LabeledDataset>,
) -> Result<StorageReport> {
    validate(epochs_k >= 1 && n_synthetic >= 1 && classes >= 1, || "K, N_s and C must be positive".into())?;
    let w = width.bytes() as u128;
    let labels = checked(epochs_k as u128 * n_synthetic as u128 * classes as u128 * w, "soft labels")?;
    let projector_bytes = projector.map_or(0, |a| count_projector_storage(a, width).bytes);
    let syn = match synthetic {
        Some(d) => checked(d.images.len() as u128 * w, "synthetic images")?,
        None => 0,
    };
    Ok(StorageReport {
        epochs_k,
        n_synthetic,
        classes,
        element_width: w as u64,
        ipc,
        soft_label_bytes: labels,
        projector_bytes,
        synthetic_image_bytes: syn,
        ratio: projector_bytes as f64 / labels as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use ndarray::Array4;

    struct Constant(usize);

    impl Classifier for Constant {
        fn num_classes(&self) -> usize {
            self.0
        }
        fn logits(&self, images: ArrayView4<f64>) -> Result<Array2<f64>> {
            Ok(Array2::zeros((images.dim().0, self.0)))
        }
    }

    #[test]
    fn constant_model_hits_class_zero_only() {
        let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
        let names = (0..10).map(|i| i.to_string()).collect();
        let ds = LabeledDataset::new(Array4::zeros((20, 1, 2, 2)), labels, names, Split::Test).unwrap();
        assert_eq!(evaluate(&Constant(10), &ds).unwrap(), 0.1);
        assert_eq!(evaluate_masked(&Constant(10), &ds, Some(&[3])).unwrap(), 0.1);
        assert!(evaluate(&Constant(3), &ds).is_err());
    }

    #[test]
    fn partitions() {
        assert_eq!(partition_classes(10, 5).unwrap().iter().map(Vec::len).collect::<Vec<_>>(), vec![2; 5]);
        assert_eq!(partition_classes(10, 4).unwrap().iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 2, 2]);
        assert!(partition_classes(3, 4).is_err());
    }

    #[test]
    fn storage_examples() {
        let r = storage_report(1, 1, 1, ElementWidth::Four, 1, None, None).unwrap();
        assert_eq!(r.soft_label_bytes, 4);
        let r = storage_report(150, 1000, 1000, ElementWidth::Four, 1, None, None).unwrap();
        assert_eq!(r.soft_label_bytes, 600_000_000);
        assert!(storage_report(u64::MAX, 2, 1, ElementWidth::Four, 1, None, None).is_err());
        assert!(storage_report(1 << 20, 1 << 20, 1 << 20, ElementWidth::Eight, 1, None, None).is_err());
    }
}
