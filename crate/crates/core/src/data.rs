//! Labeled image sets and the procedural toy dataset.

use std::path::Path;

use ndarray::{s, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::{load_archive, save_archive, ElementWidth, TensorArchive};
use crate::error::{validate, Error, Result};
use crate::rng::{child_rng, streams, HelloRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[count, channels, height, width]`, pixels in `[0, 1]`.
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: Array4<f64>, labels: Vec<usize>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let ds = Self {
            images,
            labels,
            class_names,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        validate(self.images.dim().0 == self.labels.len(), || {
            format!("{} images but {} labels", self.images.dim().0, self.labels.len())
        })?;
        validate(self.class_names.len() >= 2, || "at least two classes are required".into())?;
        let c = self.class_names.len();
        if let Some(bad) = self.labels.iter().find(|&&y| y >= c) {
            return Err(Error::Validation(format!("label {bad} out of range for {c} classes")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `[channels, height, width]`
    pub fn image_shape(&self) -> [usize; 3] {
        let (_, c, h, w) = self.images.dim();
        [c, h, w]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            split: self.split,
        }
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &y)| y == class).map(|(i, _)| i).collect()
    }

    /// Samples whose label is in `classes`; class ids are kept as-is.
    pub fn restrict_to(&self, classes: &[usize]) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.subset(&idx)
    }

    pub fn to_archive(&self, width: ElementWidth) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        a.insert_array("data/images", &self.images.clone().into_dyn(), width)?;
        let labels: Vec<f64> = self.labels.iter().map(|&y| y as f64).collect();
        a.insert_scalars("data/labels", &labels, ElementWidth::Eight)?;
        a.insert_str("data/class_names", &serde_json::to_string(&self.class_names)?)?;
        a.insert_str("data/split", &serde_json::to_string(&self.split)?)?;
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let images = a
            .array("data/images")?
            .into_dimensionality()
            .map_err(|_| Error::Shape("data/images must be 4-D".into()))?;
        let labels = a
            .scalars("data/labels")?
            .into_iter()
            .map(|v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Validation(format!("invalid label {v}")))
                }
            })
            .collect::<Result<_>>()?;
        let class_names = serde_json::from_str(&a.get_str("data/class_names")?)?;
        let split = serde_json::from_str(&a.get_str("data/split")?)?;
        Self::new(images, labels, class_names, split)
    }

    pub fn save(&self, path: impl AsRef<Path>, width: ElementWidth) -> Result<()> {
        save_archive(path, &self.to_archive(width)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&load_archive(path)?)
    }
}

/// Class names of the toy dataset: five textures in two colour families.
/// Classes sharing a texture or a colour are partially confusable, which
/// gives soft labels something to carry.
pub const TOY_CLASS_NAMES: [&str; 10] = [
    "red stripes",
    "blue stripes",
    "red columns",
    "blue columns",
    "red checks",
    "blue checks",
    "red dots",
    "blue dots",
    "red rings",
    "blue rings",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Texture {
    Stripes,
    Columns,
    Checks,
    Dots,
    Rings,
}

const TEXTURES: [Texture; 5] = [Texture::Stripes, Texture::Columns, Texture::Checks, Texture::Dots, Texture::Rings];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
}

const SHAPES: [Shape; 5] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Ring, Shape::Cross];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    /// Fraction of labels replaced by a different, uniformly chosen class.
    pub label_noise: f64,
}

/// Generates the toy texture set. `split` selects an independent random
/// stream, so train and test never share samples.
pub fn toy_dataset(cfg: &ToyConfig, split: Split, seed: u64) -> Result<LabeledDataset> {
    validate((2..=TOY_CLASS_NAMES.len()).contains(&cfg.classes), || "toy data supports 2..=10 classes".into())?;
    validate(cfg.size >= 8, || "toy images must be at least 8 pixels".into())?;
    let stream = match split {
        Split::Train => streams::DATA_TRAIN,
        Split::Test => streams::DATA_TEST,
    };
    let mut rng = child_rng(seed, stream);
    let n = cfg.classes * cfg.per_class;
    let mut images = Array4::<f64>::zeros((n, 3, cfg.size, cfg.size));
    let mut labels = Vec::with_capacity(n);
    let mut order: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
    order.shuffle(&mut rng);
    for (i, &class) in order.iter().enumerate() {
        let img = render(class, cfg.size, &mut rng);
        images.slice_mut(s![i, .., .., ..]).assign(&img);
        labels.push(class);
    }
    if split == Split::Train && cfg.label_noise > 0.0 {
        let mut noise_rng = child_rng(seed, streams::LABEL_NOISE);
        for y in labels.iter_mut() {
            if noise_rng.random::<f64>() < cfg.label_noise {
                let shift = noise_rng.random_range(1..cfg.classes);
                *y = (*y + shift) % cfg.classes;
            }
        }
    }
    let names = TOY_CLASS_NAMES[..cfg.classes].iter().map(|s| s.to_string()).collect();
    LabeledDataset::new(images, labels, names, split)
}

fn render(class: usize, size: usize, rng: &mut HelloRng) -> Array3<f64> {
    let texture = TEXTURES[class / 2];
    let warm = class % 2 == 0;
    let sz = size as f64;
    let noise = Normal::new(0.0, 0.05).unwrap();

    // low-contrast textured background
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let grad = (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    let freq = rng.random_range(0.2..0.8);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut img = Array3::<f64>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / sz - 0.5, y as f64 / sz - 0.5);
            let tex = 0.06 * (freq * (x as f64 + 0.7 * y as f64) + phase).sin();
            for c in 0..3 {
                img[[c, y, x]] = base[c] + grad.0 * u + grad.1 * v + tex;
            }
        }
    }

    // foreground patch: a textured region whose hue comes from a warm or
    // cool family
    let hue: f64 = if warm { rng.random_range(-0.08..0.12) } else { rng.random_range(0.5..0.72) };
    let mut colour = hsv(hue.rem_euclid(1.0), rng.random_range(0.5..0.95), rng.random_range(0.6..1.0));
    for ch in colour.iter_mut() {
        *ch = (*ch + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0);
    }
    let r = rng.random_range(0.3..0.45) * sz;
    let (cx, cy) = (rng.random_range(0.35..0.65) * sz, rng.random_range(0.35..0.65) * sz);
    let pattern = Pattern {
        texture,
        period: rng.random_range(4.5..8.0),
        rot: rng.random_range(-0.3..0.3),
        phase: (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
        contrast: rng.random_range(0.35..0.6),
    };
    let alpha = rng.random_range(0.85..1.0);
    let (_, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let cover = (0.5 - ((dx * dx + dy * dy).sqrt() - r)).clamp(0.0, 1.0) * alpha;
            if cover > 0.0 {
                let shade = 1.0 - pattern.contrast * pattern.value(dx, dy);
                for c in 0..3 {
                    img[[c, y, x]] = (1.0 - cover) * img[[c, y, x]] + cover * colour[c] * shade;
                }
            }
        }
    }

    // a small distractor shape of arbitrary colour
    if rng.random::<f64>() < 0.3 {
        let other = SHAPES[rng.random_range(0..SHAPES.len())];
        let colour: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let r = rng.random_range(0.06..0.1) * sz;
        let (cx, cy) = (rng.random_range(0.1..0.9) * sz, rng.random_range(0.1..0.9) * sz);
        let rot = rng.random_range(0.0..std::f64::consts::TAU);
        paint(&mut img, other, cx, cy, r, rot, colour, 0.8);
    }

    img.mapv_inplace(|p| (p + noise.sample(rng)).clamp(0.0, 1.0));
    img
}

struct Pattern {
    texture: Texture,
    period: f64,
    rot: f64,
    phase: (f64, f64),
    contrast: f64,
}

impl Pattern {
    /// 1 on the dark part of the texture, 0 elsewhere, at offset `(dx, dy)`
    /// from the region centre.
    fn value(&self, dx: f64, dy: f64) -> f64 {
        let (sn, cs) = self.rot.sin_cos();
        let t = self.period;
        let u = (cs * dx + sn * dy) / t + self.phase.0;
        let v = (-sn * dx + cs * dy) / t + self.phase.1;
        let wave = |a: f64| (std::f64::consts::TAU * a).sin();
        let on = match self.texture {
            Texture::Stripes => wave(v) > 0.0,
            Texture::Columns => wave(u) > 0.0,
            Texture::Checks => wave(u) * wave(v) > 0.0,
            Texture::Dots => {
                let (fu, fv) = (u.rem_euclid(1.0) - 0.5, v.rem_euclid(1.0) - 0.5);
                fu * fu + fv * fv < 0.09
            }
            Texture::Rings => wave((dx * dx + dy * dy).sqrt() / t + self.phase.0) > 0.0,
        };
        if on {
            1.0
        } else {
            0.0
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn paint(img: &mut Array3<f64>, shape: Shape, cx: f64, cy: f64, r: f64, rot: f64, colour: [f64; 3], alpha: f64) {
    let (_, h, w) = img.dim();
    let (sn, cs) = rot.sin_cos();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let (u, v) = (cs * dx + sn * dy, -sn * dx + cs * dy);
            // signed distance-like value, negative inside
            let d = match shape {
                Shape::Disk => (u * u + v * v).sqrt() - r,
                Shape::Square => u.abs().max(v.abs()) - 0.8 * r,
                Shape::Triangle => {
                    let k = 3f64.sqrt();
                    let e1 = v - 0.5 * r;
                    let e2 = (-k * u - v) / 2.0 - 0.5 * r;
                    let e3 = (k * u - v) / 2.0 - 0.5 * r;
                    e1.max(e2).max(e3) * 1.2
                }
                Shape::Ring => ((u * u + v * v).sqrt() - 0.7 * r).abs() - 0.28 * r,
                Shape::Cross => {
                    let arm = 0.3 * r;
                    let a = (u.abs() - r).max(v.abs() - arm);
                    let b = (u.abs() - arm).max(v.abs() - r);
                    a.min(b)
                }
            };
            let cover = (0.5 - d).clamp(0.0, 1.0) * alpha;
            if cover > 0.0 {
                for c in 0..3 {
                    img[[c, y, x]] = (1.0 - cover) * img[[c, y, x]] + cover * colour[c];
                }
            }
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Stacks `[c, h, w]` images into a batch.
pub fn stack(images: &[Array3<f64>]) -> Array4<f64> {
    let views: Vec<_> = images.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("images share a shape")
}

pub fn as_dyn(a: &Array4<f64>) -> ArrayD<f64> {
    a.clone().into_shape_with_order(IxDyn(a.shape())).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyConfig {
        ToyConfig {
            classes: 4,
            per_class: 5,
            size: 16,
            label_noise: 0.0,
        }
    }

    #[test]
    fn toy_is_balanced_in_range_and_deterministic() {
        let a = toy_dataset(&small(), Split::Train, 3).unwrap();
        let b = toy_dataset(&small(), Split::Train, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        for c in 0..4 {
            assert_eq!(a.indices_of_class(c).len(), 5);
        }
        assert!(a.images.iter().all(|p| (0.0..=1.0).contains(p)));
        let t = toy_dataset(&small(), Split::Test, 3).unwrap();
        assert_ne!(a.images, t.images);
    }

    #[test]
    fn label_noise_flips_roughly_the_requested_fraction() {
        let mut cfg = small();
        cfg.per_class = 200;
        let clean = toy_dataset(&cfg, Split::Train, 1).unwrap();
        cfg.label_noise = 0.25;
        let noisy = toy_dataset(&cfg, Split::Train, 1).unwrap();
        assert_eq!(clean.images, noisy.images);
        let flipped = clean.labels.iter().zip(&noisy.labels).filter(|(a, b)| a != b).count();
        let frac = flipped as f64 / clean.len() as f64;
        assert!((0.2..0.3).contains(&frac), "{frac}");
    }

    #[test]
    fn invariants_enforced() {
        let imgs = Array4::zeros((2, 3, 4, 4));
        assert!(LabeledDataset::new(imgs.clone(), vec![0], vec!["a".into(), "b".into()], Split::Train).is_err());
        assert!(LabeledDataset::new(imgs.clone(), vec![0, 2], vec!["a".into(), "b".into()], Split::Train).is_err());
        assert!(LabeledDataset::new(imgs, vec![0, 0], vec!["a".into()], Split::Train).is_err());
    }

    #[test]
    fn archive_round_trip() {
        let a = toy_dataset(&small(), Split::Test, 0).unwrap();
        let b = LabeledDataset::from_archive(&a.to_archive(ElementWidth::Eight).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
