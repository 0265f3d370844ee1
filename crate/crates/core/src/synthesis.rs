//! Synthetic-set construction: random crops ranked by observer
//! cross-entropy, the easiest ones tiled into grid mosaics per class, and an
//! optional pixel refinement that makes images robust to down/up-sampling.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{load_archive, ElementWidth, TensorArchive};
use crate::config::SynthesisConfig;
use crate::data::{stack, LabeledDataset, Split};
use crate::encoders::ImageEncoder;
use crate::error::{validate, Error, Result};
use crate::graph::{apply_separable, bilinear_matrix, log_sum_exp, Graph};
use crate::nn::ConvNet;
use crate::projector::Projector;
use crate::rng::{child_rng, streams};

const SCORE_BATCH: usize = 128;

/// A model whose cross-entropy ranks candidate patches.
pub trait Observer {
    fn input_shape(&self) -> [usize; 3];
    fn num_classes(&self) -> usize;
    fn logits(&self, images: ArrayView4<f64>) -> Result<Array2<f64>>;
}

/// The projector scores with its temperature-scaled logits, the same values
/// its training cross-entropy sees.
impl Observer for Projector {
    fn input_shape(&self) -> [usize; 3] {
        Projector::input_shape(self)
    }

    fn num_classes(&self) -> usize {
        Projector::num_classes(self)
    }

    fn logits(&self, images: ArrayView4<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(images)? / self.meta.output.temperature)
    }
}

impl Observer for ConvNet {
    fn input_shape(&self) -> [usize; 3] {
        self.spec.input_shape
    }

    fn num_classes(&self) -> usize {
        self.spec.out_dim
    }

    fn logits(&self, images: ArrayView4<f64>) -> Result<Array2<f64>> {
        self.predict(images)
    }
}

/// Square or rectangular crop of one source image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub source: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl CropBox {
    fn key(&self) -> (usize, usize, usize, usize, usize) {
        (self.source, self.x, self.y, self.w, self.h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchCandidate {
    pub crop: CropBox,
    pub label: usize,
    pub difficulty: f64,
}

/// `per_image` square crops per source, side uniform in
/// `[crop_min, crop_max]` of the shorter image side, position uniform.
pub fn crop_candidates(
    dataset: &LabeledDataset,
    sources: &[usize],
    per_image: usize,
    crop_range: (f64, f64),
    rng: &mut impl Rng,
) -> Result<Vec<CropBox>> {
    validate(per_image >= 1, || "at least one crop per image is required".into())?;
    let (lo, hi) = crop_range;
    validate(lo > 0.0 && lo <= hi, || format!("invalid crop range ({lo}, {hi})"))?;
    if hi > 1.0 {
        return Err(Error::Validation(format!("crop fraction {hi} is larger than the image")));
    }
    let [_, h, w] = dataset.image_shape();
    let side_max = h.min(w);
    let mut out = Vec::with_capacity(sources.len() * per_image);
    for &source in sources {
        validate(source < dataset.len(), || format!("source index {source} out of range"))?;
        for _ in 0..per_image {
            let f = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let side = ((f * side_max as f64).round() as usize).clamp(1, side_max);
            let x = rng.random_range(0..=w - side);
            let y = rng.random_range(0..=h - side);
            out.push(CropBox {
                source,
                x,
                y,
                w: side,
                h: side,
            });
        }
    }
    Ok(out)
}

/// Bilinear resize of a `[c, h, w]` image.
pub fn resize_image(img: ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let rows = bilinear_matrix(h, out_h);
    let cols = bilinear_matrix(w, out_w);
    let x = img.insert_axis(Axis(0));
    apply_separable(&x, &rows, &cols).index_axis_move(Axis(0), 0).into_shape_with_order((c, out_h, out_w)).unwrap()
}

/// Crop pixels resized to `(out_h, out_w)`.
pub fn extract_patch(dataset: &LabeledDataset, crop: &CropBox, out_h: usize, out_w: usize) -> Array3<f64> {
    let src = dataset.images.index_axis(Axis(0), crop.source);
    let region = src.slice(s![.., crop.y..crop.y + crop.h, crop.x..crop.x + crop.w]);
    resize_image(region, out_h, out_w)
}

fn row_ce(row: ndarray::ArrayView1<f64>, y: usize) -> f64 {
    log_sum_exp(&row.to_vec()) - row[y]
}

/// Cross-entropy of the observer's softmax against `label`, after resizing
/// the patch to the observer input.
pub fn patch_difficulty(observer: &dyn Observer, patch: ArrayView3<f64>, label: usize) -> Result<f64> {
    let c = observer.num_classes();
    validate(label < c, || format!("label {label} out of range for {c} classes"))?;
    let [_, h, w] = observer.input_shape();
    let p = resize_image(patch, h, w).insert_axis(Axis(0));
    let z = observer.logits(p.view())?;
    Ok(row_ce(z.row(0), label))
}

/// Scores every crop with the observer, in batches.
pub fn score_candidates(observer: &dyn Observer, dataset: &LabeledDataset, crops: &[CropBox]) -> Result<Vec<PatchCandidate>> {
    let [_, h, w] = observer.input_shape();
    let c = observer.num_classes();
    let mut out = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(SCORE_BATCH) {
        let patches: Vec<Array3<f64>> = chunk.iter().map(|b| extract_patch(dataset, b, h, w)).collect();
        let z = observer.logits(stack(&patches).view())?;
        for (i, b) in chunk.iter().enumerate() {
            let label = dataset.labels[b.source];
            validate(label < c, || format!("label {label} out of range for {c} classes"))?;
            let difficulty = row_ce(z.row(i), label);
            if !difficulty.is_finite() {
                return Err(Error::Validation(format!("non-finite difficulty for crop {b:?}")));
            }
            out.push(PatchCandidate {
                crop: *b,
                label,
                difficulty,
            });
        }
    }
    Ok(out)
}

/// Orders candidates by difficulty, then source index, box x, box y (and
/// finally size so the order is total).
pub fn candidate_order(a: &PatchCandidate, b: &PatchCandidate) -> std::cmp::Ordering {
    a.difficulty
        .total_cmp(&b.difficulty)
        .then_with(|| (a.crop.source, a.crop.x, a.crop.y).cmp(&(b.crop.source, b.crop.x, b.crop.y)))
        .then_with(|| a.crop.key().cmp(&b.crop.key()))
}

/// The `k` least difficult candidates in ascending order.
pub fn select_patches(pool: &[PatchCandidate], k: usize) -> Result<Vec<PatchCandidate>> {
    if pool.len() < k {
        return Err(Error::InsufficientPool {
            needed: k,
            available: pool.len(),
        });
    }
    let mut sorted = pool.to_vec();
    sorted.sort_by(candidate_order);
    sorted.truncate(k);
    Ok(sorted)
}

/// Tiles `g²` patches row-major into one `[c, h, w]` image, each resized to
/// `(h / g, w / g)`.
pub fn assemble_image(patches: &[ArrayView3<f64>], labels: &[usize], grid: usize, out_h: usize, out_w: usize) -> Result<Array3<f64>> {
    validate(grid >= 1, || "grid side must be positive".into())?;
    validate(patches.len() == grid * grid, || format!("{} patches for a {grid}x{grid} grid", patches.len()))?;
    validate(labels.len() == patches.len(), || "one label per patch is required".into())?;
    validate(labels.iter().all(|&l| l == labels[0]), || "patches of one image must share a class".into())?;
    validate(out_h % grid == 0 && out_w % grid == 0, || format!("{out_h}x{out_w} is not divisible by grid {grid}"))?;
    let c = patches[0].dim().0;
    let (ph, pw) = (out_h / grid, out_w / grid);
    let mut img = Array3::zeros((c, out_h, out_w));
    for (i, p) in patches.iter().enumerate() {
        validate(p.dim().0 == c, || "patches disagree on channel count".into())?;
        let (r, col) = (i / grid, i % grid);
        let tile = resize_image(p.view(), ph, pw);
        img.slice_mut(s![.., r * ph..(r + 1) * ph, col * pw..(col + 1) * pw]).assign(&tile);
    }
    Ok(img)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageProvenance {
    pub class: usize,
    pub grid: usize,
    /// Row-major tile order.
    pub patches: Vec<PatchCandidate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub data: LabeledDataset,
    pub provenance: Vec<ImageProvenance>,
}

impl SyntheticDataset {
    pub fn ipc(&self) -> usize {
        self.data.len() / self.data.num_classes().max(1)
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        a.insert_array("syn/images", &self.data.images.clone().into_dyn(), ElementWidth::Eight)?;
        let labels: Vec<f64> = self.data.labels.iter().map(|&l| l as f64).collect();
        a.insert_scalars("syn/labels", &labels, ElementWidth::Eight)?;
        a.insert_str("syn/class_names", &serde_json::to_string(&self.data.class_names)?)?;
        Ok(a)
    }

    /// Images and labels go to `<dir>/synthetic.arc`, provenance to
    /// `<dir>/provenance.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        crate::archive::save_archive(dir.join("synthetic.arc"), &self.to_archive()?)?;
        let prov = dir.join("provenance.json");
        fs::write(&prov, serde_json::to_string_pretty(&self.provenance)?).map_err(|e| Error::io(&prov, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let a = load_archive(dir.join("synthetic.arc"))?;
        let images: Array4<f64> = a
            .array("syn/images")?
            .into_dimensionality()
            .map_err(|_| Error::Shape("syn/images must be 4-D".into()))?;
        let labels = a.scalars("syn/labels")?.into_iter().map(|v| v as usize).collect();
        let class_names = serde_json::from_str(&a.get_str("syn/class_names")?)?;
        let prov_path = dir.join("provenance.json");
        let provenance = match fs::read_to_string(&prov_path) {
            Ok(t) => serde_json::from_str(&t)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(&prov_path, e)),
        };
        Ok(Self {
            data: LabeledDataset::new(images, labels, class_names, Split::Train)?,
            provenance,
        })
    }
}

/// Builds `ipc` mosaics per class from the lowest-difficulty crops of that
/// class. Sources are a seeded sample of up to `sources_per_class` images.
pub fn init_synthetic(dataset: &LabeledDataset, observer: &dyn Observer, cfg: &SynthesisConfig, seed: u64) -> Result<SyntheticDataset> {
    let all: Vec<usize> = (0..dataset.num_classes()).collect();
    init_synthetic_classes(dataset, observer, cfg, &all, seed)
}

/// `init_synthetic` restricted to the listed classes. Each class draws from
/// its own seeded stream, so a class's images do not depend on which other
/// classes are built alongside it.
pub fn init_synthetic_classes(
    dataset: &LabeledDataset,
    observer: &dyn Observer,
    cfg: &SynthesisConfig,
    classes: &[usize],
    seed: u64,
) -> Result<SyntheticDataset> {
    validate(cfg.ipc >= 1, || "IPC must be positive".into())?;
    let g = cfg.grid_side();
    let [_, h, w] = dataset.image_shape();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut provenance = Vec::new();
    for &class in classes {
        validate(class < dataset.num_classes(), || format!("class {class} out of range"))?;
        let mut rng = child_rng(seed ^ ((class as u64) << 32), streams::CROPS);
        let mut sources = dataset.indices_of_class(class);
        sources.shuffle(&mut rng);
        if cfg.sources_per_class > 0 {
            sources.truncate(cfg.sources_per_class);
        }
        sources.sort_unstable();
        let crops = crop_candidates(dataset, &sources, cfg.crops_per_image, (cfg.crop_min, cfg.crop_max), &mut rng)?;
        let pool = score_candidates(observer, dataset, &crops)?;
        let chosen = select_patches(&pool, cfg.ipc * g * g)?;
        for group in chosen.chunks(g * g) {
            let patches: Vec<Array3<f64>> = group.iter().map(|p| extract_patch(dataset, &p.crop, h / g, w / g)).collect();
            let views: Vec<ArrayView3<f64>> = patches.iter().map(|p| p.view()).collect();
            let lbl: Vec<usize> = group.iter().map(|p| p.label).collect();
            images.push(assemble_image(&views, &lbl, g, h, w)?);
            labels.push(class);
            provenance.push(ImageProvenance {
                class,
                grid: g,
                patches: group.to_vec(),
            });
        }
    }
    Ok(SyntheticDataset {
        data: LabeledDataset::new(stack(&images), labels, dataset.class_names.clone(), Split::Train)?,
        provenance,
    })
}

fn degrade_mats(h: usize, w: usize, factor: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    validate(factor >= 2, || format!("degrade factor must be >= 2, got {factor}"))?;
    let (dh, dw) = ((h / factor).max(1), (w / factor).max(1));
    let rows = bilinear_matrix(dh, h).dot(&bilinear_matrix(h, dh));
    let cols = bilinear_matrix(dw, w).dot(&bilinear_matrix(w, dw));
    Ok((rows, cols))
}

/// Bilinear down-sample by `factor` (sizes floored) and back up.
pub fn degrade(images: ArrayView4<f64>, factor: usize) -> Result<Array4<f64>> {
    let (_, _, h, w) = images.dim();
    let (rows, cols) = degrade_mats(h, w, factor)?;
    Ok(apply_separable(&images, &rows, &cols))
}

/// Per-image `MSE(E(p), E(degrade(p)))`.
pub fn update_loss(encoder: &ImageEncoder, images: ArrayView4<f64>, factor: usize) -> Result<Vec<f64>> {
    let e = encoder.encode_image(images)?;
    let ed = encoder.encode_image(degrade(images, factor)?.view())?;
    Ok(per_row_mse(&e, &ed))
}

fn per_row_mse(a: &Array2<f64>, b: &Array2<f64>) -> Vec<f64> {
    (a - b).outer_iter().map(|r| r.mapv(|d| d * d).mean().unwrap_or(0.0)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateTrace {
    /// Mean loss over the batch before each step and after the last.
    pub mean_loss: Vec<f64>,
    /// Images whose update was abandoned for a non-finite gradient.
    pub aborted: Vec<usize>,
}

/// Gradient descent on pixels against the frozen encoder, clamping to
/// `[0, 1]` after every step. Each image keeps its lowest-loss iterate, so no
/// image ends worse than it started.
pub fn image_update(
    images: &Array4<f64>,
    encoder: &ImageEncoder,
    steps: usize,
    lr: f64,
    factor: usize,
) -> Result<(Array4<f64>, UpdateTrace)> {
    let (n, _, h, w) = images.dim();
    let (rows, cols) = degrade_mats(h, w, factor)?;
    let mut cur = images.clone();
    let mut best = images.clone();
    let mut best_loss = vec![f64::INFINITY; n];
    let mut aborted = vec![false; n];
    let mut trace = UpdateTrace {
        mean_loss: Vec::with_capacity(steps + 1),
        aborted: Vec::new(),
    };
    let net = encoder.net();
    for step in 0..=steps {
        let mut g = Graph::new();
        let p = net.bind(&mut g, false);
        let x = g.param(cur.clone().into_dyn());
        let xd = g.resize(x, rows.clone(), cols.clone());
        let e = net.forward(&mut g, x, &p);
        let ed = net.forward(&mut g, xd, &p);
        let per = per_row_mse(&g.value2(e).to_owned(), &g.value2(ed).to_owned());
        trace.mean_loss.push(per.iter().sum::<f64>() / n as f64);
        for i in 0..n {
            if !aborted[i] && per[i] < best_loss[i] {
                best_loss[i] = per[i];
                best.index_axis_mut(Axis(0), i).assign(&cur.index_axis(Axis(0), i));
            }
        }
        if step == steps {
            break;
        }
        // scale so each image receives the gradient of its own loss
        let loss = g.mse(e, ed);
        let loss = g.scale(loss, n as f64);
        let grads = g.backward(loss);
        let gx: Array4<f64> = grads
            .get(x)
            .cloned()
            .ok_or_else(|| Error::State("no pixel gradient".into()))?
            .into_dimensionality()
            .unwrap();
        for i in 0..n {
            if aborted[i] {
                continue;
            }
            let gi = gx.index_axis(Axis(0), i);
            if gi.iter().any(|v| !v.is_finite()) {
                aborted[i] = true;
                cur.index_axis_mut(Axis(0), i).assign(&images.index_axis(Axis(0), i));
                best.index_axis_mut(Axis(0), i).assign(&images.index_axis(Axis(0), i));
                continue;
            }
            let mut ci = cur.index_axis_mut(Axis(0), i);
            ci.zip_mut_with(&gi, |p, &d| *p = (*p - lr * d).clamp(0.0, 1.0));
        }
    }
    trace.aborted = (0..n).filter(|&i| aborted[i]).collect();
    Ok((best, trace))
}
