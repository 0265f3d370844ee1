#![allow(dead_code)]

pub mod grad;

use std::path::Path;
use std::sync::Arc;

use hello_core::config::PipelineConfig;
use hello_core::encoders::{ImageEncoder, ToyTextEncoder};
use hello_core::projector::Projector;
use hello_core::rng::seeded_rng;
use ndarray::Array4;
use rand::Rng;

pub const NAMES: [&str; 4] = ["red stripes", "blue stripes", "red dots", "blue dots"];
pub const TEMPLATES: [&str; 2] = ["a photo of {}", "a {} texture"];

/// Text-initialized projector over a seeded toy encoder, no adapters.
pub fn micro_projector(shape: [usize; 3], d_f: usize, seed: u64) -> Projector {
    let enc = Arc::new(ImageEncoder::toy(shape, d_f, seed).unwrap());
    let text = ToyTextEncoder::new(64, d_f, seed).unwrap();
    Projector::from_text(enc, &text, &NAMES, &TEMPLATES).unwrap()
}

pub fn uniform_images(n: usize, shape: [usize; 3], seed: u64) -> Array4<f64> {
    let mut rng = seeded_rng(seed);
    Array4::from_shape_simple_fn((n, shape[0], shape[1], shape[2]), || rng.random::<f64>())
}

/// Smallest config that still exercises every stage.
pub fn tiny_config(dir: &Path) -> PipelineConfig {
    let text = format!(
        r#"
output_dir = "{}"
[hyper]
epochs_k = 3
[data]
classes = 3
train_per_class = 12
test_per_class = 6
image_size = 16
[encoder]
embed_dim = 16
text_vocab = 64
[teachers]
arch = "convnet-xs"
total_epochs = 3
batch_size = 12
window = [1, 3]
count = 3
[transfer]
rank_encoder = 2
rank_head = 2
epochs = 1
batch_size = 12
lr = 0.01
holdout_fraction = 0.1
[synthesis]
ipc = 2
crops_per_image = 4
sources_per_class = 4
[downstream]
arch = "convnet-xs"
batch_size = 6
eval_every = 1
seeds = [0]
"#,
        dir.display()
    );
    PipelineConfig::from_toml_str(&text).unwrap()
}

use hello_core::data::LabeledDataset;
use hello_core::synthesis::{extract_patch, CropBox, Observer, PatchCandidate};

/// Per-crop cross-entropy, one observer call per crop.
pub fn oracle_scores(observer: &dyn Observer, data: &LabeledDataset, crops: &[CropBox]) -> Vec<PatchCandidate> {
    let [_, h, w] = observer.input_shape();
    crops
        .iter()
        .map(|b| {
            let patch = extract_patch(data, b, h, w).insert_axis(ndarray::Axis(0));
            let z = observer.logits(patch.view()).unwrap();
            let row: Vec<f64> = z.row(0).to_vec();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let label = data.labels[b.source];
            PatchCandidate {
                crop: *b,
                label,
                difficulty: lse - row[label],
            }
        })
        .collect()
}

/// Bottom-k by repeated full scans: lowest difficulty, then the lowest
/// `(source, x, y, w, h)`.
pub fn oracle_bottom_k(pool: &[PatchCandidate], k: usize) -> Vec<PatchCandidate> {
    let key = |c: &PatchCandidate| (c.crop.source, c.crop.x, c.crop.y, c.crop.w, c.crop.h);
    let mut taken = vec![false; pool.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, c) in pool.iter().enumerate() {
            if taken[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let cb = &pool[b];
                    let better = c.difficulty < cb.difficulty || (c.difficulty == cb.difficulty && key(c) < key(cb));
                    Some(if better { i } else { b })
                }
            };
        }
        let b = best.expect("pool smaller than k");
        taken[b] = true;
        out.push(pool[b]);
    }
    out
}
