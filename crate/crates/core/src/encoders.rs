//! Image and text encoders.
//!
//! The image side is a frozen [`ConvNet`] whose output is the raw embedding.
//! The toy text encoder is a seeded bag-of-tokens table. Encoder archives use
//! the layout `enc/<layer>/<param>` plus `meta/arch`, `meta/d_f`,
//! `meta/input_shape`, `meta/pixel_mean` and `meta/pixel_std`.

use ndarray::{Array1, Array2, ArrayView4};
use rand_distr::{Distribution, Normal};

use crate::archive::{ElementWidth, TensorArchive};
use crate::error::{validate, Error, Result};
use crate::graph::MIN_ROW_NORM;
use crate::nn::{ConvNet, ConvNetSpec, ParamMap};
use crate::rng::{child_rng, streams};

pub const ENC_PREFIX: &str = "enc/";

/// Default prompt templates; `{}` is replaced by the class name.
pub const DEFAULT_TEMPLATES: &[&str] = &[
    "a photo of a {}.",
    "a blurry photo of a {}.",
    "a photo of the small {}.",
    "a photo of the large {}.",
    "a rendering of a {}.",
    "a cropped photo of the {}.",
    "a low resolution photo of a {}.",
    "a drawing of the {}.",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingSpace {
    dim: usize,
}

impl EmbeddingSpace {
    pub fn new(dim: usize) -> Result<Self> {
        validate(dim >= 2, || format!("embedding dimension must be at least 2, got {dim}"))?;
        Ok(Self { dim })
    }

    pub fn dim(self) -> usize {
        self.dim
    }
}

/// Frozen image tower. The weights cannot be modified after construction.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    net: ConvNet,
    space: EmbeddingSpace,
    id: String,
}

impl ImageEncoder {
    pub fn new(net: ConvNet) -> Result<Self> {
        let space = EmbeddingSpace::new(net.spec.out_dim)?;
        let id = format!("{}:{}", net.spec.arch, &net.fingerprint()[..16]);
        Ok(Self { net, space, id })
    }

    /// Seeded toy encoder. Weights are rounded through `f32` so that saving at
    /// either element width reproduces the same encoder id.
    pub fn toy(input_shape: [usize; 3], d_f: usize, seed: u64) -> Result<Self> {
        let spec = ConvNetSpec::named("toy-encoder", input_shape, d_f)?;
        let mut net = ConvNet::init(spec, &mut child_rng(seed, streams::ENCODER_INIT))?;
        for v in net.params.values_mut() {
            v.mapv_inplace(|x| x as f32 as f64);
        }
        Self::new(net)
    }

    /// Sets the output bias so that the mean embedding of `reference` is
    /// zero. A random tower maps every image into a narrow cone; centring
    /// spreads the directions out without touching any weight matrix.
    pub fn centered_on(&self, reference: ArrayView4<f64>) -> Result<Self> {
        validate(reference.dim().0 > 0, || "centring needs at least one reference image".into())?;
        let mut params = self.net.params.clone();
        params.insert("fc/bias".into(), ndarray::Array1::<f64>::zeros(self.space.dim()).into_dyn());
        let plain = ConvNet::from_params(self.net.spec.clone(), params.clone())?;
        let mean = plain.predict(reference)?.mean_axis(ndarray::Axis(0)).expect("non-empty");
        params.insert("fc/bias".into(), mean.mapv(|m| -m as f32 as f64).into_dyn());
        self.with_params(params)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn space(&self) -> EmbeddingSpace {
        self.space
    }

    pub fn net(&self) -> &ConvNet {
        &self.net
    }

    pub fn params(&self) -> &ParamMap {
        &self.net.params
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.net.spec.input_shape
    }

    /// A new encoder with the same architecture and different weights.
    pub fn with_params(&self, params: ParamMap) -> Result<Self> {
        Self::new(ConvNet::from_params(self.net.spec.clone(), params)?)
    }

    /// Raw (unnormalized) embeddings, `[batch, d_f]`.
    pub fn encode_image(&self, images: ArrayView4<f64>) -> Result<Array2<f64>> {
        self.net.check_input(&images)?;
        validate(images.iter().all(|p| p.is_finite()), || "images contain non-finite pixels".into())?;
        self.net.predict(images)
    }

    pub fn to_archive(&self, width: ElementWidth) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        for (k, v) in &self.net.params {
            a.insert_array(format!("{ENC_PREFIX}{k}"), v, width)?;
        }
        let spec = &self.net.spec;
        a.insert_str("meta/arch", &spec.arch)?;
        a.insert_scalars("meta/d_f", &[spec.out_dim as f64], ElementWidth::Eight)?;
        let shape: Vec<f64> = spec.input_shape.iter().map(|&d| d as f64).collect();
        a.insert_scalars("meta/input_shape", &shape, ElementWidth::Eight)?;
        a.insert_scalars("meta/pixel_mean", &spec.pixel_mean, ElementWidth::Eight)?;
        a.insert_scalars("meta/pixel_std", &spec.pixel_std, ElementWidth::Eight)?;
        Ok(a)
    }
}

/// Builds a frozen image encoder from an archive. The block layout is read
/// from the `enc/conv<i>/weight` shapes; every required name is checked and
/// all missing names are reported together.
pub fn load_pretrained_encoder(archive: &TensorArchive, arch_id: &str) -> Result<ImageEncoder> {
    let mut missing: Vec<String> = ["meta/arch", "meta/d_f", "meta/input_shape", "meta/pixel_mean", "meta/pixel_std"]
        .iter()
        .filter(|n| !archive.contains(n))
        .map(|n| n.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingWeights(missing));
    }
    let arch = archive.get_str("meta/arch")?;
    if arch != arch_id {
        return Err(Error::Validation(format!("archive holds architecture {arch:?}, expected {arch_id:?}")));
    }
    let as_usize = |name: &str| -> Result<Vec<usize>> {
        archive
            .scalars(name)?
            .into_iter()
            .map(|v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Validation(format!("{name}: expected integers")))
                }
            })
            .collect()
    };
    let d_f = *as_usize("meta/d_f")?.first().ok_or_else(|| Error::Validation("meta/d_f is empty".into()))?;
    let shape = as_usize("meta/input_shape")?;
    validate(shape.len() == 3, || "meta/input_shape must have three entries".into())?;
    let input_shape = [shape[0], shape[1], shape[2]];

    let mut channels = Vec::new();
    while let Some(t) = archive.get(&format!("{ENC_PREFIX}conv{}/weight", channels.len() + 1)) {
        validate(t.shape.len() == 4, || format!("{ENC_PREFIX}conv{}/weight must be 4-D", channels.len() + 1))?;
        channels.push(t.shape[0]);
    }
    if channels.is_empty() {
        return Err(Error::MissingWeights(vec![format!("{ENC_PREFIX}conv1/weight")]));
    }
    let spec = ConvNetSpec {
        arch,
        input_shape,
        channels,
        out_dim: d_f,
        pixel_mean: archive.scalars("meta/pixel_mean")?,
        pixel_std: archive.scalars("meta/pixel_std")?,
    };
    spec.validate()?;
    let mut params = ParamMap::new();
    for (name, expected) in spec.param_shapes() {
        let full = format!("{ENC_PREFIX}{name}");
        match archive.get(&full) {
            None => missing.push(full),
            Some(t) if t.shape != expected => {
                return Err(Error::Shape(format!("{full}: expected {expected:?}, found {:?}", t.shape)));
            }
            Some(t) => {
                params.insert(name, t.to_array());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingWeights(missing));
    }
    ImageEncoder::new(ConvNet::from_params(spec, params)?)
}

pub trait TextEncoder {
    fn space(&self) -> EmbeddingSpace;
    fn id(&self) -> String;
    /// Raw embedding of one prompt.
    fn encode_prompt(&self, prompt: &str) -> Result<Array1<f64>>;
}

/// Bag-of-tokens text encoder: lowercase alphanumeric tokens are hashed into
/// a fixed vocabulary of Gaussian rows and averaged.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    table: Array2<f64>,
    seed: u64,
}

impl ToyTextEncoder {
    pub fn new(vocab: usize, d_f: usize, seed: u64) -> Result<Self> {
        EmbeddingSpace::new(d_f)?;
        validate(vocab >= 1, || "vocabulary must be non-empty".into())?;
        let mut rng = child_rng(seed, streams::TEXT_INIT);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let table = Array2::from_shape_simple_fn((vocab, d_f), || normal.sample(&mut rng));
        Ok(Self { table, seed })
    }

    pub fn tokens(prompt: &str) -> Vec<String> {
        prompt
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    fn token_id(&self, token: &str) -> usize {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in token.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        (h % self.table.nrows() as u64) as usize
    }
}

impl TextEncoder for ToyTextEncoder {
    fn space(&self) -> EmbeddingSpace {
        EmbeddingSpace::new(self.table.ncols()).expect("validated at construction")
    }

    fn id(&self) -> String {
        format!("toy-text:{}x{}:{}", self.table.nrows(), self.table.ncols(), self.seed)
    }

    fn encode_prompt(&self, prompt: &str) -> Result<Array1<f64>> {
        let toks = Self::tokens(prompt);
        validate(!toks.is_empty(), || format!("prompt {prompt:?} has no tokens"))?;
        let mut acc = Array1::zeros(self.table.ncols());
        for t in &toks {
            acc += &self.table.row(self.token_id(t));
        }
        Ok(acc / toks.len() as f64)
    }
}

/// Checks that an image and a text encoder embed into the same space.
pub fn check_pairing(image: &ImageEncoder, text: &dyn TextEncoder) -> Result<()> {
    let (a, b) = (image.space().dim(), text.space().dim());
    if a != b {
        return Err(Error::Shape(format!("image encoder d_f = {a} but text encoder d_f = {b}")));
    }
    Ok(())
}

/// L2-normalizes each row; rows with norm below 1e-12 are an error.
pub fn normalize_rows(m: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = m.clone();
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n >= MIN_ROW_NORM) {
            return Err(Error::DegenerateEmbedding { row: i, norm: n });
        }
        row.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

/// One prompt per template per class, substituting the single `{}`.
pub fn build_class_prompts<S: AsRef<str>, T: AsRef<str>>(class_names: &[S], templates: &[T]) -> Result<Vec<Vec<String>>> {
    validate(!class_names.is_empty(), || "no class names".into())?;
    validate(!templates.is_empty(), || "at least one template is required".into())?;
    for t in templates {
        let n = t.as_ref().matches("{}").count();
        validate(n == 1, || format!("template {:?} has {n} placeholders, expected exactly one", t.as_ref()))?;
    }
    class_names
        .iter()
        .map(|c| {
            let c = c.as_ref();
            validate(!c.trim().is_empty(), || "class names must be non-empty".into())?;
            Ok(templates.iter().map(|t| t.as_ref().replacen("{}", c, 1)).collect())
        })
        .collect()
}

/// Class text embeddings `v_T`: per class, the mean of the raw prompt
/// embeddings, then L2-normalized.
pub fn encode_text(encoder: &dyn TextEncoder, prompt_sets: &[Vec<String>]) -> Result<Array2<f64>> {
    validate(!prompt_sets.is_empty(), || "no prompt sets".into())?;
    let d = encoder.space().dim();
    let mut raw = Array2::zeros((prompt_sets.len(), d));
    for (i, set) in prompt_sets.iter().enumerate() {
        validate(!set.is_empty(), || format!("class {i} has no prompts"))?;
        let mut acc = Array1::<f64>::zeros(d);
        for p in set {
            acc += &encoder.encode_prompt(p)?;
        }
        raw.row_mut(i).assign(&(acc / set.len() as f64));
    }
    normalize_rows(&raw)
}
