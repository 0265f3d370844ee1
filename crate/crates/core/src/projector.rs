//! The image-to-label projector: frozen image encoder, a linear head
//! initialized from class text embeddings, and low-rank increments on
//! selected encoder weights and on the head.
//!
//! Only the low-rank matrices and a little metadata are ever persisted. The
//! head is rebuilt from the text encoder when an artifact is loaded, and the
//! encoder weights are supplied separately.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, ArrayView4, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::{load_archive, save_archive, ElementWidth, TensorArchive};
use crate::config::OutputSpace;
use crate::encoders::{
    build_class_prompts, check_pairing, encode_text, load_pretrained_encoder, normalize_rows, ImageEncoder, TextEncoder,
    ENC_PREFIX,
};
use crate::error::{validate, Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::nn::{ParamMap, ParamVars};

pub const HEAD_TARGET: &str = "head/weight";
const LORA_INIT_STD: f64 = 0.01;
const NORMALIZED_TOL: f64 = 1e-4;
const INFER_BATCH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    TextEmbedding,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    /// `[d_f, C]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub init_source: HeadInit,
}

impl LinearHead {
    pub fn apply(&self, v: &Array2<f64>) -> Array2<f64> {
        v.dot(&self.weight) + &self.bias
    }
}

/// Zero-shot cosine scores `v_I · v_Tᵀ` with `v_I` the normalized image
/// embeddings.
pub fn zero_shot_logits(encoder: &ImageEncoder, v_t: &Array2<f64>, images: ArrayView4<f64>) -> Result<Array2<f64>> {
    let d = encoder.space().dim();
    if v_t.ncols() != d {
        return Err(Error::Shape(format!("encoder d_f = {d} but text embeddings have {} columns", v_t.ncols())));
    }
    let v_i = normalize_rows(&encoder.encode_image(images)?)?;
    Ok(v_i.dot(&v_t.t()))
}

/// `W = v_Tᵀ`, `b = 0`. Rows of `v_t` must be unit length.
pub fn init_head_from_text(v_t: &Array2<f64>) -> Result<LinearHead> {
    for (i, row) in v_t.outer_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        validate((n - 1.0).abs() <= NORMALIZED_TOL, || format!("text embedding row {i} has norm {n}, expected 1"))?;
    }
    Ok(LinearHead {
        weight: v_t.t().to_owned(),
        bias: Array1::zeros(v_t.nrows()),
        init_source: HeadInit::TextEmbedding,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    /// `[d, r]`
    pub a: Array2<f64>,
    /// `[r, k]`
    pub b: Array2<f64>,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn new(target: impl Into<String>, a: Array2<f64>, b: Array2<f64>, scale: f64) -> Result<Self> {
        let target = target.into();
        let (d, r) = a.dim();
        let (rb, k) = b.dim();
        validate(r == rb, || format!("{target}: A has rank {r} but B has {rb} rows"))?;
        validate(r >= 1, || format!("{target}: rank must be positive"))?;
        validate(r <= d.min(k), || format!("{target}: rank {r} exceeds min({d}, {k})"))?;
        validate(scale > 0.0 && scale.is_finite(), || format!("{target}: scale must be positive"))?;
        Ok(Self { target, a, b, scale })
    }

    /// Gaussian `A` (std 0.01), zero `B`: the initial increment is exactly zero.
    pub fn zero_init(target: impl Into<String>, d: usize, k: usize, rank: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let target = target.into();
        validate(rank >= 1 && rank <= d.min(k), || format!("{target}: rank {rank} must be in 1..=min({d}, {k})"))?;
        let normal = Normal::new(0.0, LORA_INIT_STD).unwrap();
        let a = Array2::from_shape_simple_fn((d, rank), || normal.sample(rng));
        Self::new(target, a, Array2::zeros((rank, k)), scale)
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    /// `(d, k)` of the increment.
    pub fn dims(&self) -> (usize, usize) {
        (self.a.nrows(), self.b.ncols())
    }

    /// `scale · A · B`
    pub fn delta(&self) -> Array2<f64> {
        self.a.dot(&self.b) * self.scale
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// How projector logits become labels: `logits / temperature`, optionally
/// followed by a softmax.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelOutput {
    pub space: OutputSpace,
    pub temperature: f64,
}

impl Default for LabelOutput {
    fn default() -> Self {
        Self {
            space: OutputSpace::Probabilities,
            temperature: 1.0,
        }
    }
}

impl LabelOutput {
    pub fn apply(&self, logits: &Array2<f64>) -> Array2<f64> {
        let z = logits / self.temperature;
        match self.space {
            OutputSpace::Probabilities => softmax_rows(&z.view()),
            OutputSpace::Logits => z,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorMeta {
    pub class_names: Vec<String>,
    pub templates: Vec<String>,
    pub text_encoder_id: String,
    pub config_hash: String,
    pub output: LabelOutput,
}

/// Trainable adapter leaves: target name to `(A, B)` vars.
pub type AdapterVars = BTreeMap<String, (Var, Var)>;

#[derive(Clone, Debug)]
pub struct Projector {
    encoder: Arc<ImageEncoder>,
    head: LinearHead,
    adapters: Vec<LoraAdapter>,
    merged: bool,
    pub meta: ProjectorMeta,
}

fn encoder_key(target: &str) -> Option<&str> {
    target.strip_prefix(ENC_PREFIX)
}

fn flat_dims(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1..].iter().product())
}

impl Projector {
    /// Text-initialized projector with no adapters.
    pub fn from_text<S: AsRef<str>>(
        encoder: Arc<ImageEncoder>,
        text: &dyn TextEncoder,
        class_names: &[S],
        templates: &[S],
    ) -> Result<Self> {
        check_pairing(&encoder, text)?;
        let prompts = build_class_prompts(class_names, templates)?;
        let v_t = encode_text(text, &prompts)?;
        let head = init_head_from_text(&v_t)?;
        Ok(Self {
            encoder,
            head,
            adapters: Vec::new(),
            merged: false,
            meta: ProjectorMeta {
                class_names: class_names.iter().map(|s| s.as_ref().to_string()).collect(),
                templates: templates.iter().map(|s| s.as_ref().to_string()).collect(),
                text_encoder_id: text.id(),
                config_hash: String::new(),
                output: LabelOutput::default(),
            },
        })
    }

    pub fn encoder(&self) -> &Arc<ImageEncoder> {
        &self.encoder
    }

    pub fn head(&self) -> &LinearHead {
        &self.head
    }

    pub fn adapters(&self) -> &[LoraAdapter] {
        &self.adapters
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn num_classes(&self) -> usize {
        self.head.weight.ncols()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.encoder.input_shape()
    }

    /// Adds one adapter per encoder weight selected by `filter` (matched
    /// against names like `conv1/weight`; only weights with 2+ dimensions
    /// are eligible) plus one on the head.
    pub fn attach_lora(
        &mut self,
        filter: &dyn Fn(&str) -> bool,
        rank_encoder: usize,
        rank_head: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if self.merged {
            return Err(Error::State("cannot attach adapters to a merged projector".into()));
        }
        if !self.adapters.is_empty() {
            return Err(Error::State("adapters are already attached".into()));
        }
        validate(rank_encoder >= 1 && rank_head >= 1, || "ranks must be positive".into())?;
        let selected: Vec<(&String, &ArrayD<f64>)> = self
            .encoder
            .params()
            .iter()
            .filter(|(name, w)| w.ndim() >= 2 && filter(name))
            .collect();
        if selected.is_empty() {
            return Err(Error::Config("layer filter selects no encoder weights".into()));
        }
        let mut adapters = Vec::with_capacity(selected.len() + 1);
        for (name, w) in selected {
            let (d, k) = flat_dims(w.shape());
            adapters.push(LoraAdapter::zero_init(format!("{ENC_PREFIX}{name}"), d, k, rank_encoder, scale, rng)?);
        }
        let (d, k) = self.head.weight.dim();
        adapters.push(LoraAdapter::zero_init(HEAD_TARGET, d, k, rank_head, scale, rng)?);
        self.adapters = adapters;
        Ok(())
    }

    /// Replaces the adapter set, checking each against its base weight.
    pub fn set_adapters(&mut self, adapters: Vec<LoraAdapter>) -> Result<()> {
        if self.merged {
            return Err(Error::State("cannot attach adapters to a merged projector".into()));
        }
        for ad in &adapters {
            let base_dims = if ad.target == HEAD_TARGET {
                self.head.weight.dim()
            } else {
                let key = encoder_key(&ad.target)
                    .ok_or_else(|| Error::Validation(format!("unknown adapter target {:?}", ad.target)))?;
                let w = self
                    .encoder
                    .params()
                    .get(key)
                    .ok_or_else(|| Error::Validation(format!("adapter target {:?} not in encoder", ad.target)))?;
                flat_dims(w.shape())
            };
            if ad.dims() != base_dims {
                return Err(Error::Shape(format!(
                    "{}: increment is {:?} but base weight is {:?}",
                    ad.target,
                    ad.dims(),
                    base_dims
                )));
            }
        }
        self.adapters = adapters;
        Ok(())
    }

    pub fn head_rank(&self) -> usize {
        self.adapters.iter().find(|a| a.target == HEAD_TARGET).map_or(0, LoraAdapter::rank)
    }

    /// Encoder with every adapted weight replaced by `θ₀ + scale·A·B`.
    pub fn effective_encoder(&self) -> Result<Arc<ImageEncoder>> {
        let enc_adapters: Vec<&LoraAdapter> = self.adapters.iter().filter(|a| a.target != HEAD_TARGET).collect();
        if enc_adapters.is_empty() {
            return Ok(self.encoder.clone());
        }
        let mut params = self.encoder.params().clone();
        for ad in enc_adapters {
            let key = encoder_key(&ad.target).expect("validated target");
            let w = params.get_mut(key).expect("validated target");
            let delta = ad.delta().into_shape_with_order(IxDyn(w.shape())).unwrap();
            *w = &*w + &delta;
        }
        Ok(Arc::new(self.encoder.with_params(params)?))
    }

    pub fn effective_head(&self) -> LinearHead {
        let mut head = self.head.clone();
        if let Some(ad) = self.adapters.iter().find(|a| a.target == HEAD_TARGET) {
            head.weight = &head.weight + &ad.delta();
        }
        head
    }

    /// Raw logits `normalize(ℰ_I(x)) · W + b` with every increment applied.
    pub fn forward(&self, images: ArrayView4<f64>) -> Result<Array2<f64>> {
        let enc = self.effective_encoder()?;
        let head = self.effective_head();
        let v = normalize_rows(&enc.encode_image(images)?)?;
        Ok(head.apply(&v))
    }

    /// Labels in the configured output space.
    pub fn labels(&self, images: ArrayView4<f64>) -> Result<Array2<f64>> {
        self.labels_in(images, self.meta.output.space)
    }

    /// Labels at the configured temperature in an explicit space.
    pub fn labels_in(&self, images: ArrayView4<f64>, space: OutputSpace) -> Result<Array2<f64>> {
        let out_rep = LabelOutput {
            space,
            temperature: self.meta.output.temperature,
        };
        let n = images.dim().0;
        let mut out = Array2::zeros((n, self.num_classes()));
        let enc = self.effective_encoder()?;
        let head = self.effective_head();
        let mut start = 0;
        while start < n {
            let end = (start + INFER_BATCH).min(n);
            let v = normalize_rows(&enc.encode_image(images.slice(ndarray::s![start..end, .., .., ..]))?)?;
            out.slice_mut(ndarray::s![start..end, ..]).assign(&out_rep.apply(&head.apply(&v)));
            start = end;
        }
        Ok(out)
    }

    /// Inserts the adapter matrices as trainable leaves.
    pub fn bind_adapters(&self, g: &mut Graph) -> AdapterVars {
        self.adapters
            .iter()
            .map(|ad| {
                let a = g.param(ad.a.clone().into_dyn());
                let b = g.param(ad.b.clone().into_dyn());
                (ad.target.clone(), (a, b))
            })
            .collect()
    }

    /// Differentiable forward for adapter training. Base weights and the head
    /// are graph constants.
    pub fn graph_forward(&self, g: &mut Graph, x: Var, adapters: &AdapterVars) -> Result<Var> {
        let net = self.encoder.net();
        let mut bound: ParamVars = net.bind(g, false);
        for ad in &self.adapters {
            let Some(&(a, b)) = adapters.get(&ad.target) else { continue };
            if ad.target == HEAD_TARGET {
                continue;
            }
            let key = encoder_key(&ad.target).expect("validated target");
            let base = bound[key];
            let ab = g.matmul(a, b);
            let ab = g.scale(ab, ad.scale);
            let shape = net.params[key].shape().to_vec();
            let ab = g.reshape(ab, &shape);
            let eff = g.add(base, ab);
            bound.insert(key.to_string(), eff);
        }
        let emb = net.forward(g, x, &bound);
        let v = g.normalize_rows(emb)?;
        let mut w = g.constant(self.head.weight.clone().into_dyn());
        if let Some(ad) = self.adapters.iter().find(|a| a.target == HEAD_TARGET) {
            if let Some(&(a, b)) = adapters.get(HEAD_TARGET) {
                let ab = g.matmul(a, b);
                let ab = g.scale(ab, ad.scale);
                w = g.add(w, ab);
            }
        }
        let bias = g.constant(self.head.bias.clone().into_dyn());
        let z = g.matmul(v, w);
        Ok(g.add_row(z, bias))
    }

    /// Adapter matrices keyed `lora/<target>/A` and `lora/<target>/B`.
    pub fn adapter_params(&self) -> ParamMap {
        let mut m = ParamMap::new();
        for ad in &self.adapters {
            m.insert(format!("lora/{}/A", ad.target), ad.a.clone().into_dyn());
            m.insert(format!("lora/{}/B", ad.target), ad.b.clone().into_dyn());
        }
        m
    }

    pub fn set_adapter_params(&mut self, params: &ParamMap) -> Result<()> {
        for ad in &mut self.adapters {
            for (suffix, slot) in [("A", &mut ad.a), ("B", &mut ad.b)] {
                let name = format!("lora/{}/{suffix}", ad.target);
                let v = params.get(&name).ok_or_else(|| Error::MissingWeights(vec![name.clone()]))?;
                let v = v
                    .clone()
                    .into_dimensionality()
                    .map_err(|_| Error::Shape(format!("{name} must be 2-D")))?;
                if v.dim() != slot.dim() {
                    return Err(Error::Shape(format!("{name}: expected {:?}, found {:?}", slot.dim(), v.dim())));
                }
                *slot = v;
            }
        }
        Ok(())
    }

    /// Bakes every increment into the weights and drops the adapters.
    pub fn merge(&self) -> Result<Projector> {
        if self.merged {
            return Err(Error::State("projector is already merged".into()));
        }
        if self.adapters.is_empty() {
            return Err(Error::State("no adapters to merge".into()));
        }
        Ok(Projector {
            encoder: self.effective_encoder()?,
            head: self.effective_head(),
            adapters: Vec::new(),
            merged: true,
            meta: self.meta.clone(),
        })
    }

    /// Encoder + head + adapter values.
    pub fn parameter_count(&self) -> usize {
        self.encoder.net().parameter_count()
            + self.head.weight.len()
            + self.head.bias.len()
            + self.adapters.iter().map(LoraAdapter::param_count).sum::<usize>()
    }

    pub fn artifact(&self) -> Result<ProjectorArtifact> {
        if self.merged {
            return Err(Error::State("a merged projector has no low-rank artifact".into()));
        }
        Ok(ProjectorArtifact {
            encoder_id: self.encoder.id().to_string(),
            adapters: self.adapters.clone(),
            head_rank: self.head_rank(),
            meta: self.meta.clone(),
        })
    }

    /// Rebuilds a projector from its artifact: the head is re-derived from
    /// the text encoder, adapters are checked against the supplied encoder.
    pub fn from_artifact(art: &ProjectorArtifact, encoder: Arc<ImageEncoder>, text: &dyn TextEncoder) -> Result<Self> {
        if encoder.id() != art.encoder_id {
            return Err(Error::EncoderMismatch {
                expected: art.encoder_id.clone(),
                found: encoder.id().to_string(),
            });
        }
        if text.id() != art.meta.text_encoder_id {
            return Err(Error::EncoderMismatch {
                expected: art.meta.text_encoder_id.clone(),
                found: text.id(),
            });
        }
        let mut p = Projector::from_text(encoder, text, &art.meta.class_names, &art.meta.templates)?;
        p.meta = art.meta.clone();
        p.set_adapters(art.adapters.clone())?;
        Ok(p)
    }
}

/// Persisted form of a projector: low-rank matrices and metadata only.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorArtifact {
    pub encoder_id: String,
    pub adapters: Vec<LoraAdapter>,
    pub head_rank: usize,
    pub meta: ProjectorMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorStorage {
    pub params: u64,
    pub bytes: u64,
}

/// Adapter values only: the head is rebuilt from text and the encoder is
/// external, so neither is counted.
pub fn count_projector_storage(art: &ProjectorArtifact, width: ElementWidth) -> ProjectorStorage {
    let params: u64 = art.adapters.iter().map(|a| a.param_count() as u64).sum();
    ProjectorStorage {
        params,
        bytes: params * width.bytes() as u64,
    }
}

impl ProjectorArtifact {
    pub fn to_archive(&self, width: ElementWidth) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        for ad in &self.adapters {
            a.insert_array(format!("lora/{}/A", ad.target), &ad.a.clone().into_dyn(), width)?;
            a.insert_array(format!("lora/{}/B", ad.target), &ad.b.clone().into_dyn(), width)?;
            a.insert_scalars(format!("lora/{}/meta", ad.target), &[ad.rank() as f64, ad.scale], ElementWidth::Eight)?;
        }
        a.insert_scalars("head/rank", &[self.head_rank as f64], ElementWidth::Eight)?;
        a.insert_str("meta/encoder_id", &self.encoder_id)?;
        a.insert_str("meta/class_names", &serde_json::to_string(&self.meta.class_names)?)?;
        a.insert_str("meta/templates", &serde_json::to_string(&self.meta.templates)?)?;
        a.insert_str("meta/config_hash", &self.meta.config_hash)?;
        a.insert_str("meta/text_encoder_id", &self.meta.text_encoder_id)?;
        a.insert_str("meta/output", &serde_json::to_string(&self.meta.output)?)?;
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let mut targets: Vec<String> = a
            .names()
            .filter_map(|n| n.strip_prefix("lora/").and_then(|r| r.strip_suffix("/meta")))
            .map(str::to_string)
            .collect();
        // head adapter last, encoder adapters in name order
        targets.sort_by_key(|t| (t == HEAD_TARGET, t.clone()));
        let mut adapters = Vec::with_capacity(targets.len());
        for t in targets {
            let meta = a.scalars(&format!("lora/{t}/meta"))?;
            validate(meta.len() == 2, || format!("lora/{t}/meta must hold [rank, scale]"))?;
            let mat = |s: &str| -> Result<Array2<f64>> {
                a.array(&format!("lora/{t}/{s}"))?
                    .into_dimensionality()
                    .map_err(|_| Error::Shape(format!("lora/{t}/{s} must be 2-D")))
            };
            let ad = LoraAdapter::new(t.clone(), mat("A")?, mat("B")?, meta[1])?;
            validate(ad.rank() as f64 == meta[0], || format!("lora/{t}: stored rank disagrees with matrices"))?;
            adapters.push(ad);
        }
        let head_rank = a.scalars("head/rank")?.first().copied().unwrap_or(0.0) as usize;
        Ok(Self {
            encoder_id: a.get_str("meta/encoder_id")?,
            adapters,
            head_rank,
            meta: ProjectorMeta {
                class_names: serde_json::from_str(&a.get_str("meta/class_names")?)?,
                templates: serde_json::from_str(&a.get_str("meta/templates")?)?,
                text_encoder_id: a.get_str("meta/text_encoder_id")?,
                config_hash: a.get_str("meta/config_hash")?,
                output: serde_json::from_str(&a.get_str("meta/output")?)?,
            },
        })
    }

    /// Architecture id, the part of `encoder_id` before the fingerprint.
    pub fn encoder_arch(&self) -> &str {
        self.encoder_id.split(':').next().unwrap_or("")
    }
}

pub fn save_projector(art: &ProjectorArtifact, path: impl AsRef<Path>, width: ElementWidth) -> Result<()> {
    save_archive(path, &art.to_archive(width)?)
}

pub fn load_artifact(path: impl AsRef<Path>) -> Result<ProjectorArtifact> {
    ProjectorArtifact::from_archive(&load_archive(path)?)
}

/// Loads an artifact and rebuilds the projector on top of the given encoder
/// archive and text encoder.
pub fn load_projector(path: impl AsRef<Path>, encoder_archive: &TensorArchive, text: &dyn TextEncoder) -> Result<Projector> {
    let art = load_artifact(path)?;
    let arch = encoder_archive.get_str("meta/arch")?;
    let encoder = Arc::new(load_pretrained_encoder(encoder_archive, &arch)?);
    Projector::from_artifact(&art, encoder, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::ToyTextEncoder;
    use crate::rng::seeded_rng;
    use ndarray::{array, Array4};

    fn toy() -> (Projector, ToyTextEncoder) {
        let enc = Arc::new(ImageEncoder::toy([3, 16, 16], 8, 0).unwrap());
        let text = ToyTextEncoder::new(64, 8, 0).unwrap();
        let p = Projector::from_text(enc, &text, &["red disk", "blue disk", "red ring"], &["a {}", "the {}"]).unwrap();
        (p, text)
    }

    #[test]
    fn two_class_head_example() {
        let head = init_head_from_text(&array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let out = head.apply(&array![[0.6, 0.8]]);
        assert_eq!(out, array![[0.6, 0.8]]);
        assert!(init_head_from_text(&array![[2.0, 0.0]]).is_err());
    }

    #[test]
    fn attach_rejects_empty_filter_and_big_rank() {
        let (mut p, _) = toy();
        let mut rng = seeded_rng(0);
        assert!(matches!(p.attach_lora(&|_| false, 2, 2, 1.0, &mut rng), Err(Error::Config(_))));
        // conv1 is [16, 3, 3, 3] -> 16 x 27; head is 8 x 3
        assert!(p.attach_lora(&|n| n == "conv1/weight", 17, 2, 1.0, &mut rng).is_err());
        assert!(p.attach_lora(&|n| n == "conv1/weight", 4, 4, 1.0, &mut rng).is_err());
        p.attach_lora(&|n| n == "conv1/weight", 4, 3, 1.0, &mut rng).unwrap();
        assert_eq!(p.adapters().len(), 2);
        assert!(p.attach_lora(&|n| n == "conv1/weight", 4, 3, 1.0, &mut rng).is_err());
    }

    #[test]
    fn hand_sized_increment() {
        let base = array![[1.0, 0.0], [0.0, 1.0]];
        let ad = LoraAdapter::new("x", array![[1.0], [0.0]], array![[0.0, 1.0]], 1.0).unwrap();
        let eff = &base + &ad.delta();
        // row-vector input [1, 1] through x·W
        assert_eq!(array![[1.0, 1.0]].dot(&eff), array![[1.0, 2.0]]);
        let doubled = LoraAdapter::new("x", ad.a.clone(), ad.b.clone(), 2.0).unwrap();
        assert_eq!(doubled.delta(), ad.delta() * 2.0);
    }

    #[test]
    fn merge_rules() {
        let (mut p, _) = toy();
        assert!(p.merge().is_err());
        p.attach_lora(&|n| n.starts_with("conv"), 2, 2, 1.0, &mut seeded_rng(1)).unwrap();
        let m = p.merge().unwrap();
        for (k, v) in m.encoder().params() {
            assert_eq!(v, &p.encoder().params()[k], "zero increment changed {k}");
        }
        assert!(m.merge().is_err());
        assert!(m.artifact().is_err());
        let base_count = p.encoder().net().parameter_count() + p.head().weight.len() + p.head().bias.len();
        assert_eq!(m.parameter_count(), base_count);
    }

    #[test]
    fn artifact_holds_no_full_weights() {
        let (mut p, text) = toy();
        p.attach_lora(&|n| n.starts_with("conv"), 2, 2, 1.0, &mut seeded_rng(1)).unwrap();
        let art = p.artifact().unwrap();
        let a = art.to_archive(ElementWidth::Four).unwrap();
        assert!(a.names().all(|n| n.starts_with("lora/") || n.starts_with("meta/") || n == "head/rank"));
        let back = ProjectorArtifact::from_archive(&a).unwrap();
        let q = Projector::from_artifact(&back, p.encoder().clone(), &text).unwrap();
        let x = Array4::from_elem((2, 3, 16, 16), 0.4);
        assert_eq!(q.forward(x.view()).unwrap(), p.forward(x.view()).unwrap());
    }

    #[test]
    fn storage_counts() {
        let (p, _) = toy();
        let none = ProjectorArtifact {
            encoder_id: "x".into(),
            adapters: vec![],
            head_rank: 0,
            meta: p.meta.clone(),
        };
        assert_eq!(count_projector_storage(&none, ElementWidth::Four).params, 0);
    }
}
