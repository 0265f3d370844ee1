//! Small convolutional networks shared by the toy image encoder, the weak
//! teachers and the downstream students.
//!
//! Every block is `conv3x3 -> group norm -> relu -> avgpool2`; the stack ends
//! with a global average pool and a linear layer.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayView4, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{ElementWidth, TensorArchive};
use crate::error::{validate, Error, Result};
use crate::graph::{Grads, Graph, Var};

pub type ParamMap = BTreeMap<String, ArrayD<f64>>;
pub type ParamVars = BTreeMap<String, Var>;

const INFER_BATCH: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub arch: String,
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
    pub channels: Vec<usize>,
    pub out_dim: usize,
    pub pixel_mean: Vec<f64>,
    pub pixel_std: Vec<f64>,
}

impl ConvNetSpec {
    /// Architecture registry. `toy-encoder` and `convnet-s` share the three
    /// block layout; `convnet-w` is a wider two-block alternative used for
    /// cross-architecture runs.
    pub fn named(arch: &str, input_shape: [usize; 3], out_dim: usize) -> Result<Self> {
        let channels = match arch {
            "toy-encoder" => vec![16, 32, 32],
            "convnet-s" => vec![16, 32, 32],
            "convnet-w" => vec![24, 48],
            "convnet-xs" => vec![8, 16],
            other => return Err(Error::Config(format!("unknown architecture {other:?}"))),
        };
        let c = input_shape[0];
        Ok(Self {
            arch: arch.to_string(),
            input_shape,
            channels,
            out_dim,
            pixel_mean: vec![0.5; c],
            pixel_std: vec![0.25; c],
        })
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&self.input_shape[0])
    }

    pub fn validate(&self) -> Result<()> {
        validate(!self.channels.is_empty(), || "network needs at least one block".into())?;
        validate(self.out_dim >= 1, || "output dimension must be positive".into())?;
        validate(self.pixel_mean.len() == self.input_shape[0] && self.pixel_std.len() == self.input_shape[0], || {
            "pixel statistics must have one entry per input channel".into()
        })?;
        validate(self.pixel_std.iter().all(|s| *s > 0.0 && s.is_finite()), || "pixel std must be positive".into())?;
        validate(self.input_shape[1] >> self.channels.len() >= 1 && self.input_shape[2] >> self.channels.len() >= 1, || {
            "input too small for the pooling stack".into()
        })?;
        Ok(())
    }

    /// Expected `(name, shape)` of every parameter, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.input_shape[0];
        for (i, &c) in self.channels.iter().enumerate() {
            let b = i + 1;
            out.push((format!("conv{b}/weight"), vec![c, cin, 3, 3]));
            out.push((format!("conv{b}/bias"), vec![c]));
            out.push((format!("norm{b}/gamma"), vec![c]));
            out.push((format!("norm{b}/beta"), vec![c]));
            cin = c;
        }
        out.push(("fc/weight".into(), vec![cin, self.out_dim]));
        out.push(("fc/bias".into(), vec![self.out_dim]));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    pub spec: ConvNetSpec,
    pub params: ParamMap,
}

impl ConvNet {
    /// He-normal convolution weights, `N(0, 1/fan_in)` linear weights, zero
    /// biases and identity norms.
    pub fn init(spec: ConvNetSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamMap::new();
        for (name, shape) in spec.param_shapes() {
            let a = if name.ends_with("/weight") {
                let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                let gain = if shape.len() == 4 { 2.0 } else { 1.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).unwrap();
                ArrayD::from_shape_simple_fn(IxDyn(&shape), || normal.sample(rng))
            } else if name.ends_with("/gamma") {
                ArrayD::ones(IxDyn(&shape))
            } else {
                ArrayD::zeros(IxDyn(&shape))
            };
            params.insert(name, a);
        }
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: ConvNetSpec, params: ParamMap) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        let missing: Vec<String> = shapes.iter().filter(|(n, _)| !params.contains_key(n)).map(|(n, _)| n.clone()).collect();
        if !missing.is_empty() {
            return Err(Error::MissingWeights(missing));
        }
        for (name, shape) in &shapes {
            let got = params[name].shape();
            if got != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, found {got:?}")));
            }
        }
        validate(params.len() == shapes.len(), || "unexpected extra parameters".into())?;
        Ok(Self { spec, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Inserts every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        self.params
            .iter()
            .map(|(k, v)| {
                let var = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect()
    }

    /// Runs the stack on `x: [n, c, h, w]` using the bound parameter vars.
    pub fn forward(&self, g: &mut Graph, x: Var, p: &ParamVars) -> Var {
        let mut h = g.channel_affine(x, &self.spec.pixel_mean, &self.spec.pixel_std);
        for i in 1..=self.spec.channels.len() {
            h = g.conv2d(h, p[&format!("conv{i}/weight")], p[&format!("conv{i}/bias")], 1);
            h = g.group_norm(h, p[&format!("norm{i}/gamma")], p[&format!("norm{i}/beta")]);
            h = g.relu(h);
            h = g.avg_pool2(h);
        }
        let f = g.global_avg_pool(h);
        let z = g.matmul(f, p["fc/weight"]);
        g.add_row(z, p["fc/bias"])
    }

    pub fn check_input(&self, images: &ArrayView4<f64>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if [c, h, w] != self.spec.input_shape {
            return Err(Error::Shape(format!(
                "{} expects input {:?}, got {:?}",
                self.spec.arch,
                self.spec.input_shape,
                [c, h, w]
            )));
        }
        Ok(())
    }

    /// Loss value and parameter gradients for one batch; `loss` maps the
    /// logits var to a scalar var.
    pub fn loss_and_grads(&self, x: &Array4<f64>, loss: impl FnOnce(&mut Graph, Var) -> Var) -> (f64, ParamMap) {
        let mut g = Graph::new();
        let p = self.bind(&mut g, true);
        let xv = g.constant(x.clone().into_dyn());
        let z = self.forward(&mut g, xv, &p);
        let l = loss(&mut g, z);
        let mut grads = g.backward(l);
        (g.scalar(l), collect_grads(&mut grads, &p))
    }

    /// Batched inference without gradient bookkeeping.
    pub fn predict(&self, images: ArrayView4<f64>) -> Result<Array2<f64>> {
        self.check_input(&images)?;
        let n = images.dim().0;
        let mut out = Array2::<f64>::zeros((n, self.spec.out_dim));
        let mut start = 0;
        while start < n {
            let end = (start + INFER_BATCH).min(n);
            let mut g = Graph::new();
            let p = self.bind(&mut g, false);
            let x = g.constant(images.slice(s![start..end, .., .., ..]).to_owned().into_dyn());
            let y = self.forward(&mut g, x, &p);
            out.slice_mut(s![start..end, ..]).assign(&g.value2(y));
            start = end;
        }
        Ok(out)
    }

    pub fn to_archive(&self, prefix: &str, width: ElementWidth) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        for (k, v) in &self.params {
            a.insert_array(format!("{prefix}{k}"), v, width)?;
        }
        a.insert_str(format!("{prefix}meta/spec"), &serde_json::to_string(&self.spec)?)?;
        Ok(a)
    }

    pub fn from_archive(archive: &TensorArchive, prefix: &str) -> Result<Self> {
        let spec: ConvNetSpec = serde_json::from_str(&archive.get_str(&format!("{prefix}meta/spec"))?)?;
        let mut params = ParamMap::new();
        let mut missing = Vec::new();
        for (name, _) in spec.param_shapes() {
            match archive.get(&format!("{prefix}{name}")) {
                Some(t) => {
                    params.insert(name, t.to_array());
                }
                None => missing.push(format!("{prefix}{name}")),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingWeights(missing));
        }
        Self::from_params(spec, params)
    }

    /// SHA-256 over parameter names, shapes and `f64` bit patterns.
    pub fn fingerprint(&self) -> String {
        fingerprint_params(&self.params)
    }
}

pub fn fingerprint_params(params: &ParamMap) -> String {
    let mut h = Sha256::new();
    for (k, v) in params {
        h.update(k.as_bytes());
        for d in v.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in v.iter() {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Row-major one-hot targets.
pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut t = Array2::zeros((labels.len(), classes));
    for (i, &y) in labels.iter().enumerate() {
        t[[i, y]] = 1.0;
    }
    t
}

pub fn mean_rows(rows: &[Array1<f64>]) -> Array1<f64> {
    let mut acc = Array1::zeros(rows[0].len());
    for r in rows {
        acc += r;
    }
    acc / rows.len() as f64
}

/// Gradients of the bound leaves keyed like the parameters. Leaves that did
/// not influence the loss are omitted.
pub fn collect_grads(grads: &mut Grads, vars: &ParamVars) -> ParamMap {
    vars.iter().filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use ndarray::Array4;

    #[test]
    fn predict_shape_and_batch_independence() {
        let spec = ConvNetSpec::named("convnet-xs", [3, 8, 8], 4).unwrap();
        let net = ConvNet::init(spec, &mut seeded_rng(0)).unwrap();
        let x = Array4::from_shape_fn((5, 3, 8, 8), |(n, c, h, w)| ((n * 7 + c * 5 + h * 3 + w) % 11) as f64 / 10.0);
        let all = net.predict(x.view()).unwrap();
        assert_eq!(all.dim(), (5, 4));
        for i in 0..5 {
            let one = net.predict(x.slice(s![i..i + 1, .., .., ..])).unwrap();
            for j in 0..4 {
                assert!((one[[0, j]] - all[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn archive_round_trip_and_missing_names() {
        let spec = ConvNetSpec::named("convnet-xs", [3, 8, 8], 4).unwrap();
        let net = ConvNet::init(spec, &mut seeded_rng(1)).unwrap();
        let a = net.to_archive("t/", ElementWidth::Eight).unwrap();
        assert_eq!(ConvNet::from_archive(&a, "t/").unwrap(), net);
        let mut b = a.clone();
        b.remove("t/conv2/bias");
        match ConvNet::from_archive(&b, "t/").unwrap_err() {
            Error::MissingWeights(names) => assert_eq!(names, vec!["t/conv2/bias".to_string()]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        let m = ndarray::array![[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]];
        assert_eq!(argmax_rows(&m), vec![0, 1]);
    }
}
