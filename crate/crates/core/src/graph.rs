//! A small reverse-mode autodiff tape over dense `f64` arrays.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and `backward` just walks it in reverse. Only the ops the
//! models in this crate need are provided: dense matmul, 3x3-style padded
//! convolutions via im2col, per-sample group normalization, pooling, row
//! normalization, separable bilinear resampling and the two training losses.

use ndarray::{s, Array1, Array2, Array4, ArrayD, ArrayView2, Axis, Ix2, Ix4, IxDyn, Zip};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-5;
pub(crate) const MIN_ROW_NORM: f64 = 1e-12;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    ChannelAffine {
        x: Var,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Array2<f64>,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array4<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Softmax(Var),
    Resize {
        x: Var,
        rows: Array2<f64>,
        cols: Array2<f64>,
    },
    Mse(Var, Var),
    SoftCrossEntropy {
        logits: Var,
        target: Array2<f64>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.iter().next().copied().unwrap_or(f64::NAN)
    }

    pub fn value2(&self, v: Var) -> ArrayView2<'_, f64> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("node is not 2-D")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value2(a).dot(&self.value2(b)).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `x[n, m] + bias[m]`
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias).view().into_shape_with_order(IxDyn(&[1, self.value(bias).len()])).unwrap().to_owned();
        let v = self.value(x) + &b;
        let rg = self.rg(x) || self.rg(bias);
        self.push(v, Op::AddRow(x, bias), rg)
    }

    /// Per-channel `(x - mean) / std` on an `[n, c, h, w]` batch.
    pub fn channel_affine(&mut self, x: Var, mean: &[f64], std: &[f64]) -> Var {
        let mut v = self.value(x).clone();
        let inv_std: Vec<f64> = std.iter().map(|s| 1.0 / s).collect();
        for (c, mut plane) in v.axis_iter_mut(Axis(1)).enumerate() {
            let (m, k) = (mean[c], inv_std[c]);
            plane.mapv_inplace(|p| (p - m) * k);
        }
        let rg = self.rg(x);
        self.push(v, Op::ChannelAffine { x, inv_std }, rg)
    }

    /// Stride-1 convolution with symmetric zero padding `pad`.
    /// `x: [n, c, h, w]`, `w: [o, c, k, k]`, `b: [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("conv2d input must be 4-D");
        let wv = self.value(w).view().into_dimensionality::<Ix4>().expect("conv2d weight must be 4-D");
        let (n, c, h, wd) = xv.dim();
        let (o, wc, k, k2) = wv.dim();
        assert_eq!(c, wc, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d expects square kernels");
        let oh = h + 2 * pad + 1 - k;
        let ow = wd + 2 * pad + 1 - k;
        let cols = im2col(&xv, k, pad, oh, ow);
        let w2 = wv.to_shape((o, c * k * k)).unwrap();
        let out2 = w2.dot(&cols);
        let bias = self.value(b);
        let mut out = Array4::<f64>::zeros((n, o, oh, ow));
        let plane = oh * ow;
        for oc in 0..o {
            let row = out2.row(oc);
            let bo = bias[oc];
            for ni in 0..n {
                let src = row.slice(s![ni * plane..(ni + 1) * plane]);
                let mut dst = out.slice_mut(s![ni, oc, .., ..]);
                Zip::from(dst.as_slice_mut().unwrap()).and(src.as_slice().unwrap()).for_each(|d, &s| *d = s + bo);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, cols, pad }, rg)
    }

    /// Group normalization with a single group (normalizes each sample over
    /// `c, h, w`) followed by a per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("group_norm input must be 4-D");
        let (n, c, h, w) = xv.dim();
        let m = (c * h * w) as f64;
        let mut xhat = xv.to_owned();
        let mut inv_std = Vec::with_capacity(n);
        for mut sample in xhat.outer_iter_mut() {
            let mean = sample.sum() / m;
            let var = sample.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            sample.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut out = xhat.clone();
        for mut sample in out.outer_iter_mut() {
            for (ci, mut plane) in sample.outer_iter_mut().enumerate() {
                let (gc, bc) = (g[ci], bt[ci]);
                plane.mapv_inplace(|v| v * gc + bc);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out.into_dyn(),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| a.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    /// 2x2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("avg_pool2 input must be 4-D");
        let (n, c, h, w) = xv.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::<f64>::zeros((n, c, oh, ow));
        Zip::from(out.outer_iter_mut()).and(xv.outer_iter()).for_each(|mut o, src| {
            for ci in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let v = src[[ci, 2 * i, 2 * j]]
                            + src[[ci, 2 * i + 1, 2 * j]]
                            + src[[ci, 2 * i, 2 * j + 1]]
                            + src[[ci, 2 * i + 1, 2 * j + 1]];
                        o[[ci, i, j]] = 0.25 * v;
                    }
                }
            }
        });
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::AvgPool2(x), rg)
    }

    /// `[n, c, h, w] -> [n, c]`
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("global_avg_pool input must be 4-D");
        let (n, c, h, w) = xv.dim();
        let hw = (h * w) as f64;
        let mut out = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                out[[ni, ci]] = xv.slice(s![ni, ci, .., ..]).sum() / hw;
            }
        }
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::GlobalAvgPool(x), rg)
    }

    /// L2-normalizes each row of a 2-D node. Rows with norm below 1e-12 are
    /// rejected instead of being divided.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value2(x);
        let mut norms = Vec::with_capacity(xv.nrows());
        let mut out = xv.to_owned();
        for (i, mut row) in out.outer_iter_mut().enumerate() {
            let nrm = row.dot(&row).sqrt();
            if !(nrm >= MIN_ROW_NORM) {
                return Err(Error::DegenerateEmbedding { row: i, norm: nrm });
            }
            row.mapv_inplace(|v| v / nrm);
            norms.push(nrm);
        }
        let rg = self.rg(x);
        Ok(self.push(out.into_dyn(), Op::NormalizeRows { x, norms }, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(&self.value2(x));
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::Softmax(x), rg)
    }

    /// Separable linear resampling: each `[h, w]` plane becomes
    /// `rows · plane · colsᵀ`.
    pub fn resize(&mut self, x: Var, rows: Array2<f64>, cols: Array2<f64>) -> Var {
        let out = apply_separable(&self.value(x).view().into_dimensionality::<Ix4>().unwrap(), &rows, &cols);
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::Resize { x, rows, cols }, rg)
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.value(a) - self.value(b);
        let v = d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64;
        let rg = self.rg(a) || self.rg(b);
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::Mse(a, b), rg)
    }

    /// Mean over rows of `-Σ_c target[c] · log softmax(logits)[c]`.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Array2<f64>) -> Var {
        let lv = self.value2(logits);
        let probs = softmax_rows(&lv);
        let n = lv.nrows() as f64;
        let mut total = 0.0;
        for (row, t) in lv.outer_iter().zip(target.outer_iter()) {
            let lse = log_sum_exp(row.as_slice().unwrap_or(&row.to_vec()));
            for (&z, &tc) in row.iter().zip(t.iter()) {
                if tc != 0.0 {
                    total -= tc * (z - lse);
                }
            }
        }
        let rg = self.rg(logits);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total / n),
            Op::SoftCrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar node. Only nodes that require gradients
    /// receive one.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), 1.0);
        grads[loss.0] = Some(seed);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, node: &Node, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let mut acc = |v: Var, delta: ArrayD<f64>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, g.to_shape(IxDyn(&shape)).unwrap().to_owned());
            }
            Op::MatMul(a, b) => {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                if self.rg(*a) {
                    acc(*a, g2.dot(&self.value2(*b).t()).into_dyn());
                }
                if self.rg(*b) {
                    acc(*b, self.value2(*a).t().dot(&g2).into_dyn());
                }
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.clone());
                if self.rg(*bias) {
                    acc(*bias, g.sum_axis(Axis(0)));
                }
            }
            Op::ChannelAffine { x, inv_std } => {
                let mut d = g.clone();
                for (c, mut plane) in d.axis_iter_mut(Axis(1)).enumerate() {
                    let k = inv_std[c];
                    plane.mapv_inplace(|v| v * k);
                }
                acc(*x, d);
            }
            Op::Conv2d { x, w, b, cols, pad } => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, o, oh, ow) = g4.dim();
                let plane = oh * ow;
                let mut g2 = Array2::<f64>::zeros((o, n * plane));
                for ni in 0..n {
                    for oc in 0..o {
                        let src = g4.slice(s![ni, oc, .., ..]);
                        let mut dst = g2.slice_mut(s![oc, ni * plane..(ni + 1) * plane]);
                        Zip::from(&mut dst).and(src.to_shape(plane).unwrap().view()).for_each(|d, &s| *d = s);
                    }
                }
                let wv = self.value(*w).view().into_dimensionality::<Ix4>().unwrap();
                let (_, c, k, _) = wv.dim();
                if self.rg(*b) {
                    acc(*b, g2.sum_axis(Axis(1)).into_dyn());
                }
                if self.rg(*w) {
                    let dw = g2.dot(&cols.t());
                    acc(*w, dw.into_shape_with_order((o, c, k, k)).unwrap().into_dyn());
                }
                if self.rg(*x) {
                    let w2 = wv.to_shape((o, c * k * k)).unwrap();
                    let dcols = w2.t().dot(&g2);
                    let xs = self.value(*x).shape();
                    let dx = col2im(&dcols, n, c, xs[2], xs[3], k, *pad, oh, ow);
                    acc(*x, dx.into_dyn());
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = g4.dim();
                if self.rg(*beta) {
                    let mut db = Array1::<f64>::zeros(c);
                    for ni in 0..n {
                        for ci in 0..c {
                            db[ci] += g4.slice(s![ni, ci, .., ..]).sum();
                        }
                    }
                    acc(*beta, db.into_dyn());
                }
                if self.rg(*gamma) {
                    let mut dg = Array1::<f64>::zeros(c);
                    for ni in 0..n {
                        for ci in 0..c {
                            let gs = g4.slice(s![ni, ci, .., ..]);
                            let xs = xhat.slice(s![ni, ci, .., ..]);
                            dg[ci] += Zip::from(&gs).and(&xs).fold(0.0, |a, &p, &q| a + p * q);
                        }
                    }
                    acc(*gamma, dg.into_dyn());
                }
                if self.rg(*x) {
                    let gv = self.value(*gamma);
                    let m = (c * h * w) as f64;
                    let mut dx = Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        let mut dxhat = g4.slice(s![ni, .., .., ..]).to_owned();
                        for (ci, mut p) in dxhat.outer_iter_mut().enumerate() {
                            let gc = gv[ci];
                            p.mapv_inplace(|v| v * gc);
                        }
                        let xs = xhat.slice(s![ni, .., .., ..]);
                        let sum_d = dxhat.sum();
                        let sum_dx = Zip::from(&dxhat).and(&xs).fold(0.0, |a, &p, &q| a + p * q);
                        let is = inv_std[ni];
                        let mut out = dx.slice_mut(s![ni, .., .., ..]);
                        Zip::from(&mut out).and(&dxhat).and(&xs).for_each(|o, &d, &xh| {
                            *o = is / m * (m * d - sum_d - xh * sum_dx);
                        });
                    }
                    acc(*x, dx.into_dyn());
                }
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&node.value).for_each(|d, &y| {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                });
                acc(*x, d);
            }
            Op::AvgPool2(x) => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let shape = self.value(*x).shape();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                let (_, _, oh, ow) = g4.dim();
                for ni in 0..n {
                    for ci in 0..c {
                        for i in 0..oh {
                            for j in 0..ow {
                                let v = 0.25 * g4[[ni, ci, i, j]];
                                dx[[ni, ci, 2 * i, 2 * j]] = v;
                                dx[[ni, ci, 2 * i + 1, 2 * j]] = v;
                                dx[[ni, ci, 2 * i, 2 * j + 1]] = v;
                                dx[[ni, ci, 2 * i + 1, 2 * j + 1]] = v;
                            }
                        }
                    }
                }
                acc(*x, dx.into_dyn());
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let hw = (h * w) as f64;
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let v = g[[ni, ci]] / hw;
                        dx.slice_mut(s![ni, ci, .., ..]).fill(v);
                    }
                }
                acc(*x, dx.into_dyn());
            }
            Op::NormalizeRows { x, norms } => {
                let y = node.value.view().into_dimensionality::<Ix2>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<f64>::zeros(y.raw_dim());
                for i in 0..y.nrows() {
                    let gy = g2.row(i).dot(&y.row(i));
                    let inv = 1.0 / norms[i];
                    Zip::from(dx.row_mut(i)).and(g2.row(i)).and(y.row(i)).for_each(|d, &gi, &yi| {
                        *d = (gi - yi * gy) * inv;
                    });
                }
                acc(*x, dx.into_dyn());
            }
            Op::Softmax(x) => {
                let y = node.value.view().into_dimensionality::<Ix2>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<f64>::zeros(y.raw_dim());
                for i in 0..y.nrows() {
                    let gy = g2.row(i).dot(&y.row(i));
                    Zip::from(dx.row_mut(i)).and(g2.row(i)).and(y.row(i)).for_each(|d, &gi, &yi| {
                        *d = yi * (gi - gy);
                    });
                }
                acc(*x, dx.into_dyn());
            }
            Op::Resize { x, rows, cols } => {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let dx = apply_separable(&g4, &rows.t().to_owned(), &cols.t().to_owned());
                acc(*x, dx.into_dyn());
            }
            Op::Mse(a, b) => {
                let gs = g.iter().next().copied().unwrap_or(1.0);
                let d = self.value(*a) - self.value(*b);
                let k = 2.0 * gs / d.len() as f64;
                let da = d * k;
                if self.rg(*b) {
                    acc(*b, -&da);
                }
                acc(*a, da);
            }
            Op::SoftCrossEntropy { logits, target, probs } => {
                let gs = g.iter().next().copied().unwrap_or(1.0);
                let n = probs.nrows() as f64;
                let mut dx = probs.clone();
                for (mut row, t) in dx.outer_iter_mut().zip(target.outer_iter()) {
                    let mass: f64 = t.sum();
                    Zip::from(&mut row).and(&t).for_each(|d, &tc| *d = (*d * mass - tc) * gs / n);
                }
                acc(*logits, dx.into_dyn());
            }
        }
    }
}

fn im2col(x: &ndarray::ArrayView4<f64>, k: usize, pad: usize, oh: usize, ow: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let plane = oh * ow;
    let mut cols = Array2::<f64>::zeros((c * k * k, n * plane));
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let mut row = cols.row_mut(r);
                let row = row.as_slice_mut().unwrap();
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for i in 0..oh {
                        let si = i as isize + ki as isize - pad as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let src = &xs[base + si as usize * w..base + (si as usize + 1) * w];
                        let dst = &mut row[ni * plane + i * ow..ni * plane + (i + 1) * ow];
                        for (j, d) in dst.iter_mut().enumerate() {
                            let sj = j as isize + kj as isize - pad as isize;
                            if sj >= 0 && sj < w as isize {
                                *d = src[sj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<f64> {
    let plane = oh * ow;
    let mut dx = vec![0.0; n * c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let row = dcols.row(r);
                let row = row.as_slice().unwrap();
                for ni in 0..n {
                    let base = (ni * c + ci) * h * w;
                    for i in 0..oh {
                        let si = i as isize + ki as isize - pad as isize;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let src = &row[ni * plane + i * ow..ni * plane + (i + 1) * ow];
                        let dst = &mut dx[base + si as usize * w..base + (si as usize + 1) * w];
                        for (j, &v) in src.iter().enumerate() {
                            let sj = j as isize + kj as isize - pad as isize;
                            if sj >= 0 && sj < w as isize {
                                dst[sj as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((n, c, h, w), dx).unwrap()
}

/// `rows · plane · colsᵀ` for every `[h, w]` plane of a batch.
pub fn apply_separable(x: &ndarray::ArrayView4<f64>, rows: &Array2<f64>, cols: &Array2<f64>) -> Array4<f64> {
    let (n, c, _, _) = x.dim();
    let (oh, ow) = (rows.nrows(), cols.nrows());
    let mut out = Array4::<f64>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            let p = x.slice(s![ni, ci, .., ..]);
            let r = rows.dot(&p).dot(&cols.t());
            out.slice_mut(s![ni, ci, .., ..]).assign(&r);
        }
    }
    out
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.outer_iter_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - m).exp());
        let s = row.sum();
        row.mapv_inplace(|z| z / s);
    }
    out
}

/// Bilinear interpolation matrix (`out x in`) using half-pixel centers and
/// edge clamping. Every row sums to one.
pub fn bilinear_matrix(input: usize, output: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((output, input));
    let ratio = input as f64 / output as f64;
    for i in 0..output {
        let src = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let t = src - i0 as f64;
        m[[i, i0]] += 1.0 - t;
        m[[i, i1]] += t;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: &dyn Fn(&ArrayD<f64>) -> f64, x: &ArrayD<f64>) -> ArrayD<f64> {
        let h = 1e-6;
        let mut g = ArrayD::zeros(x.raw_dim());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            g.as_slice_mut().unwrap()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn pseudo(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn assert_close(a: &ArrayD<f64>, b: &ArrayD<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let scale = 1.0f64.max(x.abs()).max(y.abs());
            assert!((x - y).abs() / scale < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn conv_block_gradients_match_finite_differences() {
        let x0 = pseudo(&[2, 2, 5, 5], 1);
        let w0 = pseudo(&[3, 2, 3, 3], 2);
        let b0 = pseudo(&[3], 3);
        let gamma0 = pseudo(&[3], 4);
        let beta0 = pseudo(&[3], 5);
        let build = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>, gm: &ArrayD<f64>, bt: &ArrayD<f64>| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
            let (gv, btv) = (g.param(gm.clone()), g.param(bt.clone()));
            let y = g.conv2d(xv, wv, bv, 1);
            let y = g.group_norm(y, gv, btv);
            let y = g.relu(y);
            let y = g.avg_pool2(y);
            let y = g.global_avg_pool(y);
            let t = g.constant(pseudo(&[2, 3], 9));
            let loss = g.mse(y, t);
            (g, loss, [xv, wv, bv, gv, btv])
        };
        let (g, loss, vars) = build(&x0, &w0, &b0, &gamma0, &beta0);
        let grads = g.backward(loss);
        let inputs = [&x0, &w0, &b0, &gamma0, &beta0];
        for (slot, v) in vars.iter().enumerate() {
            let f = |p: &ArrayD<f64>| {
                let mut args: Vec<ArrayD<f64>> = inputs.iter().map(|a| (*a).clone()).collect();
                args[slot] = p.clone();
                let (g, l, _) = build(&args[0], &args[1], &args[2], &args[3], &args[4]);
                g.scalar(l)
            };
            let num = numeric_grad(&f, inputs[slot]);
            assert_close(grads.get(*v).unwrap(), &num, 1e-5);
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let x0 = pseudo(&[4, 5], 11);
        let w0 = pseudo(&[5, 3], 12);
        let target = array![[1.0, 0.0, 0.0], [0.0, 0.5, 0.5], [0.0, 0.0, 1.0], [0.2, 0.8, 0.0]];
        let build = |x: &ArrayD<f64>, w: &ArrayD<f64>| {
            let mut g = Graph::new();
            let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
            let n = g.normalize_rows(xv).unwrap();
            let z = g.matmul(n, wv);
            let z = g.scale(z, 3.0);
            let p = g.softmax(z);
            let t = g.constant(target.clone().into_dyn());
            let m = g.mse(p, t);
            let ce = g.soft_cross_entropy(z, target.clone());
            let ce = g.scale(ce, 0.3);
            let loss = g.add(m, ce);
            (g, loss, xv, wv)
        };
        let (g, loss, xv, wv) = build(&x0, &w0);
        let grads = g.backward(loss);
        let fx = |p: &ArrayD<f64>| {
            let (g, l, _, _) = build(p, &w0);
            g.scalar(l)
        };
        let fw = |p: &ArrayD<f64>| {
            let (g, l, _, _) = build(&x0, p);
            g.scalar(l)
        };
        assert_close(grads.get(xv).unwrap(), &numeric_grad(&fx, &x0), 1e-6);
        assert_close(grads.get(wv).unwrap(), &numeric_grad(&fw, &w0), 1e-6);
    }

    #[test]
    fn resize_gradient_is_adjoint() {
        let x0 = pseudo(&[1, 2, 5, 6], 21);
        let build = |x: &ArrayD<f64>| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let d = g.resize(xv, bilinear_matrix(5, 2), bilinear_matrix(6, 3));
            let u = g.resize(d, bilinear_matrix(2, 5), bilinear_matrix(3, 6));
            let loss = g.mse(u, xv);
            (g, loss, xv)
        };
        let (g, loss, xv) = build(&x0);
        let grads = g.backward(loss);
        let f = |p: &ArrayD<f64>| {
            let (g, l, _) = build(p);
            g.scalar(l)
        };
        assert_close(grads.get(xv).unwrap(), &numeric_grad(&f, &x0), 1e-6);
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (i, o) in [(32, 16), (16, 32), (7, 3), (3, 7), (5, 5)] {
            let m = bilinear_matrix(i, o);
            for row in m.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(bilinear_matrix(4, 4), Array2::<f64>::eye(4));
    }

    #[test]
    fn normalize_rejects_zero_rows() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 0.0], [0.0, 0.0]].into_dyn());
        assert!(matches!(g.normalize_rows(x), Err(Error::DegenerateEmbedding { row: 1, .. })));
    }
}
