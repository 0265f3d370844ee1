//! Finite-difference helpers and independently written loss functions.

use hello_core::config::{LabelArm, OutputSpace};
use hello_core::nn::{ConvNet, ParamMap};
use hello_core::projector::{LabelOutput, Projector};
use hello_core::rng::seeded_rng;
use ndarray::{Array2, Array4, ArrayD};
use rand_distr::{Distribution, Normal};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn log_softmax_row(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.outer_iter_mut() {
        let ls = log_softmax_row(&row.to_vec());
        for (o, l) in row.iter_mut().zip(ls) {
            *o = l.exp();
        }
    }
    out
}

pub fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().map(|d| d * d).sum::<f64>() / a.len() as f64
}

/// Mean over rows of `-Σ t · log softmax(z)`.
pub fn soft_ce(z: &Array2<f64>, t: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (zr, tr) in z.outer_iter().zip(t.outer_iter()) {
        let ls = log_softmax_row(&zr.to_vec());
        total -= ls.iter().zip(tr.iter()).map(|(l, t)| l * t).sum::<f64>();
    }
    total / z.nrows() as f64
}

pub fn one_hot(y: &[usize], c: usize) -> Array2<f64> {
    Array2::from_shape_fn((y.len(), c), |(i, j)| f64::from(y[i] == j))
}

pub fn rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    let diff = (a - b).iter().map(|d| d * d).sum::<f64>().sqrt();
    let scale = a.iter().map(|d| d * d).sum::<f64>().sqrt().max(b.iter().map(|d| d * d).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn central_diff(params: &ParamMap, loss: &dyn Fn(&ParamMap) -> f64) -> ParamMap {
    let mut out = ParamMap::new();
    for (name, value) in params {
        let mut g = ArrayD::zeros(value.shape());
        for idx in 0..value.len() {
            let mut p = params.clone();
            let slot = p.get_mut(name).unwrap().as_slice_mut().unwrap();
            let base = slot[idx];
            slot[idx] = base + STEP;
            let up = loss(&p);
            let slot = p.get_mut(name).unwrap().as_slice_mut().unwrap();
            slot[idx] = base - STEP;
            let down = loss(&p);
            g.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * STEP);
        }
        out.insert(name.clone(), g);
    }
    out
}

pub fn adapted_projector(space: OutputSpace) -> Projector {
    let mut p = super::micro_projector([3, 8, 8], 8, 3);
    let mut rng = seeded_rng(11);
    p.attach_lora(&|n| n.starts_with("conv"), 2, 2, 1.0, &mut rng).unwrap();
    // B starts at zero, which would leave every A gradient at zero.
    let normal = Normal::new(0.0, 0.1).unwrap();
    let mut params = p.adapter_params();
    for v in params.values_mut() {
        v.mapv_inplace(|x| x + normal.sample(&mut rng));
    }
    p.set_adapter_params(&params).unwrap();
    p.meta.output = LabelOutput { space, temperature: 0.5 };
    p
}

pub fn transfer_oracle(p: &Projector, x: &Array4<f64>, y_soft: &Array2<f64>, y: &[usize], lambda: f64) -> f64 {
    let z = p.forward(x.view()).unwrap() / p.meta.output.temperature;
    let rep = match p.meta.output.space {
        OutputSpace::Probabilities => softmax(&z),
        OutputSpace::Logits => z.clone(),
    };
    mse(&rep, y_soft) + lambda * soft_ce(&z, &one_hot(y, y_soft.ncols()))
}

pub fn student_oracle(
    net: &ConvNet,
    x: &Array4<f64>,
    arm: LabelArm,
    space: OutputSpace,
    y_star: &Array2<f64>,
    hard: &Array2<f64>,
    beta: f64,
) -> f64 {
    let z = net.predict(x.view()).unwrap();
    match arm {
        LabelArm::Online => {
            let rep = match space {
                OutputSpace::Probabilities => softmax(&z),
                OutputSpace::Logits => z.clone(),
            };
            mse(&rep, y_star) + beta * soft_ce(&z, hard)
        }
        LabelArm::HardOnly => soft_ce(&z, hard),
        LabelArm::OneHotMse => mse(&z, hard),
    }
}


/// Worst per-tensor relative error of the transfer gradients over both
/// output spaces. Panics if the tape loss disagrees with the oracle loss.
pub fn transfer_check() -> f64 {
    use hello_core::transfer::{transfer_grads, transfer_objective};
    use rand::Rng;
    let mut worst: f64 = 0.0;
    for space in [OutputSpace::Probabilities, OutputSpace::Logits] {
        let p = adapted_projector(space);
        let x = super::uniform_images(3, [3, 8, 8], 5);
        let mut rng = seeded_rng(6);
        let y = vec![0, 2, 3];
        let raw = Array2::from_shape_simple_fn((3, 4), || rng.random::<f64>());
        let y_soft = match space {
            OutputSpace::Probabilities => softmax(&raw),
            OutputSpace::Logits => raw * 4.0,
        };
        let lambda = 0.3;

        let (total, _, _, grads) = transfer_grads(&p, &x, &y_soft, &y, lambda).unwrap();
        let oracle = transfer_oracle(&p, &x, &y_soft, &y, lambda);
        assert!((total - oracle).abs() <= 1e-9 * oracle.abs().max(1.0), "{space:?}: tape {total} vs oracle {oracle}");
        let tape_free = transfer_objective(&p, x.view(), &y_soft, &y, lambda).unwrap();
        assert!((tape_free - oracle).abs() <= 1e-9 * oracle.abs().max(1.0));

        let params = p.adapter_params();
        let fd = central_diff(&params, &|q| {
            let mut p2 = p.clone();
            p2.set_adapter_params(q).unwrap();
            transfer_oracle(&p2, &x, &y_soft, &y, lambda)
        });
        assert_eq!(grads.keys().collect::<Vec<_>>(), fd.keys().collect::<Vec<_>>());
        for (name, g) in &grads {
            worst = worst.max(rel_err(g, &fd[name]));
        }
    }
    worst
}

/// Worst per-tensor relative error of the student gradients over every arm.
pub fn student_check() -> f64 {
    use hello_core::downstream::student_grads;
    use hello_core::nn::ConvNetSpec;
    use rand::Rng;
    let spec = ConvNetSpec::named("convnet-xs", [3, 8, 8], 4).unwrap();
    let net = ConvNet::init(spec, &mut seeded_rng(21)).unwrap();
    let x = super::uniform_images(3, [3, 8, 8], 22);
    let mut rng = seeded_rng(23);
    let y_star = Array2::from_shape_simple_fn((3, 4), || rng.random::<f64>() * 2.0 - 1.0);
    // a mixed target row, as produced under mixup
    let mut hard = one_hot(&[1, 0, 3], 4);
    hard[[0, 1]] = 0.7;
    hard[[0, 2]] = 0.3;
    let beta = 0.4;
    let cases = [
        (LabelArm::Online, OutputSpace::Logits),
        (LabelArm::Online, OutputSpace::Probabilities),
        (LabelArm::HardOnly, OutputSpace::Logits),
        (LabelArm::OneHotMse, OutputSpace::Logits),
    ];
    let mut worst: f64 = 0.0;
    for (arm, space) in cases {
        let (loss, grads) = student_grads(&net, &x, arm, space, Some(&y_star), &hard, beta).unwrap();
        let oracle = student_oracle(&net, &x, arm, space, &y_star, &hard, beta);
        assert!((loss - oracle).abs() <= 1e-9 * oracle.abs().max(1.0), "{arm:?}/{space:?}: {loss} vs {oracle}");
        let fd = central_diff(&net.params, &|q| {
            let n2 = ConvNet::from_params(net.spec.clone(), q.clone()).unwrap();
            student_oracle(&n2, &x, arm, space, &y_star, &hard, beta)
        });
        assert_eq!(grads.len(), net.params.len());
        for (name, g) in &grads {
            worst = worst.max(rel_err(g, &fd[name]));
        }
    }
    worst
}
