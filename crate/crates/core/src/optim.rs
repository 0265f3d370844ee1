//! First-order optimizers over named parameter maps.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::ParamMap;

/// Learning rate at `step` of `total` under cosine decay to zero.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * base * (1.0 + (PI * t).cos())
}

fn check_grads(params: &ParamMap, grads: &ParamMap) -> Result<()> {
    for (k, g) in grads {
        let p = params
            .get(k)
            .ok_or_else(|| Error::State(format!("gradient for unknown parameter {k}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("{k}: parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
    }
    Ok(())
}

/// SGD with heavy-ball momentum and decoupled-into-gradient L2 decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: ParamMap,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: ParamMap::new(),
        }
    }

    /// Parameters with no gradient entry are left untouched.
    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap, lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        for (k, g) in grads {
            let p = params.get_mut(k).unwrap();
            let d = g + &(&*p * self.weight_decay);
            let v = self.velocity.entry(k.clone()).or_insert_with(|| d.mapv(|_| 0.0));
            *v = &*v * self.momentum + &d;
            p.scaled_add(-lr, v);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: ParamMap,
    v: ParamMap,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: ParamMap::new(),
            v: ParamMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap, lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, g) in grads {
            let p = params.get_mut(k).unwrap();
            let m = self.m.entry(k.clone()).or_insert_with(|| g.mapv(|_| 0.0));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self.v.entry(k.clone()).or_insert_with(|| g.mapv(|_| 0.0));
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD};

    fn quad(x: f64) -> (ParamMap, ParamMap) {
        let mut p = ParamMap::new();
        p.insert("x".into(), arr1(&[x]).into_dyn());
        let mut g = ParamMap::new();
        g.insert("x".into(), arr1(&[2.0 * x]).into_dyn());
        (p, g)
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn sgd_first_step() {
        let (mut p, g) = quad(1.0);
        Sgd::new(0.9, 0.0).step(&mut p, &g, 0.1).unwrap();
        assert!((p["x"][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let (mut p, g) = quad(3.0);
        Adam::new().step(&mut p, &g, 0.01).unwrap();
        assert!((p["x"][0] - 2.99).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Adam::new();
        let mut p = quad(3.0).0;
        for _ in 0..2000 {
            let x = p["x"][0];
            let mut g = ParamMap::new();
            g.insert("x".into(), arr1(&[2.0 * x]).into_dyn());
            opt.step(&mut p, &g, 0.05).unwrap();
        }
        assert!(p["x"][0].abs() < 1e-3);
    }

    #[test]
    fn mismatched_gradient_rejected() {
        let (mut p, _) = quad(1.0);
        let mut g = ParamMap::new();
        g.insert("x".into(), ArrayD::zeros(ndarray::IxDyn(&[2])));
        assert!(Sgd::new(0.0, 0.0).step(&mut p, &g, 0.1).is_err());
        g.clear();
        g.insert("y".into(), ArrayD::zeros(ndarray::IxDyn(&[1])));
        assert!(Adam::new().step(&mut p, &g, 0.1).is_err());
    }
}
