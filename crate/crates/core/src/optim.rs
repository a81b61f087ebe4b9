//! First-order optimizers and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::{Model, ParamGrads};
use crate::tensor::Tensor;

/// SGD with optional heavy-ball momentum: `v = mu v + g; p -= lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: BTreeMap<String, Tensor>,
    steps: u64,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, model: &mut Model, grads: &ParamGrads) -> Result<()> {
        check_keys(model, grads)?;
        for (name, p) in model.params_mut() {
            let g = &grads[&name];
            let update = if self.momentum != 0.0 {
                let v = self
                    .velocity
                    .entry(name)
                    .or_insert_with(|| Tensor::zeros(g.shape()));
                for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                    *vi = self.momentum * *vi + gi;
                }
                v.clone()
            } else {
                g.clone()
            };
            for (pi, ui) in p.data_mut().iter_mut().zip(update.data()) {
                *pi -= self.lr * ui;
            }
        }
        self.steps += 1;
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
        }
    }

    /// `beta1 = 0.9, beta2 = 0.999, eps = 1e-8`.
    pub fn with_lr(lr: f64) -> Self {
        Self::new(lr, 0.9, 0.999, 1e-8)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, model: &mut Model, grads: &ParamGrads) -> Result<()> {
        check_keys(model, grads)?;
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in model.params_mut() {
            let g = &grads[&name];
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn check_keys(model: &Model, grads: &ParamGrads) -> Result<()> {
    for (name, p) in model.params() {
        match grads.get(&name) {
            None => return Err(Error::MissingGradient(name)),
            Some(g) if g.shape() != p.shape() => {
                return Err(Error::Shape {
                    context: format!("gradient for `{name}`"),
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                })
            }
            Some(g) if !g.all_finite() => {
                return Err(Error::NonFinite(format!("gradient for `{name}`")))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Cosine annealing from `initial_lr` down to zero over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    initial_lr: f64,
    total_steps: u64,
}

impl CosineSchedule {
    pub fn new(initial_lr: f64, total_steps: u64) -> Result<Self> {
        if !(initial_lr > 0.0) || total_steps == 0 {
            return Err(Error::Invalid(format!(
                "cosine schedule needs lr > 0 and steps > 0 (got {initial_lr}, {total_steps})"
            )));
        }
        Ok(Self {
            initial_lr,
            total_steps,
        })
    }

    pub fn initial_lr(&self) -> f64 {
        self.initial_lr
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn lr(&self, t: u64) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::Invalid(format!(
                "step {t} outside schedule of {} steps",
                self.total_steps
            )));
        }
        if t == self.total_steps {
            return Ok(0.0);
        }
        Ok(0.5 * self.initial_lr * (1.0 + (PI * t as f64 / self.total_steps as f64).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, Model};
    use proptest::prelude::*;

    fn scalar_model(w: f64) -> Model {
        Model::from_layers(
            1,
            vec![Layer::Linear {
                weight: Tensor::scalar(w),
                bias: Tensor::scalar(0.0),
            }],
        )
        .unwrap()
    }

    fn weight(m: &Model) -> f64 {
        m.params()[0].1.item()
    }

    fn grads(gw: f64) -> ParamGrads {
        [
            ("0.weight".to_string(), Tensor::scalar(gw)),
            ("0.bias".to_string(), Tensor::scalar(0.0)),
        ]
        .into_iter()
        .collect()
    }

    #[test]
    fn sgd_plain_step() {
        let mut m = scalar_model(1.0);
        Sgd::new(0.1, 0.0).step(&mut m, &grads(0.5)).unwrap();
        assert!((weight(&m) - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = scalar_model(1.0);
        Sgd::new(0.1, 0.9).step(&mut m, &grads(0.0)).unwrap();
        assert_eq!(weight(&m), 1.0);
        Adam::with_lr(0.1).step(&mut m, &grads(0.0)).unwrap();
        assert_eq!(weight(&m), 1.0);
    }

    #[test]
    fn missing_key_rejected() {
        let mut m = scalar_model(1.0);
        let mut g = grads(1.0);
        g.remove("0.bias");
        let err = Sgd::new(0.1, 0.0).step(&mut m, &g).unwrap_err();
        assert_eq!(err, Error::MissingGradient("0.bias".into()));
    }

    #[test]
    fn adam_minimizes_square() {
        let mut m = scalar_model(1.0);
        let mut opt = Adam::with_lr(0.01);
        let mut reached = None;
        for step in 0..1000 {
            let w = weight(&m);
            if w.abs() < 1e-3 {
                reached = Some(step);
                break;
            }
            opt.step(&mut m, &grads(2.0 * w)).unwrap();
        }
        assert!(reached.is_some(), "final w = {}", weight(&m));
    }

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule::new(0.1, 100).unwrap();
        assert_eq!(s.lr(0).unwrap(), 0.1);
        assert_eq!(s.lr(100).unwrap(), 0.0);
        assert!((s.lr(50).unwrap() - 0.05).abs() < 1e-15);
        assert!(s.lr(101).is_err());
        assert!(CosineSchedule::new(0.0, 10).is_err());
    }

    proptest! {
        #[test]
        fn cosine_non_increasing(lr in 1e-6f64..10.0, total in 1u64..500) {
            let s = CosineSchedule::new(lr, total).unwrap();
            let mut prev = s.lr(0).unwrap();
            for t in 1..=total {
                let cur = s.lr(t).unwrap();
                prop_assert!(cur <= prev);
                prev = cur;
            }
        }
    }
}
