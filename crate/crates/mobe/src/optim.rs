//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::graph::{Graph, Param};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer over a fixed parameter group. Moment state lives here, so two
/// optimizers over disjoint groups never disturb each other's state.
pub struct AdamW {
    params: Vec<Param>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: Vec<Param>, weight_decay: f64) -> Result<Self> {
        if weight_decay < 0.0 {
            return Err(Error::invalid(format!(
                "weight_decay must be non-negative, got {weight_decay}"
            )));
        }
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let t = vec![0; params.len()];
        Ok(AdamW {
            params,
            m,
            v,
            t,
            weight_decay,
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Apply one update using the gradients the graph computed for this
    /// group's parameters. Parameters the loss did not touch are skipped and
    /// their moments stay put.
    pub fn step(&mut self, graph: &Graph, lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        for (i, p) in self.params.iter().enumerate() {
            let Some(grad) = graph.grad_of(p) else {
                continue;
            };
            self.t[i] += 1;
            let t = self.t[i];
            let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
            let mut value = p.value().clone();
            let data = value.data_mut();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + self.weight_decay * data[j]);
            }
            p.set_value(value);
        }
        Ok(())
    }

    /// Decoupled decay only: `w <- w * (1 - lr * wd)` for every parameter,
    /// equivalent to a step on zero gradients.
    pub fn step_decay_only(&mut self, lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        for (i, p) in self.params.iter().enumerate() {
            self.t[i] += 1;
            let mut value = p.value().clone();
            for w in value.data_mut() {
                *w -= lr * self.weight_decay * *w;
            }
            p.set_value(value);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn update_moves_against_gradient() {
        // f(w) = w^2 at w = 1: gradient positive, so w must decrease
        let p = Param::new("w", Tensor::scalar(1.0));
        let mut opt = AdamW::new(vec![p.clone()], 0.0).unwrap();
        let mut g = Graph::new(0);
        let w = g.param(&p);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        opt.step(&g, 0.1).unwrap();
        assert!(p.value().data()[0] < 1.0);
    }

    #[test]
    fn pure_decay_when_gradient_is_zero() {
        let p = Param::new("w", Tensor::scalar(3.0));
        let mut opt = AdamW::new(vec![p.clone()], 0.1).unwrap();
        // a loss independent of w: gradient of w is exactly zero
        let mut g = Graph::new(0);
        let w = g.param(&p);
        let zero = g.mul_scalar(w, 0.0);
        let loss = g.sum_all(zero);
        g.backward(loss).unwrap();
        opt.step(&g, 1.0).unwrap();
        let expected = 3.0 * (1.0 - 0.1);
        assert!((p.value().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let p = Param::new("w", Tensor::scalar(1.0));
        let mut opt = AdamW::new(vec![p.clone()], 0.0).unwrap();
        let g = Graph::new(0);
        assert!(opt.step(&g, 0.0).is_err());
        assert!(opt.step(&g, -1.0).is_err());
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = 0.5 * sum (w - target)^2 has closed-form minimizer at target
        let target = [1.5, -2.0, 0.25, 4.0];
        let p = Param::new("w", Tensor::from_vec(&[4], vec![0.0; 4]).unwrap());
        let mut opt = AdamW::new(vec![p.clone()], 0.0).unwrap();
        for _ in 0..200 {
            let mut g = Graph::new(0);
            let w = g.param(&p);
            let t = g.constant(Tensor::from_vec(&[4], target.to_vec()).unwrap());
            let d = g.sub(w, t).unwrap();
            let sq = g.mul(d, d).unwrap();
            let s = g.sum_all(sq);
            let loss = g.mul_scalar(s, 0.5);
            g.backward(loss).unwrap();
            opt.step(&g, 0.1).unwrap();
        }
        let dist: f64 = p
            .value()
            .data()
            .iter()
            .zip(&target)
            .map(|(w, t)| (w - t) * (w - t))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-3, "distance to minimizer {dist}");
    }
}
