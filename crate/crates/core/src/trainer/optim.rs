//! SGD with momentum and LARS.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

use super::config::OptimizerKind;

pub const LARS_EPS: f64 = 1e-9;

/// Batch-norm affine parameters and biases get neither weight decay nor the
/// LARS trust ratio.
pub fn is_excluded(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta")
}

/// `trust · ‖w‖ / (‖g‖ + wd · ‖w‖ + ε)`, or 1 when either norm is zero.
pub fn lars_local_lr(w_norm: f64, g_norm: f64, trust_coeff: f64, weight_decay: f64) -> f64 {
    if w_norm > 0.0 && g_norm > 0.0 {
        trust_coeff * w_norm / (g_norm + weight_decay * w_norm + LARS_EPS)
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coeff: f64,
    /// One buffer per parameter in store order (empty for buffers).
    pub velocity: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64, trust_coeff: f64, params: &ParamStore) -> Self {
        Optimizer {
            kind,
            momentum,
            weight_decay,
            trust_coeff,
            velocity: params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect(),
        }
    }

    /// One update: `v ← m·v + lr·s·(g + wd·w)`, `w ← w − v`, where `s` is the
    /// LARS local rate (1 for SGD and for excluded parameters). `grads` holds
    /// one entry per parameter in store order; `None` entries are skipped.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer: {} params, {} grads, {} velocity buffers",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            if !p.trainable {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
            let excluded = is_excluded(&p.name);
            let wd = if excluded { 0.0 } else { self.weight_decay };
            let scale = match self.kind {
                OptimizerKind::Lars if !excluded => {
                    lars_local_lr(p.tensor.norm(), g.norm(), self.trust_coeff, wd)
                }
                _ => 1.0,
            };
            for ((w, gi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + lr * scale * (gi + wd * *w);
                *w -= *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(name: &str, vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add(name, Tensor::new(&[vals.len()], vals.to_vec()).unwrap(), true);
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Lars] {
            let mut s = store("w", &[0.5, -2.0]);
            let before = s.clone();
            let mut o = Optimizer::new(kind, 0.9, 0.0, 0.001, &s);
            o.step(&mut s, &[Some(Tensor::zeros(&[2]))], 1.0).unwrap();
            assert_eq!(s, before);
        }
    }

    #[test]
    fn lars_scalar_is_rescaled_sgd() {
        let (w, g, lr, trust) = (2.0, 0.5, 0.1, 0.001);
        let mut s = store("w", &[w]);
        let mut o = Optimizer::new(OptimizerKind::Lars, 0.0, 0.0, trust, &s);
        o.step(&mut s, &[Some(Tensor::new(&[1], vec![g]).unwrap())], lr).unwrap();
        let local = trust * w.abs() / (g.abs() + LARS_EPS);
        let want = w - lr * local * g;
        let got = s.iter().next().unwrap().tensor.data()[0];
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn sgd_momentum_matches_hand_rolled() {
        let mut s = store("w", &[1.0]);
        let mut o = Optimizer::new(OptimizerKind::Sgd, 0.9, 0.1, 0.001, &s);
        let (mut w, mut v) = (1.0f64, 0.0f64);
        for _ in 0..5 {
            let g = 2.0 * w;
            o.step(&mut s, &[Some(Tensor::new(&[1], vec![g]).unwrap())], 0.05).unwrap();
            v = 0.9 * v + 0.05 * (g + 0.1 * w);
            w -= v;
        }
        assert!((s.iter().next().unwrap().tensor.data()[0] - w).abs() < 1e-15);
    }

    #[test]
    fn bn_and_bias_skip_decay_and_trust() {
        let mut s = store("bn.gamma", &[1.0]);
        let mut o = Optimizer::new(OptimizerKind::Lars, 0.0, 0.5, 0.001, &s);
        o.step(&mut s, &[Some(Tensor::new(&[1], vec![0.25]).unwrap())], 0.1).unwrap();
        assert!((s.iter().next().unwrap().tensor.data()[0] - 0.975).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut s = store("w", &[1.0]);
        let mut o = Optimizer::new(OptimizerKind::Sgd, 0.9, 0.0, 0.001, &s);
        let r = o.step(&mut s, &[Some(Tensor::new(&[1], vec![f64::NAN]).unwrap())], 0.1);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
