//! SGD with momentum and Adam, both with classic L2 weight decay folded into
//! the gradient. Decay applies to weights only; tensors named `*.bias` are
//! exempt.

use super::tensor::{ParamSet, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimRule {
    SgdMomentum { lr: f64, momentum: f64, weight_decay: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimRule {
    /// Self-supervised pretraining defaults: SGD, lr 0.005, wd 1e-4, momentum 0.9.
    pub fn ssl_default() -> Self {
        OptimRule::SgdMomentum { lr: 0.005, momentum: 0.9, weight_decay: 1e-4 }
    }

    /// MIL defaults: Adam, lr 1e-6, wd 1e-5, betas (0.9, 0.999).
    pub fn mil_default() -> Self {
        OptimRule::Adam { lr: 1e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }

    fn weight_decay(&self) -> f64 {
        match *self {
            OptimRule::SgdMomentum { weight_decay, .. } | OptimRule::Adam { weight_decay, .. } => weight_decay,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    rule: OptimRule,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

fn decays(name: &str) -> bool {
    !name.ends_with("bias")
}

impl<T: Real> Optimizer<T> {
    pub fn new(rule: OptimRule, params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        let second = if matches!(rule, OptimRule::Adam { .. }) { zeros() } else { Vec::new() };
        Self { rule, first: zeros(), second, steps: 0 }
    }

    pub fn rule(&self) -> OptimRule {
        self.rule
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Fails without touching `params` if any gradient
    /// is non-finite.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        if !params.same_layout(grads) {
            return Err(Error::Training("gradient layout does not match parameters".into()));
        }
        if self.first.len() != params.len() {
            return Err(Error::Training("optimizer state does not match parameters".into()));
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::Training(format!("non-finite gradient in {name}")));
        }
        self.steps += 1;
        let wd_all = T::lit(self.rule.weight_decay());
        for (i, ((name, p), (_, g))) in params.iter_mut().zip(grads.iter()).enumerate() {
            let wd = if decays(name) { wd_all } else { T::zero() };
            let p = p.data_mut();
            let g = g.data();
            match self.rule {
                OptimRule::SgdMomentum { lr, momentum, .. } => {
                    let (lr, mu) = (T::lit(lr), T::lit(momentum));
                    for ((p, &g), v) in p.iter_mut().zip(g).zip(self.first[i].iter_mut()) {
                        let g = g + wd * *p;
                        *v = mu * *v + g;
                        *p = *p - lr * *v;
                    }
                }
                OptimRule::Adam { lr, beta1, beta2, eps, .. } => {
                    let t = self.steps as i32;
                    let c1 = T::lit(1.0 - beta1.powi(t));
                    let c2 = T::lit(1.0 - beta2.powi(t));
                    let (lr, b1, b2, eps) = (T::lit(lr), T::lit(beta1), T::lit(beta2), T::lit(eps));
                    let one = T::one();
                    for (((p, &g), m), v) in p
                        .iter_mut()
                        .zip(g)
                        .zip(self.first[i].iter_mut())
                        .zip(self.second[i].iter_mut())
                    {
                        let g = g + wd * *p;
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn scalar(name: &str, v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push(name, Tensor::from_vec(&[1], vec![v]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        for rule in [
            OptimRule::SgdMomentum { lr: 0.1, momentum: 0.9, weight_decay: 0.0 },
            OptimRule::Adam { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
        ] {
            let mut p = scalar("w", 1.5);
            let g = scalar("w", 0.0);
            let mut opt = Optimizer::new(rule, &p);
            opt.step(&mut p, &g).unwrap();
            assert_eq!(p.tensor(0).data()[0], 1.5);
        }
    }

    #[test]
    fn sgd_hand_arithmetic() {
        let mut p = scalar("w", 1.0);
        let g = scalar("w", 1.0);
        let mut opt = Optimizer::new(OptimRule::SgdMomentum { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }, &p);
        opt.step(&mut p, &g).unwrap();
        assert!((p.tensor(0).data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut p = scalar("w", 0.0);
        let g = scalar("w", 1.0);
        let mut opt = Optimizer::new(OptimRule::SgdMomentum { lr: 1.0, momentum: 0.5, weight_decay: 0.0 }, &p);
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        // v1 = 1, v2 = 0.5 + 1 = 1.5; p = -2.5
        assert!((p.tensor(0).data()[0] + 2.5).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_bias_corrected() {
        let lr = 0.01;
        let mut p = scalar("w", 2.0);
        let g = scalar("w", 1.0);
        let mut opt = Optimizer::new(
            OptimRule::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
            &p,
        );
        opt.step(&mut p, &g).unwrap();
        let want = 2.0 - lr * 1.0 / (1.0 + 1e-8);
        assert!((p.tensor(0).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut p = scalar("layer.bias", 1.0);
        p.push("layer.weight", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let g = p.zeros_like();
        let mut opt = Optimizer::new(OptimRule::SgdMomentum { lr: 0.1, momentum: 0.0, weight_decay: 0.5 }, &p);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.get("layer.bias").unwrap().data()[0], 1.0);
        assert!((p.get("layer.weight").unwrap().data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = scalar("enc.w", 1.0);
        let g = scalar("enc.w", f64::NAN);
        let mut opt = Optimizer::new(OptimRule::ssl_default(), &p);
        let err = opt.step(&mut p, &g).unwrap_err().to_string();
        assert!(err.contains("enc.w"), "{err}");
        assert_eq!(p.tensor(0).data()[0], 1.0);
    }
}
