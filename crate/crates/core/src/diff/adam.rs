//! Adam with bias correction and decoupled weight decay.

use crate::diff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update over `params`, which must be passed in the same order on
    /// every call. Gradients are cleared afterwards.
    ///
    /// Nothing is modified unless every parameter has a gradient.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)]) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::MissingGrad(name.clone()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, (_, t))| m.len() != t.len())
        {
            return Err(Error::invalid(
                "adam: parameter set differs from the one the state was built for",
            ));
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = self.learning_rate * self.weight_decay;

        for (k, (_, tensor)) in params.iter_mut().enumerate() {
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in tensor.values_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= decay * *p;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            tensor.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(value: f64, grad: f64) -> Tensor {
        let mut t = Tensor::new(vec![1], vec![value]).unwrap().with_grad();
        t.accumulate_grad(&[grad]).unwrap();
        t
    }

    #[test]
    fn first_step_moves_by_learning_rate_times_sign() {
        for g in [3.7, -0.02, 1e-3] {
            let mut p = scalar_param(1.0, g);
            let mut adam = AdamState::new(5e-4, 0.0);
            adam.step(&mut [("p".into(), &mut p)]).unwrap();
            let moved = p.values()[0] - 1.0;
            assert!((moved + 5e-4 * g.signum()).abs() < 1e-6, "g={g} moved={moved}");
            assert!(p.grad().is_none());
        }
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap().with_grad();
        p.accumulate_grad(&[0.0; 3]).unwrap();
        let before = p.values().to_vec();
        let mut adam = AdamState::new(1e-2, 0.0);
        adam.step(&mut [("p".into(), &mut p)]).unwrap();
        assert_eq!(p.values(), before.as_slice());
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        let (lr, wd, g) = (0.01, 0.1, 0.8);
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);

        // hand-rolled oracle
        let (mut x, mut m, mut v) = (2.0_f64, 0.0_f64, 0.0_f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * wd * x;
            x -= lr * mh / (vh.sqrt() + eps);
        }

        let mut p = Tensor::new(vec![1], vec![2.0]).unwrap().with_grad();
        let mut adam = AdamState::new(lr, wd);
        for _ in 0..2 {
            p.accumulate_grad(&[g]).unwrap();
            adam.step(&mut [("p".into(), &mut p)]).unwrap();
        }
        assert!((p.values()[0] - x).abs() < 1e-15);
        assert_eq!(adam.steps_taken(), 2);
        assert!(adam.second_moments()[0][0] >= 0.0);
    }

    #[test]
    fn missing_grad_names_parameter_and_changes_nothing() {
        let mut a = scalar_param(1.0, 1.0);
        let mut b = Tensor::new(vec![1], vec![1.0]).unwrap().with_grad();
        let mut adam = AdamState::new(0.1, 0.0);
        let err = adam
            .step(&mut [("encoder.w0".into(), &mut a), ("som".into(), &mut b)])
            .unwrap_err();
        assert!(err.to_string().contains("som"));
        assert_eq!(a.values()[0], 1.0);
        assert_eq!(adam.steps_taken(), 0);
    }
}
