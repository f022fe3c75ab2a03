//! Adam with bias correction, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Params, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &Params) -> Self {
        Adam::with_lr(params, 0.001)
    }

    pub fn with_lr(params: &Params, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| p.value.zeros_like()).collect(),
            v: params.iter().map(|p| p.value.zeros_like()).collect(),
        }
    }

    /// One update from the accumulated gradients; gradients are zeroed after.
    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, collection has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if self.m[i].shape != p.grad.shape {
                return Err(Error::shape(format!(
                    "gradient shape {:?} does not match moment shape {:?} for {}",
                    p.grad.shape, self.m[i].shape, p.name
                )));
            }
            for k in 0..p.value.len() {
                let g = p.grad.data[k];
                let m = self.beta1 * self.m[i].data[k] + (1.0 - self.beta1) * g;
                let v = self.beta2 * self.v[i].data[k] + (1.0 - self.beta2) * g * g;
                self.m[i].data[k] = m;
                self.v[i].data[k] = v;
                let mhat = m / bc1;
                let vhat = v / bc2;
                p.value.data[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(values: Vec<f64>) -> Params {
        let mut p = Params::new();
        p.add("w", Tensor::vector(values)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = one_param(vec![1.0, -2.0]);
        let mut adam = Adam::new(&params);
        adam.step(&mut params).unwrap();
        assert_eq!(params.iter().next().unwrap().value.data, vec![1.0, -2.0]);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn first_step_magnitude_is_lr_sign_g() {
        for &g in &[3.0, -0.5, 1e4] {
            let mut params = one_param(vec![0.0]);
            let mut adam = Adam::new(&params);
            params.grad_mut(params.ids().next().unwrap()).data[0] = g;
            adam.step(&mut params).unwrap();
            let w = params.iter().next().unwrap().value.data[0];
            let expected = -adam.lr * g.signum();
            assert!((w - expected).abs() < 1e-9, "g={g}: {w} vs {expected}");
        }
    }

    #[test]
    fn gradients_zeroed_after_step() {
        let mut params = one_param(vec![0.0]);
        let mut adam = Adam::new(&params);
        params.grad_mut(params.ids().next().unwrap()).data[0] = 1.0;
        adam.step(&mut params).unwrap();
        assert_eq!(params.grad(params.ids().next().unwrap()).data, vec![0.0]);
    }

    #[test]
    fn identical_gradient_streams_are_bit_identical() {
        let grads = [0.3, -1.1, 0.0, 2.5, -0.7];
        let run = || {
            let mut params = one_param(vec![0.1]);
            let mut adam = Adam::new(&params);
            let id = params.ids().next().unwrap();
            for g in grads {
                params.grad_mut(id).data[0] = g;
                adam.step(&mut params).unwrap();
            }
            params.value(id).data[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    // Ten steps on f(w) = 0.5 * (w - 3)^2, expectations frozen from a
    // separate scripted Adam reference with the same hyperparameters.
    #[test]
    fn quadratic_trajectory_matches_reference() {
        let mut params = one_param(vec![0.0]);
        let mut adam = Adam::new(&params);
        let id = params.ids().next().unwrap();
        let mut trajectory = Vec::new();
        for _ in 0..10 {
            let w = params.value(id).data[0];
            params.grad_mut(id).data[0] = w - 3.0;
            adam.step(&mut params).unwrap();
            trajectory.push(params.value(id).data[0]);
        }
        let reference = [
            0.0009999999966666666,
            0.001999991289435569,
            0.00299996809351928,
            0.003999924653590129,
            0.004999855256391871,
            0.00599975424301329,
            0.006999616020732559,
            0.007999435074347508,
            0.008999205976914556,
            0.009998923399827784,
        ];
        for (got, want) in trajectory.iter().zip(reference) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn quadratic_loss_decreases_after_burn_in() {
        let mut params = one_param(vec![1.0]);
        let mut adam = Adam::new(&params);
        let id = params.ids().next().unwrap();
        let mut losses = Vec::new();
        for _ in 0..50 {
            let w = params.value(id).data[0];
            losses.push(0.5 * (w - 3.0) * (w - 3.0));
            params.grad_mut(id).data[0] = w - 3.0;
            adam.step(&mut params).unwrap();
        }
        for win in losses[5..].windows(2) {
            assert!(win[1] <= win[0], "loss increased after burn-in: {win:?}");
        }
    }
}
