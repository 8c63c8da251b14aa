use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape {
                op: "adam",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m.get(i).map(Vec::len) != Some(p.len()) {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(x: &[f64]) -> Tensor {
        Tensor::new(&[x.len()], x.to_vec()).unwrap()
    }

    #[test]
    fn zero_grads_and_zero_lr_are_no_ops() {
        let mut p = vec![vec1(&[1.0, -2.0])];
        let mut adam = Adam::new(0.1);
        adam.step(&mut p, &[vec1(&[0.0, 0.0])]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        let mut adam = Adam::new(0.0);
        adam.step(&mut p, &[vec1(&[3.0, -0.5])]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn first_step_closed_form() {
        let g = [0.3, -4.0];
        let mut p = vec![vec1(&[0.0, 0.0])];
        let mut adam = Adam::new(0.01);
        adam.step(&mut p, &[vec1(&g)]).unwrap();
        // mhat = g, vhat = g^2 after bias correction
        for (x, gi) in p[0].data().iter().zip(g) {
            let expected = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_steps_approach_lr_times_sign() {
        let mut p = vec![vec1(&[0.0, 0.0])];
        let mut adam = Adam::new(0.05);
        let g = vec1(&[2.5, -0.001]);
        let mut prev = p[0].data().to_vec();
        for _ in 0..200 {
            adam.step(&mut p, std::slice::from_ref(&g)).unwrap();
            let now = p[0].data().to_vec();
            let d0 = now[0] - prev[0];
            let d1 = now[1] - prev[1];
            assert!((d0 + 0.05).abs() < 1e-6);
            assert!((d1 - 0.05).abs() < 1e-4);
            prev = now;
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![vec1(&[0.0, 0.0])];
        let mut adam = Adam::new(0.1);
        assert!(adam.step(&mut p, &[vec1(&[1.0])]).is_err());
    }
}
