//! SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − η·v`.

use crate::error::{dim_err, Result};
use crate::nd::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return dim_err(format!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        let (mom, lr) = (T::of(self.momentum), T::of(lr));
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            g.expect_same_shape(p, "sgd step")?;
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mom * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let mut p = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let mut opt = Sgd::new(0.0);
        opt.step(vec![&mut p], &[Tensor::new(vec![1], vec![0.5]).unwrap()], 0.1).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.1 * 0.5]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        let g = [Tensor::new(vec![1], vec![1.0]).unwrap()];
        let mut opt = Sgd::new(0.9);
        opt.step(vec![&mut p], &g, 1.0).unwrap();
        opt.step(vec![&mut p], &g, 1.0).unwrap();
        assert!((p.data()[0] + 1.0 + 1.9).abs() < 1e-15);
    }

    #[test]
    fn count_mismatch() {
        let mut p = Tensor::<f64>::zeros(&[1]);
        assert!(Sgd::new(0.0).step(vec![&mut p], &[], 0.1).is_err());
    }
}
