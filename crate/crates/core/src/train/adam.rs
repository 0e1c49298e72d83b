use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const EPSILON: f32 = 1e-8;

/// Bias-corrected adaptive moment estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Adam {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        Self {
            step: 0,
            first: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            second: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_params(params: &[&mut Tensor]) -> Self {
        Self::new(&params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>())
    }

    /// One in-place update of every parameter.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::contract(
                "optimizer_step",
                format!("{} parameters, {} gradients, {} moment slots", params.len(), grads.len(), self.first.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.shape() != self.first[i].shape() {
                return Err(Error::shapes("optimizer_step", p.shape(), self.first[i].shape()));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence(format!("non-finite gradient for parameter {i}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let lr = lr as f32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g).enumerate() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *x -= lr * mh / (vh.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let before = p.clone();
        let mut adam = Adam::new(&[vec![2]]);
        adam.update(&mut [&mut p], &[vec![0.0, 0.0]], 1e-3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut adam = Adam::new(&[vec![1]]);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p.data()[0];
            adam.update(&mut [&mut p], &[vec![0.3]], 1e-3).unwrap();
            last = before - p.data()[0];
        }
        assert!((last - 1e-3).abs() < 1e-5, "{last}");
    }

    #[test]
    fn descends_a_parabola() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut adam = Adam::new(&[vec![1]]);
        let g = 2.0 * p.data()[0];
        adam.update(&mut [&mut p], &[vec![g]], 0.1).unwrap();
        assert!(p.data()[0] < 1.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut adam = Adam::new(&[vec![1]]);
        let err = adam.update(&mut [&mut p], &[vec![f32::NAN]], 0.1).unwrap_err();
        assert_eq!(err.category(), "divergence");
        assert_eq!(p.data()[0], 1.0);
    }
}
