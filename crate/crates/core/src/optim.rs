//! Bias-corrected Adam.

use crate::error::{CcaError, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Zero moments for parameters shaped like `like`.
    pub fn new<'a>(like: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = like.into_iter().map(|t| Tensor::zeros(t.dims())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    /// One update of every parameter. All gradients are checked before any
    /// parameter is touched; a NaN or infinite entry aborts with the
    /// parameter's name.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], names: &[String], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(CcaError::contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            if p.dims() != g.dims() || p.dims() != self.m[i].dims() {
                return Err(CcaError::Shape {
                    op: "adam",
                    left: p.dims().to_vec(),
                    right: g.dims().to_vec(),
                });
            }
            if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(CcaError::Numeric(format!(
                    "gradient of {name} has non-finite entry {} at flat index {j}",
                    g.data()[j]
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
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
        let mut x = Tensor::vector(vec![1.0, -2.0]);
        let mut opt = Adam::new([&x]);
        opt.step(&mut [&mut x], &[Tensor::zeros(&[2])], &["x".into()], 0.1).unwrap();
        assert_eq!(x.data(), [1.0, -2.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.5, -0.02] {
            let mut x = Tensor::vector(vec![0.0]);
            let mut opt = Adam::new([&x]);
            opt.step(&mut [&mut x], &[Tensor::vector(vec![g])], &["x".into()], 0.01).unwrap();
            let expect = -0.01 * f64::signum(g);
            assert!(((x.data()[0] - expect) / expect).abs() < 1e-6);
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let c = [0.5, -1.5, 2.0];
        let mut x = Tensor::vector(vec![0.0; 3]);
        let mut opt = Adam::new([&x]);
        for _ in 0..200 {
            let g = Tensor::vector(x.data().iter().zip(c).map(|(xi, ci)| 2.0 * (xi - ci)).collect());
            opt.step(&mut [&mut x], &[g], &["x".into()], 0.05).unwrap();
        }
        let dist: f64 = x.data().iter().zip(c).map(|(xi, ci)| (xi - ci).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 1e-3, "{dist}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut a = Tensor::vector(vec![1.0]);
        let mut b = Tensor::vector(vec![1.0]);
        let mut opt = Adam::new([&a, &b]);
        let err = opt
            .step(
                &mut [&mut a, &mut b],
                &[Tensor::vector(vec![0.1]), Tensor::vector(vec![f64::NAN])],
                &["fusion.w_q".into(), "space.g".into()],
                0.1,
            )
            .unwrap_err();
        assert!(err.to_string().contains("space.g"), "{err}");
        assert_eq!(a.data(), [1.0]);
    }
}
