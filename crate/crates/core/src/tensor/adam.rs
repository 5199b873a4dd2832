use super::{Tensor, TensorError};
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment estimates for a fixed, ordered parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One bias-corrected Adam update, then zeroes every gradient.
    ///
    /// Parameters with `requires_grad == false` are skipped entirely: their
    /// values and moments stay untouched.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<(), TensorError> {
        if params.len() != self.m.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam",
                detail: alloc::format!("{} params, state for {}", params.len(), self.m.len()),
            });
        }
        for (index, p) in params.iter().enumerate() {
            if !p.requires_grad {
                continue;
            }
            match &p.grad {
                Some(g) if g.len() == p.numel() && self.m[index].len() == p.numel() => {}
                Some(g) => {
                    return Err(TensorError::shape("adam", &[g.len()], &[p.numel()]));
                }
                None => return Err(TensorError::MissingGrad { index }),
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(beta1, t);
        let c2 = 1.0 - libm::pow(beta2, t);
        for (index, p) in params.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let g = p.grad.as_mut().expect("checked above");
            let (m, v) = (&mut self.m[index], &mut self.v[index]);
            for k in 0..p.data.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p.data[k] -= lr * mhat / (libm::sqrt(vhat) + eps);
                g[k] = 0.0;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::vector(&[v]).with_grad();
        t.grad = Some(alloc::vec![g]);
        t
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut ps = [param(0.7, 0.0)];
        let mut s = AdamState::new(AdamConfig::default(), &ps);
        s.step(&mut ps).unwrap();
        assert_eq!(ps[0].data, [0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = [param(1.0, 1.0)];
        let mut s = AdamState::new(AdamConfig::with_lr(0.01), &ps);
        s.step(&mut ps).unwrap();
        // mhat = 1, vhat = 1 after bias correction.
        let want = 1.0 - 0.01 / (1.0 + 1e-8);
        assert!((ps[0].data[0] - want).abs() < 1e-15);
        assert_eq!(ps[0].grad.as_deref(), Some(&[0.0][..]));
        ps[0].grad = Some(alloc::vec![1.0]);
        s.step(&mut ps).unwrap();
        assert_eq!(s.step, 2);
    }

    #[test]
    fn missing_grad() {
        let mut ps = [Tensor::vector(&[1.0]).with_grad()];
        let mut s = AdamState::new(AdamConfig::default(), &ps);
        assert_eq!(s.step(&mut ps), Err(TensorError::MissingGrad { index: 0 }));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut ps = [param(1.0, 1.0), param(2.0, 1.0)];
        let mut s = AdamState::new(AdamConfig::default(), &ps);
        s.step(&mut ps).unwrap();
        ps[0].grad = Some(alloc::vec![1.0]);
        ps[1].requires_grad = false;
        let before = ps[1].data[0];
        s.step(&mut ps).unwrap();
        assert_eq!(ps[1].data[0].to_bits(), before.to_bits());
    }
}
