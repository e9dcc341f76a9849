use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam update of `params` in place.
    ///
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut [F], grads: &[F], hp: &AdamParams) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} at coordinate {i}",
                grads[i]
            )));
        }
        self.step += 1;
        let (b1, b2) = (F::lit(hp.beta1), F::lit(hp.beta2));
        let t = self.step as i32;
        let bc1 = F::one() - F::lit(hp.beta1.powi(t));
        let bc2 = F::one() - F::lit(hp.beta2.powi(t));
        let (lr, eps) = (F::lit(hp.lr), F::lit(hp.eps));
        let one = F::one();
        for i in 0..params.len() {
            let g = grads[i];
            let m = b1 * self.m[i] + (one - b1) * g;
            let v = b2 * self.v[i] + (one - b2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![0.5f64; 4];
        let mut s = AdamState::new(4);
        s.step(&mut p, &[1.0; 4], &AdamParams::with_lr(1e-3))
            .unwrap();
        for x in p {
            // m_hat = 1, v_hat = 1: step = lr / (1 + eps).
            assert!((0.5 - x - 1e-3).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.25f32, -3.0];
        let mut s = AdamState::new(2);
        s.step(&mut p, &[0.0, 0.0], &AdamParams::with_lr(1e-2))
            .unwrap();
        assert_eq!(p, vec![0.25, -3.0]);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = vec![1.0f64, 2.0];
        let mut s = AdamState::new(2);
        let err = s
            .step(&mut p, &[0.1, f64::NAN], &AdamParams::with_lr(1e-3))
            .unwrap_err();
        assert!(err.is_numeric_error());
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut p: Vec<f32> = (0..8).map(|i| i as f32 * 0.1).collect();
            let mut s = AdamState::new(8);
            for k in 0..50 {
                let g: Vec<f32> = p.iter().map(|x| (x * k as f32).sin()).collect();
                s.step(&mut p, &g, &AdamParams::with_lr(1e-2)).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
