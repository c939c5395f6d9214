//! Adam with bias correction.

use crate::error::{ensure_dim, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Moment buffers shaped like `shapes`, one per tensor.
    pub fn new(lr: f64, shapes: &[usize]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        ensure_dim("adam tensors", self.m.len(), params.len())?;
        ensure_dim("adam tensors", self.m.len(), grads.len())?;
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            ensure_dim("adam tensor", m.len(), p.len())?;
            ensure_dim("adam tensor", m.len(), g.len())?;
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut a = AdamState::new(0.01, &[3]);
        let mut p = vec![1.0, 2.0, 3.0];
        a.update(&mut [&mut p], &[&[0.5, -3.0, 1e-3]]).unwrap();
        for (x, want) in p.iter().zip([0.99, 2.01, 2.99]) {
            assert!((x - want).abs() < 1e-6, "{x} vs {want}");
        }
        assert_eq!(a.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut a = AdamState::new(0.1, &[2]);
        let mut p = vec![1.0, -1.0];
        a.update(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.0, -1.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut a = AdamState::new(0.1, &[2]);
        let mut p = vec![1.0];
        assert!(a.update(&mut [&mut p], &[&[0.0]]).is_err());
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut a = vec![3.0];
        let mut b = vec![4.0];
        let n = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(n, 5.0);
        assert!(((a[0] * a[0] + b[0] * b[0]).sqrt() - 1.0).abs() < 1e-12);
        let mut c = vec![0.1];
        clip_global_norm(&mut [&mut c], 1.0);
        assert_eq!(c, vec![0.1]);
    }
}
