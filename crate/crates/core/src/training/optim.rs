use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear warmup from `init_lr` to `peak_lr` over `warmup` steps, then decay
/// proportional to `step^{-1/2}` (so `lr(warmup) = peak_lr`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverseSqrt {
    pub peak_lr: f64,
    pub warmup: usize,
    pub init_lr: f64,
}

impl InverseSqrt {
    /// Learning rate for 1-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let step = step.max(1) as f64;
        let warmup = self.warmup as f64;
        if self.warmup == 0 {
            self.peak_lr / step.sqrt()
        } else if step <= warmup {
            self.init_lr + (self.peak_lr - self.init_lr) * step / warmup
        } else {
            self.peak_lr * (warmup / step).sqrt()
        }
    }
}

/// Adam moments, bias-corrected.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(sizes: impl IntoIterator<Item = usize>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update of `params` with `grads` (same order and sizes).
    pub fn update<S: Scalar>(&mut self, params: &mut [&mut Tensor<S>], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(shape_err(format!(
                "optimizer tracks {} arrays, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.len() != g.len() || m.len() != g.len() {
                return Err(shape_err("parameter, gradient and moment sizes differ"));
            }
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let mn = self.beta1 * *mi as f64 + (1.0 - self.beta1) * gi;
                let vn = self.beta2 * *vi as f64 + (1.0 - self.beta2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let upd = lr * (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                *x = S::from_acc(x.to_acc() - upd);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup_then_decays_as_inverse_sqrt() {
        let s = InverseSqrt { peak_lr: 1e-3, warmup: 400, init_lr: 1e-7 };
        assert!((s.lr(400) - 1e-3).abs() < 1e-15);
        assert!(s.lr(399) < s.lr(400) && s.lr(401) < s.lr(400));
        assert!((s.lr(1600) - 0.5e-3).abs() < 1e-15);
        assert!((s.lr(3600) * 3.0 - 1e-3).abs() < 1e-15);
        assert!((s.lr(200) - (1e-7 + (1e-3 - 1e-7) * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::from_vec(vec![1.0, -1.0, 0.5]);
        let mut opt = Adam::new([3], 0.9, 0.98, 1e-8);
        opt.update(&mut [&mut p], &[vec![2.0, -0.5, 0.0]], 0.1).unwrap();
        let d = p.data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 0.9).abs() < 1e-6);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
        let mut h = vec![vec![0.3]];
        clip_grad_norm(&mut h, 1.0);
        assert_eq!(h[0][0], 0.3);
    }
}
