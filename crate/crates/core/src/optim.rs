//! Gradient accumulation and the Adam optimiser.

use crate::autodiff::{Gradients, ParamSet};
use crate::matrix::Matrix;

/// Dense per-parameter gradient sums, in parameter order.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Matrix>,
}

impl GradBuffer {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: params
                .ids()
                .map(|id| {
                    let p = params.get(id);
                    Matrix::zeros(p.rows(), p.cols())
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, g: &Gradients, weight: f64) {
        for (id, m) in g.iter() {
            let dst = &mut self.grads[id.0];
            for (a, b) in dst.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *a += weight * b;
            }
        }
    }

    pub fn as_slice(&self) -> &[Matrix] {
        &self.grads
    }

    pub fn norm(&self) -> f64 {
        self.grads.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt()
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            g.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = GradBuffer::zeros_like(params).grads;
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Applies one update; `clip` rescales the gradient to at most that norm.
    pub fn step(&mut self, params: &mut ParamSet, grads: &GradBuffer, clip: Option<f64>) {
        self.t += 1;
        let scale = match clip {
            Some(c) => {
                let n = grads.norm();
                if n > c { c / n } else { 1.0 }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads.grads[i].as_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            let p = params.get_mut(id).as_mut_slice();
            for j in 0..p.len() {
                let gj = g[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Matrix::from_vec(1, 3, vec![3.0, -2.0, 0.5]).unwrap());
        let target = Matrix::from_vec(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let mut opt = Adam::new(&ps, 0.05);
        let mut buf = GradBuffer::zeros_like(&ps);
        for _ in 0..500 {
            let grads = {
                let mut t = Tape::training();
                let w = t.param(&ps, id);
                let l = t.mse_loss(w, target.clone());
                t.backward(l)
            };
            buf.clear();
            buf.accumulate(&grads, 1.0);
            opt.step(&mut ps, &buf, Some(10.0));
        }
        assert!(ps.get(id).max_abs_diff(&target) < 1e-3);
    }
}
