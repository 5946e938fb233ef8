use crate::nncore::params::{ParamId, ParamStore};
use crate::nncore::tensor::{Real, Tensor};

/// Adam with cosine learning-rate decay and global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    pub total_steps: usize,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, total_steps: usize, clip: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            total_steps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let t = self.step.min(self.total_steps) as f64 / self.total_steps.max(1) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Apply one update to the parameters listed in `ids` (all when `None`).
    /// Returns the pre-clipping global gradient norm.
    pub fn step<T: Real>(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        ids: Option<&[ParamId]>,
    ) -> f64 {
        if self.m.is_empty() {
            self.m = (0..params.len())
                .map(|i| vec![0.0; params.get(ParamId(i)).numel()])
                .collect();
            self.v = self.m.clone();
        }
        let all: Vec<ParamId>;
        let ids = match ids {
            Some(ids) => ids,
            None => {
                all = (0..params.len()).map(ParamId).collect();
                &all
            }
        };
        let norm = ids
            .iter()
            .map(|id| grads[id.0].sq_norm())
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in ids {
            let g = grads[id.0].data();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(*id).data_mut();
            for i in 0..p.len() {
                let gi = g[i].as_f64() * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let upd = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] = T::of_f64(p[i].as_f64() - upd);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::params::Init;

    #[test]
    fn cosine_schedule_endpoints() {
        let mut opt = Adam::new(1e-3, 10, None);
        assert!((opt.current_lr() - 1e-3).abs() < 1e-15);
        opt.step = 5;
        assert!((opt.current_lr() - 5e-4).abs() < 1e-12);
        opt.step = 10;
        assert!(opt.current_lr().abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::<f64>::new(0);
        let id = ps.add("x", &[2], Init::Ones);
        let mut opt = Adam::new(0.1, 500, Some(1.0));
        for _ in 0..500 {
            let x = ps.get(id).clone();
            let g = x.map(|v| 2.0 * (v - 3.0));
            opt.step(&mut ps, &[g], None);
        }
        for &v in ps.get(id).data() {
            assert!((v - 3.0).abs() < 1e-2, "{v}");
        }
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut ps = ParamStore::<f64>::new(0);
        let id = ps.add("x", &[1], Init::Zeros);
        let mut opt = Adam::new(0.1, 1, Some(1.0));
        let norm = opt.step(&mut ps, &[Tensor::full(&[1], 100.0)], None);
        assert_eq!(norm, 100.0);
        // First Adam step moves by lr regardless of scale.
        assert!((ps.get(id).data()[0] + 0.1).abs() < 1e-6);
    }
}
