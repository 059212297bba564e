use crate::nn::{Bound, ParamStore};
use crate::tensor::{Graph, Real};

/// Linear warmup to `lr`, then cosine decay to a tenth of it at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let floor = 0.1 * self.lr;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam moments with decoupled weight decay. Decay applies to matrices only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            weight_decay,
            eps: 1e-8,
            t: 0,
            m: store.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
            v: store.iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, g: &Graph<T>, bound: &Bound, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let c1 = T::of(1.0 - self.beta1.powi(self.t.min(i32::MAX as u64) as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.t.min(i32::MAX as u64) as i32));
        let lr_t = T::of(lr);
        for (i, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let Some(grad) = g.grad(bound.0[i]) else { continue };
            let decay = if p.value.ndim() >= 2 { T::of(1.0 - lr * self.weight_decay) } else { one };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gr), mi), vi) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gr;
                *vi = b2 * *vi + (one - b2) * gr * gr;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w = *w * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Group;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_shape() {
        let s = Schedule { lr: 1.0, warmup: 10, total: 110 };
        assert!((s.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(60) - 0.55).abs() < 1e-12);
        assert!((s.lr_at(110) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(500) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic_and_respects_zero_lr() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Group::Projection, Tensor::from_f64([2], &[3.0, -2.0]).unwrap());
        let mut opt = AdamW::new(&store, 0.9, 0.999, 0.0);
        for step in 0..400 {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let sq = g.mul(p.0[0], p.0[0]).unwrap();
            let l = g.sum(sq);
            g.backward(l).unwrap();
            let lr = if step == 0 { 0.0 } else { 0.05 };
            let before = store.get(crate::nn::ParamId(0)).value.clone();
            opt.step(&mut store, &g, &p, lr);
            if step == 0 {
                assert_eq!(store.get(crate::nn::ParamId(0)).value, before);
            }
        }
        assert!(store.iter().next().unwrap().value.data().iter().all(|v| v.abs() < 1e-2));
    }
}
