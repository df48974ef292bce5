use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.99;
pub const BASE_LR: f64 = 1e-3;
pub const ADAM_EPS: f64 = 1e-8;
/// Default warmup length as a fraction of all iterations.
pub const WARMUP_FRACTION: f64 = 0.02;
pub const CLIP_NORM: f64 = 1.0;

/// Adam with linear warmup, cosine decay and global-norm clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
    /// clip gradients to this global l2 norm (`None` disables clipping)
    pub clip_norm: Option<f64>,
    /// number of updates applied so far
    pub step: u64,
    /// first moments, indexed by parameter id (empty until first touched)
    pub m: Vec<Tensor>,
    /// second moments
    pub v: Vec<Tensor>,
}

impl Adam {
    /// Defaults for a run of `total_iters` iterations.
    pub fn new(total_iters: usize) -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            base_lr: BASE_LR,
            warmup_iters: default_warmup(total_iters),
            total_iters,
            clip_norm: Some(CLIP_NORM),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Learning rate at `iter`: linear warmup from 0 to `base_lr`, then
    /// cosine decay reaching 0 at `total_iters`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        lr_at(iter, self.base_lr, self.warmup_iters, self.total_iters)
    }

    /// Applies one update with `lr`; returns the pre-clipping gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<f64> {
        let norm = grads
            .iter()
            .map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::numeric(format!("gradient norm {norm}")));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.ensure(store);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (id, g) in grads {
            let i = id.index();
            let p = store.get(*id);
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let mut m = self.m[i].to_vec();
            let mut v = self.v[i].to_vec();
            let mut w = p.to_vec();
            for (((w, m), v), &g) in w.iter_mut().zip(&mut m).zip(&mut v).zip(g.data()) {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
            self.m[i] = Tensor::new(p.shape(), m)?;
            self.v[i] = Tensor::new(p.shape(), v)?;
            let shape = p.shape().to_vec();
            store.set(*id, Tensor::new(&shape, w)?)?;
        }
        Ok(norm)
    }

    /// Grows moment buffers to cover parameters added since the last step.
    fn ensure(&mut self, store: &ParamStore) {
        for (id, _, t) in store.iter().skip(self.m.len()) {
            debug_assert_eq!(id.index(), self.m.len());
            self.m.push(Tensor::zeros(t.shape()));
            self.v.push(Tensor::zeros(t.shape()));
        }
    }
}

pub fn default_warmup(total_iters: usize) -> usize {
    (total_iters as f64 * WARMUP_FRACTION).round() as usize
}

/// Warmup-then-cosine schedule.
pub fn lr_at(iter: usize, base_lr: f64, warmup_iters: usize, total_iters: usize) -> f64 {
    if iter >= total_iters {
        return 0.0;
    }
    if iter < warmup_iters {
        return base_lr * iter as f64 / warmup_iters as f64;
    }
    let span = (total_iters - warmup_iters) as f64;
    let progress = (iter - warmup_iters) as f64 / span;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
