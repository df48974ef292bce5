use super::Codebook;
use crate::error::{Error, Result};
use crate::nn::{Fwd, Linear, ParamStore};
use crate::tensor::{RngStream, Tensor, Var};

/// λ3: weight of the KL term.
pub const KL_WEIGHT: f64 = 1e-6;
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;
/// Initial log-variance bias when converting a VQ model.
pub const LOGVAR_INIT: f64 = -8.0;

/// `Σ 0.5·(μ² + exp(lv) − 1 − lv)`: KL of `N(μ, e^lv)` from `N(0, 1)`.
pub fn kl_divergence(mean: &[f64], logvar: &[f64]) -> f64 {
    mean.iter()
        .zip(logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Source of the reparameterization noise ε.
pub enum Noise<'a> {
    /// ε = 0: z is the posterior mean (evaluation).
    None,
    Sample(&'a mut RngStream),
    Given(Tensor),
}

pub struct GaussianOutput {
    /// `[N, d]`
    pub mean: Var,
    /// `[N, d]`, clamped
    pub logvar: Var,
    /// `[N, d]` sample `mean + exp(logvar/2)·ε`
    pub z: Var,
    /// scalar `λ3·KL / B`
    pub kl: Var,
    /// unweighted KL summed over tokens, divided by B
    pub kl_raw: f64,
}

/// Diagonal Gaussian head: two linear maps from `C` to mean and log-variance.
#[derive(Clone, Debug)]
pub struct KlHead {
    pub mean: Linear,
    pub logvar: Linear,
    /// project means onto the unit sphere (matches normalized VQ codes)
    pub normalize_mean: bool,
    pub weight: f64,
}

impl KlHead {
    pub fn new(store: &mut ParamStore, hidden: usize, dim: usize, normalize_mean: bool, rng: &mut RngStream) -> Self {
        let mean = Linear::new(store, "kl.mean", hidden, dim, rng);
        let logvar = Linear::new(store, "kl.logvar", hidden, dim, rng);
        Self {
            mean,
            logvar,
            normalize_mean,
            weight: KL_WEIGHT,
        }
    }

    /// Starts the head at the VQ operating point: means reuse the codebook's
    /// down-projection, variances start small.
    pub fn init_from_codebook(&mut self, store: &mut ParamStore, cb: &Codebook) -> Result<()> {
        store.set(self.mean.weight, store.get(cb.proj_down.weight).clone())?;
        if let Some(b) = self.mean.bias {
            store.set(b, Tensor::zeros(&[self.mean.out_dim]))?;
        }
        store.set(self.logvar.weight, Tensor::zeros(&[self.logvar.in_dim, self.logvar.out_dim]))?;
        if let Some(b) = self.logvar.bias {
            store.set(b, Tensor::full(&[self.logvar.out_dim], LOGVAR_INIT))?;
        }
        self.normalize_mean = cb.normalize;
        Ok(())
    }

    pub fn forward(&self, f: &mut Fwd, e: Var, noise: Noise<'_>) -> Result<GaussianOutput> {
        let shape = f.g.shape(e).to_vec();
        if shape.len() != 5 {
            return Err(Error::Shape {
                op: "kl_head",
                lhs: shape,
                rhs: vec![],
            });
        }
        let b = shape[0];
        let c = shape[4];
        let n: usize = shape[..4].iter().product();
        let x = f.g.reshape(e, &[n, c])?;
        let mut mean = self.mean.forward(f, x)?;
        if self.normalize_mean {
            mean = f.g.l2_normalize(mean, 1)?;
        }
        let lv = self.logvar.forward(f, x)?;
        let logvar = f.g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)?;
        self.finish(f, mean, logvar, noise, b)
    }

    /// Sampling and KL for given mean/log-variance nodes.
    pub fn finish(&self, f: &mut Fwd, mean: Var, logvar: Var, noise: Noise<'_>, batch: usize) -> Result<GaussianOutput> {
        let shape = f.g.shape(mean).to_vec();
        let z = match noise {
            Noise::None => mean,
            Noise::Sample(rng) => {
                let eps = rng.normal_tensor(&shape, 1.0);
                self.reparam(f, mean, logvar, eps)?
            }
            Noise::Given(eps) => {
                if eps.shape() != shape.as_slice() {
                    return Err(Error::Shape {
                        op: "kl_head",
                        lhs: shape,
                        rhs: eps.shape().to_vec(),
                    });
                }
                self.reparam(f, mean, logvar, eps)?
            }
        };
        // 0.5·Σ(μ² + e^lv − 1 − lv)
        let m2 = f.g.square(mean)?;
        let ev = f.g.exp(logvar)?;
        let t = f.g.add(m2, ev)?;
        let t = f.g.sub(t, logvar)?;
        let t = f.g.add_scalar(t, -1.0)?;
        let total = f.g.sum_all(t)?;
        let raw = f.g.scale(total, 0.5 / batch as f64)?;
        let kl_raw = f.value(raw).item();
        let kl = f.g.scale(raw, self.weight)?;
        Ok(GaussianOutput {
            mean,
            logvar,
            z,
            kl,
            kl_raw,
        })
    }

    fn reparam(&self, f: &mut Fwd, mean: Var, logvar: Var, eps: Tensor) -> Result<Var> {
        let half = f.g.scale(logvar, 0.5)?;
        let std = f.g.exp(half)?;
        let eps = f.constant(eps);
        let noise = f.g.mul(std, eps)?;
        f.g.add(mean, noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_match_has_zero_kl() {
        assert_eq!(kl_divergence(&[0.0; 4], &[0.0; 4]), 0.0);
    }

    #[test]
    fn unit_mean_one_dim() {
        assert!((KL_WEIGHT * kl_divergence(&[1.0], &[0.0]) - KL_WEIGHT * 0.5).abs() < 1e-18);
    }

    #[test]
    fn zero_noise_returns_mean() {
        let mut store = ParamStore::new();
        let head = KlHead::new(&mut store, 4, 2, false, &mut RngStream::new(1));
        let e = RngStream::new(2).normal_tensor(&[1, 1, 2, 2, 4], 1.0);
        let mut f = Fwd::eval(&store);
        let ev = f.constant(e);
        let out = head.forward(&mut f, ev, Noise::Given(Tensor::zeros(&[4, 2]))).unwrap();
        assert_eq!(f.value(out.z), f.value(out.mean));
    }

    #[test]
    fn graph_kl_matches_closed_form() {
        let mut store = ParamStore::new();
        let head = KlHead::new(&mut store, 4, 3, false, &mut RngStream::new(5));
        let e = RngStream::new(6).normal_tensor(&[2, 1, 1, 2, 4], 1.0);
        let mut f = Fwd::eval(&store);
        let ev = f.constant(e);
        let out = head.forward(&mut f, ev, Noise::None).unwrap();
        let want = kl_divergence(f.value(out.mean).data(), f.value(out.logvar).data()) / 2.0;
        assert!((out.kl_raw - want).abs() < 1e-12);
        assert!((f.value(out.kl).item() - KL_WEIGHT * want).abs() < 1e-18);
    }
}
