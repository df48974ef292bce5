use crate::error::{Error, Result};
use crate::nn::{Block, Fwd, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::{RngStream, Tensor, Var};
use crate::training::Adam;

pub const DEFAULT_STEPS: usize = 100;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// Noise schedule `β_1..β_N` and the running products `ᾱ_t = Π (1 − β_s)`.
/// Steps are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionConfig {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, BETA_START, BETA_END).expect("default schedule is valid")
    }
}

impl DiffusionConfig {
    /// `n` betas evenly spaced from `start` to `end` (just `start` when `n = 1`).
    pub fn linear(n: usize, start: f64, end: f64) -> Result<Self> {
        let betas = (0..n)
            .map(|i| {
                if n == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("betas must be non-decreasing".into()));
        }
        let mut acc = 1.0;
        let alphas_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_bar })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::invalid(format!("diffusion step {t} outside 1..={}", self.num_steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alphas_bar[t - 1])
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }
}

/// `z_t = sqrt(ᾱ_t)·z0 + sqrt(1 − ᾱ_t)·ε`.
pub fn ddpm_noise(z0: &Tensor, t: usize, eps: &Tensor, dc: &DiffusionConfig) -> Result<Tensor> {
    let ab = dc.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// Batched version: sample `i` of `z0 [B, ...]` is noised to step `ts[i]`.
pub fn ddpm_noise_batch(z0: &Tensor, ts: &[usize], eps: &Tensor, dc: &DiffusionConfig) -> Result<Tensor> {
    let b = z0.shape().first().copied().unwrap_or(0);
    if ts.len() != b || eps.shape() != z0.shape() {
        return Err(Error::Shape {
            op: "ddpm_noise",
            lhs: z0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let per = z0.numel() / b.max(1);
    let coef = ts
        .iter()
        .map(|&t| dc.alpha_bar(t).map(|ab| (ab.sqrt(), (1.0 - ab).sqrt())))
        .collect::<Result<Vec<_>>>()?;
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (z, e))| {
            let (a, s) = coef[i / per];
            a * z + s * e
        })
        .collect();
    Tensor::new(z0.shape(), data)
}

/// Anything that predicts the added noise from `(z_t, t, class)`.
pub trait NoisePredictor {
    /// `z_t [B, ...]`, one step per sample; returns `ε̂` of the same shape.
    fn predict(&self, z_t: &Tensor, ts: &[usize], cond: Option<&[usize]>) -> Result<Tensor>;
}

/// Uniform steps and standard normal noise for a batch shaped like `z0`.
pub fn draw_noise(z0: &Tensor, dc: &DiffusionConfig, rng: &mut RngStream) -> (Vec<usize>, Tensor) {
    let b = z0.shape().first().copied().unwrap_or(0);
    let ts = (0..b).map(|_| 1 + rng.below(dc.num_steps())).collect();
    let eps = rng.normal_tensor(z0.shape(), 1.0);
    (ts, eps)
}

/// `||ε − ε̂||²` summed over latent elements and averaged over the batch,
/// with `t` drawn uniformly per sample.
pub fn ddpm_train_loss(
    z0: &Tensor,
    cond: Option<&[usize]>,
    model: &dyn NoisePredictor,
    dc: &DiffusionConfig,
    rng: &mut RngStream,
) -> Result<f64> {
    let (ts, eps) = draw_noise(z0, dc, rng);
    let zt = ddpm_noise_batch(z0, &ts, &eps, dc)?;
    let pred = model.predict(&zt, &ts, cond)?;
    let d = eps.zip_map(&pred, |e, p| (e - p) * (e - p))?;
    Ok(d.sum() / ts.len() as f64)
}

/// Ancestral sampling from pure noise, `t = N..1`, returning a latent of
/// `shape` (leading axis is the batch).
pub fn ddpm_sample(
    shape: &[usize],
    cond: Option<&[usize]>,
    model: &dyn NoisePredictor,
    dc: &DiffusionConfig,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let b = shape.first().copied().unwrap_or(0);
    if b == 0 {
        return Err(Error::invalid("ddpm_sample: empty batch"));
    }
    let mut z = rng.normal_tensor(shape, 1.0);
    for t in (1..=dc.num_steps()).rev() {
        let eps = model.predict(&z, &vec![t; b], cond)?;
        if eps.shape() != shape {
            return Err(Error::Shape {
                op: "ddpm_sample",
                lhs: shape.to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        let beta = dc.beta(t)?;
        let ab = dc.alpha_bar(t)?;
        let c = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / (1.0 - beta).sqrt();
        let mean = z.zip_map(&eps, |z, e| inv * (z - c * e))?;
        z = if t > 1 {
            let ab_prev = dc.alpha_bar(t - 1)?;
            let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
            let n = rng.normal_tensor(shape, 1.0);
            mean.zip_map(&n, |m, n| m + sigma * n)?
        } else {
            mean
        };
        if !z.is_finite() {
            return Err(Error::numeric(format!("ddpm_sample step {t}")));
        }
    }
    Ok(z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    /// most latent tokens per sample
    pub max_tokens: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            max_tokens: 64,
            hidden: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 4,
        }
    }
}

/// Small transformer over latent tokens predicting `ε`. Latents are
/// `[B, ..., d]`; every position except the batch and last axis is a token.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub store: ParamStore,
    pub input: Linear,
    pub pos_emb: ParamId,
    pub time: Mlp,
    pub class_emb: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub output: Linear,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        if cfg.hidden == 0 || cfg.hidden % 2 != 0 || cfg.latent_dim == 0 || cfg.max_tokens == 0 {
            return Err(Error::Config("denoiser hidden must be even and positive".into()));
        }
        let mut rng = RngStream::new(seed).split(0xd1f);
        let mut store = ParamStore::new();
        let c = cfg.hidden;
        let input = Linear::new(&mut store, "dn.input", cfg.latent_dim, c, &mut rng);
        let pos_emb = store.add("dn.pos_emb", rng.normal_tensor(&[cfg.max_tokens, c], 0.02));
        let time = Mlp::new(&mut store, "dn.time", c, c, &mut rng);
        let class_emb = store.add("dn.class_emb", rng.normal_tensor(&[cfg.num_classes.max(1), c], 0.02));
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&mut store, &format!("dn.block{i}"), c, cfg.heads, cfg.mlp_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut store, "dn.norm", c);
        let output = Linear::new(&mut store, "dn.output", c, cfg.latent_dim, &mut rng);
        store.set(output.weight, Tensor::zeros(&[c, cfg.latent_dim]))?;
        Ok(Self {
            cfg,
            store,
            input,
            pos_emb,
            time,
            class_emb,
            blocks,
            norm,
            output,
        })
    }

    /// Sinusoidal features `[B, 1, C]` of the steps.
    fn time_features(&self, ts: &[usize]) -> Result<Tensor> {
        let c = self.cfg.hidden;
        let half = c / 2;
        let mut data = Vec::with_capacity(ts.len() * c);
        for &t in ts {
            for i in 0..half {
                let w = (t as f64) / 10_000f64.powf(i as f64 / half as f64);
                data.push(w.sin());
            }
            for i in 0..half {
                let w = (t as f64) / 10_000f64.powf(i as f64 / half as f64);
                data.push(w.cos());
            }
        }
        Tensor::new(&[ts.len(), 1, c], data)
    }

    pub fn forward(&self, f: &mut Fwd, z: Var, ts: &[usize], cond: Option<&[usize]>) -> Result<Var> {
        let shape = f.g.shape(z).to_vec();
        let d = self.cfg.latent_dim;
        if shape.len() < 2 || shape[shape.len() - 1] != d || shape[0] != ts.len() {
            return Err(Error::Shape {
                op: "denoiser",
                lhs: shape,
                rhs: vec![ts.len(), d],
            });
        }
        let b = shape[0];
        let l: usize = shape[1..shape.len() - 1].iter().product();
        if l > self.cfg.max_tokens {
            return Err(Error::invalid(format!(
                "{l} latent tokens exceed denoiser capacity {}",
                self.cfg.max_tokens
            )));
        }
        let c = self.cfg.hidden;
        let x = f.g.reshape(z, &[b, l, d])?;
        let x = self.input.forward(f, x)?;
        let pos = f.p(self.pos_emb);
        let pos = f.g.slice(pos, 0, 0, l)?;
        let mut x = f.g.add(x, pos)?;
        let tf = f.constant(self.time_features(ts)?);
        let te = self.time.forward(f, tf)?;
        x = f.g.add(x, te)?;
        if let Some(cls) = cond {
            if cls.len() != b || cls.iter().any(|&k| k >= self.cfg.num_classes) {
                return Err(Error::invalid("denoiser condition must hold one valid class per sample"));
            }
            let table = f.p(self.class_emb);
            let ce = f.g.gather_rows(table, cls)?;
            let ce = f.g.reshape(ce, &[b, 1, c])?;
            x = f.g.add(x, ce)?;
        }
        for blk in &self.blocks {
            x = blk.forward(f, x, None)?;
        }
        let x = self.norm.forward(f, x)?;
        let y = self.output.forward(f, x)?;
        f.g.reshape(y, &shape)
    }

    /// One Adam step on explicit steps and noise; returns the loss.
    pub fn train_step_with(
        &mut self,
        z0: &Tensor,
        cond: Option<&[usize]>,
        ts: &[usize],
        eps: &Tensor,
        dc: &DiffusionConfig,
        opt: &mut Adam,
        lr: f64,
    ) -> Result<f64> {
        let zt = ddpm_noise_batch(z0, ts, eps, dc)?;
        let (loss, grads) = {
            let mut f = Fwd::train(&self.store);
            let zv = f.constant(zt);
            let pred = self.forward(&mut f, zv, ts, cond)?;
            let ev = f.constant(eps.clone());
            let diff = f.g.sub(pred, ev)?;
            let sq = f.g.square(diff)?;
            let total = f.g.sum_all(sq)?;
            let loss = f.g.scale(total, 1.0 / ts.len() as f64)?;
            let grads = f.g.backward(loss)?;
            (f.value(loss).item(), f.param_grads(&grads))
        };
        opt.update(&mut self.store, &grads, lr)?;
        Ok(loss)
    }

    /// One Adam step with uniformly drawn steps and fresh noise.
    pub fn train_step(
        &mut self,
        z0: &Tensor,
        cond: Option<&[usize]>,
        dc: &DiffusionConfig,
        opt: &mut Adam,
        lr: f64,
        rng: &mut RngStream,
    ) -> Result<f64> {
        let (ts, eps) = draw_noise(z0, dc, rng);
        self.train_step_with(z0, cond, &ts, &eps, dc, opt, lr)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, z_t: &Tensor, ts: &[usize], cond: Option<&[usize]>) -> Result<Tensor> {
        let mut f = Fwd::eval(&self.store);
        let z = f.constant(z_t.clone());
        let y = self.forward(&mut f, z, ts, cond)?;
        Ok(f.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Knows the clean latents and returns the exact noise.
    struct Oracle {
        z0: Tensor,
        dc: DiffusionConfig,
    }

    impl NoisePredictor for Oracle {
        fn predict(&self, z_t: &Tensor, ts: &[usize], _: Option<&[usize]>) -> Result<Tensor> {
            let ab = self.dc.alpha_bar(ts[0])?;
            z_t.zip_map(&self.z0, |z, z0| (z - ab.sqrt() * z0) / (1.0 - ab).sqrt())
        }
    }

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict(&self, z_t: &Tensor, _: &[usize], _: Option<&[usize]>) -> Result<Tensor> {
            Ok(Tensor::zeros(z_t.shape()))
        }
    }

    #[test]
    fn alpha_bar_strictly_decreases() {
        let dc = DiffusionConfig::default();
        assert_eq!(dc.num_steps(), 100);
        assert!(dc.alphas_bar().windows(2).all(|w| w[1] < w[0]));
        assert_eq!(dc.beta(1).unwrap(), BETA_START);
        assert!((dc.beta(100).unwrap() - BETA_END).abs() < 1e-15);
    }

    #[test]
    fn noise_limits() {
        let dc = DiffusionConfig::default();
        let z0 = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let zt = ddpm_noise(&z0, 7, &Tensor::zeros(&[3]), &dc).unwrap();
        let a = dc.alpha_bar(7).unwrap().sqrt();
        assert_eq!(zt.data(), &[a, -2.0 * a, 0.5 * a]);
        assert!(ddpm_noise(&z0, 0, &z0, &dc).is_err());
        assert!(ddpm_noise(&z0, 101, &z0, &dc).is_err());
    }

    #[test]
    fn oracle_loss_is_zero_and_zero_predictor_costs_dim() {
        let dc = DiffusionConfig::default();
        let mut rng = RngStream::new(5);
        let z0 = rng.normal_tensor(&[1, 2, 2, 2, 3], 1.0);
        // oracle: same draws, residual must vanish
        let mut r1 = RngStream::new(9);
        let (ts, eps) = draw_noise(&z0, &dc, &mut r1.clone());
        let oracle = Oracle { z0: z0.clone(), dc: dc.clone() };
        let zt = ddpm_noise_batch(&z0, &ts, &eps, &dc).unwrap();
        let pred = oracle.predict(&zt, &ts, None).unwrap();
        assert!(pred.max_abs_diff(&eps).unwrap() < 1e-9);
        let l = ddpm_train_loss(&z0, None, &oracle, &dc, &mut r1).unwrap();
        assert!(l < 1e-15);

        let z0 = rng.normal_tensor(&[4000, 6], 1.0);
        let l = ddpm_train_loss(&z0, None, &Zero, &dc, &mut rng).unwrap();
        // chi-square with 6 dof: sd of the batch mean is sqrt(12/4000)
        assert!((l - 6.0).abs() < 3.0 * (12.0f64 / 4000.0).sqrt() * 1.5, "{l}");
    }

    #[test]
    fn single_step_oracle_inverts() {
        let dc = DiffusionConfig::linear(1, BETA_START, BETA_END).unwrap();
        let z0 = RngStream::new(1).normal_tensor(&[1, 3, 2], 1.0);
        let oracle = Oracle { z0: z0.clone(), dc: dc.clone() };
        let z = ddpm_sample(&[1, 3, 2], None, &oracle, &dc, &mut RngStream::new(2)).unwrap();
        assert!(z.max_abs_diff(&z0).unwrap() < 1e-9);
    }

    #[test]
    fn sampling_is_deterministic_and_shaped() {
        let dc = DiffusionConfig::linear(5, BETA_START, BETA_END).unwrap();
        let dn = Denoiser::new(
            DenoiserConfig {
                latent_dim: 3,
                max_tokens: 4,
                hidden: 8,
                layers: 1,
                heads: 2,
                mlp_ratio: 2,
                num_classes: 2,
            },
            0,
        )
        .unwrap();
        let a = ddpm_sample(&[1, 1, 2, 2, 3], Some(&[1]), &dn, &dc, &mut RngStream::new(4)).unwrap();
        let b = ddpm_sample(&[1, 1, 2, 2, 3], Some(&[1]), &dn, &dc, &mut RngStream::new(4)).unwrap();
        assert_eq!(a.shape(), &[1, 1, 2, 2, 3]);
        assert_eq!(a, b);
    }

    #[test]
    fn denoiser_training_reduces_loss() {
        let dc = DiffusionConfig::default();
        let mut dn = Denoiser::new(
            DenoiserConfig {
                latent_dim: 2,
                max_tokens: 4,
                hidden: 16,
                layers: 1,
                heads: 2,
                mlp_ratio: 2,
                num_classes: 1,
            },
            0,
        )
        .unwrap();
        let z0 = Tensor::from_fn(&[32, 4, 2], |i| if (i / 8) % 2 == 0 { 0.8 } else { -0.8 });
        let mut opt = Adam::new(150);
        let mut rng = RngStream::new(3);
        let losses: Vec<f64> = (0..150)
            .map(|i| {
                let lr = opt.lr_at(i);
                dn.train_step(&z0, None, &dc, &mut opt, lr, &mut rng).unwrap()
            })
            .collect();
        let head = losses[..20].iter().sum::<f64>() / 20.0;
        let tail = losses[130..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "{head} → {tail}");
    }
}
