//! `OTCK` checkpoints: run config text, named parameters, optimizer and RNG
//! state, and where in training the snapshot was taken.

use super::config::RunConfig;
use super::container::{decode_tensor_prefix, encode_tensor, Dtype, Reader};
use crate::error::{Error, Result};
use crate::generation::{Denoiser, TokenLm};
use crate::model::{Head, Model};
use crate::nn::ParamStore;
use crate::tensor::{RngStream, Tensor};
use crate::training::Adam;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OTCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// What the parameters belong to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Tokenizer = 0,
    Lm = 1,
    Denoiser = 2,
}

impl CheckpointKind {
    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Self::Tokenizer),
            1 => Ok(Self::Lm),
            2 => Ok(Self::Denoiser),
            t => Err(Error::Format(format!("unknown checkpoint kind {t}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tokenizer => "tokenizer",
            Self::Lm => "lm",
            Self::Denoiser => "denoiser",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// resolved run configuration, `key = value` text
    pub config: String,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<Adam>,
    /// `(seed, stream, word position)` of the run's root stream
    pub rng: (u64, u64, u128),
    pub stage: u8,
    pub head: Head,
    /// iterations completed
    pub iter: u64,
    /// codebook selection counts (tokenizer checkpoints)
    pub usage: Vec<u64>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    out.extend(encode_tensor(t, Dtype::F64)?);
    Ok(())
}

fn get_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    let (t, used) = decode_tensor_prefix(r.rest())?;
    r.take(used)?;
    Ok(t)
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.push(self.stage);
        out.push(match self.head {
            Head::Vq => 0,
            Head::Kl => 1,
        });
        out.extend_from_slice(&self.iter.to_le_bytes());
        out.extend_from_slice(&self.rng.0.to_le_bytes());
        out.extend_from_slice(&self.rng.1.to_le_bytes());
        out.extend_from_slice(&self.rng.2.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            put_tensor(&mut out, t)?;
        }
        out.extend_from_slice(&(self.usage.len() as u32).to_le_bytes());
        for &u in &self.usage {
            out.extend_from_slice(&u.to_le_bytes());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                for v in [o.beta1, o.beta2, o.eps, o.base_lr] {
                    out.extend_from_slice(&v.to_bits().to_le_bytes());
                }
                out.extend_from_slice(&(o.warmup_iters as u64).to_le_bytes());
                out.extend_from_slice(&(o.total_iters as u64).to_le_bytes());
                out.extend_from_slice(&o.clip_norm.unwrap_or(f64::NAN).to_bits().to_le_bytes());
                out.extend_from_slice(&o.step.to_le_bytes());
                out.extend_from_slice(&(o.m.len() as u32).to_le_bytes());
                for (m, v) in o.m.iter().zip(&o.v) {
                    put_tensor(&mut out, m)?;
                    put_tensor(&mut out, v)?;
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = CheckpointKind::from_tag(r.u8()?)?;
        let stage = r.u8()?;
        let head = match r.u8()? {
            0 => Head::Vq,
            1 => Head::Kl,
            h => return Err(Error::Format(format!("unknown head tag {h}"))),
        };
        let iter = r.u64()?;
        let rng = (r.u64()?, r.u64()?, r.u128()?);
        let config = r.string()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            params.push((name, get_tensor(&mut r)?));
        }
        let nu = r.u32()? as usize;
        let usage = (0..nu).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let (beta1, beta2, eps, base_lr) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let warmup_iters = r.u64()? as usize;
                let total_iters = r.u64()? as usize;
                let clip = r.f64()?;
                let step = r.u64()?;
                let k = r.u32()? as usize;
                let mut m = Vec::with_capacity(k.min(1 << 16));
                let mut v = Vec::with_capacity(k.min(1 << 16));
                for _ in 0..k {
                    m.push(get_tensor(&mut r)?);
                    v.push(get_tensor(&mut r)?);
                }
                Some(Adam {
                    beta1,
                    beta2,
                    eps,
                    base_lr,
                    warmup_iters,
                    total_iters,
                    clip_norm: (!clip.is_nan()).then_some(clip),
                    step,
                    m,
                    v,
                })
            }
            t => return Err(Error::Format(format!("bad optimizer flag {t}"))),
        };
        if r.remaining() != 0 {
            return Err(Error::Format(format!("checkpoint has {} trailing bytes", r.remaining())));
        }
        Ok(Self {
            kind,
            config,
            params,
            optimizer,
            rng,
            stage,
            head,
            iter,
            usage,
        })
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse_over(RunConfig::default(), &self.config)
    }

    fn expect(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(format!(
                "expected a {} checkpoint, got a {} checkpoint",
                kind.as_str(),
                self.kind.as_str()
            )));
        }
        Ok(())
    }

    /// Snapshot of a tokenizer.
    pub fn of_model(model: &Model, cfg: &RunConfig, opt: Option<&Adam>, stage: u8, iter: u64) -> Self {
        Self {
            kind: CheckpointKind::Tokenizer,
            config: cfg.to_text(),
            params: store_params(&model.store),
            optimizer: opt.cloned(),
            rng: RngStream::new(cfg.seed).state(),
            stage,
            head: model.head(),
            iter,
            usage: model.codebook.usage().to_vec(),
        }
    }

    /// Rebuilds the tokenizer with the stored weights.
    pub fn to_model(&self) -> Result<Model> {
        self.expect(CheckpointKind::Tokenizer)?;
        let cfg = self.run_config()?;
        let mut model = Model::new(&cfg.model, cfg.seed)?;
        if self.head == Head::Kl {
            model.enable_kl()?;
        }
        load_params(&mut model.store, &self.params)?;
        if !self.usage.is_empty() {
            model.codebook.set_usage(self.usage.clone())?;
        }
        Ok(model)
    }

    pub fn of_lm(lm: &TokenLm, cfg: &RunConfig, opt: Option<&Adam>, iter: u64) -> Self {
        Self {
            kind: CheckpointKind::Lm,
            config: cfg.to_text(),
            params: store_params(&lm.store),
            optimizer: opt.cloned(),
            rng: RngStream::new(cfg.seed).state(),
            stage: 0,
            head: Head::Vq,
            iter,
            usage: Vec::new(),
        }
    }

    pub fn to_lm(&self) -> Result<TokenLm> {
        self.expect(CheckpointKind::Lm)?;
        let cfg = self.run_config()?;
        let mut lm = TokenLm::new(cfg.lm.clone(), cfg.seed)?;
        load_params(&mut lm.store, &self.params)?;
        Ok(lm)
    }

    pub fn of_denoiser(dn: &Denoiser, cfg: &RunConfig, opt: Option<&Adam>, iter: u64) -> Self {
        Self {
            kind: CheckpointKind::Denoiser,
            config: cfg.to_text(),
            params: store_params(&dn.store),
            optimizer: opt.cloned(),
            rng: RngStream::new(cfg.seed).state(),
            stage: 0,
            head: Head::Kl,
            iter,
            usage: Vec::new(),
        }
    }

    pub fn to_denoiser(&self) -> Result<Denoiser> {
        self.expect(CheckpointKind::Denoiser)?;
        let cfg = self.run_config()?;
        let mut dn = Denoiser::new(cfg.denoiser.clone(), cfg.seed)?;
        load_params(&mut dn.store, &self.params)?;
        Ok(dn)
    }
}

fn store_params(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.iter().map(|(_, name, t)| (name.to_string(), t.clone())).collect()
}

/// Overwrites every parameter of `store` by name; all must be present.
fn load_params(store: &mut ParamStore, params: &[(String, Tensor)]) -> Result<()> {
    if params.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, model has {}",
            params.len(),
            store.len()
        )));
    }
    for (name, t) in params {
        let id = store
            .find(name)
            .ok_or_else(|| Error::Format(format!("checkpoint parameter '{name}' not in model")))?;
        store.set(id, t.clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_checkpoint_roundtrip() {
        let cfg = RunConfig::default();
        let mut model = Model::new(&cfg.model, 3).unwrap();
        let mut cfg = cfg;
        cfg.seed = 3;
        let x = RngStream::new(1).uniform_tensor(&[1, 5, 32, 32, 3], -1.0, 1.0);
        let before = model.reconstruct(&x).unwrap();
        let mut opt = Adam::new(10);
        opt.step = 4;
        opt.m = vec![Tensor::ones(&[2])];
        opt.v = vec![Tensor::zeros(&[2])];
        let ck = Checkpoint::of_model(&model, &cfg, Some(&opt), 2, 77);
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back, ck);
        let mut m2 = back.to_model().unwrap();
        assert_eq!(m2.reconstruct(&x).unwrap(), before);
        assert!(back.to_lm().is_err());
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let cfg = RunConfig::default();
        let lm = TokenLm::new(cfg.lm.clone(), 0).unwrap();
        let b = Checkpoint::of_lm(&lm, &cfg, None, 0).encode().unwrap();
        assert!(matches!(Checkpoint::decode(&b[..b.len() - 3]), Err(Error::Format(_))));
        assert!(Checkpoint::decode(&b).unwrap().to_lm().is_ok());
    }
}
