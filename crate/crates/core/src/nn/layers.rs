use super::params::{Fwd, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
/// Score written into blocked attention entries; `exp` of it underflows to 0.
pub const MASKED_SCORE: f64 = -1e9;

/// Affine map over the last axis: `x · W + b`, `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), rng.normal_tensor(&[in_dim, out_dim], std));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), rng.normal_tensor(&[in_dim, out_dim], std));
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let w = f.p(self.weight);
        let y = f.g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = f.p(b);
                f.g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let last = f.g.shape(x).len() - 1;
        let n = f.g.layer_norm(x, last, LN_EPS)?;
        let gamma = f.p(self.gamma);
        let beta = f.p(self.beta);
        let y = f.g.mul(n, gamma)?;
        f.g.add(y, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let h = self.fc1.forward(f, x)?;
        let h = f.g.gelu(h)?;
        self.fc2.forward(f, h)
    }
}

/// Multi-head self-attention over `[N, L, C]` sequences.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut RngStream) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("hidden width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng),
            heads,
        })
    }

    /// Per-head attention probabilities `[N·heads, L, L]` and the block output.
    /// `mask` (row-major `[L, L]`, true = blocked) is shared by every sequence.
    pub fn forward_with_probs(&self, f: &mut Fwd, x: Var, mask: Option<&[bool]>) -> Result<(Var, Var)> {
        let shape = f.g.shape(x).to_vec();
        let [n, l, c] = shape[..] else {
            return Err(Error::Shape {
                op: "attention",
                lhs: shape,
                rhs: vec![],
            });
        };
        let h = self.heads;
        let dh = c / h;
        let qkv = self.qkv.forward(f, x)?;
        let qkv = f.g.reshape(qkv, &[n, l, 3, h, dh])?;
        let qkv = f.g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = f.g.reshape(qkv, &[3, n * h, l, dh])?;
        let q = f.g.slice(qkv, 0, 0, 1)?;
        let q = f.g.reshape(q, &[n * h, l, dh])?;
        let k = f.g.slice(qkv, 0, 1, 1)?;
        let k = f.g.reshape(k, &[n * h, l, dh])?;
        let v = f.g.slice(qkv, 0, 2, 1)?;
        let v = f.g.reshape(v, &[n * h, l, dh])?;

        let kt = f.g.permute(k, &[0, 2, 1])?;
        let scores = f.g.matmul(q, kt)?;
        let mut scores = f.g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = f.g.masked_fill(scores, m, &[l, l], MASKED_SCORE)?;
        }
        let probs = f.g.softmax(scores, 2)?;
        let out = f.g.matmul(probs, v)?;
        let out = f.g.reshape(out, &[n, h, l, dh])?;
        let out = f.g.permute(out, &[0, 2, 1, 3])?;
        let out = f.g.reshape(out, &[n, l, c])?;
        let out = self.proj.forward(f, out)?;
        Ok((out, probs))
    }

    pub fn forward(&self, f: &mut Fwd, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        Ok(self.forward_with_probs(f, x, mask)?.0)
    }
}

/// Pre-norm residual block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, rng),
        })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let h = self.ln1.forward(f, x)?;
        let h = self.attn.forward(f, h, mask)?;
        let x = f.g.add(x, h)?;
        let h = self.ln2.forward(f, x)?;
        let h = self.mlp.forward(f, h)?;
        f.g.add(x, h)
    }
}

/// Strictly causal mask for length `l`: position i may attend to j ≤ i.
pub fn causal_mask(l: usize) -> Vec<bool> {
    (0..l * l).map(|k| k % l > k / l).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_is_strict_upper_triangle() {
        let m = causal_mask(3);
        assert_eq!(
            m,
            vec![false, true, true, false, false, true, false, false, false]
        );
    }

    #[test]
    fn causal_attention_puts_all_mass_on_self_at_first_position() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1);
        let attn = Attention::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        let mut f = Fwd::eval(&store);
        let x = f.constant(rng.normal_tensor(&[1, 3, 4], 1.0));
        let mask = causal_mask(3);
        let (_, probs) = attn.forward_with_probs(&mut f, x, Some(&mask)).unwrap();
        let p = f.value(probs);
        for head in 0..2 {
            assert_eq!(p.at(&[head, 0, 0]), 1.0);
            assert_eq!(p.at(&[head, 0, 1]), 0.0);
            assert_eq!(p.at(&[head, 1, 2]), 0.0);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1);
        assert!(Attention::new(&mut store, "a", 6, 4, &mut rng).is_err());
    }
}
