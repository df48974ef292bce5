//! The assembled tokenizer: encoder/decoder network, VQ codebook and the
//! optional Gaussian head, all sharing one parameter store.

use crate::error::{Error, Result};
use crate::nn::{Fwd, ParamStore};
use crate::quantizer::{Codebook, GaussianOutput, KlHead, Noise, QuantizeOutput, Selection};
use crate::tensor::{Graph, RngStream, Tensor, Var};
use crate::tokenizer::{TokenizerConfig, TokenizerNet};

/// Default number of codebook entries at desk scale.
pub const DEFAULT_CODEBOOK_SIZE: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub codebook_size: usize,
    /// l2-normalize projected tokens and codebook entries
    pub normalize_codes: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig::default(),
            codebook_size: DEFAULT_CODEBOOK_SIZE,
            normalize_codes: true,
        }
    }
}

/// Which bottleneck the model currently trains and decodes through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Vq,
    Kl,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Vq => "vq",
            Head::Kl => "kl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vq" => Ok(Head::Vq),
            "kl" => Ok(Head::Kl),
            other => Err(Error::Format(format!("unknown head '{other}'"))),
        }
    }
}

/// Mean squared error between two same-shaped nodes.
pub fn mse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape {
            op: "recon_loss",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    let d = g.sub(a, b)?;
    let d = g.square(d)?;
    g.mean_all(d)
}

pub struct VqPass {
    pub x_hat: Var,
    pub recon: Var,
    pub quant: QuantizeOutput,
}

/// encoder → quantize (straight-through) → decoder → reconstruction loss.
pub fn vq_forward(net: &TokenizerNet, cb: &mut Codebook, f: &mut Fwd, x: Var, selection: &Selection) -> Result<VqPass> {
    let tf = net.encode(f, x)?;
    let quant = cb.quantize(f, tf.embeddings, selection)?;
    let x_hat = net.decode(f, quant.z)?;
    let recon = mse(&mut f.g, x_hat, x)?;
    Ok(VqPass { x_hat, recon, quant })
}

pub struct KlPass {
    pub x_hat: Var,
    pub recon: Var,
    pub gauss: GaussianOutput,
}

/// encoder → Gaussian head (reparameterized) → decoder → reconstruction loss.
pub fn kl_forward(
    net: &TokenizerNet,
    cb: &Codebook,
    head: &KlHead,
    f: &mut Fwd,
    x: Var,
    noise: Noise<'_>,
) -> Result<KlPass> {
    let tf = net.encode(f, x)?;
    let shape = f.g.shape(tf.embeddings).to_vec();
    let gauss = head.forward(f, tf.embeddings, noise)?;
    let z = latent_to_decoder(cb, f, gauss.z, &shape[..4])?;
    let x_hat = net.decode(f, z)?;
    let recon = mse(&mut f.g, x_hat, x)?;
    Ok(KlPass { x_hat, recon, gauss })
}

/// `[N, d]` latents to `[B, S, Gh, Gw, C]` decoder input via `proj_up`.
fn latent_to_decoder(cb: &Codebook, f: &mut Fwd, z: Var, grid: &[usize]) -> Result<Var> {
    let up = cb.proj_up.forward(f, z)?;
    let mut shape = grid.to_vec();
    shape.push(cb.proj_up.out_dim);
    f.g.reshape(up, &shape)
}

/// Tokenizer with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub net: TokenizerNet,
    pub codebook: Codebook,
    pub kl: Option<KlHead>,
}

impl Model {
    /// Fresh model; initialization draws from `RngStream::new(seed)`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed).split(INIT_STREAM);
        let mut store = ParamStore::new();
        let net = TokenizerNet::new(&mut store, &cfg.tokenizer, &mut rng)?;
        let codebook = Codebook::new(
            &mut store,
            cfg.tokenizer.patch.hidden,
            cfg.codebook_size,
            cfg.tokenizer.net.latent_dim,
            cfg.normalize_codes,
            &mut rng,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            net,
            codebook,
            kl: None,
        })
    }

    pub fn head(&self) -> Head {
        if self.kl.is_some() {
            Head::Kl
        } else {
            Head::Vq
        }
    }

    /// Adds the Gaussian head, initialized at the VQ operating point.
    pub fn enable_kl(&mut self) -> Result<()> {
        if self.kl.is_some() {
            return Err(Error::invalid("model already has a KL head"));
        }
        let mut rng = RngStream::new(0).split(INIT_STREAM);
        let mut head = KlHead::new(
            &mut self.store,
            self.cfg.tokenizer.patch.hidden,
            self.cfg.tokenizer.net.latent_dim,
            self.cfg.normalize_codes,
            &mut rng,
        );
        head.init_from_codebook(&mut self.store, &self.codebook)?;
        self.kl = Some(head);
        Ok(())
    }

    /// Token grid `[B, S, Gh, Gw]` for a pixel batch `[B, F, H, W, 3]`.
    pub fn grid_of(&self, x: &Tensor) -> Result<[usize; 4]> {
        let s = x.shape();
        if s.len() != 5 {
            return Err(Error::Shape {
                op: "grid_of",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (slots, gh, gw) = self.cfg.tokenizer.grid_for(s[1], s[2], s[3])?;
        Ok([s[0], slots, gh, gw])
    }

    /// Code indices (flattened `[B, S, Gh, Gw]`) of a pixel batch. Counts
    /// usage on the codebook.
    pub fn encode_indices(&mut self, x: &Tensor) -> Result<(Vec<usize>, [usize; 4])> {
        let mut f = Fwd::eval(&self.store);
        let xv = f.constant(x.clone());
        let tf = self.net.encode(&mut f, xv)?;
        let q = self.codebook.quantize(&mut f, tf.embeddings, &Selection::Nearest)?;
        Ok((q.indices, q.grid))
    }

    /// Pixels for a grid of code indices.
    pub fn decode_indices(&self, indices: &[usize], grid: [usize; 4]) -> Result<Tensor> {
        let mut f = Fwd::eval(&self.store);
        let z = self.codebook.lookup(&mut f, indices, grid)?;
        let x = self.net.decode(&mut f, z)?;
        Ok(f.value(x).clone())
    }

    /// Continuous latents `[B, S, Gh, Gw, d]`: posterior means with a KL head,
    /// projected (pre-quantization) tokens otherwise.
    pub fn encode_latent(&self, x: &Tensor) -> Result<Tensor> {
        let grid = self.grid_of(x)?;
        let mut f = Fwd::eval(&self.store);
        let xv = f.constant(x.clone());
        let tf = self.net.encode(&mut f, xv)?;
        let z = match &self.kl {
            Some(head) => head.forward(&mut f, tf.embeddings, Noise::None)?.mean,
            None => self.codebook.project(&mut f, tf.embeddings)?,
        };
        let [b, s, gh, gw] = grid;
        f.value(z).reshape(&[b, s, gh, gw, self.codebook.dim])
    }

    /// Pixels for continuous latents `[B, S, Gh, Gw, d]`.
    pub fn decode_latent(&self, z: &Tensor) -> Result<Tensor> {
        let s = z.shape();
        if s.len() != 5 || s[4] != self.codebook.dim {
            return Err(Error::Shape {
                op: "decode_latent",
                lhs: s.to_vec(),
                rhs: vec![self.codebook.dim],
            });
        }
        let n: usize = s[..4].iter().product();
        let mut f = Fwd::eval(&self.store);
        let zv = f.constant(z.reshape(&[n, self.codebook.dim])?);
        let up = latent_to_decoder(&self.codebook, &mut f, zv, &s[..4])?;
        let x = self.net.decode(&mut f, up)?;
        Ok(f.value(x).clone())
    }

    /// Deterministic reconstruction through the active head (quantized codes,
    /// or posterior means).
    pub fn reconstruct(&mut self, x: &Tensor) -> Result<Tensor> {
        match self.head() {
            Head::Vq => {
                let (idx, grid) = self.encode_indices(x)?;
                self.decode_indices(&idx, grid)
            }
            Head::Kl => {
                let z = self.encode_latent(x)?;
                self.decode_latent(&z)
            }
        }
    }
}

const INIT_STREAM: u64 = 0x1a17;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{NetConfig, PatchConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            tokenizer: TokenizerConfig {
                patch: PatchConfig {
                    patch: 4,
                    temporal_patch: 2,
                    hidden: 8,
                    resolutions: vec![8],
                    max_frames: 5,
                },
                net: NetConfig {
                    spatial_layers: 1,
                    temporal_layers: 1,
                    window: 2,
                    heads: 2,
                    latent_dim: 4,
                    mlp_ratio: 2,
                },
            },
            codebook_size: 16,
            normalize_codes: true,
        }
    }

    #[test]
    fn index_roundtrip_equals_in_graph_reconstruction() {
        let mut m = Model::new(&tiny(), 3).unwrap();
        let x = RngStream::new(4).uniform_tensor(&[2, 5, 8, 8, 3], -1.0, 1.0);
        let rec = m.reconstruct(&x).unwrap();
        let mut f = Fwd::eval(&m.store);
        let xv = f.constant(x.clone());
        let pass = vq_forward(&m.net, &mut m.codebook, &mut f, xv, &Selection::Nearest).unwrap();
        assert_eq!(f.value(pass.x_hat), &rec);
        assert_eq!(rec.shape(), x.shape());
    }

    #[test]
    fn kl_head_starts_near_vq_latents() {
        let mut m = Model::new(&tiny(), 3).unwrap();
        let x = RngStream::new(4).uniform_tensor(&[1, 1, 8, 8, 3], -1.0, 1.0);
        let before = m.encode_latent(&x).unwrap();
        m.enable_kl().unwrap();
        assert_eq!(m.head(), Head::Kl);
        let after = m.encode_latent(&x).unwrap();
        assert!(before.max_abs_diff(&after).unwrap() < 1e-12);
    }

    #[test]
    fn mse_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(mse(&mut g, a, b).is_err());
    }
}
