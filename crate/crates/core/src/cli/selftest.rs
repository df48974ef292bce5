use jointtok::generation::{
    ddpm_sample, flatten_raster, unflatten, DiffusionConfig, GridMeta, LmConfig, NoisePredictor, TokenGrid, TokenLm,
    BETA_END, BETA_START,
};
use jointtok::io::{decode_tensor, encode_tensor, Dtype, RunConfig, TokenStream};
use jointtok::model::Model;
use jointtok::nn::Fwd;
use jointtok::quantizer::nearest_code;
use jointtok::tensor::{check_gradient, Graph, RngStream, Tensor, Var};
use jointtok::{Error, Result};

type Check = fn() -> Result<()>;

fn ensure(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(what.to_string()))
    }
}

fn gradients() -> Result<()> {
    let mut rng = RngStream::new(1);
    let x = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
    let w = rng.uniform_tensor(&[4, 4], -1.0, 1.0);
    let f = |g: &mut Graph, x: Var| {
        let w = g.constant(w.clone());
        let h = g.matmul(x, w)?;
        let h = g.layer_norm(h, 1, 1e-5)?;
        let h = g.gelu(h)?;
        let p = g.softmax(h, 1)?;
        let l = g.log(p)?;
        let s = g.square(l)?;
        g.mean_all(s)
    };
    let r = check_gradient(f, &x, 1e-5, 1e-3)?;
    ensure(r.passed, &format!("relative error {}", r.max_rel_error))
}

fn softmax_sums() -> Result<()> {
    let mut g = Graph::new();
    let x = g.constant(RngStream::new(2).uniform_tensor(&[5, 7], -20.0, 20.0));
    let p = g.softmax(x, 1)?;
    let ok = g.value(p).data().chunks(7).all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    ensure(ok, "rows do not sum to one")
}

fn lm_causality() -> Result<()> {
    let lm = TokenLm::new(
        LmConfig {
            codebook_size: 16,
            num_classes: 2,
            context: 8,
            hidden: 16,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
        },
        3,
    )?;
    let a = vec![16, 3, 5, 7, 1, 2];
    let mut b = a.clone();
    b[4] = 9;
    let la = {
        let mut f = Fwd::eval(&lm.store);
        let v = lm.logits(&mut f, &[a])?;
        f.value(v).clone()
    };
    let lb = {
        let mut f = Fwd::eval(&lm.store);
        let v = lm.logits(&mut f, &[b])?;
        f.value(v).clone()
    };
    let k = 16;
    ensure(la.data()[..4 * k] == lb.data()[..4 * k], "earlier logits changed")?;
    ensure(la.data()[4 * k..] != lb.data()[4 * k..], "later logits unchanged")
}

fn small_model() -> Result<Model> {
    let mut cfg = RunConfig::default().model;
    cfg.tokenizer.patch.hidden = 16;
    cfg.tokenizer.patch.resolutions = vec![16, 32];
    cfg.tokenizer.net.spatial_layers = 1;
    cfg.tokenizer.net.temporal_layers = 1;
    cfg.codebook_size = 32;
    Model::new(&cfg, 4)
}

fn quantizer_oracle() -> Result<()> {
    let model = small_model()?;
    let x = RngStream::new(5).uniform_tensor(&[1, 5, 16, 16, 3], -1.0, 1.0);
    let mut f = Fwd::eval(&model.store);
    let xv = f.constant(x);
    let tf = model.net.encode(&mut f, xv)?;
    let e = model.codebook.project(&mut f, tf.embeddings)?;
    let mut m = model.clone();
    let q = m.codebook.quantize(&mut f, tf.embeddings, &jointtok::quantizer::Selection::Nearest)?;
    let entries = model.store.get(model.codebook.entries).data().to_vec();
    let d = model.codebook.dim;
    for (i, row) in f.value(e).data().chunks(d).enumerate() {
        let brute = (0..model.codebook.size)
            .map(|k| {
                let dist: f64 = row.iter().zip(&entries[k * d..(k + 1) * d]).map(|(a, b)| (a - b) * (a - b)).sum();
                (dist, k)
            })
            .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a })
            .1;
        ensure(q.indices[i] == brute && nearest_code(row, &entries, d) == brute, "nearest index mismatch")?;
    }
    Ok(())
}

fn shape_law() -> Result<()> {
    let mut model = small_model()?;
    for (frames, res) in [(1, 16), (5, 16), (9, 32)] {
        let x = RngStream::new(6).uniform_tensor(&[1, frames, res, res, 3], -1.0, 1.0);
        let (idx, _) = model.encode_indices(&x)?;
        let expect = (1 + (frames - 1) / 4) * (res / 8) * (res / 8);
        ensure(idx.len() == expect, "token count")?;
        ensure(model.reconstruct(&x)?.shape() == x.shape(), "decoded shape")?;
    }
    Ok(())
}

fn formats() -> Result<()> {
    let t = RngStream::new(7).normal_tensor(&[2, 3, 4], 1.0);
    ensure(decode_tensor(&encode_tensor(&t, Dtype::F64)?)? == t, "tensor container")?;
    let meta = GridMeta::new(2, 2, 3);
    let grid = TokenGrid::new(meta, (0..12).map(|i| (i * 37) % 512).collect())?;
    ensure(unflatten(&flatten_raster(&grid, None))? == grid, "raster order")?;
    let s = TokenStream {
        codebook_size: 512,
        grid,
        cond: None,
    };
    ensure(TokenStream::decode(&s.encode()?)? == s, "token stream")
}

struct Oracle(Tensor, DiffusionConfig);

impl NoisePredictor for Oracle {
    fn predict(&self, z: &Tensor, ts: &[usize], _: Option<&[usize]>) -> Result<Tensor> {
        let ab = self.1.alpha_bar(ts[0])?;
        z.zip_map(&self.0, |z, z0| (z - ab.sqrt() * z0) / (1.0 - ab).sqrt())
    }
}

fn ddpm_inversion() -> Result<()> {
    let dc = DiffusionConfig::linear(1, BETA_START, BETA_END)?;
    let z0 = RngStream::new(8).normal_tensor(&[1, 4, 8], 1.0);
    let z = ddpm_sample(&[1, 4, 8], None, &Oracle(z0.clone(), dc.clone()), &dc, &mut RngStream::new(9))?;
    ensure(z.max_abs_diff(&z0)? < 1e-9, "oracle inversion")?;
    ensure(DiffusionConfig::default().alphas_bar().windows(2).all(|w| w[1] < w[0]), "alpha_bar monotone")
}

pub fn selftest() -> Result<()> {
    let checks: [(&str, Check); 8] = [
        ("gradients", gradients),
        ("softmax", softmax_sums),
        ("lm-causality", lm_causality),
        ("quantizer-oracle", quantizer_oracle),
        ("shape-law", shape_law),
        ("formats", formats),
        ("ddpm-inversion", ddpm_inversion),
        ("config", || RunConfig::default().validate()),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(()) => println!("ok   {name}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e}");
            }
        }
    }
    if failed > 0 {
        return Err(Error::invalid(format!("{failed} self-test checks failed")));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}
