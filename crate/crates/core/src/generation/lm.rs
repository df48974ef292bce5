use super::sequence::{unflatten, GridMeta, TokenGrid, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, Block, Fwd, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{RngStream, Tensor, Var};
use crate::training::Adam;

#[derive(Clone, Debug, PartialEq)]
pub struct LmConfig {
    pub codebook_size: usize,
    pub num_classes: usize,
    /// longest input sequence (the BOS/condition token plus all but the last code)
    pub context: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            codebook_size: 512,
            num_classes: 4,
            context: 64,
            hidden: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl LmConfig {
    /// Codes, then one token per class, then BOS.
    pub fn vocab(&self) -> usize {
        self.codebook_size + self.num_classes + 1
    }

    pub fn bos(&self) -> usize {
        self.codebook_size + self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size == 0 || self.context == 0 || self.hidden == 0 {
            return Err(Error::Config("lm codebook_size, context and hidden must be positive".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "lm hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// Decoder-only transformer over flattened code sequences. Position `i`
/// predicts code `i` from the start token and codes `0..i`.
#[derive(Clone, Debug)]
pub struct TokenLm {
    pub cfg: LmConfig,
    pub store: ParamStore,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl TokenLm {
    pub fn new(cfg: LmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(seed).split(0x1a);
        let mut store = ParamStore::new();
        let c = cfg.hidden;
        let tok_emb = store.add("lm.tok_emb", rng.normal_tensor(&[cfg.vocab(), c], 0.02));
        let pos_emb = store.add("lm.pos_emb", rng.normal_tensor(&[cfg.context, c], 0.02));
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(&mut store, &format!("lm.block{i}"), c, cfg.heads, cfg.mlp_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut store, "lm.norm", c);
        let head = Linear::new(&mut store, "lm.head", c, cfg.codebook_size, &mut rng);
        Ok(Self {
            cfg,
            store,
            tok_emb,
            pos_emb,
            blocks,
            norm,
            head,
        })
    }

    /// First input token for an optional class.
    pub fn start_token(&self, cond: Option<usize>) -> Result<usize> {
        match cond {
            None => Ok(self.cfg.bos()),
            Some(c) if c < self.cfg.num_classes => Ok(self.cfg.codebook_size + c),
            Some(c) => Err(Error::invalid(format!(
                "condition {c} out of range for {} classes",
                self.cfg.num_classes
            ))),
        }
    }

    /// Model inputs for `seq`: start token followed by every code but the last.
    pub fn inputs(&self, seq: &TokenSequence) -> Result<Vec<usize>> {
        let k = self.cfg.codebook_size;
        if let Some(&bad) = seq.tokens.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("token id {bad} outside codebook of {k}")));
        }
        if seq.tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if seq.tokens.len() > self.cfg.context {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds LM context {}",
                seq.tokens.len(),
                self.cfg.context
            )));
        }
        let mut ids = vec![self.start_token(seq.cond)?];
        ids.extend_from_slice(&seq.tokens[..seq.tokens.len() - 1]);
        Ok(ids)
    }

    /// Logits `[N, L, K]` for `N` equal-length input id rows.
    pub fn logits(&self, f: &mut Fwd, rows: &[Vec<usize>]) -> Result<Var> {
        let n = rows.len();
        let l = rows.first().map_or(0, Vec::len);
        if n == 0 || l == 0 || rows.iter().any(|r| r.len() != l) {
            return Err(Error::invalid("lm input rows must be non-empty and of equal length"));
        }
        if l > self.cfg.context {
            return Err(Error::invalid(format!("input of {l} tokens exceeds LM context {}", self.cfg.context)));
        }
        let v = self.cfg.vocab();
        if let Some(&bad) = rows.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {v}")));
        }
        let c = self.cfg.hidden;
        let flat: Vec<usize> = rows.iter().flatten().copied().collect();
        let table = f.p(self.tok_emb);
        let x = f.g.gather_rows(table, &flat)?;
        let x = f.g.reshape(x, &[n, l, c])?;
        let pos = f.p(self.pos_emb);
        let pos = f.g.slice(pos, 0, 0, l)?;
        let mut x = f.g.add(x, pos)?;
        let mask = causal_mask(l);
        for b in &self.blocks {
            x = b.forward(f, x, Some(&mask))?;
        }
        let x = self.norm.forward(f, x)?;
        self.head.forward(f, x)
    }

    /// Mean cross-entropy over every target of equal-length sequences.
    pub fn loss_var(&self, f: &mut Fwd, seqs: &[TokenSequence]) -> Result<Var> {
        let rows = seqs.iter().map(|s| self.inputs(s)).collect::<Result<Vec<_>>>()?;
        if rows.iter().any(|r| r.len() != rows[0].len()) {
            return Err(Error::invalid("lm batch sequences must have equal length"));
        }
        let logits = self.logits(f, &rows)?;
        let (n, l, k) = (rows.len(), rows[0].len(), self.cfg.codebook_size);
        let mut onehot = vec![0.0; n * l * k];
        for (i, s) in seqs.iter().enumerate() {
            for (j, &t) in s.tokens.iter().enumerate() {
                onehot[(i * l + j) * k + t] = 1.0;
            }
        }
        let logp = f.g.log_softmax(logits, 2)?;
        let onehot = f.constant(Tensor::new(&[n, l, k], onehot)?);
        let picked = f.g.mul(logp, onehot)?;
        let total = f.g.sum_all(picked)?;
        f.g.scale(total, -1.0 / (n * l) as f64)
    }

    pub fn lm_loss(&self, seqs: &[TokenSequence]) -> Result<f64> {
        let mut f = Fwd::eval(&self.store);
        let v = self.loss_var(&mut f, seqs)?;
        Ok(f.value(v).item())
    }

    /// Cross-entropy of each target position of one sequence.
    pub fn position_losses(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let rows = vec![self.inputs(seq)?];
        let mut f = Fwd::eval(&self.store);
        let logits = self.logits(&mut f, &rows)?;
        let logp = f.g.log_softmax(logits, 2)?;
        let lp = f.value(logp).data();
        let k = self.cfg.codebook_size;
        Ok(seq.tokens.iter().enumerate().map(|(j, &t)| -lp[j * k + t]).collect())
    }

    /// Logits of the next code after `inputs` (start token plus codes so far).
    pub fn next_logits(&self, inputs: &[usize]) -> Result<Vec<f64>> {
        let mut f = Fwd::eval(&self.store);
        let logits = self.logits(&mut f, &[inputs.to_vec()])?;
        let k = self.cfg.codebook_size;
        let data = f.value(logits).data();
        Ok(data[data.len() - k..].to_vec())
    }

    /// One Adam step on a batch of equal-length sequences; returns the loss.
    pub fn train_step(&mut self, seqs: &[TokenSequence], opt: &mut Adam, lr: f64) -> Result<f64> {
        let (loss, grads) = {
            let mut f = Fwd::train(&self.store);
            let loss = self.loss_var(&mut f, seqs)?;
            let grads = f.g.backward(loss)?;
            (f.value(loss).item(), f.param_grads(&grads))
        };
        opt.update(&mut self.store, &grads, lr)?;
        Ok(loss)
    }

    /// Samples `n` codes continuing `prefix` (codes only, no start token).
    pub fn continue_codes(
        &self,
        cond: Option<usize>,
        prefix: &[usize],
        n: usize,
        sampling: Sampling,
        rng: &mut RngStream,
    ) -> Result<Vec<usize>> {
        sampling.validate(self.cfg.codebook_size)?;
        let k = self.cfg.codebook_size;
        if let Some(&bad) = prefix.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("token id {bad} outside codebook of {k}")));
        }
        if prefix.len() + n > self.cfg.context {
            return Err(Error::invalid(format!(
                "{} tokens exceed LM context {}",
                prefix.len() + n,
                self.cfg.context
            )));
        }
        let mut inputs = vec![self.start_token(cond)?];
        inputs.extend_from_slice(prefix);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let logits = self.next_logits(&inputs)?;
            let t = sampling.draw(&logits, rng);
            out.push(t);
            inputs.push(t);
        }
        Ok(out)
    }
}

/// Temperature and top-k truncation for ancestral sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sampling {
    pub temperature: f64,
    pub top_k: usize,
}

impl Sampling {
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.top_k == 0 || self.top_k > k {
            return Err(Error::invalid(format!("top_k must be in 1..={k}, got {}", self.top_k)));
        }
        Ok(())
    }

    /// Draws one index from `logits`. Ties rank lower indices first.
    pub fn draw(&self, logits: &[f64], rng: &mut RngStream) -> usize {
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
        order.truncate(self.top_k.max(1));
        let top = logits[order[0]];
        let w: Vec<f64> = order.iter().map(|&i| ((logits[i] - top) / self.temperature).exp()).collect();
        let total: f64 = w.iter().sum();
        let u = rng.uniform() * total;
        let mut acc = 0.0;
        for (&i, &wi) in order.iter().zip(&w) {
            acc += wi;
            if u < acc {
                return i;
            }
        }
        order[0]
    }
}

/// Index of the largest logit (lowest index among ties).
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Samples a whole grid left to right.
pub fn ar_sample(
    lm: &TokenLm,
    cond: Option<usize>,
    meta: GridMeta,
    sampling: Sampling,
    rng: &mut RngStream,
) -> Result<TokenGrid> {
    let tokens = lm.continue_codes(cond, &[], meta.len(), sampling, rng)?;
    unflatten(&TokenSequence { tokens, cond, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(k: usize) -> TokenLm {
        TokenLm::new(
            LmConfig {
                codebook_size: k,
                num_classes: 2,
                context: 12,
                hidden: 16,
                layers: 1,
                heads: 2,
                mlp_ratio: 2,
            },
            3,
        )
        .unwrap()
    }

    fn seq(tokens: Vec<usize>, cond: Option<usize>) -> TokenSequence {
        let meta = GridMeta::new(1, 1, tokens.len());
        TokenSequence { tokens, cond, meta }
    }

    #[test]
    fn zero_head_gives_log_k() {
        let mut lm = tiny(8);
        let w = lm.head.weight;
        let b = lm.head.bias.unwrap();
        lm.store.set(w, Tensor::zeros(&[16, 8])).unwrap();
        lm.store.set(b, Tensor::zeros(&[8])).unwrap();
        let l = lm.lm_loss(&[seq(vec![1, 5, 7, 0], Some(1))]).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_vocab_token_errors() {
        let lm = tiny(8);
        assert!(lm.lm_loss(&[seq(vec![1, 8], None)]).is_err());
        assert!(lm.lm_loss(&[seq(vec![1, 2], Some(2))]).is_err());
    }

    #[test]
    fn position_losses_average_to_loss() {
        let lm = tiny(8);
        let s = seq(vec![3, 1, 4, 1, 5], None);
        let p = lm.position_losses(&s).unwrap();
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        assert!((mean - lm.lm_loss(&[s]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn top_one_is_greedy() {
        let lm = tiny(8);
        let mut rng = RngStream::new(1);
        let s = Sampling {
            temperature: 1.0,
            top_k: 1,
        };
        let got = lm.continue_codes(Some(0), &[], 6, s, &mut rng).unwrap();
        let mut inputs = vec![lm.start_token(Some(0)).unwrap()];
        for &g in &got {
            assert_eq!(g, argmax(&lm.next_logits(&inputs).unwrap()));
            inputs.push(g);
        }
    }

    #[test]
    fn tiny_temperature_is_greedy() {
        let logits = [0.1, 2.0, -1.0, 1.999];
        let s = Sampling {
            temperature: 1e-9,
            top_k: 4,
        };
        let mut rng = RngStream::new(2);
        for _ in 0..100 {
            assert_eq!(s.draw(&logits, &mut rng), 1);
        }
    }

    #[test]
    fn training_reduces_loss() {
        let mut lm = tiny(4);
        let batch: Vec<_> = (0..4).map(|i| seq(vec![i, (i + 1) % 4, (i + 2) % 4, (i + 3) % 4], None)).collect();
        let mut opt = Adam::new(60);
        opt.warmup_iters = 0;
        let first = lm.lm_loss(&batch).unwrap();
        for it in 0..60 {
            lm.train_step(&batch, &mut opt, 1e-2 * (1.0 - it as f64 / 60.0)).unwrap();
        }
        assert!(lm.lm_loss(&batch).unwrap() < 0.5 * first);
    }

    #[test]
    fn bad_sampling_parameters_error() {
        let lm = tiny(4);
        let mut rng = RngStream::new(0);
        for s in [
            Sampling { temperature: 0.0, top_k: 1 },
            Sampling { temperature: 1.0, top_k: 0 },
            Sampling { temperature: 1.0, top_k: 5 },
        ] {
            assert!(lm.continue_codes(None, &[], 1, s, &mut rng).is_err());
        }
    }
}
