use crate::error::{Error, Result};
use crate::nn::{Fwd, Linear, ParamId, ParamStore};
use crate::tensor::{RngStream, Tensor, Var};

/// λ1: weight of the codebook term `||sg[ê] − z_q||²`.
pub const CODEBOOK_WEIGHT: f64 = 1.0;
/// λ2: weight of the commitment term `||ê − sg[z_q]||²`.
pub const COMMITMENT_WEIGHT: f64 = 1.0;

/// Index of the entry closest to `v` in squared Euclidean distance; ties go
/// to the lowest index.
pub fn nearest_code(v: &[f64], entries: &[f64], dim: usize) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, row) in entries.chunks_exact(dim).enumerate() {
        let d: f64 = row.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Selection values taken from an earlier pass, held fixed.
///
/// Quantizing with a frozen selection evaluates the smooth function whose
/// gradient the straight-through estimator defines: stop-gradient operands
/// become constants from the anchor pass and the selection never changes, so
/// finite differences of it can be compared against analytic gradients.
#[derive(Clone, Debug)]
pub struct FrozenSelection {
    pub indices: Vec<usize>,
    /// `[N, d]` projected (and normalized) tokens at the anchor
    pub e_hat: Tensor,
    /// `[N, d]` selected entries at the anchor
    pub z_q: Tensor,
}

#[derive(Clone, Debug)]
pub enum Selection {
    Nearest,
    Frozen(FrozenSelection),
}

pub struct QuantizeOutput {
    /// `[B, S, Gh, Gw, C]` decoder input, `proj_up` of the straight-through codes
    pub z: Var,
    /// `[N, d]` straight-through codes (value = selected entries)
    pub codes: Var,
    /// `[N, d]` projected tokens ê
    pub e_hat: Var,
    pub indices: Vec<usize>,
    /// scalar `(λ1·Σ||sg[ê] − z_q||² + λ2·Σ||ê − sg[z_q]||²) / B`
    pub loss: Var,
    /// `[B, S, Gh, Gw]`
    pub grid: [usize; 4],
}

impl QuantizeOutput {
    /// Anchor for a [`Selection::Frozen`] re-evaluation of this pass.
    pub fn freeze(&self, f: &Fwd) -> FrozenSelection {
        FrozenSelection {
            indices: self.indices.clone(),
            e_hat: f.value(self.e_hat).clone(),
            z_q: f.value(self.codes).clone(),
        }
    }
}

/// Factorized codebook: tokens are projected `C → d` (no bias, so scaling a
/// token never changes its direction), optionally l2-normalized, matched to
/// the nearest of `K` entries, and projected back `d → C`.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub entries: ParamId,
    pub proj_down: Linear,
    pub proj_up: Linear,
    pub size: usize,
    pub dim: usize,
    pub normalize: bool,
    pub codebook_weight: f64,
    pub commitment_weight: f64,
    usage: Vec<u64>,
}

impl Codebook {
    pub fn new(
        store: &mut ParamStore,
        hidden: usize,
        size: usize,
        dim: usize,
        normalize: bool,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::Config("codebook size and dim must be positive".into()));
        }
        let raw = rng.normal_tensor(&[size, dim], 1.0);
        let entries = store.add("quant.codebook", unit_rows(&raw, dim));
        Ok(Self {
            entries,
            proj_down: Linear::no_bias(store, "quant.proj_down", hidden, dim, rng),
            proj_up: Linear::new(store, "quant.proj_up", dim, hidden, rng),
            size,
            dim,
            normalize,
            codebook_weight: CODEBOOK_WEIGHT,
            commitment_weight: COMMITMENT_WEIGHT,
            usage: vec![0; size],
        })
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn set_usage(&mut self, counts: Vec<u64>) -> Result<()> {
        if counts.len() != self.size {
            return Err(Error::invalid(format!(
                "usage counts of length {} for codebook of size {}",
                counts.len(),
                self.size
            )));
        }
        self.usage = counts;
        Ok(())
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|c| *c = 0);
    }

    pub fn stats(&self) -> Result<super::CodebookStats> {
        super::usage_stats(&self.usage)
    }

    /// Projects `[B, S, Gh, Gw, C]` embeddings to `[N, d]` tokens ê.
    pub fn project(&self, f: &mut Fwd, e: Var) -> Result<Var> {
        let shape = f.g.shape(e).to_vec();
        let c = *shape.last().unwrap_or(&0);
        let n: usize = shape[..shape.len().saturating_sub(1)].iter().product();
        let x = f.g.reshape(e, &[n, c])?;
        let h = self.proj_down.forward(f, x)?;
        if self.normalize {
            f.g.l2_normalize(h, 1)
        } else {
            Ok(h)
        }
    }

    /// Vector quantization with straight-through gradients.
    pub fn quantize(&mut self, f: &mut Fwd, e: Var, selection: &Selection) -> Result<QuantizeOutput> {
        let shape = f.g.shape(e).to_vec();
        let [b, s, gh, gw, _] = shape[..] else {
            return Err(Error::Shape {
                op: "quantize",
                lhs: shape,
                rhs: vec![],
            });
        };
        let e_hat = self.project(f, e)?;
        let n = b * s * gh * gw;
        let table = f.p(self.entries);

        let (indices, codes, t1, t2) = match selection {
            Selection::Nearest => {
                let indices = {
                    let ev = f.value(e_hat).data();
                    let cb = f.store().get(self.entries).data();
                    (0..n)
                        .map(|i| nearest_code(&ev[i * self.dim..(i + 1) * self.dim], cb, self.dim))
                        .collect::<Vec<_>>()
                };
                let z_q = f.g.gather_rows(table, &indices)?;
                let e_sg = f.g.stop_gradient(e_hat);
                let z_sg = f.g.stop_gradient(z_q);
                let d1 = f.g.sub(e_sg, z_q)?;
                let d1 = f.g.square(d1)?;
                let t1 = f.g.sum_all(d1)?;
                let d2 = f.g.sub(e_hat, z_sg)?;
                let d2 = f.g.square(d2)?;
                let t2 = f.g.sum_all(d2)?;
                // value: z_q + (ê − ê) == z_q exactly; gradient: identity into ê
                let zero = f.g.sub(e_hat, e_sg)?;
                let codes = f.g.add(z_sg, zero)?;
                for &k in &indices {
                    self.usage[k] += 1;
                }
                (indices, codes, t1, t2)
            }
            Selection::Frozen(anchor) => {
                if anchor.indices.len() != n || anchor.e_hat.shape() != [n, self.dim] || anchor.z_q.shape() != [n, self.dim] {
                    return Err(Error::invalid("frozen selection does not match token count"));
                }
                let z_q = f.g.gather_rows(table, &anchor.indices)?;
                let e0 = f.constant(anchor.e_hat.clone());
                let z0 = f.constant(anchor.z_q.clone());
                let d1 = f.g.sub(e0, z_q)?;
                let d1 = f.g.square(d1)?;
                let t1 = f.g.sum_all(d1)?;
                let d2 = f.g.sub(e_hat, z0)?;
                let d2 = f.g.square(d2)?;
                let t2 = f.g.sum_all(d2)?;
                let offset = f.constant(anchor.z_q.zip_map(&anchor.e_hat, |z, e| z - e)?);
                let codes = f.g.add(e_hat, offset)?;
                (anchor.indices.clone(), codes, t1, t2)
            }
        };

        let t1 = f.g.scale(t1, self.codebook_weight / b as f64)?;
        let t2 = f.g.scale(t2, self.commitment_weight / b as f64)?;
        let loss = f.g.add(t1, t2)?;
        let z = self.proj_up.forward(f, codes)?;
        let c = self.proj_up.out_dim;
        let z = f.g.reshape(z, &[b, s, gh, gw, c])?;
        Ok(QuantizeOutput {
            z,
            codes,
            e_hat,
            indices,
            loss,
            grid: [b, s, gh, gw],
        })
    }

    /// Decoder input for a grid of code indices: `proj_up(entries[indices])`.
    pub fn lookup(&self, f: &mut Fwd, indices: &[usize], grid: [usize; 4]) -> Result<Var> {
        let n: usize = grid.iter().product();
        if indices.len() != n {
            return Err(Error::invalid(format!(
                "lookup: {} indices for grid {grid:?}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&k| k >= self.size) {
            return Err(Error::invalid(format!(
                "lookup: index {bad} out of range for codebook of size {}",
                self.size
            )));
        }
        let table = f.p(self.entries);
        let z_q = f.g.gather_rows(table, indices)?;
        let z = self.proj_up.forward(f, z_q)?;
        let [b, s, gh, gw] = grid;
        f.g.reshape(z, &[b, s, gh, gw, self.proj_up.out_dim])
    }

    /// Re-projects every entry onto the unit sphere (no-op without normalization).
    pub fn renormalize(&self, store: &mut ParamStore) -> Result<()> {
        if !self.normalize {
            return Ok(());
        }
        let t = unit_rows(store.get(self.entries), self.dim);
        store.set(self.entries, t)
    }
}

fn unit_rows(t: &Tensor, dim: usize) -> Tensor {
    let mut data = t.to_vec();
    for row in data.chunks_exact_mut(dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(t.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book(k: usize, d: usize, c: usize, normalize: bool) -> (ParamStore, Codebook) {
        let mut store = ParamStore::new();
        let cb = Codebook::new(&mut store, c, k, d, normalize, &mut RngStream::new(1)).unwrap();
        (store, cb)
    }

    /// Makes proj_down the identity so tokens enter the codebook unchanged.
    fn identity_down(store: &mut ParamStore, cb: &Codebook, d: usize) {
        let eye = Tensor::from_fn(&[d, d], |k| if k / d == k % d { 1.0 } else { 0.0 });
        store.set(cb.proj_down.weight, eye).unwrap();
    }

    #[test]
    fn entries_start_on_unit_sphere() {
        let (store, cb) = book(64, 8, 16, true);
        for row in store.get(cb.entries).data().chunks(8) {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_entry_gives_zero_loss() {
        let (mut store, mut cb) = book(8, 2, 2, true);
        identity_down(&mut store, &cb, 2);
        let entry = store.get(cb.entries).narrow(0, 5, 1).unwrap();
        let mut f = Fwd::train(&store);
        let e = f.constant(entry.reshape(&[1, 1, 1, 1, 2]).unwrap());
        let out = cb.quantize(&mut f, e, &Selection::Nearest).unwrap();
        assert_eq!(out.indices, vec![5]);
        assert!(f.value(out.loss).item().abs() < 1e-24);
    }

    #[test]
    fn two_entry_example_picks_first() {
        let (mut store, mut cb) = book(2, 2, 2, true);
        identity_down(&mut store, &cb, 2);
        store.set(cb.entries, Tensor::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap()).unwrap();
        let mut f = Fwd::train(&store);
        let e = f.constant(Tensor::new(&[1, 1, 1, 1, 2], vec![0.8, 0.6]).unwrap());
        let out = cb.quantize(&mut f, e, &Selection::Nearest).unwrap();
        assert_eq!(out.indices, vec![0]);
        // distance² 0.4 to entry 0 counted by both terms
        assert!((f.value(out.loss).item() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut entries = vec![0.0; 8 * 2];
        entries[3 * 2] = 1.0; // entry 3 = (1, 0)
        entries[7 * 2 + 1] = 1.0; // entry 7 = (0, 1)
        for k in [0, 1, 2, 4, 5, 6] {
            entries[k * 2] = -1.0;
        }
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(nearest_code(&[h, h], &entries, 2), 3);
    }

    #[test]
    fn straight_through_value_equals_lookup() {
        let (store, mut cb) = book(16, 4, 8, true);
        let e = RngStream::new(3).normal_tensor(&[1, 2, 2, 2, 8], 1.0);
        let mut f = Fwd::eval(&store);
        let ev = f.constant(e);
        let q = cb.quantize(&mut f, ev, &Selection::Nearest).unwrap();
        let z = cb.lookup(&mut f, &q.indices, q.grid).unwrap();
        assert_eq!(f.value(q.z), f.value(z));
    }

    #[test]
    fn lookup_rejects_out_of_range() {
        let (store, cb) = book(4, 2, 2, true);
        let mut f = Fwd::eval(&store);
        assert!(cb.lookup(&mut f, &[0, 4], [1, 1, 1, 2]).is_err());
    }

    #[test]
    fn usage_counts_track_tokens() {
        let (store, mut cb) = book(16, 4, 8, true);
        let e = RngStream::new(4).normal_tensor(&[2, 1, 2, 2, 8], 1.0);
        let mut f = Fwd::eval(&store);
        let ev = f.constant(e);
        cb.quantize(&mut f, ev, &Selection::Nearest).unwrap();
        assert_eq!(cb.usage().iter().sum::<u64>(), 8);
        cb.reset_usage();
        assert!(cb.stats().is_err());
    }

    #[test]
    fn renormalize_restores_unit_norm() {
        let (mut store, cb) = book(8, 4, 4, true);
        let t = store.get(cb.entries).map(|v| v * 3.0 + 0.1);
        store.set(cb.entries, t).unwrap();
        cb.renormalize(&mut store).unwrap();
        for row in store.get(cb.entries).data().chunks(4) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
