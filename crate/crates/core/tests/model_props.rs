use jointtok::io::RunConfig;
use jointtok::model::{vq_forward, Model};
use jointtok::nn::{Fwd, ParamStore};
use jointtok::quantizer::{kl_divergence, nearest_code, Codebook, Selection};
use jointtok::tensor::{RngStream, Tensor};
use jointtok::training::{train_step_vq, Adam};
use proptest::prelude::*;

fn small_model(seed: u64) -> Model {
    let mut cfg = RunConfig::default().model;
    cfg.tokenizer.patch.hidden = 16;
    cfg.tokenizer.patch.resolutions = vec![16, 32];
    cfg.tokenizer.net.spatial_layers = 1;
    cfg.tokenizer.net.temporal_layers = 1;
    cfg.codebook_size = 32;
    Model::new(&cfg, seed).unwrap()
}

fn embeddings(shape: &[usize], seed: u64) -> Tensor {
    RngStream::new(seed).normal_tensor(shape, 1.0)
}

fn codebook(k: usize, c: usize, d: usize, normalize: bool, seed: u64) -> (ParamStore, Codebook) {
    let mut store = ParamStore::new();
    let cb = Codebook::new(&mut store, c, k, d, normalize, &mut RngStream::new(seed)).unwrap();
    (store, cb)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn encode_decode_restores_shape(res_pick in 0usize..2, clips in 0usize..3, batch in 1usize..3, seed in any::<u64>()) {
        let mut m = small_model(1);
        let res = [16, 32][res_pick];
        let frames = 1 + 4 * clips;
        let x = RngStream::new(seed).uniform_tensor(&[batch, frames, res, res, 3], -1.0, 1.0);
        let (idx, grid) = m.encode_indices(&x).unwrap();
        prop_assert_eq!(grid, [batch, 1 + clips, res / 8, res / 8]);
        prop_assert_eq!(idx.len(), batch * (1 + clips) * (res / 8) * (res / 8));
        prop_assert_eq!(m.reconstruct(&x).unwrap().shape().to_vec(), x.shape().to_vec());
        prop_assert_eq!(m.decode_indices(&idx, grid).unwrap().shape().to_vec(), x.shape().to_vec());
    }

    #[test]
    fn latent_slots_ignore_later_frames(frame in 1usize..9, seed in any::<u64>()) {
        let m = small_model(2);
        let x = RngStream::new(seed).uniform_tensor(&[1, 9, 16, 16, 3], -1.0, 1.0);
        let per_frame = 16 * 16 * 3;
        let mut noise = RngStream::new(seed ^ 7);
        let y = Tensor::from_fn(x.shape(), |i| x.data()[i] + if i / per_frame >= frame { noise.normal() } else { 0.0 });
        let encode = |t: &Tensor| {
            let mut f = Fwd::eval(&m.store);
            let v = f.constant(t.clone());
            let tf = m.net.encode(&mut f, v).unwrap();
            f.value(tf.embeddings).clone()
        };
        let (a, b) = (encode(&x), encode(&y));
        let slot = (frame - 1) / 4 + 1;
        let per_slot = 2 * 2 * 16;
        prop_assert!(a.data()[..slot * per_slot].iter().zip(&b.data()[..slot * per_slot]).all(|(p, q)| p.to_bits() == q.to_bits()));
        prop_assert!(a.data()[slot * per_slot..] != b.data()[slot * per_slot..]);
    }

    #[test]
    fn nearest_matches_exhaustive_search(k in prop::sample::select(vec![2usize, 16, 100, 512]), normalize in any::<bool>(), seed in any::<u64>()) {
        let (c, d) = (12, 6);
        let (store, mut cb) = codebook(k, c, d, normalize, seed);
        let e = embeddings(&[1, 2, 4, 4, c], seed ^ 3);
        let mut f = Fwd::eval(&store);
        let v = f.constant(e);
        let q = cb.quantize(&mut f, v, &Selection::Nearest).unwrap();
        let tokens = f.value(q.e_hat).data().to_vec();
        let table = store.get(cb.entries).data();
        for (i, tok) in tokens.chunks(d).enumerate() {
            let dists: Vec<f64> = table.chunks(d).map(|row| row.iter().zip(tok).map(|(a, b)| (a - b).powi(2)).sum()).collect();
            let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let oracle = dists.iter().position(|&x| x == best).unwrap();
            prop_assert_eq!(q.indices[i], oracle);
            prop_assert_eq!(nearest_code(tok, table, d), oracle);
        }
    }

    #[test]
    fn positive_scaling_keeps_indices(alpha in 1e-4f64..1e4, seed in any::<u64>()) {
        let (store, mut cb) = codebook(64, 12, 6, true, seed);
        let e = embeddings(&[2, 2, 4, 4, 12], seed ^ 5);
        let mut run = |t: Tensor| {
            let mut f = Fwd::eval(&store);
            let v = f.constant(t);
            cb.quantize(&mut f, v, &Selection::Nearest).unwrap().indices
        };
        let base = run(e.clone());
        prop_assert_eq!(run(e.map(|x| x * alpha)), base);
    }

    #[test]
    fn usage_counts_sum_to_tokens_since_reset(calls in 1usize..4, seed in any::<u64>()) {
        let (store, mut cb) = codebook(32, 8, 4, true, seed);
        let mut f = Fwd::eval(&store);
        let v = f.constant(embeddings(&[1, 1, 2, 2, 8], seed));
        cb.quantize(&mut f, v, &Selection::Nearest).unwrap();
        cb.reset_usage();
        for i in 0..calls {
            let v = f.constant(embeddings(&[2, 1, 2, 2, 8], seed + i as u64));
            cb.quantize(&mut f, v, &Selection::Nearest).unwrap();
        }
        prop_assert_eq!(cb.usage().iter().sum::<u64>(), (calls * 8) as u64);
    }

    #[test]
    fn kl_is_nonnegative(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = RngStream::new(seed);
        let mean: Vec<f64> = (0..n).map(|_| 3.0 * rng.normal()).collect();
        let logvar: Vec<f64> = (0..n).map(|_| 4.0 * rng.normal()).collect();
        prop_assert!(kl_divergence(&mean, &logvar) >= 0.0);
        prop_assert_eq!(kl_divergence(&vec![0.0; n], &vec![0.0; n]), 0.0);
        let mut shifted = mean.clone();
        shifted.iter_mut().for_each(|m| *m = 0.0);
        shifted[0] = 1e-3;
        prop_assert!(kl_divergence(&shifted, &vec![0.0; n]) > 0.0);
    }
}

#[test]
fn straight_through_passes_the_code_gradient_unchanged() {
    let mut m = small_model(3);
    let x = RngStream::new(4).uniform_tensor(&[1, 5, 16, 16, 3], -1.0, 1.0);
    let grad_at_input = |m: &mut Model, selection: &Selection| {
        let mut f = Fwd::eval(&m.store);
        let xv = f.g.param(x.clone());
        let p = vq_forward(&m.net, &mut m.codebook, &mut f, xv, selection).unwrap();
        let g = f.g.backward(p.recon).unwrap();
        (g.get(xv).unwrap().clone(), p.quant.freeze(&f))
    };
    let (through_st, anchor) = grad_at_input(&mut m, &Selection::Nearest);
    // the same graph with the selection replaced by ê + (z_q − ê) held fixed
    let (through_identity, _) = grad_at_input(&mut m, &Selection::Frozen(anchor));
    let err = through_st.max_abs_diff(&through_identity).unwrap();
    assert!(err <= 1e-12, "{err}");
    assert!(through_st.data().iter().any(|&v| v != 0.0));
}

#[test]
fn commitment_step_pulls_tokens_toward_their_codes() {
    let (c, d) = (8, 4);
    let (mut store, mut cb) = codebook(16, c, d, true, 9);
    cb.codebook_weight = 0.0;
    let e = embeddings(&[1, 1, 3, 3, c], 10);
    let distance = |store: &ParamStore, cb: &mut Codebook| {
        let mut f = Fwd::eval(store);
        let v = f.constant(e.clone());
        let q = cb.quantize(&mut f, v, &Selection::Nearest).unwrap();
        (f.value(q.loss).item(), q.indices.clone())
    };
    let (before, idx) = distance(&store, &mut cb);
    let grads = {
        let mut f = Fwd::train(&store);
        let v = f.constant(e.clone());
        let q = cb.quantize(&mut f, v, &Selection::Nearest).unwrap();
        let g = f.g.backward(q.loss).unwrap();
        f.param_grads(&g)
    };
    let w = cb.proj_down.weight;
    let grad = &grads.iter().find(|(id, _)| *id == w).unwrap().1;
    let stepped = store.get(w).zip_map(grad, |p, g| p - 1e-3 * g).unwrap();
    store.set(w, stepped).unwrap();
    let (after, idx_after) = distance(&store, &mut cb);
    assert_eq!(idx, idx_after);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn quantize_loss_is_zero_exactly_when_tokens_sit_on_entries() {
    let d = 4;
    let (mut store, mut cb) = codebook(8, d, d, true, 11);
    let eye = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
    store.set(cb.proj_down.weight, eye).unwrap();
    let entries = store.get(cb.entries).clone();
    let pick = [3usize, 0, 7, 3];
    let on = Tensor::from_fn(&[1, 1, 2, 2, d], |i| entries.data()[pick[i / d] * d + i % d] * 2.5);
    let loss = |t: &Tensor, cb: &mut Codebook| {
        let mut f = Fwd::eval(&store);
        let v = f.constant(t.clone());
        let q = cb.quantize(&mut f, v, &Selection::Nearest).unwrap();
        (f.value(q.loss).item(), q.indices.clone())
    };
    let (l0, idx) = loss(&on, &mut cb);
    assert!(l0.abs() < 1e-24, "{l0}");
    assert_eq!(idx, pick);
    let off = on.map(|v| v + 0.01);
    assert!(loss(&off, &mut cb).0 > 0.0);
}

#[test]
fn entries_stay_unit_norm_after_updates() {
    let mut m = small_model(5);
    let mut opt = Adam::new(4);
    for i in 0..4 {
        let x = RngStream::new(i).uniform_tensor(&[2, 5, 16, 16, 3], -1.0, 1.0);
        let lr = opt.lr_at(i as usize).max(1e-3);
        train_step_vq(&mut m, &x, &mut opt, lr).unwrap();
        let d = m.codebook.dim;
        for row in m.store.get(m.codebook.entries).data().chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-5, "norm {n}");
        }
    }
}
