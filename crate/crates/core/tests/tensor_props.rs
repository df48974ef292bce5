use jointtok::tensor::{check_gradient, Graph, RngStream, Tensor, Var};
use jointtok::Error;
use proptest::prelude::*;

/// Shapes of rank 1..=3 with at most 64 elements.
fn small_shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=4, 1..=3)
}

fn values(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    RngStream::new(seed).uniform_tensor(shape, lo, hi)
}

fn weighted(g: &mut Graph, v: Var) -> jointtok::Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = g.constant(RngStream::new(1234).uniform_tensor(&shape, -1.0, 1.0));
    let p = g.mul(v, w)?;
    g.sum_all(p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn data_length_must_match_shape(shape in small_shape(), extra in 1usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(&shape, vec![0.0; n]).is_ok());
        prop_assert!(Tensor::new(&shape, vec![0.0; n + extra]).is_err());
    }

    #[test]
    fn softmax_rows_are_distributions(shape in small_shape(), seed in any::<u64>(), axis_pick in 0usize..3) {
        let axis = axis_pick % shape.len();
        let mut g = Graph::new();
        let x = g.constant(values(&shape, seed, -30.0, 30.0));
        let p = g.softmax(x, axis).unwrap();
        let p = g.value(p).clone();
        prop_assert!(p.data().iter().all(|&v| v >= 0.0));
        let s = g.constant(p);
        let sums = g.sum(s, axis).unwrap();
        for &v in g.value(sums).data() {
            prop_assert!((v - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardizes(rows in 1usize..5, width in 2usize..12, seed in any::<u64>(), spread in 0.1f64..50.0) {
        let eps = 1e-5;
        let input = values(&[rows, width], seed, -spread, spread);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = g.layer_norm(x, 1, eps).unwrap();
        let moments = |row: &[f64]| {
            let mean = row.iter().sum::<f64>() / width as f64;
            (mean, row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64)
        };
        for (row, src) in g.value(y).data().chunks(width).zip(input.data().chunks(width)) {
            let (mean, var) = moments(row);
            let (_, var_in) = moments(src);
            prop_assert!(mean.abs() <= 1e-5);
            prop_assert!((var - var_in / (var_in + eps)).abs() <= 1e-9);
            if var_in >= 0.1 {
                prop_assert!((var - 1.0).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn reshape_and_permute_roundtrip(shape in prop::collection::vec(1usize..=4, 3), seed in any::<u64>(), perm_id in 0usize..6) {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = perms[perm_id];
        let mut inverse = [0; 3];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let t = values(&shape, seed, -1.0, 1.0);
        let back = t.permute(&perm).unwrap().permute(&inverse).unwrap();
        prop_assert_eq!(back.data(), t.data());
        let flat = t.reshape(&[t.numel()]).unwrap().reshape(&shape).unwrap();
        prop_assert_eq!(flat, t);
    }

    #[test]
    fn unary_primitives_pass_gradient_check(shape in small_shape(), seed in any::<u64>(), op in 0usize..9) {
        let x = values(&shape, seed, -1.0, 1.0);
        let last = shape.len() - 1;
        let f = |g: &mut Graph, x: Var| -> jointtok::Result<Var> {
            let y = match op {
                0 => g.softmax(x, last)?,
                1 => g.log_softmax(x, 0)?,
                2 => g.gelu(x)?,
                3 => g.exp(x)?,
                4 => {
                    let s = g.square(x)?;
                    let s = g.add_scalar(s, 0.25)?;
                    g.log(s)?
                }
                5 => g.l2_normalize(x, last)?,
                6 => g.scale(x, -1.7)?,
                7 => g.mean(x, 0)?,
                _ => {
                    let s = g.square(x)?;
                    g.sum(s, last)?
                }
            };
            weighted(g, y)
        };
        let r = check_gradient(f, &x, 1e-5, 1e-3).unwrap();
        prop_assert!(r.passed, "op {} rel error {}", op, r.max_rel_error);
    }

    #[test]
    fn layer_norm_gradient(rows in 1usize..4, width in 2usize..8, seed in any::<u64>()) {
        let x = values(&[rows, width], seed, -2.0, 2.0);
        let r = check_gradient(|g: &mut Graph, x| { let y = g.layer_norm(x, 1, 1e-5)?; weighted(g, y) }, &x, 1e-5, 1e-3).unwrap();
        prop_assert!(r.passed, "rel error {}", r.max_rel_error);
    }

    #[test]
    fn matmul_gradient_both_sides(m in 1usize..4, k in 1usize..5, n in 1usize..4, seed in any::<u64>()) {
        let a = values(&[m, k], seed, -1.0, 1.0);
        let b = values(&[k, n], seed ^ 1, -1.0, 1.0);
        let left = {
            let b = b.clone();
            move |g: &mut Graph, x: Var| { let c = g.constant(b.clone()); let y = g.matmul(x, c)?; weighted(g, y) }
        };
        let right = move |g: &mut Graph, x: Var| { let c = g.constant(a.clone()); let y = g.matmul(c, x)?; weighted(g, y) };
        let ra = check_gradient(left, &values(&[m, k], seed, -1.0, 1.0), 1e-5, 1e-3).unwrap();
        let rb = check_gradient(right, &b, 1e-5, 1e-3).unwrap();
        prop_assert!(ra.passed && rb.passed);
    }

    #[test]
    fn structural_primitives_gradient(rows in 2usize..5, cols in 2usize..5, seed in any::<u64>(), op in 0usize..5) {
        let x = values(&[rows, cols], seed, -1.0, 1.0);
        let f = |g: &mut Graph, x: Var| -> jointtok::Result<Var> {
            let y = match op {
                0 => g.permute(x, &[1, 0])?,
                1 => g.slice(x, 1, 1, cols - 1)?,
                2 => { let o = g.constant(Tensor::ones(&[rows, 1])); g.concat(&[x, o, x], 1)? }
                3 => g.gather_rows(x, &[rows - 1, 0, rows - 1])?,
                _ => {
                    let mask: Vec<bool> = (0..rows * cols).map(|i| i % 2 == 0).collect();
                    g.masked_fill(x, &mask, &[rows, cols], 0.5)?
                }
            };
            let y = g.square(y)?;
            weighted(g, y)
        };
        let r = check_gradient(f, &x, 1e-5, 1e-3).unwrap();
        prop_assert!(r.passed, "op {} rel error {}", op, r.max_rel_error);
    }
}

#[test]
fn non_finite_forward_values_are_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2], vec![800.0, 1.0]).unwrap());
    match g.exp(x) {
        Err(Error::NumericFault { .. }) => {}
        other => panic!("expected a numeric fault, got {other:?}"),
    }
}
