use super::graph::{Graph, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// max over coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Compares the reverse-mode gradient of scalar `f` at `x` with central
/// differences of step `eps`.
pub fn check_gradient<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_gradient_at(&f, x, eps, tol, None)
}

/// Like [`check_gradient`] but only probes the listed flat coordinates.
pub fn check_gradient_at<F>(f: &F, x: &Tensor, eps: f64, tol: f64, coords: Option<&[usize]>) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("check_gradient: eps must be positive"));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(x.shape(), data)?);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = x.to_vec();
        plus[i] += eps;
        let mut minus = x.to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(Error::numeric(format!("finite difference at coordinate {i}")));
        }
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(GradCheck {
        max_rel_error: worst,
        passed: worst <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[4], vec![0.3, -1.1, 0.7, 2.0]).unwrap();
        let r = check_gradient(
            |g, x| {
                let s = g.square(x)?;
                g.sum_all(s)
            },
            &x,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn matmul_sum() {
        let w = Tensor::from_fn(&[3, 2], |i| (i as f64 * 0.9).sin());
        let x = Tensor::from_fn(&[2, 3], |i| (i as f64 * 0.4).cos());
        let r = check_gradient(
            |g, x| {
                let wv = g.constant(w.clone());
                let y = g.matmul(x, wv)?;
                g.sum_all(y)
            },
            &x,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::ones(&[3]);
        let r = check_gradient(
            |g, _x| Ok(g.constant(Tensor::scalar(4.0))),
            &x,
            1e-3,
            1e-12,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let x = Tensor::ones(&[1]);
        assert!(check_gradient(|g, x| g.sum_all(x), &x, 0.0, 1.0).is_err());
    }
}
