//! Central finite-difference checks for graph gradients.

use rand::Rng;

use crate::denoiser::Params;
use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Anything that owns an ordered list of parameter tensors.
pub trait ParamStore: Clone {
    fn tensors(&self) -> &[Tensor];
    fn tensors_mut(&mut self) -> &mut [Tensor];
}

impl ParamStore for Params {
    fn tensors(&self) -> &[Tensor] {
        Params::tensors(self)
    }
    fn tensors_mut(&mut self) -> &mut [Tensor] {
        Params::tensors_mut(self)
    }
}

impl ParamStore for Vec<Tensor> {
    fn tensors(&self) -> &[Tensor] {
        self
    }
    fn tensors_mut(&mut self) -> &mut [Tensor] {
        self
    }
}

/// Compare analytic gradients against central differences on `coords`
/// randomly chosen scalar coordinates (all of them if there are fewer).
///
/// `loss` must be deterministic and return the value together with
/// gradients keyed by tensor index. Returns the largest
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn finite_difference_check<P, F>(
    loss: F,
    params: &P,
    eps: f64,
    coords: usize,
    stream: &RngStream,
) -> Result<f64>
where
    P: ParamStore,
    F: Fn(&P) -> Result<(f64, Gradients)>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::range("eps", eps, "(0, 1e-2]"));
    }
    let sizes: Vec<usize> = params.tensors().iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Ok(0.0);
    }
    let (_, grads) = loss(params)?;
    let picks: Vec<usize> = if coords >= total {
        (0..total).collect()
    } else {
        let mut rng = stream.rng();
        (0..coords).map(|_| rng.gen_range(0..total)).collect()
    };

    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    for flat in picks {
        let (ti, ci) = locate(&sizes, flat);
        let analytic = grads.get(ti).map_or(0.0, |g| g.data()[ci]);
        let orig = work.tensors()[ti].data()[ci];
        work.tensors_mut()[ti].data_mut()[ci] = orig + eps;
        let (up, _) = loss(&work)?;
        work.tensors_mut()[ti].data_mut()[ci] = orig - eps;
        let (down, _) = loss(&work)?;
        work.tensors_mut()[ti].data_mut()[ci] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("gradient check at tensor {ti}, index {ci}")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (i, &n) in sizes.iter().enumerate() {
        if flat < n {
            return (i, flat);
        }
        flat -= n;
    }
    unreachable!("flat index within total")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn quadratic(p: &Vec<Tensor>) -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let w = g.param(0, &p[0]);
        let v = g.param(1, &p[1]);
        let ww = g.mul(w, w)?;
        let s = g.sum(ww)?;
        let vs = g.sum(v)?;
        let s3 = g.scale(s, 3.0)?;
        let out = g.add(s3, vs)?;
        Ok((g.value(out).item(), g.backward(out)?))
    }

    #[test]
    fn quadratic_is_exact() {
        let p = vec![Tensor::vector(vec![0.3, -1.2, 2.5]), Tensor::vector(vec![1.0, 2.0])];
        let err = finite_difference_check(quadratic, &p, 1e-5, 100, &RngStream::new(0)).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn empty_params_give_zero() {
        let p: Vec<Tensor> = vec![];
        let err = finite_difference_check(|_| Ok((1.0, Gradients::new())), &p, 1e-5, 8, &RngStream::new(0)).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let p = vec![Tensor::vector(vec![1.0, 2.0])];
        let bad = |p: &Vec<Tensor>| -> Result<(f64, Gradients)> {
            let v: f64 = p[0].data().iter().map(|x| x * x).sum();
            let mut g = Gradients::new();
            g.insert(0, Tensor::vector(p[0].data().to_vec()));
            Ok((v, g))
        };
        let err = finite_difference_check(bad, &p, 1e-5, 10, &RngStream::new(0)).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn eps_range_enforced() {
        let p = vec![Tensor::scalar(1.0)];
        assert!(finite_difference_check(quadratic_scalar, &p, 0.0, 1, &RngStream::new(0)).is_err());
        assert!(finite_difference_check(quadratic_scalar, &p, 0.1, 1, &RngStream::new(0)).is_err());
    }

    fn quadratic_scalar(p: &Vec<Tensor>) -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let w = g.param(0, &p[0]);
        let out = g.mul(w, w)?;
        Ok((g.value(out).item(), g.backward(out)?))
    }
}
