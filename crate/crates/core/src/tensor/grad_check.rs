use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar-valued `f` at `x`.
pub fn numeric_grad<F>(f: F, x: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    no_grad(|| {
        let base = x.to_vec();
        let mut out = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += eps;
            let mut minus = base.clone();
            minus[i] -= eps;
            let fp = scalar(&f(&Tensor::from_vec(plus, x.shape())?)?)?;
            let fm = scalar(&f(&Tensor::from_vec(minus, x.shape())?)?)?;
            out.push((fp - fm) / (2.0 * eps));
        }
        Ok(out)
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

/// Max over coordinates of |analytic − numeric| / max(1, |numeric|).
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    grad_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.requires_grad(true)).collect();
    let out = f(&leaves)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarLoss(out.shape().to_vec()));
    }
    out.backward()?;

    let mut worst = 0.0f64;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let numeric = numeric_grad(
            |x| {
                let mut xs: Vec<Tensor> = inputs.to_vec();
                xs[k] = x.clone();
                f(&xs)
            },
            &inputs[k],
            eps,
        )?;
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max((a - n).abs() / n.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_is_exact() {
        let x = Tensor::from_vec(vec![0.5, -1.5, 2.0], &[3]).unwrap();
        let err = grad_check(|x| x.mul(x)?.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn silu_at_half() {
        let x = Tensor::from_vec(vec![0.5], &[1]).unwrap();
        let err = grad_check(|x| x.silu()?.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_non_scalar() {
        let x = Tensor::from_vec(vec![0.5, 1.0], &[2]).unwrap();
        assert!(matches!(grad_check(|x| x.scale(2.0), &x, 1e-5), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn detects_wrong_gradient() {
        // a deliberately broken op: forward x², backward claims 1
        let x = Tensor::from_vec(vec![3.0], &[1]).unwrap();
        let err = grad_check(
            |x| {
                let v = x.data()[0];
                Tensor::from_op("broken", vec![v * v], vec![1], vec![x.clone()], |g| vec![Some(g.to_vec())])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.8, "{err}");
    }
}
