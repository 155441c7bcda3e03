use super::{join, Initializer, Module, ParamKind, PROJECTION_STD};
use crate::error::{Error, Result};
use crate::flops::{self, OpCategory};
use crate::tensor::{linalg, Tensor};

/// Spatial mean: [N,C,H,W] → [N,C].
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let data: Vec<f64> = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Tensor::from_op("global_avg_pool", data, vec![n, c], vec![x.clone()], move |g| {
        vec![Some(g.iter().flat_map(|&v| std::iter::repeat(v / hw as f64).take(hw)).collect())]
    })
}

/// x[N,C] · W[K,C]ᵀ + b[K]
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (&[n, c], &[k, c2]) = (x.shape(), weight.shape()) else {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    };
    if c != c2 || bias.shape() != [k] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let mut out: Vec<f64> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    linalg::gemm_nt(n, c, k, x.data(), weight.data(), &mut out);
    flops::record(OpCategory::Linear, 2 * (n * c * k) as u64, (n * k) as u64);
    let (xs, ws) = (x.clone(), weight.clone());
    Tensor::from_op("linear", out, vec![n, k], vec![x.clone(), weight.clone(), bias.clone()], move |g| {
        let dx = xs.requires_grad_flag().then(|| {
            let mut dx = vec![0.0; n * c];
            linalg::gemm_nn(n, k, c, g, ws.data(), &mut dx);
            dx
        });
        let dw = ws.requires_grad_flag().then(|| {
            let mut dw = vec![0.0; k * c];
            linalg::gemm_tn(k, n, c, g, xs.data(), &mut dw);
            dw
        });
        let mut db = vec![0.0; k];
        for row in g.chunks(k) {
            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
        }
        vec![dx, dw, Some(db)]
    })
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, init: &mut Initializer) -> Self {
        Linear {
            weight: init.trunc_normal(&[out_features, in_features], PROJECTION_STD),
            bias: init.constant(&[out_features], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight, &self.bias)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Learnable);
        f(&join(prefix, "bias"), &self.bias, ParamKind::Learnable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Learnable);
        f(&join(prefix, "bias"), &mut self.bias, ParamKind::Learnable);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;

    #[test]
    fn pooling_values() {
        let c = Tensor::full(&[2, 3, 4, 4], 1.25);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == 1.25));
        let x = Tensor::from_vec(vec![0., 1., 2., 3.], &[1, 1, 2, 2]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().to_vec(), vec![1.5]);
    }

    #[test]
    fn identity_linear() {
        let x = Tensor::from_vec(vec![1., -2., 3., 4., 5., 6.], &[2, 3]).unwrap();
        let mut eye = vec![0.0; 9];
        (0..3).for_each(|i| eye[i * 3 + i] = 1.0);
        let y = linear(&x, &Tensor::from_vec(eye, &[3, 3]).unwrap(), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        assert!(linear(&x, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn head_gradients() {
        let x = Tensor::from_vec((0..2 * 3 * 2 * 2).map(|i| (i as f64 * 0.7).sin()).collect(), &[2, 3, 2, 2]).unwrap();
        let w = Tensor::from_vec((0..12).map(|i| (i as f64 * 0.3).cos()).collect(), &[4, 3]).unwrap();
        let b = Tensor::from_vec(vec![0.1, 0.2, -0.3, 0.0], &[4]).unwrap();
        let err = grad_check_many(
            |t| linear(&global_avg_pool(&t[0])?, &t[1], &t[2])?.cross_entropy(&[1, 3]),
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
