use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{join, ForwardCtx, Initializer, Mode, Module, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batchnorm2d,
    LayernormTokens,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSpec {
    pub kind: NormKind,
    pub channels: usize,
    pub eps: f64,
}

impl NormSpec {
    pub fn batchnorm(channels: usize) -> Self {
        NormSpec {
            kind: NormKind::Batchnorm2d,
            channels,
            eps: BN_EPS,
        }
    }

    pub fn layernorm(channels: usize) -> Self {
        NormSpec {
            kind: NormKind::LayernormTokens,
            channels,
            eps: LN_EPS,
        }
    }
}

fn check_channels(x: &Tensor, channels: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if c != channels {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![channels],
        });
    }
    Ok((n, h, w))
}

/// Running statistics updated by a train-mode batchnorm call.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

/// Batch normalization over (N,H,W) per channel.
///
/// Train mode normalizes with biased batch statistics and returns them so the
/// caller can fold them into running estimates; eval mode uses the supplied
/// running mean/variance.
pub fn batchnorm2d(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: (&[f64], &[f64]),
    eps: f64,
    mode: Mode,
) -> Result<(Tensor, Option<BatchStats>)> {
    let c = gamma.numel();
    let (n, h, w) = check_channels(x, c, "batchnorm2d")?;
    if beta.numel() != c || running.0.len() != c || running.1.len() != c {
        return Err(Error::geometry("batchnorm parameter length mismatch"));
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let xd = x.data();
    let at = move |b: usize, ch: usize| (b * c + ch) * hw;

    let (mean, var, stats) = match mode {
        Mode::Eval => (running.0.to_vec(), running.1.to_vec(), None),
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let s: f64 = (0..n).map(|b| xd[at(b, ch)..at(b, ch) + hw].iter().sum::<f64>()).sum();
                mean[ch] = s / m;
                let ss: f64 = (0..n)
                    .map(|b| xd[at(b, ch)..at(b, ch) + hw].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>())
                    .sum();
                var[ch] = ss / m;
            }
            let unbiased = if m > 1.0 {
                var.iter().map(|v| v * m / (m - 1.0)).collect()
            } else {
                var.clone()
            };
            let stats = BatchStats {
                mean: mean.clone(),
                var_unbiased: unbiased,
            };
            (mean, var, Some(stats))
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (g, bt) = (gamma.data(), beta.data());
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in at(b, ch)..at(b, ch) + hw {
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                out[i] = g[ch] * xhat[i] + bt[ch];
            }
        }
    }

    let gs = gamma.clone();
    let train = mode == Mode::Train;
    let y = Tensor::from_op(
        "batchnorm2d",
        out,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |gy| {
            let g = gs.data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = vec![0.0; gy.len()];
            for ch in 0..c {
                let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                for b in 0..n {
                    for i in at(b, ch)..at(b, ch) + hw {
                        sum_dy += gy[i];
                        sum_dy_xhat += gy[i] * xhat[i];
                    }
                }
                dgamma[ch] = sum_dy_xhat;
                dbeta[ch] = sum_dy;
                let scale = g[ch] * inv_std[ch];
                for b in 0..n {
                    for i in at(b, ch)..at(b, ch) + hw {
                        dx[i] = if train {
                            scale * (gy[i] - sum_dy / m - xhat[i] * sum_dy_xhat / m)
                        } else {
                            scale * gy[i]
                        };
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        },
    )?;
    Ok((y, stats))
}

/// Per-token layer normalization across the channel axis of an NCHW map.
pub fn layernorm_tokens(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = gamma.numel();
    let (n, h, w) = check_channels(x, c, "layernorm_tokens")?;
    if beta.numel() != c {
        return Err(Error::geometry("layernorm parameter length mismatch"));
    }
    let hw = h * w;
    let xd = x.data();
    let (g, bt) = (gamma.data(), beta.data());
    let tokens = n * hw;
    let idx = move |t: usize, ch: usize| (t / hw * c + ch) * hw + t % hw;
    let mut xhat = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; tokens];
    let mut out = vec![0.0; xd.len()];
    for t in 0..tokens {
        let mean = (0..c).map(|ch| xd[idx(t, ch)]).sum::<f64>() / c as f64;
        let var = (0..c).map(|ch| (xd[idx(t, ch)] - mean).powi(2)).sum::<f64>() / c as f64;
        let s = 1.0 / (var + eps).sqrt();
        inv_std[t] = s;
        for ch in 0..c {
            let i = idx(t, ch);
            xhat[i] = (xd[i] - mean) * s;
            out[i] = g[ch] * xhat[i] + bt[ch];
        }
    }
    let gs = gamma.clone();
    Tensor::from_op(
        "layernorm_tokens",
        out,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |gy| {
            let g = gs.data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = vec![0.0; gy.len()];
            let cf = c as f64;
            for t in 0..tokens {
                let (mut s1, mut s2) = (0.0, 0.0);
                for ch in 0..c {
                    let i = idx(t, ch);
                    let dxhat = gy[i] * g[ch];
                    s1 += dxhat;
                    s2 += dxhat * xhat[i];
                    dgamma[ch] += gy[i] * xhat[i];
                    dbeta[ch] += gy[i];
                }
                for ch in 0..c {
                    let i = idx(t, ch);
                    let dxhat = gy[i] * g[ch];
                    dx[i] = inv_std[t] * (dxhat - s1 / cf - xhat[i] * s2 / cf);
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        },
    )
}

pub struct BatchNorm2d {
    pub weight: Tensor,
    pub bias: Tensor,
    running_mean: Mutex<Tensor>,
    running_var: Mutex<Tensor>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize, init: &mut Initializer) -> Self {
        BatchNorm2d {
            weight: init.constant(&[channels], 1.0),
            bias: init.constant(&[channels], 0.0),
            running_mean: Mutex::new(Tensor::zeros(&[channels])),
            running_var: Mutex::new(Tensor::ones(&[channels])),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn running_stats(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.running_mean.lock().expect("stats lock").to_vec(),
            self.running_var.lock().expect("stats lock").to_vec(),
        )
    }

    pub fn set_running_stats(&self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let c = self.weight.numel();
        *self.running_mean.lock().expect("stats lock") = Tensor::from_vec(mean, &[c])?;
        *self.running_var.lock().expect("stats lock") = Tensor::from_vec(var, &[c])?;
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let (mean, var) = self.running_stats();
        let (y, stats) = batchnorm2d(x, &self.weight, &self.bias, (&mean, &var), self.eps, ctx.mode)?;
        if let Some(s) = stats {
            let mo = self.momentum;
            let blend = |old: &[f64], new: &[f64]| old.iter().zip(new).map(|(o, n)| (1.0 - mo) * o + mo * n).collect();
            self.set_running_stats(blend(&mean, &s.mean), blend(&var, &s.var_unbiased))?;
        }
        Ok(y)
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Learnable);
        f(&join(prefix, "bias"), &self.bias, ParamKind::Learnable);
        f(&join(prefix, "running_mean"), &self.running_mean.lock().expect("stats lock"), ParamKind::Buffer);
        f(&join(prefix, "running_var"), &self.running_var.lock().expect("stats lock"), ParamKind::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Learnable);
        f(&join(prefix, "bias"), &mut self.bias, ParamKind::Learnable);
        f(&join(prefix, "running_mean"), self.running_mean.get_mut().expect("stats lock"), ParamKind::Buffer);
        f(&join(prefix, "running_var"), self.running_var.get_mut().expect("stats lock"), ParamKind::Buffer);
    }
}

pub struct LayerNormTokens {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNormTokens {
    pub fn new(channels: usize, init: &mut Initializer) -> Self {
        LayerNormTokens {
            weight: init.constant(&[channels], 1.0),
            bias: init.constant(&[channels], 0.0),
            eps: LN_EPS,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layernorm_tokens(x, &self.weight, &self.bias, self.eps)
    }
}

impl Module for LayerNormTokens {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Learnable);
        f(&join(prefix, "bias"), &self.bias, ParamKind::Learnable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Learnable);
        f(&join(prefix, "bias"), &mut self.bias, ParamKind::Learnable);
    }
}

pub enum Norm {
    Batch(BatchNorm2d),
    Layer(LayerNormTokens),
}

impl Norm {
    pub fn new(spec: NormSpec, init: &mut Initializer) -> Self {
        match spec.kind {
            NormKind::Batchnorm2d => Norm::Batch(BatchNorm2d::new(spec.channels, init)),
            NormKind::LayernormTokens => Norm::Layer(LayerNormTokens::new(spec.channels, init)),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        match self {
            Norm::Batch(bn) => bn.forward(x, ctx),
            Norm::Layer(ln) => ln.forward(x),
        }
    }

    pub fn kind(&self) -> NormKind {
        match self {
            Norm::Batch(_) => NormKind::Batchnorm2d,
            Norm::Layer(_) => NormKind::LayernormTokens,
        }
    }
}

impl Module for Norm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        match self {
            Norm::Batch(m) => m.visit(prefix, f),
            Norm::Layer(m) => m.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        match self {
            Norm::Batch(m) => m.visit_mut(prefix, f),
            Norm::Layer(m) => m.visit_mut(prefix, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(), shape).unwrap()
    }

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let x = random(&[2, 3, 4, 4], 1);
        let bn = BatchNorm2d::new(3, &mut Initializer::new(0));
        let y = bn.forward(&x, &ForwardCtx::eval()).unwrap();
        let s = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * s).abs() < 1e-15);
        }
    }

    #[test]
    fn train_on_constant_input_gives_shift() {
        let x = Tensor::full(&[2, 2, 3, 3], 4.2);
        let g = Tensor::ones(&[2]);
        let b = Tensor::from_vec(vec![0.5, -1.0], &[2]).unwrap();
        let (y, _) = batchnorm2d(&x, &g, &b, (&[0.0; 2], &[1.0; 2]), BN_EPS, Mode::Train).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let expect = if (i / 9) % 2 == 0 { 0.5 } else { -1.0 };
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn train_output_is_standardized() {
        let x = random(&[3, 2, 5, 5], 2);
        let (y, stats) =
            batchnorm2d(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), (&[0.0; 2], &[1.0; 2]), BN_EPS, Mode::Train)
                .unwrap();
        assert!(stats.is_some());
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| y.data()[(b * 2 + ch) * 25..(b * 2 + ch + 1) * 25].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6);
            // ε perturbs the unit variance slightly
            assert!((v - 1.0).abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let bn = BatchNorm2d::new(1, &mut Initializer::new(0));
        let x = Tensor::from_vec(vec![1.0, 3.0], &[2, 1, 1, 1]).unwrap();
        bn.forward(&x, &ForwardCtx::train(0)).unwrap();
        let (m, v) = bn.running_stats();
        assert!((m[0] - 0.2).abs() < 1e-15);
        // unbiased var of {1,3} = 2
        assert!((v[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn layernorm_known_tokens() {
        let x = Tensor::from_vec(vec![5.0, 5.0, 5.0], &[1, 3, 1, 1]).unwrap();
        let y = layernorm_tokens(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), LN_EPS).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));

        let x = Tensor::from_vec(vec![1.0, -1.0], &[1, 2, 1, 1]).unwrap();
        let y = layernorm_tokens(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), LN_EPS).unwrap();
        let s = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((y.data()[0] - s).abs() < 1e-15 && (y.data()[1] + s).abs() < 1e-15);
    }

    #[test]
    fn layernorm_shift_invariant() {
        let x = random(&[2, 4, 3, 3], 5);
        let shift: Vec<f64> = (0..18).map(|i| i as f64 * 0.7 - 3.0).collect();
        // same shift for every channel of a token
        let mut shifted = x.to_vec();
        for b in 0..2 {
            for c in 0..4 {
                for p in 0..9 {
                    shifted[(b * 4 + c) * 9 + p] += shift[b * 9 + p];
                }
            }
        }
        let shifted = Tensor::from_vec(shifted, &[2, 4, 3, 3]).unwrap();
        let (g, b) = (Tensor::ones(&[4]), Tensor::zeros(&[4]));
        let y0 = layernorm_tokens(&x, &g, &b, LN_EPS).unwrap();
        let y1 = layernorm_tokens(&shifted, &g, &b, LN_EPS).unwrap();
        y0.data().iter().zip(y1.data()).for_each(|(a, b)| assert!((a - b).abs() < 1e-10));
    }

    #[test]
    fn channel_mismatch_is_error() {
        let x = Tensor::zeros(&[1, 3, 2, 2]);
        assert!(layernorm_tokens(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), LN_EPS).is_err());
        let bn = BatchNorm2d::new(2, &mut Initializer::new(0));
        assert!(bn.forward(&x, &ForwardCtx::eval()).is_err());
    }

    #[test]
    fn norm_gradients() {
        let x = random(&[2, 3, 3, 3], 6);
        let g = random(&[3], 7);
        let b = random(&[3], 8);
        let w = random(&[2, 3, 3, 3], 9);
        for mode in [Mode::Train, Mode::Eval] {
            let err = grad_check_many(
                |t| {
                    let (y, _) = batchnorm2d(&t[0], &t[1], &t[2], (&[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0]), BN_EPS, mode)?;
                    y.mul(&w)?.sum()
                },
                &[x.clone(), g.clone(), b.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{mode:?} {err}");
        }
        let err = grad_check_many(
            |t| layernorm_tokens(&t[0], &t[1], &t[2], LN_EPS)?.mul(&w)?.sum(),
            &[x, g, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
