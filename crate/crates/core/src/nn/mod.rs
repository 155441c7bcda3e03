//! Neural primitives: convolution, normalization, stochastic depth, pooling and
//! the linear head, plus the parameter-visiting and initialization plumbing
//! shared by every layer.

mod conv;
mod drop_path;
mod linear;
mod norm;

pub use conv::{conv2d, conv2d_direct, Conv2d, ConvSpec};
pub use drop_path::{drop_path, DropPath};
pub use linear::{global_avg_pool, linear, Linear};
pub use norm::{batchnorm2d, layernorm_tokens, BatchNorm2d, LayerNormTokens, Norm, NormKind, NormSpec};

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Per-call forward state: train/eval switch and the stochastic-depth RNG.
pub struct ForwardCtx {
    pub mode: Mode,
    rng: RefCell<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0)
    }

    pub fn train(seed: u64) -> Self {
        Self::new(Mode::Train, seed)
    }

    pub fn new(mode: Mode, seed: u64) -> Self {
        ForwardCtx {
            mode,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub(crate) fn bernoulli(&self, p_keep: f64) -> bool {
        self.rng.borrow_mut().gen_bool(p_keep)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Silu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Activation::None => Ok(x.clone()),
            Activation::Silu => x.silu(),
            Activation::Gelu => x.gelu(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained scalars, counted as model parameters.
    Learnable,
    /// State carried in checkpoints but not trained (running statistics).
    Buffer,
}

/// Anything holding named tensors.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Number of learnable scalars.
pub fn count_learnable(m: &dyn Module) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, t, kind| {
        if kind == ParamKind::Learnable {
            n += t.numel();
        }
    });
    n
}

/// Every named tensor, learnable and buffer, in visiting order.
pub fn named_tensors(m: &dyn Module) -> Vec<(String, Tensor, ParamKind)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t, kind| out.push((name.to_string(), t.clone(), kind)));
    out
}

/// Seeded weight initializer.
pub struct Initializer {
    rng: ChaCha8Rng,
}

pub const PROJECTION_STD: f64 = 0.02;

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std) truncated to ±2 std.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| loop {
                let z: f64 = self.rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        Tensor::param(data, shape).expect("finite init")
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Tensor {
        Tensor::full(shape, value).requires_grad(true)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::param(data, shape).expect("finite init")
    }
}
