use super::ForwardCtx;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stochastic depth on a residual branch: in train mode each sample's branch
/// is zeroed with probability `rate` and survivors are scaled by 1/(1−rate).
pub fn drop_path(x: &Tensor, rate: f64, ctx: &ForwardCtx) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("drop-path rate {rate} outside [0, 1)")));
    }
    if !ctx.is_train() || rate == 0.0 {
        return Ok(x.clone());
    }
    let n = *x.shape().first().ok_or_else(|| Error::geometry("drop_path on rank-0 tensor"))?;
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..n).map(|_| if ctx.bernoulli(keep) { 1.0 / keep } else { 0.0 }).collect();
    let mut mask_shape = vec![1; x.rank()];
    mask_shape[0] = n;
    x.mul(&Tensor::from_vec(mask, &mask_shape)?)
}

#[derive(Debug, Clone, Copy)]
pub struct DropPath {
    pub rate: f64,
}

impl DropPath {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("drop-path rate {rate} outside [0, 1)")));
        }
        Ok(DropPath { rate })
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        drop_path(x, self.rate, ctx)
    }
}
