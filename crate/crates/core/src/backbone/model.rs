use super::BackboneConfig;
use crate::block::MetaMobileBlock;
use crate::error::{Error, Result};
use crate::flops;
use crate::nn::{global_avg_pool, join, BatchNorm2d, Conv2d, ConvSpec, ForwardCtx, Initializer, Linear, Module, ParamKind};
use crate::tensor::Tensor;
use crate::window::WindowMode;

/// Output stride of the deepest stage.
pub const OUTPUT_STRIDE: usize = 32;

/// 3×3 s2 conv (BN, SiLU) → 3×3 s2 depthwise (BN, SiLU) → 1×1 to stage-1 width (BN).
pub struct Stem {
    pub conv: Conv2d,
    pub norm1: BatchNorm2d,
    pub dw: Conv2d,
    pub norm2: BatchNorm2d,
    pub pw: Conv2d,
    pub norm3: BatchNorm2d,
}

impl Stem {
    pub fn new(width: usize, out: usize, init: &mut Initializer) -> Result<Self> {
        Ok(Stem {
            conv: Conv2d::new(ConvSpec::new(3, width, 3, 2, 1), init)?,
            norm1: BatchNorm2d::new(width, init),
            dw: Conv2d::new(ConvSpec::depthwise(width, 3, 2), init)?,
            norm2: BatchNorm2d::new(width, init),
            pw: Conv2d::new(ConvSpec::pointwise(width, out, 1), init)?,
            norm3: BatchNorm2d::new(out, init),
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let _scope = flops::scope("stem");
        let x = self.norm1.forward(&self.conv.forward(x)?, ctx)?.silu()?;
        let x = self.norm2.forward(&self.dw.forward(&x)?, ctx)?.silu()?;
        self.norm3.forward(&self.pw.forward(&x)?, ctx)
    }
}

impl Module for Stem {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.dw.visit(&join(prefix, "dw"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.pw.visit(&join(prefix, "pw"), f);
        self.norm3.visit(&join(prefix, "norm3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.dw.visit_mut(&join(prefix, "dw"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.pw.visit_mut(&join(prefix, "pw"), f);
        self.norm3.visit_mut(&join(prefix, "norm3"), f);
    }
}

/// Four-stage i²RMB network with a pooled linear classifier.
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: Stem,
    pub stages: Vec<Vec<(String, MetaMobileBlock)>>,
    pub norm: BatchNorm2d,
    pub head: Linear,
}

impl Backbone {
    /// Deterministic construction: identical seeds give identical weights.
    pub fn build(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let dims = config.dims();
        let stem = Stem::new(config.stem.width, dims[0], &mut init)?;
        let mut stages: Vec<Vec<(String, MetaMobileBlock)>> = (0..4).map(|_| Vec::new()).collect();
        for plan in config.plan()? {
            let block = MetaMobileBlock::new(plan.spec, &mut init)?;
            stages[plan.stage - 1].push((plan.path, block));
        }
        let norm = BatchNorm2d::new(dims[3], &mut init);
        let head = Linear::new(dims[3], config.head.classes, &mut init);
        Ok(Backbone {
            config: config.clone(),
            stem,
            stages,
            norm,
            head,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::geometry(format!("expected 3 input channels, got {c}")));
        }
        if self.config.window_mode == WindowMode::Strict && (h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0) {
            return Err(Error::geometry(format!(
                "input {h}x{w} not divisible by {OUTPUT_STRIDE} (strict mode)"
            )));
        }
        Ok(())
    }

    /// Stage outputs at strides 4, 8, 16, 32.
    pub fn forward_features(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut x = self.stem.forward(x, ctx)?;
        let mut feats = Vec::with_capacity(4);
        for stage in &self.stages {
            for (path, block) in stage {
                x = block.forward(&x, ctx, path)?;
            }
            feats.push(x.clone());
        }
        Ok(feats)
    }

    pub fn classify(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        Ok(self.classify_features(x, ctx)?.1)
    }

    /// Stage outputs together with the logits.
    pub fn classify_features(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<(Vec<Tensor>, Tensor)> {
        let feats = self.forward_features(x, ctx)?;
        let last = feats.last().ok_or_else(|| Error::geometry("no stages"))?;
        let _scope = flops::scope("head");
        let pooled = global_avg_pool(&self.norm.forward(last, ctx)?)?;
        let logits = self.head.forward(&pooled)?;
        Ok((feats, logits))
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, &MetaMobileBlock)> {
        self.stages.iter().flatten().map(|(p, b)| (p.as_str(), b))
    }

    pub fn param_count(&self) -> usize {
        crate::nn::count_learnable(self)
    }
}

impl Module for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (path, block) in self.stages.iter().flatten() {
            block.visit(&join(prefix, path), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (path, block) in self.stages.iter_mut().flatten() {
            block.visit_mut(&join(prefix, path), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
