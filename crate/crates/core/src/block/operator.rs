use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use super::MetaMobileBlockSpec;
use crate::error::{Error, Result};
use crate::flops;
use crate::nn::{join, Activation, BatchNorm2d, Conv2d, ConvSpec, ForwardCtx, Initializer, Module, ParamKind};
use crate::tensor::Tensor;
use crate::window::{AttentionMode, Ordering, WindowAttention};

pub const IDENTITY: &str = "identity";
pub const DWCONV: &str = "dwconv";
pub const EW_MHSA: &str = "ew_mhsa";
pub const SEW_MHSA: &str = "sew_mhsa";
pub const CASCADE: &str = "cascade";
pub const PARALLEL: &str = "parallel";

/// The efficient operator 𝓕 applied to the expanded stream.
pub trait EfficientOperator: Module + Send + Sync {
    fn name(&self) -> &'static str;

    /// `xn` is the normalized block input; `expand` applies MLP_e (and its
    /// activation). Flops are attributed to scopes under `path`.
    fn forward(
        &self,
        xn: &Tensor,
        expand: &dyn Fn(&Tensor) -> Result<Tensor>,
        ctx: &ForwardCtx,
        path: &str,
    ) -> Result<Tensor>;

    fn attention(&self) -> Option<&WindowAttention> {
        None
    }

    /// Channels passed through the depthwise conv, if any.
    fn dw_channels(&self) -> Option<usize> {
        None
    }
}

pub type OperatorFactory = dyn Fn(&MetaMobileBlockSpec, &mut Initializer) -> Result<Box<dyn EfficientOperator>> + Send + Sync;

/// Name-keyed constructors for efficient operators.
#[derive(Clone, Default)]
pub struct OperatorRegistry {
    factories: BTreeMap<String, Arc<OperatorFactory>>,
}

impl OperatorRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(IDENTITY, |_, _| Ok(Box::new(IdentityOp)));
        r.register(DWCONV, |s, init| Ok(Box::new(DwConvOp(DwConv::new(s, s.expanded(), init)?))));
        r.register(EW_MHSA, |s, init| AttentionOp::build(s, init, false).map(|o| Box::new(o) as _));
        r.register(SEW_MHSA, |s, init| AttentionOp::build(s, init, true).map(|o| Box::new(o) as _));
        r.register(CASCADE, |s, init| CascadeOp::build(s, init).map(|o| Box::new(o) as _));
        r.register(PARALLEL, |s, init| ParallelOp::build(s, init).map(|o| Box::new(o) as _));
        r
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&MetaMobileBlockSpec, &mut Initializer) -> Result<Box<dyn EfficientOperator>> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Arc::new(factory));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, spec: &MetaMobileBlockSpec, init: &mut Initializer) -> Result<Box<dyn EfficientOperator>> {
        let factory = self.factories.get(&spec.operator).ok_or_else(|| Error::Unknown {
            kind: "operator",
            name: spec.operator.clone(),
        })?;
        factory(spec, init)
    }
}

/// The built-in operators.
pub fn operators() -> &'static OperatorRegistry {
    static REGISTRY: OnceLock<OperatorRegistry> = OnceLock::new();
    REGISTRY.get_or_init(OperatorRegistry::with_defaults)
}

/// Depthwise k×k conv with its bound BN and activation; carries the block stride.
pub struct DwConv {
    pub conv: Conv2d,
    pub norm: Option<BatchNorm2d>,
    pub act: Activation,
}

impl DwConv {
    pub fn new(spec: &MetaMobileBlockSpec, channels: usize, init: &mut Initializer) -> Result<Self> {
        Ok(DwConv {
            conv: Conv2d::new(ConvSpec::depthwise(channels, spec.kernel, spec.stride), init)?,
            norm: spec.dw_norm.then(|| BatchNorm2d::new(channels, init)),
            act: spec.dw_act,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx, path: &str) -> Result<Tensor> {
        let _scope = flops::scope(join(path, "dwconv"));
        let mut y = self.conv.forward(x)?;
        if let Some(n) = &self.norm {
            y = n.forward(&y, ctx)?;
        }
        self.act.apply(&y)
    }
}

impl Module for DwConv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.conv.visit(&join(prefix, "conv"), f);
        if let Some(n) = &self.norm {
            n.visit(&join(prefix, "norm"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        if let Some(n) = &mut self.norm {
            n.visit_mut(&join(prefix, "norm"), f);
        }
    }
}

fn attention_of(spec: &MetaMobileBlockSpec, init: &mut Initializer) -> Result<WindowAttention> {
    let cfg = spec
        .attention
        .ok_or_else(|| Error::config(format!("operator `{}` needs an attention config", spec.operator)))?;
    WindowAttention::new(spec.in_channels, cfg, init)
}

fn attend(
    attn: &WindowAttention,
    xn: &Tensor,
    expand: &dyn Fn(&Tensor) -> Result<Tensor>,
    path: &str,
) -> Result<Tensor> {
    let _scope = flops::scope(join(path, "attn"));
    attn.forward(xn, expand)
}

pub struct IdentityOp;

impl Module for IdentityOp {
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Tensor, ParamKind)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {}
}

impl EfficientOperator for IdentityOp {
    fn name(&self) -> &'static str {
        IDENTITY
    }

    fn forward(&self, xn: &Tensor, expand: &dyn Fn(&Tensor) -> Result<Tensor>, _: &ForwardCtx, _: &str) -> Result<Tensor> {
        expand(xn)
    }
}

pub struct DwConvOp(pub DwConv);

impl Module for DwConvOp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.0.visit(&join(prefix, "dw"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.0.visit_mut(&join(prefix, "dw"), f);
    }
}

impl EfficientOperator for DwConvOp {
    fn name(&self) -> &'static str {
        DWCONV
    }

    fn forward(&self, xn: &Tensor, expand: &dyn Fn(&Tensor) -> Result<Tensor>, ctx: &ForwardCtx, path: &str) -> Result<Tensor> {
        self.0.forward(&expand(xn)?, ctx, path)
    }

    fn dw_channels(&self) -> Option<usize> {
        Some(self.0.conv.spec.in_channels)
    }
}

/// Attention alone (`ew_mhsa` or `sew_mhsa`).
pub struct AttentionOp {
    pub attn: WindowAttention,
    spanning: bool,
}

impl AttentionOp {
    fn build(spec: &MetaMobileBlockSpec, init: &mut Initializer, spanning: bool) -> Result<Self> {
        let attn = attention_of(spec, init)?;
        if (attn.cfg.mode == AttentionMode::Spanning) != spanning {
            return Err(Error::config(format!(
                "operator `{}` does not accept attention mode {:?}",
                spec.operator, attn.cfg.mode
            )));
        }
        if spec.stride != 1 {
            return Err(Error::config(format!("operator `{}` cannot downsample", spec.operator)));
        }
        Ok(AttentionOp { attn, spanning })
    }
}

impl Module for AttentionOp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.attn.visit(&join(prefix, "attn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
    }
}

impl EfficientOperator for AttentionOp {
    fn name(&self) -> &'static str {
        if self.spanning {
            SEW_MHSA
        } else {
            EW_MHSA
        }
    }

    fn forward(&self, xn: &Tensor, expand: &dyn Fn(&Tensor) -> Result<Tensor>, _: &ForwardCtx, path: &str) -> Result<Tensor> {
        attend(&self.attn, xn, expand, path)
    }

    fn attention(&self) -> Option<&WindowAttention> {
        Some(&self.attn)
    }
}

/// DW-Conv ∘ attention; plain DW-Conv when attention is off.
pub struct CascadeOp {
    pub attn: Option<WindowAttention>,
    pub dw: DwConv,
}

impl CascadeOp {
    fn build(spec: &MetaMobileBlockSpec, init: &mut Initializer) -> Result<Self> {
        let attn = spec.attention.map(|_| attention_of(spec, init)).transpose()?;
        Ok(CascadeOp {
            attn,
            dw: DwConv::new(spec, spec.expanded(), init)?,
        })
    }
}

impl Module for CascadeOp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        if let Some(a) = &self.attn {
            a.visit(&join(prefix, "attn"), f);
        }
        self.dw.visit(&join(prefix, "dw"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        if let Some(a) = &mut self.attn {
            a.visit_mut(&join(prefix, "attn"), f);
        }
        self.dw.visit_mut(&join(prefix, "dw"), f);
    }
}

impl EfficientOperator for CascadeOp {
    fn name(&self) -> &'static str {
        CASCADE
    }

    fn forward(&self, xn: &Tensor, expand: &dyn Fn(&Tensor) -> Result<Tensor>, ctx: &ForwardCtx, path: &str) -> Result<Tensor> {
        let mixed = match &self.attn {
            Some(a) => attend(a, xn, expand, path)?,
            None => expand(xn)?,
        };
        self.dw.forward(&mixed, ctx, path)
    }

    fn attention(&self) -> Option<&WindowAttention> {
        self.attn.as_ref()
    }

    fn dw_channels(&self) -> Option<usize> {
        Some(self.dw.conv.spec.in_channels)
    }
}

/// Expanded channels split in half: DW-Conv on the first, attention on the second.
pub struct ParallelOp {
    pub attn: WindowAttention,
    pub dw: DwConv,
    half: usize,
}

impl ParallelOp {
    fn build(spec: &MetaMobileBlockSpec, init: &mut Initializer) -> Result<Self> {
        let e = spec.expanded();
        if e % 2 != 0 {
            return Err(Error::config(format!("parallel layout needs an even expanded width, got {e}")));
        }
        if spec.stride != 1 {
            return Err(Error::config("parallel layout cannot downsample"));
        }
        let attn = attention_of(spec, init)?;
        Ok(ParallelOp {
            attn,
            dw: DwConv::new(spec, e / 2, init)?,
            half: e / 2,
        })
    }
}

impl Module for ParallelOp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.dw.visit(&join(prefix, "dw"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.dw.visit_mut(&join(prefix, "dw"), f);
    }
}

impl EfficientOperator for ParallelOp {
    fn name(&self) -> &'static str {
        PARALLEL
    }

    fn forward(&self, xn: &Tensor, expand: &dyn Fn(&Tensor) -> Result<Tensor>, ctx: &ForwardCtx, path: &str) -> Result<Tensor> {
        let h = self.half;
        let xe = expand(xn)?;
        let local = self.dw.forward(&xe.narrow(1, 0, h)?, ctx, path)?;
        let global = match self.attn.cfg.ordering {
            Ordering::Post => {
                let v = xe.narrow(1, h, h)?;
                attend(&self.attn, xn, &|_| Ok(v.clone()), path)?
            }
            Ordering::Pre => attend(&self.attn, xn, &|t| expand(t)?.narrow(1, h, h), path)?,
        };
        Tensor::cat(&[local, global], 1)
    }

    fn attention(&self) -> Option<&WindowAttention> {
        Some(&self.attn)
    }

    fn dw_channels(&self) -> Option<usize> {
        Some(self.half)
    }
}
