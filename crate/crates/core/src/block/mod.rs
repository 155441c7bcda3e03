//! The one-residual Meta Mobile Block: expand (MLP_e), efficient operator 𝓕,
//! shrink (MLP_s), residual. IRB, FFN, MHSA, iRMB and i²RMB are all spec
//! presets over the same forward.

mod operator;

pub use operator::{
    operators, AttentionOp, CascadeOp, DwConv, DwConvOp, EfficientOperator, IdentityOp, OperatorFactory,
    OperatorRegistry, ParallelOp, CASCADE, DWCONV, EW_MHSA, IDENTITY, PARALLEL, SEW_MHSA,
};

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::flops;
use crate::nn::{drop_path, join, Activation, Conv2d, ConvSpec, ForwardCtx, Initializer, Module, Norm, NormKind, NormSpec, ParamKind};
use crate::tensor::Tensor;
use crate::window::{AttentionConfig, AttentionMode, Ordering, WindowSize};

/// Expansion ratio λ, kept exact so widths like 2.5·48 round predictably.
pub type ExpansionRatio = Ratio<u32>;

/// round(λ·C), ties to even.
pub fn expanded_width(ratio: ExpansionRatio, channels: usize) -> usize {
    let num = *ratio.numer() as usize * channels;
    let den = *ratio.denom() as usize;
    let (q, r) = (num / den, num % den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + q % 2,
    }
}

/// Parses a decimal ("2.5") or fraction ("5/2") ratio.
pub fn parse_ratio(s: &str) -> Result<ExpansionRatio> {
    let bad = || Error::config(format!("invalid expansion ratio `{s}`"));
    let s = s.trim();
    let r = if let Some((n, d)) = s.split_once('/') {
        let (n, d): (u32, u32) = (n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?);
        if d == 0 {
            return Err(bad());
        }
        Ratio::new(n, d)
    } else {
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() || !int.bytes().chain(frac.bytes()).all(|b| b.is_ascii_digit()) || frac.len() > 6 {
            return Err(bad());
        }
        let den = 10u32.pow(frac.len() as u32);
        let n: u32 = format!("{int}{frac}").parse().map_err(|_| bad())?;
        Ratio::new(n, den)
    };
    Ok(r)
}

/// The (λ, 𝓕) parameterization of one block plus its norm/activation bindings.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaMobileBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub ratio: ExpansionRatio,
    /// Registry name of 𝓕.
    pub operator: String,
    pub stride: usize,
    /// Depthwise kernel size.
    pub kernel: usize,
    pub attention: Option<AttentionConfig>,
    /// Norm before MLP_e; `None` bypasses it.
    pub norm: Option<NormKind>,
    pub expand_act: Activation,
    pub expand_groups: usize,
    /// BN bound to the depthwise conv.
    pub dw_norm: bool,
    pub dw_act: Activation,
    pub drop_path: f64,
}

impl MetaMobileBlockSpec {
    /// DW-Conv ∘ SEW-MHSA, post-attention with GELU on V, kernel 5.
    pub fn i2rmb(in_channels: usize, out_channels: usize, ratio: ExpansionRatio, stride: usize, head_dim: usize) -> Self {
        MetaMobileBlockSpec {
            in_channels,
            out_channels,
            ratio,
            operator: CASCADE.into(),
            stride,
            kernel: 5,
            attention: Some(AttentionConfig::new(head_dim, AttentionMode::Spanning, Ordering::Post)),
            norm: Some(NormKind::LayernormTokens),
            expand_act: Activation::Gelu,
            expand_groups: 1,
            dw_norm: true,
            dw_act: Activation::Silu,
            drop_path: 0.0,
        }
    }

    /// DW-Conv ∘ EW-MHSA, pre-attention with a head-grouped expansion, kernel 3.
    pub fn irmb(in_channels: usize, out_channels: usize, ratio: ExpansionRatio, stride: usize, head_dim: usize) -> Self {
        MetaMobileBlockSpec {
            kernel: 3,
            attention: Some(AttentionConfig::new(head_dim, AttentionMode::Neighbor, Ordering::Pre)),
            expand_act: Activation::None,
            expand_groups: in_channels / head_dim.max(1),
            ..Self::i2rmb(in_channels, out_channels, ratio, stride, head_dim)
        }
    }

    /// Inverted residual: BN, 1×1 expand + SiLU, DW-Conv + BN + SiLU, 1×1 shrink.
    pub fn irb(in_channels: usize, out_channels: usize, ratio: ExpansionRatio, stride: usize, kernel: usize) -> Self {
        MetaMobileBlockSpec {
            in_channels,
            out_channels,
            ratio,
            operator: DWCONV.into(),
            stride,
            kernel,
            attention: None,
            norm: Some(NormKind::Batchnorm2d),
            expand_act: Activation::Silu,
            expand_groups: 1,
            dw_norm: true,
            dw_act: Activation::Silu,
            drop_path: 0.0,
        }
    }

    /// Transformer feed-forward: LN, 1×1 expand + GELU, 1×1 shrink.
    pub fn ffn(channels: usize, ratio: ExpansionRatio) -> Self {
        MetaMobileBlockSpec {
            operator: IDENTITY.into(),
            norm: Some(NormKind::LayernormTokens),
            expand_act: Activation::Gelu,
            dw_norm: false,
            dw_act: Activation::None,
            ..Self::irb(channels, channels, ratio, 1, 1)
        }
    }

    /// Global MHSA: λ=1, V from MLP_e, output projection from MLP_s.
    pub fn mhsa(channels: usize, head_dim: usize) -> Self {
        let attention = AttentionConfig::new(head_dim, AttentionMode::Neighbor, Ordering::Post)
            .with_window(WindowSize::Full, Default::default());
        MetaMobileBlockSpec {
            operator: EW_MHSA.into(),
            attention: Some(attention),
            expand_act: Activation::None,
            ..Self::ffn(channels, Ratio::from_integer(1))
        }
    }

    /// The same block with attention switched off: IRB form with BN and SiLU.
    pub fn without_attention(&self) -> Self {
        MetaMobileBlockSpec {
            operator: DWCONV.into(),
            attention: None,
            norm: Some(NormKind::Batchnorm2d),
            expand_act: Activation::Silu,
            expand_groups: 1,
            ..self.clone()
        }
    }

    pub fn expanded(&self) -> usize {
        expanded_width(self.ratio, self.in_channels)
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.in_channels == 0 || self.out_channels == 0 {
            return fail("block channels must be positive".into());
        }
        if self.ratio < Ratio::from_integer(1) {
            return fail(format!("expansion ratio {} is below 1", self.ratio));
        }
        if !matches!(self.stride, 1 | 2) {
            return fail(format!("stride {} not in {{1, 2}}", self.stride));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return fail(format!("depthwise kernel {} must be odd", self.kernel));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return fail(format!("drop-path rate {} outside [0, 1)", self.drop_path));
        }
        let e = self.expanded();
        if self.expand_groups == 0 || self.in_channels % self.expand_groups != 0 || e % self.expand_groups != 0 {
            return fail(format!(
                "expansion {}→{e} not divisible into {} groups",
                self.in_channels, self.expand_groups
            ));
        }
        if let Some(cfg) = &self.attention {
            let heads = cfg.heads(self.in_channels)?;
            if e % heads != 0 {
                return fail(format!("expanded width {e} not divisible by {heads} heads"));
            }
            if cfg.ordering == Ordering::Pre && self.expand_groups != heads {
                return fail(format!(
                    "pre-attention needs expansion groups == heads ({} != {heads})",
                    self.expand_groups
                ));
            }
        }
        Ok(())
    }
}

pub struct MetaMobileBlock {
    pub spec: MetaMobileBlockSpec,
    pub norm: Option<Norm>,
    /// MLP_e
    pub expand: Conv2d,
    pub operator: Box<dyn EfficientOperator>,
    /// MLP_s
    pub shrink: Conv2d,
}

impl MetaMobileBlock {
    pub fn new(spec: MetaMobileBlockSpec, init: &mut Initializer) -> Result<Self> {
        Self::with_registry(operators(), spec, init)
    }

    pub fn with_registry(registry: &OperatorRegistry, spec: MetaMobileBlockSpec, init: &mut Initializer) -> Result<Self> {
        spec.validate()?;
        let e = spec.expanded();
        let norm = spec.norm.map(|kind| {
            let ns = match kind {
                NormKind::Batchnorm2d => NormSpec::batchnorm(spec.in_channels),
                NormKind::LayernormTokens => NormSpec::layernorm(spec.in_channels),
            };
            Norm::new(ns, init)
        });
        let expand = Conv2d::new(ConvSpec::pointwise(spec.in_channels, e, spec.expand_groups), init)?;
        let operator = registry.build(&spec, init)?;
        let shrink = Conv2d::new(ConvSpec::pointwise(e, spec.out_channels, 1), init)?;
        Ok(MetaMobileBlock {
            spec,
            norm,
            expand,
            operator,
            shrink,
        })
    }

    pub fn has_attention(&self) -> bool {
        self.operator.attention().is_some()
    }

    /// Flop-scope and cost-row names for the projections: both fold into the
    /// attention row when attention is on.
    pub fn projection_scopes(&self) -> (&'static str, &'static str) {
        if self.has_attention() {
            ("attn", "attn")
        } else {
            ("expand", "shrink")
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx, path: &str) -> Result<Tensor> {
        let xn = match &self.norm {
            Some(n) => n.forward(x, ctx)?,
            None => x.clone(),
        };
        let (expand_scope, shrink_scope) = self.projection_scopes();
        let expand_path = join(path, expand_scope);
        let expand = |t: &Tensor| -> Result<Tensor> {
            let _scope = flops::scope(expand_path.as_str());
            self.spec.expand_act.apply(&self.expand.forward(t)?)
        };
        let xf = self.operator.forward(&xn, &expand, ctx, path)?;
        let xs = {
            let _scope = flops::scope(join(path, shrink_scope));
            self.shrink.forward(&xf)?
        };
        if self.spec.has_residual() {
            x.add(&drop_path(&xs, self.spec.drop_path, ctx)?)
        } else {
            Ok(xs)
        }
    }

    pub fn param_count(&self) -> usize {
        crate::nn::count_learnable(self)
    }
}

impl Module for MetaMobileBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        if let Some(n) = &self.norm {
            n.visit(&join(prefix, "norm"), f);
        }
        self.expand.visit(&join(prefix, "expand"), f);
        self.operator.visit(prefix, f);
        self.shrink.visit(&join(prefix, "shrink"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        if let Some(n) = &mut self.norm {
            n.visit_mut(&join(prefix, "norm"), f);
        }
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.operator.visit_mut(prefix, f);
        self.shrink.visit_mut(&join(prefix, "shrink"), f);
    }
}

#[cfg(test)]
mod tests;
