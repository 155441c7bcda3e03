use super::{partitions, AttentionConfig, AttentionMode, Ordering, PartitionStrategy, WindowGeometry};
use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, ConvSpec, Initializer, Module, ParamKind};
use crate::tensor::Tensor;

/// Windowed multi-head self-attention with channel-unexpanded Q and K.
///
/// The value stream comes from the caller's expansion projection, so V may be
/// wider than Q/K. Spanning mode runs the neighbor and distant partitions
/// with the same projections and averages the two outputs.
#[derive(Clone)]
pub struct WindowAttention {
    pub cfg: AttentionConfig,
    pub channels: usize,
    /// 1×1 projection C → 2C producing Q then K.
    pub qk: Conv2d,
}

impl WindowAttention {
    pub fn new(channels: usize, cfg: AttentionConfig, init: &mut Initializer) -> Result<Self> {
        cfg.heads(channels)?;
        Ok(WindowAttention {
            cfg,
            channels,
            qk: Conv2d::new(ConvSpec::pointwise(channels, 2 * channels, 1), init)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.channels / self.cfg.head_dim
    }

    pub fn geometry(&self, height: usize, width: usize) -> Result<WindowGeometry> {
        WindowGeometry::resolve(self.cfg.window, self.cfg.window_mode, height, width)
    }

    pub fn project_qk(&self, xn: &Tensor) -> Result<(Tensor, Tensor)> {
        let qk = self.qk.forward(xn)?;
        Ok((qk.narrow(1, 0, self.channels)?, qk.narrow(1, self.channels, self.channels)?))
    }

    /// Attention over `xn` with `value` as the expansion projection, in the
    /// configured mode and ordering.
    pub fn forward(&self, xn: &Tensor, value: &dyn Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
        self.forward_mode(xn, value, self.cfg.mode)
    }

    pub fn forward_mode(
        &self,
        xn: &Tensor,
        value: &dyn Fn(&Tensor) -> Result<Tensor>,
        mode: AttentionMode,
    ) -> Result<Tensor> {
        let (q, k) = self.project_qk(xn)?;
        match self.cfg.ordering {
            Ordering::Post => self.attend(&q, &k, &value(xn)?, mode),
            Ordering::Pre => value(&self.attend(&q, &k, xn, mode)?),
        }
    }

    /// Applies the attention maps of `q`,`k` to `v` ([B,E,H,W], E divisible by heads).
    pub fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor, mode: AttentionMode) -> Result<Tensor> {
        let (b, c, height, width) = q.dims4()?;
        let (vb, e, vh, vw) = v.dims4()?;
        if k.shape() != q.shape() || c != self.channels || (vb, vh, vw) != (b, height, width) {
            return Err(Error::ShapeMismatch {
                op: "window_attention",
                lhs: q.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        if e % self.heads() != 0 {
            return Err(Error::geometry(format!("value width {e} not divisible by {} heads", self.heads())));
        }
        let g = self.geometry(height, width)?;
        let pad = |t: &Tensor| t.pad_bottom_right(g.padded_height - height, g.padded_width - width);
        let (q, k, v) = (pad(q)?, pad(k)?, pad(v)?);

        let names = mode.strategies();
        let mut fused: Option<Tensor> = None;
        for name in names {
            let s = partitions().get(name)?;
            let out = self.branch(&*s, &g, &q, &k, &v)?;
            fused = Some(match fused {
                None => out,
                Some(acc) => acc.add(&out)?,
            });
        }
        let mut out = fused.ok_or_else(|| Error::geometry("attention mode without partitions"))?;
        if names.len() > 1 {
            out = out.scale(1.0 / names.len() as f64)?;
        }
        if g.needs_padding() {
            out = out.narrow(2, 0, height)?.narrow(3, 0, width)?;
        }
        Ok(out)
    }

    /// Softmax maps [B·N·heads, P, P] for one partition of padded q, k.
    fn maps(&self, s: &dyn PartitionStrategy, g: &WindowGeometry, q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let (heads, hd, p) = (self.heads(), self.cfg.head_dim, g.patch_len());
        let qw = s.partition(q, g)?;
        let bn = qw.shape()[0];
        let qw = qw.reshape(&[bn * heads, hd, p])?;
        let kw = s.partition(k, g)?.reshape(&[bn * heads, hd, p])?;
        qw.transpose_last()?
            .matmul_batched(&kw)?
            .scale(1.0 / (hd as f64).sqrt())?
            .softmax(2)
    }

    fn branch(
        &self,
        s: &dyn PartitionStrategy,
        g: &WindowGeometry,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
    ) -> Result<Tensor> {
        let m = self.maps(s, g, q, k)?;
        let (heads, p, e) = (self.heads(), g.patch_len(), v.shape()[1]);
        let vw = s.partition(v, g)?;
        let bn = vw.shape()[0];
        let out = vw.reshape(&[bn * heads, e / heads, p])?.matmul_batched(&m.transpose_last()?)?;
        s.reverse(&out.reshape(&[bn, e, p])?, g)
    }

    /// Per-partition attention maps of `xn`, each [B·N·heads, P, P].
    pub fn attention_maps(&self, xn: &Tensor) -> Result<Vec<(&'static str, Tensor)>> {
        let (q, k) = self.project_qk(xn)?;
        let (_, _, height, width) = q.dims4()?;
        let g = self.geometry(height, width)?;
        let pad = |t: &Tensor| t.pad_bottom_right(g.padded_height - height, g.padded_width - width);
        let (q, k) = (pad(&q)?, pad(&k)?);
        self.cfg
            .mode
            .strategies()
            .iter()
            .map(|name| {
                let s = partitions().get(name)?;
                Ok((s.name(), self.maps(&*s, &g, &q, &k)?))
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.qk.spec.param_count()
    }
}

impl Module for WindowAttention {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.qk.visit(&join(prefix, "qk"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.qk.visit_mut(&join(prefix, "qk"), f);
    }
}

/// Expanded-window MHSA over contiguous neighbor windows.
pub fn ew_mhsa(x: &Tensor, attn: &WindowAttention, value: &dyn Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    attn.forward_mode(x, value, AttentionMode::Neighbor)
}

/// Spanning MHSA: neighbor and distant windows with shared projections.
pub fn sew_mhsa(x: &Tensor, attn: &WindowAttention, value: &dyn Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    attn.forward_mode(x, value, AttentionMode::Spanning)
}
