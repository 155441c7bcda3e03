//! Analytic parameter / FLOP / maximum-path-length accounting, per-layer
//! reports for built configurations, and a pixel-reachability analyzer.
//!
//! Symbols: C channels, L = H·W tokens, l = h·w window tokens, k kernel,
//! G groups, W map side, w window side. FLOPs are 2 per multiply-accumulate.

mod reach;
mod report;

pub use reach::{layers_to_full, parse_stack, steps_to_csv, ReachLayer, ReachStep, Reachability};
pub use report::{compare_trace, report_model, trace_model, AttentionCost, CostReport, CostRow, TraceCheck};

use std::fmt;

/// Closed-form cost of one operator, symbols bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostFormula {
    /// Global attention, λ=1, with output projection.
    Mhsa { c: u64, tokens: u64 },
    /// Window attention, λ=1.
    WMhsa { c: u64, tokens: u64, window: u64 },
    /// Spanning window attention: W-MHSA plus one more map/product pair.
    SewMhsa { c: u64, tokens: u64, window: u64 },
    Conv { c_in: u64, c_out: u64, k: u64, groups: u64, tokens_out: u64 },
    DwConv { c: u64, k: u64, tokens_out: u64 },
    Norm { c: u64 },
    Linear { c_in: u64, c_out: u64 },
}

impl CostFormula {
    pub fn kind(&self) -> &'static str {
        match self {
            CostFormula::Mhsa { .. } => "mhsa",
            CostFormula::WMhsa { .. } => "w_mhsa",
            CostFormula::SewMhsa { .. } => "sew_mhsa",
            CostFormula::Conv { .. } => "conv",
            CostFormula::DwConv { .. } => "dwconv",
            CostFormula::Norm { .. } => "norm",
            CostFormula::Linear { .. } => "linear",
        }
    }
}

/// Learnable scalars, bias included.
pub fn params_of(f: &CostFormula) -> u64 {
    match *f {
        CostFormula::Mhsa { c, .. } | CostFormula::WMhsa { c, .. } | CostFormula::SewMhsa { c, .. } => 4 * (c + 1) * c,
        CostFormula::Conv { c_in, c_out, k, groups, .. } => (c_in * k * k / groups + 1) * c_out,
        CostFormula::DwConv { c, k, .. } => (k * k + 1) * c,
        CostFormula::Norm { c } => 2 * c,
        CostFormula::Linear { c_in, c_out } => (c_in + 1) * c_out,
    }
}

/// FLOPs per image, bias adds excluded.
pub fn flops_of(f: &CostFormula) -> u64 {
    match *f {
        CostFormula::Mhsa { c, tokens: l } => 8 * c * c * l + 4 * c * l * l + 3 * l * l,
        CostFormula::WMhsa { c, tokens: l, window: w } => 8 * c * c * l + 4 * c * l * w + 3 * l * w,
        CostFormula::SewMhsa { c, tokens: l, window: w } => 8 * c * c * l + 2 * (4 * c * l * w + 3 * l * w),
        CostFormula::Conv { c_in, c_out, k, groups, tokens_out } => 2 * c_in * k * k / groups * tokens_out * c_out,
        CostFormula::DwConv { c, k, tokens_out } => 2 * k * k * tokens_out * c,
        CostFormula::Norm { .. } => 0,
        CostFormula::Linear { c_in, c_out } => 2 * c_in * c_out,
    }
}

/// Maximum path length class.
#[derive(Debug, Clone, PartialEq)]
pub enum MplClass {
    /// O(1): every token sees every token.
    Constant,
    /// O(Inf): no path between windows.
    Infinite,
    /// O(expr), with the expression evaluated.
    Layers { expr: &'static str, value: f64 },
}

impl MplClass {
    /// Layers needed, `None` for O(Inf).
    pub fn layers(&self) -> Option<f64> {
        match self {
            MplClass::Constant => Some(1.0),
            MplClass::Infinite => None,
            MplClass::Layers { value, .. } => Some(*value),
        }
    }
}

impl fmt::Display for MplClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MplClass::Constant => f.write_str("O(1)"),
            MplClass::Infinite => f.write_str("O(Inf)"),
            MplClass::Layers { expr, value } => write!(f, "O({expr})={}", fmt_layers(*value)),
        }
    }
}

fn fmt_layers(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MplKind {
    Mhsa,
    WMhsa,
    Conv { k: u64 },
    /// DW-Conv cascaded after window attention.
    Irmb { k: u64, window_side: u64 },
}

/// MPL on a map of side `map_side` (W).
pub fn mpl_of(kind: MplKind, map_side: u64) -> MplClass {
    let w = map_side as f64;
    match kind {
        MplKind::Mhsa => MplClass::Constant,
        MplKind::WMhsa => MplClass::Infinite,
        MplKind::Conv { k } if k <= 1 => MplClass::Infinite,
        MplKind::Conv { k } => MplClass::Layers {
            expr: "2W/(k-1)",
            value: 2.0 * w / (k as f64 - 1.0),
        },
        MplKind::Irmb { k, window_side } => MplClass::Layers {
            expr: "2W/(k-1+2w)",
            value: 2.0 * w / (k as f64 - 1.0 + 2.0 * window_side as f64),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_params() {
        assert_eq!(params_of(&CostFormula::DwConv { c: 48, k: 5, tokens_out: 1 }), 1248);
        let conv = CostFormula::Conv { c_in: 64, c_out: 64, k: 3, groups: 1, tokens_out: 1 };
        assert_eq!(params_of(&conv), 36_928);
        assert_eq!(params_of(&CostFormula::Mhsa { c: 64, tokens: 1 }), 16_640);
        assert_eq!(params_of(&CostFormula::Norm { c: 10 }), 20);
        assert_eq!(params_of(&CostFormula::Linear { c_in: 288, c_out: 1000 }), 289_000);
    }

    #[test]
    fn table_flops() {
        assert_eq!(flops_of(&CostFormula::DwConv { c: 48, k: 5, tokens_out: 3136 }), 7_526_400);
        assert_eq!(flops_of(&CostFormula::WMhsa { c: 160, tokens: 196, window: 49 }), 46_316_172);
        for (c, l) in [(64, 49), (160, 196)] {
            assert_eq!(
                flops_of(&CostFormula::Mhsa { c, tokens: l }),
                flops_of(&CostFormula::WMhsa { c, tokens: l, window: l })
            );
        }
        let w = flops_of(&CostFormula::WMhsa { c: 160, tokens: 196, window: 49 });
        let s = flops_of(&CostFormula::SewMhsa { c: 160, tokens: 196, window: 49 });
        assert!(s > w && (s - w) * 5 < w);
        let conv = CostFormula::Conv { c_in: 4, c_out: 4, k: 1, groups: 1, tokens_out: 4 };
        assert_eq!(flops_of(&conv), 128);
    }

    #[test]
    fn mpl_classes() {
        assert_eq!(mpl_of(MplKind::Mhsa, 56), MplClass::Constant);
        assert_eq!(mpl_of(MplKind::WMhsa, 56), MplClass::Infinite);
        assert_eq!(mpl_of(MplKind::Irmb { k: 3, window_side: 7 }, 56).layers(), Some(7.0));
        assert_eq!(mpl_of(MplKind::Conv { k: 3 }, 56).layers(), Some(56.0));
        assert_eq!(mpl_of(MplKind::Conv { k: 5 }, 56).to_string(), "O(2W/(k-1))=28");
        assert_eq!(MplClass::Infinite.to_string(), "O(Inf)");
    }
}
