use std::collections::BTreeMap;

use super::reach::{layers_to_full, ReachLayer};
use super::{flops_of, mpl_of, params_of, CostFormula, MplKind};
use crate::backbone::{Backbone, BackboneConfig, BlockPlan};
use crate::block::{CASCADE, DWCONV, PARALLEL};
use crate::error::Result;
use crate::flops::{self, FlopTrace};
use crate::nn::ForwardCtx;
use crate::tensor::{no_grad, Tensor};
use crate::window::{AttentionMode, Ordering, WindowGeometry};

/// Repetitions tried before a reachability count is reported as unbounded.
const REACH_CAP: usize = 64;

/// Attention row of a block: Q/K projection, expansion, window products,
/// softmax and the shrink projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionCost {
    pub c: u64,
    /// Expanded width E.
    pub e: u64,
    /// Width of the attended value.
    pub v: u64,
    pub c_out: u64,
    pub groups: u64,
    pub heads: u64,
    /// Tokens L of the map.
    pub tokens: u64,
    /// Tokens after window padding.
    pub padded_tokens: u64,
    /// Window tokens l.
    pub window: u64,
    /// Partitions per layer: 1, or 2 for spanning.
    pub branches: u64,
    /// Times the expansion runs.
    pub expansions: u64,
}

impl AttentionCost {
    pub fn params(&self) -> u64 {
        let (c, e) = (self.c, self.e);
        2 * (c + 1) * c + (c / self.groups + 1) * e + (e + 1) * self.c_out
    }

    pub fn flops(&self) -> u64 {
        let (c, e, l) = (self.c, self.e, self.tokens);
        let (lp, w) = (self.padded_tokens, self.window);
        let products = self.branches * (2 * c * lp * w + 2 * self.v * lp * w + 3 * self.heads * lp * w);
        4 * c * c * l + self.expansions * 2 * (c / self.groups) * e * l + products + 2 * e * self.c_out * l
    }

    pub fn bias_adds(&self) -> u64 {
        (2 * self.c + self.expansions * self.e + self.c_out) * self.tokens
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
    pub bias_adds: u64,
    /// MPL class or reachability count; `-` for non-mixing layers.
    pub mpl: String,
}

impl CostRow {
    fn formula(name: impl Into<String>, f: CostFormula, bias_adds: u64, mpl: String) -> Self {
        CostRow {
            name: name.into(),
            kind: f.kind().into(),
            params: params_of(&f),
            flops: flops_of(&f),
            bias_adds,
            mpl,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    /// Multiply-accumulates: half the FLOPs.
    pub fn total_macs(&self) -> u64 {
        self.total_flops() / 2
    }

    pub fn total_bias_adds(&self) -> u64 {
        self.rows.iter().map(|r| r.bias_adds).sum()
    }

    pub fn row(&self, name: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// FLOPs of `name` and every row nested under it.
    pub fn scope_flops(&self, name: &str) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.name == name || r.name.strip_prefix(name).is_some_and(|s| s.starts_with('.')))
            .map(|r| r.flops)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,kind,params,flops,mpl\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.name, r.kind, r.params, r.flops, r.mpl));
        }
        s.push_str(&format!("TOTAL,,{},{},\n", self.total_params(), self.total_flops()));
        s
    }
}

fn side_out(v: usize, stride: usize) -> usize {
    (v - 1) / stride + 1
}

fn conv_mpl(k: usize, hw: (usize, usize)) -> String {
    if k <= 1 {
        "-".into()
    } else {
        mpl_of(MplKind::Conv { k: k as u64 }, hw.0.max(hw.1) as u64).to_string()
    }
}

fn reach_label(n: Option<usize>) -> String {
    match n {
        Some(n) => format!("reach={n}"),
        None => "reach=inf".into(),
    }
}

/// Analytic rows for one planned block, named after its flop scopes.
fn block_rows(plan: &BlockPlan, reach_cache: &mut BTreeMap<String, String>) -> Result<Vec<CostRow>> {
    let spec = &plan.spec;
    let p = &plan.path;
    let (h, w) = plan.input_hw;
    let (ho, wo) = (side_out(h, spec.stride), side_out(w, spec.stride));
    let (c, co, e) = (spec.in_channels as u64, spec.out_channels as u64, spec.expanded() as u64);
    let (l, lo) = ((h * w) as u64, (ho * wo) as u64);
    let mut rows = Vec::new();
    if spec.norm.is_some() {
        rows.push(CostRow::formula(format!("{p}.norm"), CostFormula::Norm { c }, 0, "-".into()));
    }
    let parallel = spec.operator == PARALLEL;
    let dw_channels = match spec.operator.as_str() {
        DWCONV | CASCADE => Some(e),
        PARALLEL => Some(e / 2),
        _ => None,
    };
    let groups = spec.expand_groups as u64;
    match &spec.attention {
        Some(cfg) => {
            let g = WindowGeometry::resolve(cfg.window, cfg.window_mode, h, w)?;
            let heads = cfg.heads(spec.in_channels)? as u64;
            let full = g.patch_len() == g.padded_height * g.padded_width;
            let cost = AttentionCost {
                c,
                e,
                v: match (cfg.ordering, parallel) {
                    (Ordering::Pre, _) => c,
                    (Ordering::Post, true) => e / 2,
                    (Ordering::Post, false) => e,
                },
                c_out: co,
                groups,
                heads,
                tokens: l,
                padded_tokens: (g.padded_height * g.padded_width) as u64,
                window: g.patch_len() as u64,
                branches: cfg.mode.strategies().len() as u64,
                expansions: if parallel && cfg.ordering == Ordering::Pre { 2 } else { 1 },
            };
            let kind = match cfg.mode {
                AttentionMode::Spanning => "sew_mhsa",
                AttentionMode::Neighbor if full => "mhsa",
                AttentionMode::Neighbor | AttentionMode::Distant => "w_mhsa",
            };
            let mpl = if full {
                mpl_of(MplKind::Mhsa, 0).to_string()
            } else {
                let attn = match cfg.mode {
                    AttentionMode::Neighbor => ReachLayer::Neighbor { h: g.h, w: g.w },
                    AttentionMode::Distant => ReachLayer::Distant { h: g.h, w: g.w },
                    AttentionMode::Spanning => ReachLayer::Spanning { h: g.h, w: g.w },
                };
                let unit = match dw_channels {
                    Some(_) if parallel => vec![ReachLayer::Union(vec![attn, ReachLayer::DwConv { k: spec.kernel }])],
                    Some(_) => vec![attn, ReachLayer::DwConv { k: spec.kernel }],
                    None => vec![attn],
                };
                let key = format!("{h}x{w}:{}", unit.iter().map(|u| u.to_string()).collect::<Vec<_>>().join(","));
                let (ph, pw) = (g.padded_height, g.padded_width);
                let reach = match reach_cache.get(&key) {
                    Some(v) => v.clone(),
                    None => {
                        let v = reach_label(layers_to_full(&unit, ph, pw, REACH_CAP)?);
                        reach_cache.insert(key, v.clone());
                        v
                    }
                };
                if cfg.mode == AttentionMode::Neighbor && dw_channels.is_some() && g.h == g.w {
                    let side = h.max(w) as u64;
                    let class = mpl_of(MplKind::Irmb { k: spec.kernel as u64, window_side: g.h as u64 }, side);
                    format!("{class};{reach}")
                } else {
                    reach
                }
            };
            rows.push(CostRow {
                name: format!("{p}.attn"),
                kind: kind.into(),
                params: cost.params(),
                flops: cost.flops(),
                bias_adds: cost.bias_adds(),
                mpl,
            });
        }
        None => {
            let expand = CostFormula::Conv { c_in: c, c_out: e, k: 1, groups, tokens_out: l };
            rows.push(CostRow::formula(format!("{p}.expand"), expand, e * l, "-".into()));
        }
    }
    if let Some(dc) = dw_channels {
        let dw = CostFormula::DwConv { c: dc, k: spec.kernel as u64, tokens_out: lo };
        rows.push(CostRow::formula(format!("{p}.dwconv"), dw, dc * lo, conv_mpl(spec.kernel, (h, w))));
        if spec.dw_norm {
            rows.push(CostRow::formula(format!("{p}.dwconv.norm"), CostFormula::Norm { c: dc }, 0, "-".into()));
        }
    }
    if spec.attention.is_none() {
        let shrink = CostFormula::Conv { c_in: e, c_out: co, k: 1, groups: 1, tokens_out: lo };
        rows.push(CostRow::formula(format!("{p}.shrink"), shrink, co * lo, "-".into()));
    }
    Ok(rows)
}

/// Per-layer analytic costs of `config` at `height`×`width`, with rows named
/// after the flop-trace scopes.
pub fn report_model(config: &BackboneConfig, height: usize, width: usize) -> Result<CostReport> {
    config.validate()?;
    let mut rows = Vec::new();
    let sw = config.stem.width as u64;
    let d = config.dims().map(|v| v as u64);
    let s1 = (side_out(height, 2), side_out(width, 2));
    let s2 = (side_out(s1.0, 2), side_out(s1.1, 2));
    let (l1, l2) = ((s1.0 * s1.1) as u64, (s2.0 * s2.1) as u64);
    let stem: [(&str, CostFormula, u64, String); 6] = [
        ("stem.conv", CostFormula::Conv { c_in: 3, c_out: sw, k: 3, groups: 1, tokens_out: l1 }, sw * l1, conv_mpl(3, (height, width))),
        ("stem.norm1", CostFormula::Norm { c: sw }, 0, "-".into()),
        ("stem.dw", CostFormula::DwConv { c: sw, k: 3, tokens_out: l2 }, sw * l2, conv_mpl(3, s1)),
        ("stem.norm2", CostFormula::Norm { c: sw }, 0, "-".into()),
        ("stem.pw", CostFormula::Conv { c_in: sw, c_out: d[0], k: 1, groups: 1, tokens_out: l2 }, d[0] * l2, "-".into()),
        ("stem.norm3", CostFormula::Norm { c: d[0] }, 0, "-".into()),
    ];
    for (name, f, bias, mpl) in stem {
        rows.push(CostRow::formula(name, f, bias, mpl));
    }
    let mut cache = BTreeMap::new();
    for plan in config.plan_at(height, width)? {
        rows.extend(block_rows(&plan, &mut cache)?);
    }
    let classes = config.head.classes as u64;
    rows.push(CostRow::formula("norm", CostFormula::Norm { c: d[3] }, 0, "-".into()));
    rows.push(CostRow::formula("head", CostFormula::Linear { c_in: d[3], c_out: classes }, classes, "-".into()));
    Ok(CostReport { height, width, rows })
}

/// Counts the FLOPs of one eval-mode forward of a freshly built model on a
/// zero image.
pub fn trace_model(config: &BackboneConfig, height: usize, width: usize) -> Result<FlopTrace> {
    let model = Backbone::build(config, 0)?;
    let x = Tensor::zeros(&[1, 3, height, width]);
    let (out, trace) = flops::trace(|| no_grad(|| model.classify(&x, &ForwardCtx::eval())));
    out?;
    Ok(trace)
}

/// Analytic vs traced FLOPs for one scope.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceCheck {
    pub name: String,
    pub analytic: u64,
    pub traced: u64,
    pub tolerance: f64,
}

impl TraceCheck {
    pub fn relative_error(&self) -> f64 {
        if self.analytic == 0 && self.traced == 0 {
            return 0.0;
        }
        (self.analytic as f64 - self.traced as f64).abs() / (self.analytic.max(self.traced) as f64)
    }

    pub fn passed(&self) -> bool {
        self.relative_error() <= self.tolerance
    }
}

/// One check per traced scope; scopes with attention products get
/// `attention_tol`, pure conv/linear scopes `conv_tol`.
pub fn compare_trace(report: &CostReport, trace: &FlopTrace, conv_tol: f64, attention_tol: f64) -> Vec<TraceCheck> {
    trace
        .rows
        .iter()
        .map(|r| TraceCheck {
            name: r.name.clone(),
            analytic: report.scope_flops(&r.name),
            traced: r.flops,
            tolerance: if r.attention_flops > 0 { attention_tol } else { conv_tol },
        })
        .collect()
}
