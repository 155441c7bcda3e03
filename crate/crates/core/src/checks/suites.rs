use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{max_rel_diff, random_tensor, CheckSuite, Outcome};
use crate::backbone::{Backbone, BackboneConfig, PRESETS};
use crate::block::{MetaMobileBlock, MetaMobileBlockSpec};
use crate::cost::{
    compare_trace, flops_of, layers_to_full, mpl_of, params_of, parse_stack, report_model, trace_model, CostFormula,
    MplKind, ReachLayer, Reachability,
};
use crate::error::Result;
use crate::flops;
use crate::nn::{
    batchnorm2d, conv2d, drop_path, global_avg_pool, layernorm_tokens, linear, named_tensors, Conv2d, ConvSpec,
    ForwardCtx, Initializer, Mode, Module, ParamKind,
};
use crate::tensor::{grad_check_many, no_grad, Tensor};
use crate::window::{
    partitions, partition_neighbor, reverse_distant, AttentionConfig, AttentionMode, Ordering, WindowAttention,
    WindowGeometry, WindowMode, WindowSize,
};

const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;

/// Headline parameter counts and multiply-accumulates at 224².
const HEADLINE_PARAMS: [(&str, f64); 5] = [
    ("emov2-1m", 1.4e6),
    ("emov2-2m", 2.3e6),
    ("emov2-5m", 5.1e6),
    ("emov2-20m", 20.1e6),
    ("emov2-50m", 49.8e6),
];
const HEADLINE_MACS: [(&str, f64); 4] = [
    ("emov2-1m", 285e6),
    ("emov2-2m", 487e6),
    ("emov2-5m", 1035e6),
    ("emov2-20m", 4.0e9),
];

/// Overwrites learnable tensors with seeded noise (norm scales around 1).
pub(crate) fn perturb(m: &mut dyn Module, seed: u64, scale: f64) {
    let mut k = seed;
    m.visit_mut("", &mut |name, t, kind| {
        if kind == ParamKind::Learnable {
            k += 1;
            let base = if t.rank() == 1 && name.ends_with("weight") { 1.0 } else { 0.0 };
            let noise = random_tensor(t.shape(), k, scale);
            *t = Tensor::param(noise.data().iter().map(|v| v + base).collect(), t.shape()).expect("same shape");
        }
    });
}

fn learnable(m: &dyn Module) -> Vec<Tensor> {
    named_tensors(m)
        .into_iter()
        .filter(|(_, _, k)| *k == ParamKind::Learnable)
        .map(|(_, t, _)| t)
        .collect()
}

fn load_learnable(m: &mut dyn Module, values: &[Tensor]) {
    let mut i = 0;
    m.visit_mut("", &mut |_, slot, kind| {
        if kind == ParamKind::Learnable {
            *slot = values[i].clone();
            i += 1;
        }
    });
}

/// Central-difference check of `f` against random upstream weights.
fn op_case<F>(name: &str, shapes: &[&[usize]], seed: u64, f: F) -> Outcome
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let r = (|| {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| random_tensor(s, seed.wrapping_add(i as u64), 1.0))
            .collect();
        let probe = no_grad(|| f(&inputs))?;
        let upstream = random_tensor(probe.shape(), seed ^ 0x9e37, 1.0);
        let err = grad_check_many(|xs| f(xs)?.mul(&upstream)?.sum(), &inputs, GRAD_EPS)?;
        Ok((err < GRAD_TOL, format!("max rel err {err:.2e} (shapes {shapes:?}, seed {seed})")))
    })();
    Outcome::from_result("grads", name, r)
}

fn conv_case(name: &str, spec: ConvSpec, input: [usize; 4], seed: u64) -> Outcome {
    let w = spec.weight_shape();
    op_case(name, &[&input, &w, &[spec.out_channels]], seed, |t| conv2d(&t[0], &spec, &t[1], &t[2]))
}

fn small_i2rmb(seed: u64) -> Result<MetaMobileBlock> {
    let mut spec = MetaMobileBlockSpec::i2rmb(4, 4, num_rational::Ratio::new(2, 1), 1, 2);
    spec.attention = spec
        .attention
        .map(|a| a.with_window(WindowSize::Fixed { h: 2, w: 2 }, WindowMode::Strict));
    let mut b = MetaMobileBlock::new(spec, &mut Initializer::new(seed))?;
    perturb(&mut b, seed * 31, 0.3);
    Ok(b)
}

/// Finite-difference checks of every differentiable op and the i²RMB block.
pub struct GradSuite;

impl CheckSuite for GradSuite {
    fn name(&self) -> &'static str {
        "grads"
    }

    fn description(&self) -> &'static str {
        "central-difference gradient checks (rel err < 1e-4)"
    }

    fn run(&self, seed: u64) -> Vec<Outcome> {
        let s = seed;
        let mut out = vec![
            op_case("add_broadcast", &[&[2, 3, 4], &[3, 1]], s, |t| t[0].add(&t[1])),
            op_case("sub", &[&[2, 3], &[2, 3]], s, |t| t[0].sub(&t[1])),
            op_case("mul_broadcast", &[&[2, 3, 4], &[1, 4]], s, |t| t[0].mul(&t[1])),
            op_case("scale_add_scalar", &[&[3, 4]], s, |t| t[0].scale(-1.7)?.add_scalar(0.3)),
            op_case("silu", &[&[3, 4]], s, |t| t[0].scale(3.0)?.silu()),
            op_case("gelu", &[&[3, 4]], s, |t| t[0].scale(3.0)?.gelu()),
            op_case("matmul_batched", &[&[2, 3, 4], &[2, 4, 5]], s, |t| t[0].matmul_batched(&t[1])),
            op_case("softmax_mid", &[&[2, 5, 3]], s, |t| t[0].scale(2.0)?.softmax(1)),
            op_case("softmax_last", &[&[2, 3, 5]], s, |t| t[0].scale(2.0)?.softmax(2)),
            op_case("reshape_permute", &[&[2, 3, 4]], s, |t| t[0].reshape(&[6, 4])?.permute(&[1, 0])),
            op_case("permute4", &[&[2, 3, 2, 2]], s, |t| t[0].permute(&[0, 2, 3, 1])),
            op_case("transpose_last", &[&[2, 3, 4]], s, |t| t[0].transpose_last()),
            op_case("narrow_cat", &[&[2, 4, 3], &[2, 1, 3]], s, |t| {
                Tensor::cat(&[t[0].narrow(1, 1, 2)?, t[1].clone()], 1)
            }),
            op_case("pad_bottom_right", &[&[1, 2, 3, 3]], s, |t| t[0].pad_bottom_right(2, 1)),
            op_case("sum_mean", &[&[3, 3]], s, |t| t[0].mean()?.add(&t[0].sum()?)),
            op_case("cross_entropy", &[&[4, 5]], s, |t| t[0].scale(2.0)?.cross_entropy(&[0, 3, 1, 4])),
            conv_case("conv_dense_3x3", ConvSpec::new(3, 4, 3, 1, 1), [2, 3, 5, 5], s),
            conv_case("conv_grouped_3x3_s2", ConvSpec::new(4, 6, 3, 2, 2), [1, 4, 6, 6], s),
            conv_case("conv_depthwise_5x5_s2", ConvSpec::depthwise(3, 5, 2), [1, 3, 7, 7], s),
            conv_case("conv_pointwise_grouped", ConvSpec::pointwise(4, 8, 2), [2, 4, 3, 3], s),
            op_case("batchnorm_train", &[&[3, 2, 3, 3], &[2], &[2]], s, |t| {
                Ok(batchnorm2d(&t[0], &t[1], &t[2], (&[0.0; 2], &[1.0; 2]), 1e-5, Mode::Train)?.0)
            }),
            op_case("batchnorm_eval", &[&[3, 2, 3, 3], &[2], &[2]], s, |t| {
                Ok(batchnorm2d(&t[0], &t[1], &t[2], (&[0.1, -0.2], &[1.5, 0.7]), 1e-5, Mode::Eval)?.0)
            }),
            op_case("layernorm_tokens", &[&[2, 3, 2, 2], &[3], &[3]], s, |t| layernorm_tokens(&t[0], &t[1], &t[2], 1e-6)),
            op_case("linear", &[&[3, 4], &[5, 4], &[5]], s, |t| linear(&t[0], &t[1], &t[2])),
            op_case("global_avg_pool", &[&[2, 3, 4, 4]], s, |t| global_avg_pool(&t[0])),
            op_case("drop_path_train", &[&[4, 3, 2, 2]], s, |t| drop_path(&t[0], 0.5, &ForwardCtx::train(s))),
            op_case("partition_reverse", &[&[1, 2, 4, 6]], s, |t| {
                reverse_distant(&partition_neighbor(&t[0], 2, 3)?, 2, 3, 4, 6)
            }),
        ];
        for (name, mode, window, wmode) in [
            ("attend_neighbor", AttentionMode::Neighbor, WindowSize::Fixed { h: 2, w: 2 }, WindowMode::Strict),
            ("attend_spanning", AttentionMode::Spanning, WindowSize::Fixed { h: 2, w: 2 }, WindowMode::Strict),
            ("attend_spanning_pad", AttentionMode::Spanning, WindowSize::Fixed { h: 3, w: 3 }, WindowMode::Pad),
        ] {
            let cfg = AttentionConfig::new(2, mode, Ordering::Post).with_window(window, wmode);
            out.push(match WindowAttention::new(4, cfg, &mut Initializer::new(s)) {
                Ok(a) => op_case(name, &[&[1, 4, 4, 4], &[1, 4, 4, 4], &[1, 8, 4, 4]], s, |t| {
                    a.attend(&t[0].scale(2.0)?, &t[1].scale(2.0)?, &t[2], mode)
                }),
                Err(e) => Outcome::new("grads", name, false, format!("error: {e}")),
            });
        }
        out.push(Outcome::from_result("grads", "i2rmb_input", (|| {
            let b = small_i2rmb(s)?;
            let x = random_tensor(&[2, 4, 4, 4], s + 1, 1.0);
            let ctx = ForwardCtx::train(s);
            let err = grad_check_many(|t| { let y = b.forward(&t[0], &ctx, "")?; y.mul(&y)?.mean() }, &[x], GRAD_EPS)?;
            Ok((err < GRAD_TOL, format!("max rel err {err:.2e} (shape [2, 4, 4, 4], seed {s})")))
        })()));
        out.push(Outcome::from_result("grads", "i2rmb_parameters", (|| {
            let b = std::cell::RefCell::new(small_i2rmb(s)?);
            let params = learnable(&*b.borrow());
            let x = random_tensor(&[2, 4, 4, 4], s + 2, 1.0);
            let ctx = ForwardCtx::train(s);
            let err = grad_check_many(
                |t| {
                    let mut blk = b.borrow_mut();
                    load_learnable(&mut *blk, t);
                    let y = blk.forward(&x, &ctx, "")?;
                    y.mul(&y)?.mean()
                },
                &params,
                GRAD_EPS,
            )?;
            Ok((err < GRAD_TOL, format!("max rel err {err:.2e} over {} tensors (seed {s})", params.len())))
        })()));
        out
    }
}

/// Bit-exact partition/reverse round trips and exact pixel coverage.
pub struct PartitionSuite {
    pub trials: usize,
}

impl Default for PartitionSuite {
    fn default() -> Self {
        PartitionSuite { trials: 500 }
    }
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// One random divisible geometry: (batch, channels, H, W, h, w).
pub(crate) fn random_geometry(rng: &mut impl Rng) -> (usize, usize, usize, usize, usize, usize) {
    let (height, width) = (rng.gen_range(4..=64), rng.gen_range(4..=64));
    let dh = divisors(height);
    let dw = divisors(width);
    let h = dh[rng.gen_range(0..dh.len())];
    let w = dw[rng.gen_range(0..dw.len())];
    (rng.gen_range(1..=2), rng.gen_range(1..=3), height, width, h, w)
}

fn partition_trial(b: usize, c: usize, height: usize, width: usize, h: usize, w: usize, seed: u64) -> Result<Option<String>> {
    let g = WindowGeometry::strict(height, width, h, w)?;
    let x = random_tensor(&[b, c, height, width], seed, 1.0);
    let index = Tensor::from_vec((0..height * width).map(|i| i as f64).collect(), &[1, 1, height, width])?;
    for name in partitions().names() {
        let s = partitions().get(name)?;
        let back = s.reverse(&s.partition(&x, &g)?, &g)?;
        if back.shape() != x.shape() || back.data().iter().zip(x.data().iter()).any(|(p, q)| p.to_bits() != q.to_bits()) {
            return Ok(Some(format!("{name} round trip differs")));
        }
        let iw = s.partition(&index, &g)?;
        let p = g.patch_len();
        let mut seen = BTreeSet::new();
        for (win, chunk) in iw.data().chunks(p).enumerate() {
            let set: BTreeSet<u64> = chunk.iter().map(|v| *v as u64).collect();
            if set.len() != p {
                return Ok(Some(format!("{name} window {win} repeats pixels")));
            }
            seen.extend(set);
        }
        if seen.len() != height * width {
            return Ok(Some(format!("{name} covers {} of {} pixels", seen.len(), height * width)));
        }
        for row in 0..height {
            for col in 0..width {
                let (win, slot) = s.locate(&g, row, col);
                if iw.data()[win * p + slot] as usize != row * width + col {
                    return Ok(Some(format!("{name} locate({row},{col}) disagrees with layout")));
                }
            }
        }
    }
    Ok(None)
}

impl CheckSuite for PartitionSuite {
    fn name(&self) -> &'static str {
        "partition"
    }

    fn description(&self) -> &'static str {
        "neighbor/distant round trips and pixel coverage over random divisible geometries"
    }

    fn run(&self, seed: u64) -> Vec<Outcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut failure = None;
        for t in 0..self.trials {
            let (b, c, height, width, h, w) = random_geometry(&mut rng);
            let case_seed = seed.wrapping_mul(7919).wrapping_add(t as u64);
            let bad = match partition_trial(b, c, height, width, h, w, case_seed) {
                Ok(r) => r,
                Err(e) => Some(format!("error: {e}")),
            };
            if let Some(msg) = bad {
                failure = Some(format!("{msg} (shape [{b}, {c}, {height}, {width}], window {h}x{w}, seed {case_seed})"));
                break;
            }
        }
        vec![match failure {
            None => Outcome::new(
                "partition",
                "round_trip_and_coverage",
                true,
                format!("{} geometries, {} strategies, bit-exact", self.trials, partitions().names().len()),
            ),
            Some(d) => Outcome::new("partition", "round_trip_and_coverage", false, d),
        }]
    }
}

/// Pre- vs post-attention ordering: equal when the expansion is linear and
/// grouped per head, different once GELU sits on V.
pub struct EquivalenceSuite {
    pub cases: usize,
}

impl Default for EquivalenceSuite {
    fn default() -> Self {
        EquivalenceSuite { cases: 100 }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct EquivalenceCase {
    pub shape: [usize; 4],
    pub seed: u64,
    pub linear_err: f64,
    pub gelu_diff: f64,
}

/// One random pre/post comparison.
pub(crate) fn equivalence_case(rng: &mut impl Rng, seed: u64) -> Result<EquivalenceCase> {
    let heads = rng.gen_range(1..=3);
    let hd = rng.gen_range(2..=4);
    let c = heads * hd;
    let e = c * rng.gen_range(1..=3);
    let win = rng.gen_range(2..=3);
    let side = win * rng.gen_range(1..=2);
    let b = rng.gen_range(1..=2);
    let mode = [AttentionMode::Neighbor, AttentionMode::Distant, AttentionMode::Spanning][rng.gen_range(0..3)];
    let cfg = AttentionConfig::new(hd, mode, Ordering::Post).with_window(WindowSize::Fixed { h: win, w: win }, WindowMode::Strict);
    let mut init = Initializer::new(seed);
    let mut post = WindowAttention::new(c, cfg, &mut init)?;
    perturb(&mut post, seed, 0.5);
    let pre = WindowAttention {
        cfg: AttentionConfig { ordering: Ordering::Pre, ..cfg },
        ..post.clone()
    };
    let mut v = Conv2d::new(ConvSpec::pointwise(c, e, heads), &mut init)?;
    perturb(&mut v, seed + 1000, 1.0);
    let x = random_tensor(&[b, c, side, side], seed + 2000, 2.0);
    let lin = |t: &Tensor| v.forward(t);
    let a = pre.forward(&x, &lin)?;
    let p = post.forward(&x, &lin)?;
    let linear_err = max_rel_diff(&a.to_vec(), &p.to_vec());
    let gelu = |t: &Tensor| v.forward(t)?.gelu();
    let a = pre.forward(&x, &gelu)?;
    let p = post.forward(&x, &gelu)?;
    let gelu_diff = a.data().iter().zip(p.data().iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(EquivalenceCase {
        shape: [b, c, side, side],
        seed,
        linear_err,
        gelu_diff,
    })
}

/// Full iRMB block in pre order vs the same weights in post order.
fn block_equivalence(seed: u64) -> Result<f64> {
    let mut spec = MetaMobileBlockSpec::irmb(8, 8, num_rational::Ratio::new(3, 1), 1, 2);
    spec.attention = spec
        .attention
        .map(|a| a.with_window(WindowSize::Fixed { h: 2, w: 2 }, WindowMode::Strict));
    let mut pre = MetaMobileBlock::new(spec.clone(), &mut Initializer::new(seed))?;
    spec.attention = spec.attention.map(|a| AttentionConfig { ordering: Ordering::Post, ..a });
    let mut post = MetaMobileBlock::new(spec, &mut Initializer::new(seed))?;
    perturb(&mut pre, seed, 0.5);
    perturb(&mut post, seed, 0.5);
    let x = random_tensor(&[2, 8, 4, 4], seed + 1, 1.0);
    let ctx = ForwardCtx::eval();
    Ok(max_rel_diff(&pre.forward(&x, &ctx, "")?.to_vec(), &post.forward(&x, &ctx, "")?.to_vec()))
}

impl CheckSuite for EquivalenceSuite {
    fn name(&self) -> &'static str {
        "equivalence"
    }

    fn description(&self) -> &'static str {
        "pre/post attention ordering: equal for grouped linear V (rel err < 1e-5), different under GELU (> 1e-3)"
    }

    fn run(&self, seed: u64) -> Vec<Outcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst_lin: Option<EquivalenceCase> = None;
        let mut worst_gelu: Option<EquivalenceCase> = None;
        let mut errors = Vec::new();
        for i in 0..self.cases {
            match equivalence_case(&mut rng, seed.wrapping_mul(104_729).wrapping_add(i as u64)) {
                Ok(c) => {
                    if worst_lin.as_ref().is_none_or(|w| c.linear_err > w.linear_err) {
                        worst_lin = Some(c.clone());
                    }
                    if worst_gelu.as_ref().is_none_or(|w| c.gelu_diff < w.gelu_diff) {
                        worst_gelu = Some(c);
                    }
                }
                Err(e) => errors.push(e.to_string()),
            }
        }
        let mut out = Vec::new();
        if let Some(e) = errors.first() {
            out.push(Outcome::new("equivalence", "cases", false, format!("{} cases errored, first: {e}", errors.len())));
        }
        if let Some(w) = worst_lin {
            out.push(Outcome::new(
                "equivalence",
                "linear_v",
                w.linear_err < 1e-5,
                format!("{} cases, worst rel err {:.2e} (shape {:?}, seed {})", self.cases, w.linear_err, w.shape, w.seed),
            ));
        }
        if let Some(w) = worst_gelu {
            out.push(Outcome::new(
                "equivalence",
                "gelu_v",
                w.gelu_diff > 1e-3,
                format!("{} cases, smallest max diff {:.2e} (shape {:?}, seed {})", self.cases, w.gelu_diff, w.shape, w.seed),
            ));
        }
        out.push(Outcome::from_result(
            "equivalence",
            "irmb_block",
            block_equivalence(seed).map(|e| (e < 1e-5, format!("rel err {e:.2e} (shape [2, 8, 4, 4], seed {seed})"))),
        ));
        out
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

/// Analytic cost model vs enumeration, tracing and headline numbers.
pub struct CostSuite;

impl CostSuite {
    fn table() -> (bool, String) {
        let dw = CostFormula::DwConv { c: 48, k: 5, tokens_out: 3136 };
        let w = CostFormula::WMhsa { c: 160, tokens: 196, window: 49 };
        let irmb = mpl_of(MplKind::Irmb { k: 3, window_side: 7 }, 56).layers();
        let ok = params_of(&dw) == 1248 && flops_of(&dw) == 7_526_400 && flops_of(&w) == 46_316_172 && irmb == Some(7.0);
        (ok, format!("dwconv 1248/7526400, w_mhsa {} flops, iRMB MPL {irmb:?}", flops_of(&w)))
    }

    fn presets() -> Result<(bool, String)> {
        let mut ok = true;
        let mut parts = Vec::new();
        for (name, headline) in HEADLINE_PARAMS {
            let c = BackboneConfig::preset(name)?;
            let enumerated = Backbone::build(&c, 0)?.param_count() as u64;
            let analytic = report_model(&c, 224, 224)?.total_params();
            let r = enumerated as f64 / headline;
            ok &= analytic == enumerated && (0.95..=1.05).contains(&r);
            parts.push(format!("{name} {enumerated} ({r:.3}x)"));
        }
        Ok((ok, parts.join(", ")))
    }

    fn macs() -> Result<(bool, String)> {
        let mut ok = true;
        let mut parts = Vec::new();
        for (name, headline) in HEADLINE_MACS {
            let m = report_model(&BackboneConfig::preset(name)?, 224, 224)?.total_macs() as f64;
            ok &= rel(m, headline) <= 0.10;
            parts.push(format!("{name} {:.0}M ({:.3}x)", m / 1e6, m / headline));
        }
        Ok((ok, parts.join(", ")))
    }

    fn traced(config: &BackboneConfig, res: usize) -> Result<(bool, String)> {
        let report = report_model(config, res, res)?;
        let trace = trace_model(config, res, res)?;
        let checks = compare_trace(&report, &trace, 0.01, 0.05);
        let worst = checks.iter().map(|c| c.relative_error()).fold(0.0, f64::max);
        let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
        Ok((
            failed.is_empty() && !checks.is_empty(),
            format!("{} scopes at {res}², worst rel err {worst:.2e}, failing {failed:?}", checks.len()),
        ))
    }

    fn spanning_delta() -> Result<(bool, String)> {
        let mut ok = true;
        let mut parts = Vec::new();
        for name in PRESETS.iter().chain(&["toy"]) {
            let on = BackboneConfig::preset(name)?;
            let off = on.with_spanning(false);
            let res = on.resolution;
            let dp = Backbone::build(&on, 0)?.param_count() as i64 - Backbone::build(&off, 0)?.param_count() as i64;
            let df = report_model(&on, res, res)?.total_flops() as i64 - report_model(&off, res, res)?.total_flops() as i64;
            ok &= dp == 0 && df > 0;
            parts.push(format!("{name} dparams {dp} dflops {df}"));
        }
        let toy = BackboneConfig::toy();
        let dt = trace_model(&toy, 32, 32)?.total_flops() as i64 - trace_model(&toy.with_spanning(false), 32, 32)?.total_flops() as i64;
        ok &= dt > 0;
        parts.push(format!("toy traced dflops {dt}"));
        Ok((ok, parts.join(", ")))
    }

    fn ew_mhsa_row() -> Result<(bool, String)> {
        let (c, side, win) = (160usize, 14usize, 7usize);
        let mut spec = MetaMobileBlockSpec::mhsa(c, 32);
        spec.attention = spec
            .attention
            .map(|a| a.with_window(WindowSize::Fixed { h: win, w: win }, WindowMode::Strict));
        let block = MetaMobileBlock::new(spec, &mut Initializer::new(0))?;
        let x = Tensor::zeros(&[1, c, side, side]);
        let (y, trace) = flops::trace(|| no_grad(|| block.forward(&x, &ForwardCtx::eval(), "b")));
        y?;
        let traced = trace.row("b.attn").map_or(0, |r| r.flops);
        let analytic = flops_of(&CostFormula::WMhsa {
            c: c as u64,
            tokens: (side * side) as u64,
            window: (win * win) as u64,
        });
        let e = rel(traced as f64, analytic as f64);
        Ok((e <= 0.05, format!("traced {traced} vs 8C²L+4CLl+3Ll = {analytic} (rel {e:.2e})")))
    }

    fn resolution_scaling() -> Result<(bool, String)> {
        let c = BackboneConfig::preset("emov2-5m")?;
        let conv = |res: usize| -> Result<u64> {
            Ok(report_model(&c, res, res)?
                .rows
                .iter()
                .filter(|r| r.kind == "conv" || r.kind == "dwconv")
                .map(|r| r.flops)
                .sum())
        };
        let (a, b) = (conv(224)?, conv(448)?);
        Ok((b == 4 * a, format!("conv flops {a} at 224², {b} at 448²")))
    }
}

impl CheckSuite for CostSuite {
    fn name(&self) -> &'static str {
        "cost"
    }

    fn description(&self) -> &'static str {
        "operator formulas, preset params/MACs, analytic vs traced FLOPs, spanning is parameter-free"
    }

    fn run(&self, _seed: u64) -> Vec<Outcome> {
        let (ok, d) = Self::table();
        let toy = BackboneConfig::toy();
        let mut out = vec![
            Outcome::new("cost", "operator_formulas", ok, d),
            Outcome::from_result("cost", "preset_params", Self::presets()),
            Outcome::from_result("cost", "preset_macs", Self::macs()),
            Outcome::from_result("cost", "trace_toy", Self::traced(&toy, 32)),
        ];
        match BackboneConfig::preset("emov2-1m") {
            Ok(c) => out.push(Outcome::from_result("cost", "trace_emov2_1m", Self::traced(&c, 224))),
            Err(e) => out.push(Outcome::new("cost", "trace_emov2_1m", false, e.to_string())),
        }
        out.push(Outcome::from_result("cost", "spanning_parameter_free", Self::spanning_delta()));
        out.push(Outcome::from_result("cost", "ew_mhsa_row", Self::ew_mhsa_row()));
        out.push(Outcome::from_result("cost", "resolution_scaling", Self::resolution_scaling()));
        out
    }
}

/// Reachability claims: O(Inf) for neighbor windows, spanning coverage,
/// DW-Conv growth, monotonicity and the distant grid.
pub struct ErfSuite;

/// Divisible geometries with h ≥ H/h and w ≥ W/w.
pub const SPANNING_GEOMETRIES: [(usize, usize, usize, usize); 6] =
    [(8, 8, 4, 4), (16, 16, 4, 4), (14, 14, 7, 7), (28, 28, 7, 7), (12, 18, 4, 6), (9, 16, 3, 4)];

impl ErfSuite {
    fn neighbor_infinite() -> Result<(bool, String)> {
        let mut ok = true;
        for (hh, ww, h, w) in [(16, 16, 4, 4), (56, 56, 7, 7), (12, 18, 4, 6)] {
            ok &= layers_to_full(&[ReachLayer::Neighbor { h, w }], hh, ww, 16)?.is_none();
        }
        let (_, steps) = Reachability::run(&parse_stack("nb:4x4*4")?, 16, 16)?;
        let plateau = steps.iter().all(|s| s.center_coverage == 1.0 / 16.0);
        Ok((ok && plateau, format!("reach=inf on 3 geometries; 16x16/4x4 plateau at 1/16: {plateau}")))
    }

    fn spanning_two() -> Result<(bool, String)> {
        let mut ok = true;
        let mut parts = Vec::new();
        for (hh, ww, h, w) in SPANNING_GEOMETRIES {
            let n = layers_to_full(&[ReachLayer::Spanning { h, w }], hh, ww, 8)?;
            ok &= matches!(n, Some(1..=2));
            parts.push(format!("{hh}x{ww}/{h}x{w}:{n:?}"));
        }
        // Tiles narrower than the grid stride never mix all residues.
        let narrow = layers_to_full(&[ReachLayer::Spanning { h: 2, w: 2 }], 8, 8, 8)?;
        ok &= narrow.is_none();
        parts.push(format!("8x8/2x2:{narrow:?}"));
        Ok((ok, parts.join(" ")))
    }

    fn dwconv_growth() -> Result<(bool, String)> {
        let mut ok = true;
        let mut parts = Vec::new();
        for side in [5usize, 9, 17] {
            let n = layers_to_full(&[ReachLayer::DwConv { k: 3 }], side, side, 4 * side)?.unwrap_or(usize::MAX);
            let formula = mpl_of(MplKind::Conv { k: 3 }, side as u64).layers().unwrap_or(f64::INFINITY);
            ok &= (n as f64 - formula).abs() <= 1.0;
            parts.push(format!("W={side}: {n} layers vs 2W/(k-1)={formula}"));
        }
        let (r, _) = Reachability::run(&[ReachLayer::DwConv { k: 3 }], 9, 9)?;
        let c = r.center();
        let patch = (0..81).filter(|&i| r.reaches(i, c)).all(|i| (i / 9).abs_diff(4) <= 1 && (i % 9).abs_diff(4) <= 1);
        ok &= patch && r.reach_count(c) == 9;
        Ok((ok, parts.join(", ")))
    }

    fn monotone(seed: u64) -> Result<(bool, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let menu = ["dw:3", "dw:5", "nb:4x4", "ds:4x4", "sp:2x4", "nb:2x2+dw:3"];
        for trial in 0..20 {
            let stack: Vec<&str> = (0..rng.gen_range(1..=6)).map(|_| menu[rng.gen_range(0..menu.len())]).collect();
            let layers = parse_stack(&stack.join(","))?;
            let mut r = Reachability::new(16, 16);
            for layer in &layers {
                let before: Vec<usize> = (0..256).map(|p| r.reach_count(p)).collect();
                let prev = r.clone();
                r.apply(layer)?;
                for (p, &count) in before.iter().enumerate() {
                    if r.reach_count(p) < count || (0..256).any(|q| prev.reaches(q, p) && !r.reaches(q, p)) {
                        return Ok((false, format!("trial {trial} stack {} shrank at pixel {p} (seed {seed})", stack.join(","))));
                    }
                }
            }
        }
        Ok((true, "20 random stacks on 16x16, reach sets only grow".into()))
    }

    fn distant_grid() -> Result<(bool, String)> {
        let mut ok = true;
        for (hh, ww, h, w) in SPANNING_GEOMETRIES {
            let (r, _) = Reachability::run(&[ReachLayer::Distant { h, w }], hh, ww)?;
            let (sh, sw) = (hh / h, ww / w);
            for p in 0..hh * ww {
                let reached: Vec<usize> = (0..hh * ww).filter(|&q| r.reaches(q, p)).collect();
                let rows: BTreeSet<usize> = reached.iter().map(|q| q / ww).collect();
                let cols: BTreeSet<usize> = reached.iter().map(|q| q % ww).collect();
                let grid = reached.iter().all(|q| (q / ww) % sh == (p / ww) % sh && (q % ww) % sw == (p % ww) % sw);
                ok &= reached.len() == h * w && rows.len() == h && cols.len() == w && grid;
                ok &= reached.len() >= hh * ww / (h * w);
            }
        }
        Ok((ok, format!("{} geometries: P pixels on an (H/h, W/w)-strided grid, >= HW/P", SPANNING_GEOMETRIES.len())))
    }
}

impl CheckSuite for ErfSuite {
    fn name(&self) -> &'static str {
        "erf"
    }

    fn description(&self) -> &'static str {
        "reachability: neighbor O(Inf), spanning <= 2 layers, DW-Conv O(2W/(k-1)), monotone, distant grid"
    }

    fn run(&self, seed: u64) -> Vec<Outcome> {
        vec![
            Outcome::from_result("erf", "neighbor_unbounded", Self::neighbor_infinite()),
            Outcome::from_result("erf", "spanning_two_layers", Self::spanning_two()),
            Outcome::from_result("erf", "dwconv_growth", Self::dwconv_growth()),
            Outcome::from_result("erf", "monotone", Self::monotone(seed)),
            Outcome::from_result("erf", "distant_grid", Self::distant_grid()),
        ]
    }
}
