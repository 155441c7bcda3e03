use super::*;
use crate::nn::{batchnorm2d, conv2d, count_learnable, named_tensors, Mode};
use crate::tensor::grad_check_many;
use crate::testutil::{max_abs_diff, random};
use crate::window::WindowMode;

fn r(n: u32, d: u32) -> ExpansionRatio {
    Ratio::new(n, d)
}

/// Overwrites every learnable tensor with seeded uniform noise so that tests
/// are not dominated by the zero biases of a fresh init.
fn perturb(block: &mut MetaMobileBlock, seed: u64) {
    let mut k = seed;
    block.visit_mut("", &mut |name, t, kind| {
        if kind == ParamKind::Learnable {
            k += 1;
            let base = if name.ends_with("norm.weight") { 1.0 } else { 0.0 };
            let noise = random(t.shape(), k, 0.3);
            *t = Tensor::param(noise.data().iter().map(|v| v + base).collect(), t.shape()).unwrap();
        }
    });
}

#[test]
fn rational_widths() {
    assert_eq!(expanded_width(r(5, 2), 48), 120);
    assert_eq!(expanded_width(r(7, 2), 180), 630);
    // ties to even
    assert_eq!(expanded_width(r(5, 2), 1), 2);
    assert_eq!(expanded_width(r(5, 2), 3), 8);
    assert_eq!(expanded_width(r(5, 4), 2), 2);
    assert_eq!(expanded_width(r(5, 4), 6), 8);
}

#[test]
fn ratio_parsing() {
    assert_eq!(parse_ratio("2.5").unwrap(), r(5, 2));
    assert_eq!(parse_ratio("4").unwrap(), r(4, 1));
    assert_eq!(parse_ratio("3.0").unwrap(), r(3, 1));
    assert_eq!(parse_ratio("7/2").unwrap(), r(7, 2));
    for bad in ["", "x", "-1", "1/0", "2.5.1", ".5"] {
        assert!(parse_ratio(bad).is_err(), "{bad}");
    }
}

#[test]
fn identity_block_doubles_input() {
    let spec = MetaMobileBlockSpec {
        norm: None,
        expand_act: Activation::None,
        ..MetaMobileBlockSpec::ffn(3, r(1, 1))
    };
    let mut b = MetaMobileBlock::new(spec, &mut Initializer::new(0)).unwrap();
    let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
    b.expand.weight = Tensor::from_vec(eye.clone(), &[3, 3, 1, 1]).unwrap();
    b.shrink.weight = Tensor::from_vec(eye, &[3, 3, 1, 1]).unwrap();
    let x = random(&[2, 3, 4, 5], 1, 2.0);
    let y = b.forward(&x, &ForwardCtx::eval(), "").unwrap();
    assert_eq!(y.to_vec(), x.scale(2.0).unwrap().to_vec());
}

#[test]
fn stride_two_drops_residual() {
    let spec = MetaMobileBlockSpec::irb(8, 8, r(2, 1), 2, 3);
    assert!(!spec.has_residual());
    let b = MetaMobileBlock::new(spec, &mut Initializer::new(0)).unwrap();
    let y = b.forward(&random(&[1, 8, 8, 6], 2, 1.0), &ForwardCtx::eval(), "").unwrap();
    assert_eq!(y.shape(), &[1, 8, 4, 3]);
    assert!(MetaMobileBlockSpec::irb(8, 8, r(2, 1), 1, 3).has_residual());
    assert!(!MetaMobileBlockSpec::irb(8, 12, r(2, 1), 1, 3).has_residual());
}

/// Standalone IRB written directly against the nn functions.
fn reference_irb(x: &Tensor, p: &std::collections::HashMap<String, Tensor>, stride: usize, mode: Mode) -> Tensor {
    let get = |n: &str| p[n].clone();
    let c = x.shape()[1];
    let e = get("expand.weight").shape()[0];
    let stats = |n: &str| (get(&format!("{n}.running_mean")).to_vec(), get(&format!("{n}.running_var")).to_vec());
    let (m0, v0) = stats("norm");
    let xn = batchnorm2d(x, &get("norm.weight"), &get("norm.bias"), (&m0, &v0), 1e-5, mode).unwrap().0;
    let xe = conv2d(&xn, &ConvSpec::pointwise(c, e, 1), &get("expand.weight"), &get("expand.bias")).unwrap().silu().unwrap();
    let (m1, v1) = stats("dw.norm");
    let k = get("dw.conv.weight").shape()[2];
    let xd = conv2d(&xe, &ConvSpec::depthwise(e, k, stride), &get("dw.conv.weight"), &get("dw.conv.bias")).unwrap();
    let xd = batchnorm2d(&xd, &get("dw.norm.weight"), &get("dw.norm.bias"), (&m1, &v1), 1e-5, mode).unwrap().0.silu().unwrap();
    let out_c = get("shrink.weight").shape()[0];
    let xs = conv2d(&xd, &ConvSpec::pointwise(e, out_c, 1), &get("shrink.weight"), &get("shrink.bias")).unwrap();
    if stride == 1 && c == out_c {
        x.add(&xs).unwrap()
    } else {
        xs
    }
}

#[test]
fn attention_off_is_an_irb() {
    for (stride, mode) in [(1, Mode::Eval), (1, Mode::Train), (2, Mode::Train)] {
        let spec = MetaMobileBlockSpec::i2rmb(6, 6, r(2, 1), stride, 2).without_attention();
        let mut b = MetaMobileBlock::new(spec, &mut Initializer::new(4)).unwrap();
        perturb(&mut b, 40);
        let params = named_tensors(&b).into_iter().map(|(n, t, _)| (n, t)).collect();
        let x = random(&[2, 6, 6, 6], 5, 1.0);
        let want = reference_irb(&x, &params, stride, mode);
        let got = b.forward(&x, &ForwardCtx::new(mode, 0), "").unwrap();
        assert_eq!(got.to_vec(), want.to_vec());
    }
}

#[test]
fn linear_without_norms_and_activations() {
    let spec = MetaMobileBlockSpec {
        norm: None,
        expand_act: Activation::None,
        dw_norm: false,
        dw_act: Activation::None,
        ..MetaMobileBlockSpec::irb(4, 6, r(3, 1), 1, 3)
    };
    let mut b = MetaMobileBlock::new(spec, &mut Initializer::new(1)).unwrap();
    perturb(&mut b, 10);
    b.visit_mut("", &mut |name, t, _| {
        if name.ends_with("bias") {
            *t = Tensor::zeros(t.shape());
        }
    });
    let x = random(&[1, 4, 5, 5], 3, 1.0);
    let ctx = ForwardCtx::eval();
    let y = b.forward(&x, &ctx, "").unwrap();
    for alpha in [-2.0, 0.5, 3.0] {
        let ya = b.forward(&x.scale(alpha).unwrap(), &ctx, "").unwrap();
        assert!(max_abs_diff(&ya, &y.scale(alpha).unwrap()) < 1e-10);
    }
}

#[test]
fn i2rmb_shapes() {
    let spec = MetaMobileBlockSpec::i2rmb(48, 48, r(2, 1), 1, 16);
    let b = MetaMobileBlock::new(spec, &mut Initializer::new(0)).unwrap();
    let x = random(&[1, 48, 56, 56], 1, 1.0);
    assert_eq!(b.forward(&x, &ForwardCtx::eval(), "").unwrap().shape(), &[1, 48, 56, 56]);

    let spec = MetaMobileBlockSpec::i2rmb(48, 72, r(2, 1), 2, 16);
    assert!(!spec.has_residual());
    let b = MetaMobileBlock::new(spec, &mut Initializer::new(0)).unwrap();
    assert_eq!(b.forward(&x, &ForwardCtx::eval(), "").unwrap().shape(), &[1, 72, 28, 28]);
}

#[test]
fn i2rmb_gradients() {
    let mut spec = MetaMobileBlockSpec::i2rmb(8, 8, r(2, 1), 1, 4);
    spec.attention = spec.attention.map(|a| a.with_window(WindowSize::Fixed { h: 4, w: 4 }, WindowMode::Strict));
    let mut b = MetaMobileBlock::new(spec, &mut Initializer::new(2)).unwrap();
    perturb(&mut b, 20);
    let x = random(&[1, 8, 8, 8], 7, 1.0);
    let ctx = ForwardCtx::train(0);
    let err = grad_check_many(
        |t| {
            let y = b.forward(&t[0], &ctx, "")?;
            y.mul(&y)?.mean()
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn i2rmb_parameter_gradients() {
    let mut spec = MetaMobileBlockSpec::i2rmb(4, 4, r(2, 1), 1, 2);
    spec.attention = spec.attention.map(|a| a.with_window(WindowSize::Fixed { h: 2, w: 2 }, WindowMode::Strict));
    let mut b = MetaMobileBlock::new(spec, &mut Initializer::new(3)).unwrap();
    perturb(&mut b, 30);
    let x = random(&[2, 4, 4, 4], 8, 1.0);
    let names: Vec<String> = named_tensors(&b)
        .into_iter()
        .filter(|(_, _, k)| *k == ParamKind::Learnable)
        .map(|(n, _, _)| n)
        .collect();
    let values: Vec<Tensor> = named_tensors(&b).into_iter().filter(|(_, _, k)| *k == ParamKind::Learnable).map(|(_, t, _)| t).collect();
    let ctx = ForwardCtx::train(0);
    let block = std::cell::RefCell::new(b);
    let err = grad_check_many(
        |t| {
            let mut b = block.borrow_mut();
            let mut i = 0;
            b.visit_mut("", &mut |name, slot, kind| {
                if kind == ParamKind::Learnable {
                    assert_eq!(name, names[i]);
                    *slot = t[i].clone();
                    i += 1;
                }
            });
            let y = b.forward(&x, &ctx, "")?;
            y.mul(&y)?.mean()
        },
        &values,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn cascade_without_attention_is_dwconv() {
    let base = MetaMobileBlockSpec::irb(6, 6, r(2, 1), 1, 5);
    let cascade = MetaMobileBlockSpec {
        operator: CASCADE.into(),
        ..base.clone()
    };
    let a = MetaMobileBlock::new(base, &mut Initializer::new(9)).unwrap();
    let b = MetaMobileBlock::new(cascade, &mut Initializer::new(9)).unwrap();
    let x = random(&[1, 6, 5, 5], 4, 1.0);
    let ctx = ForwardCtx::eval();
    assert_eq!(a.forward(&x, &ctx, "").unwrap().to_vec(), b.forward(&x, &ctx, "").unwrap().to_vec());
}

#[test]
fn parallel_layout_shapes_and_counts() {
    // EMOv2-5M stage-4 block
    let (c, k) = (288, 5);
    let cascade = MetaMobileBlockSpec::i2rmb(c, c, r(4, 1), 1, 32);
    let parallel = MetaMobileBlockSpec {
        operator: PARALLEL.into(),
        ..cascade.clone()
    };
    let e = cascade.expanded();
    let mut init = Initializer::new(0);
    let a = MetaMobileBlock::new(cascade, &mut init).unwrap();
    let b = MetaMobileBlock::new(parallel, &mut init).unwrap();
    // halving the depthwise branch removes (k²+1)·E/2 conv and E/2·2 BN scalars
    assert_eq!(count_learnable(&a) - count_learnable(&b), (k * k + 1) * e / 2 + e);

    let x = random(&[1, c, 7, 7], 3, 1.0);
    let ctx = ForwardCtx::eval();
    let xn = a.norm.as_ref().unwrap().forward(&x, &ctx).unwrap();
    let expand = |t: &Tensor| Activation::Gelu.apply(&a.expand.forward(t)?);
    let fa = a.operator.forward(&xn, &expand, &ctx, "").unwrap();
    let fb = b.operator.forward(&xn, &expand, &ctx, "").unwrap();
    assert_eq!(fa.shape(), fb.shape());
    assert_eq!(fa.shape()[1], e);
    assert_eq!(b.forward(&x, &ctx, "").unwrap().shape(), x.shape());
}

#[test]
fn eval_drop_path_is_inert() {
    let mut spec = MetaMobileBlockSpec::irb(4, 4, r(2, 1), 1, 3);
    let x = random(&[3, 4, 4, 4], 1, 1.0);
    let plain = MetaMobileBlock::new(spec.clone(), &mut Initializer::new(5)).unwrap();
    spec.drop_path = 0.5;
    let dropped = MetaMobileBlock::new(spec, &mut Initializer::new(5)).unwrap();
    let ctx = ForwardCtx::eval();
    assert_eq!(plain.forward(&x, &ctx, "").unwrap().to_vec(), dropped.forward(&x, &ctx, "").unwrap().to_vec());
    let train = dropped.forward(&x, &ForwardCtx::train(1), "").unwrap();
    assert_eq!(train.shape(), x.shape());
}

#[test]
fn instantiation_counts() {
    let c = 64;
    let mut init = Initializer::new(0);
    let ffn = MetaMobileBlock::new(MetaMobileBlockSpec::ffn(c, r(4, 1)), &mut init).unwrap();
    assert_eq!(ffn.param_count(), 2 * c + (c + 1) * 4 * c + (4 * c + 1) * c);
    let mhsa = MetaMobileBlock::new(MetaMobileBlockSpec::mhsa(c, 16), &mut init).unwrap();
    assert_eq!(mhsa.param_count(), 2 * c + 4 * (c + 1) * c);
    let irmb = MetaMobileBlock::new(MetaMobileBlockSpec::irmb(c, c, r(2, 1), 1, 16), &mut init).unwrap();
    let heads = c / 16;
    let e = 2 * c;
    assert_eq!(
        irmb.param_count(),
        2 * c + 2 * (c + 1) * c + (c / heads + 1) * e + (9 + 1) * e + 2 * e + (e + 1) * c
    );
}

#[test]
fn spanning_toggle_keeps_counts() {
    let spec = MetaMobileBlockSpec::i2rmb(32, 32, r(3, 1), 1, 16);
    let mut neighbor = spec.clone();
    neighbor.attention = neighbor.attention.map(|a| AttentionConfig {
        mode: AttentionMode::Neighbor,
        ..a
    });
    let mut init = Initializer::new(0);
    let a = MetaMobileBlock::new(spec, &mut init).unwrap();
    let b = MetaMobileBlock::new(neighbor, &mut init).unwrap();
    assert_eq!(a.param_count(), b.param_count());
}

#[test]
fn mhsa_block_runs_globally() {
    let b = MetaMobileBlock::new(MetaMobileBlockSpec::mhsa(8, 4), &mut Initializer::new(0)).unwrap();
    let y = b.forward(&random(&[1, 8, 5, 3], 1, 1.0), &ForwardCtx::eval(), "").unwrap();
    assert_eq!(y.shape(), &[1, 8, 5, 3]);
}

#[test]
fn parameter_paths() {
    let b = MetaMobileBlock::new(MetaMobileBlockSpec::i2rmb(16, 16, r(2, 1), 1, 8), &mut Initializer::new(0)).unwrap();
    let names: Vec<String> = named_tensors(&b).into_iter().map(|(n, _, _)| n).collect();
    for want in [
        "blk.norm.weight",
        "blk.expand.weight",
        "blk.attn.qk.weight",
        "blk.attn.qk.bias",
        "blk.dw.conv.weight",
        "blk.dw.norm.running_var",
        "blk.shrink.bias",
    ] {
        let want = want.trim_start_matches("blk.");
        assert!(names.iter().any(|n| n == want), "{want} missing from {names:?}");
    }
}

#[test]
fn spec_validation() {
    let mut init = Initializer::new(0);
    let mut bad = MetaMobileBlockSpec::irmb(16, 16, r(2, 1), 1, 8);
    bad.expand_groups = 1;
    assert!(MetaMobileBlock::new(bad, &mut init).is_err());

    let mut bad = MetaMobileBlockSpec::irb(16, 16, r(2, 1), 3, 3);
    assert!(bad.validate().is_err());
    bad.stride = 1;
    bad.kernel = 4;
    assert!(bad.validate().is_err());

    let mut bad = MetaMobileBlockSpec::i2rmb(16, 16, r(2, 1), 1, 8);
    bad.operator = EW_MHSA.into();
    assert!(MetaMobileBlock::new(bad.clone(), &mut init).is_err());
    bad.operator = "mystery".into();
    assert!(matches!(MetaMobileBlock::new(bad, &mut init), Err(Error::Unknown { .. })));

    let mut odd = MetaMobileBlockSpec::i2rmb(4, 4, r(5, 4), 1, 2);
    odd.operator = PARALLEL.into();
    assert!(MetaMobileBlock::new(odd, &mut init).is_err());

    assert!(MetaMobileBlockSpec::i2rmb(48, 48, r(2, 1), 1, 32).validate().is_err());
}

#[test]
fn custom_operator_registration() {
    struct Negate;
    impl Module for Negate {
        fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Tensor, ParamKind)) {}
        fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {}
    }
    impl EfficientOperator for Negate {
        fn name(&self) -> &'static str {
            "negate"
        }
        fn forward(&self, xn: &Tensor, expand: &dyn Fn(&Tensor) -> Result<Tensor>, _: &ForwardCtx, _: &str) -> Result<Tensor> {
            expand(xn)?.scale(-1.0)
        }
    }
    let mut reg = OperatorRegistry::with_defaults();
    reg.register("negate", |_, _| Ok(Box::new(Negate)));
    assert!(reg.contains("negate") && !operators().contains("negate"));
    let spec = MetaMobileBlockSpec {
        operator: "negate".into(),
        ..MetaMobileBlockSpec::ffn(4, r(2, 1))
    };
    let b = MetaMobileBlock::with_registry(&reg, spec, &mut Initializer::new(0)).unwrap();
    assert_eq!(b.forward(&random(&[1, 4, 2, 2], 0, 1.0), &ForwardCtx::eval(), "").unwrap().shape(), &[1, 4, 2, 2]);
}
