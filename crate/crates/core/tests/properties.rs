use std::io::Cursor;

use num_rational::Ratio;
use proptest::prelude::*;

use emov2::backbone::{Backbone, BackboneConfig};
use emov2::checks::{max_rel_diff, random_tensor};
use emov2::cost::{report_model, trace_model, ReachLayer, Reachability};
use emov2::io::{read_tensor, write_tensor, DType};
use emov2::nn::{Conv2d, ConvSpec, Initializer};
use emov2::window::{
    partitions, AttentionConfig, AttentionMode, Ordering, WindowAttention, WindowGeometry, WindowMode, WindowSize,
};
use emov2::Tensor;

fn divisible_geometry() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (4usize..=64, 4usize..=64).prop_flat_map(|(hh, ww)| {
        let dh: Vec<usize> = (1..=hh).filter(|d| hh % d == 0).collect();
        let dw: Vec<usize> = (1..=ww).filter(|d| ww % d == 0).collect();
        (Just(hh), Just(ww), proptest::sample::select(dh), proptest::sample::select(dw))
    })
}

fn reach_layer() -> impl Strategy<Value = ReachLayer> {
    prop_oneof![
        prop::sample::select(vec![3usize, 5]).prop_map(|k| ReachLayer::DwConv { k }),
        Just(ReachLayer::Neighbor { h: 4, w: 2 }),
        Just(ReachLayer::Distant { h: 2, w: 4 }),
        Just(ReachLayer::Spanning { h: 4, w: 4 }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partitions_are_bijective((hh, ww, h, w) in divisible_geometry(), c in 1usize..3, seed in any::<u64>()) {
        let g = WindowGeometry::strict(hh, ww, h, w).unwrap();
        prop_assert_eq!(g.windows() * g.patch_len(), hh * ww);
        let x = random_tensor(&[1, c, hh, ww], seed, 1.0);
        for name in partitions().names() {
            let s = partitions().get(name).unwrap();
            let xw = s.partition(&x, &g).unwrap();
            prop_assert_eq!(xw.shape(), &[g.windows(), c, g.patch_len()]);
            let back = s.reverse(&xw, &g).unwrap();
            prop_assert!(back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn padded_partition_round_trips(hh in 3usize..20, ww in 3usize..20, h in 2usize..6, w in 2usize..6) {
        let g = WindowGeometry::resolve(WindowSize::Fixed { h, w }, WindowMode::Pad, hh, ww).unwrap();
        prop_assert_eq!(g.padded_height % h, 0);
        prop_assert!(g.padded_height - hh < h && g.padded_width - ww < w);
        let x = random_tensor(&[1, 2, hh, ww], 1, 1.0).pad_bottom_right(g.padded_height - hh, g.padded_width - ww).unwrap();
        for name in partitions().names() {
            let s = partitions().get(name).unwrap();
            let back = s.reverse(&s.partition(&x, &g).unwrap(), &g).unwrap();
            prop_assert_eq!(back.to_vec(), x.to_vec());
        }
    }

    #[test]
    fn reachability_only_grows(stack in prop::collection::vec(reach_layer(), 1..6)) {
        let mut r = Reachability::new(16, 16);
        let mut prev_cov = r.coverage(r.center());
        for layer in &stack {
            let before = r.clone();
            r.apply(layer).unwrap();
            for p in (0..256).step_by(17) {
                for q in 0..256 {
                    prop_assert!(!before.reaches(q, p) || r.reaches(q, p));
                }
            }
            let cov = r.coverage(r.center());
            prop_assert!(cov >= prev_cov);
            prev_cov = cov;
        }
    }

    #[test]
    fn tensor_files_round_trip(shape in prop::collection::vec(1usize..5, 0..5), seed in any::<u64>()) {
        let t = random_tensor(&shape, seed, 1e3);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F64).unwrap();
        let expected = 4 + 4 + 4 + 8 * shape.len() + 1 + 8 * t.numel();
        prop_assert_eq!(buf.len(), expected);
        let (back, _) = read_tensor(&mut Cursor::new(buf)).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pre_post_agree_for_grouped_linear_value(
        heads in 1usize..4,
        hd in 1usize..4,
        lambda in 1usize..4,
        win in 1usize..4,
        tiles in 1usize..3,
        mode in prop::sample::select(vec![AttentionMode::Neighbor, AttentionMode::Distant, AttentionMode::Spanning]),
        seed in any::<u32>(),
    ) {
        let c = heads * hd;
        let side = win * tiles;
        let cfg = AttentionConfig::new(hd, mode, Ordering::Post)
            .with_window(WindowSize::Fixed { h: win, w: win }, WindowMode::Strict);
        let mut init = Initializer::new(seed as u64);
        let post = WindowAttention::new(c, cfg, &mut init).unwrap();
        let pre = WindowAttention { cfg: AttentionConfig { ordering: Ordering::Pre, ..cfg }, ..post.clone() };
        let v = Conv2d::new(ConvSpec::pointwise(c, lambda * c, heads), &mut init).unwrap();
        let x = random_tensor(&[2, c, side, side], seed as u64, 2.0);
        let value = |t: &Tensor| v.forward(t);
        let a = pre.forward(&x, &value).unwrap();
        let b = post.forward(&x, &value).unwrap();
        prop_assert!(max_rel_diff(&a.to_vec(), &b.to_vec()) < 1e-5);
    }
}

fn small_config() -> impl Strategy<Value = BackboneConfig> {
    (
        prop::collection::vec(1usize..3, 4),
        prop::collection::vec(1usize..3, 4),
        prop::collection::vec((1u32..8, 1u32..3), 4),
        any::<bool>(),
        prop::sample::select(vec![4usize, 8]),
    )
        .prop_map(|(depths, widths, ratios, spanning, head_dim)| {
            let mut c = BackboneConfig::toy();
            let mut dim = 0;
            for (i, s) in c.stages.iter_mut().enumerate() {
                dim += widths[i] * 8;
                s.depth = depths[i];
                s.dim = dim;
                s.exp_ratio = Ratio::new(ratios[i].0, ratios[i].1);
                s.head_dim = head_dim;
                s.spanning = s.attention && spanning;
            }
            c.stem.width = c.stages[0].dim / 2;
            c
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn config_round_trips(config in small_config()) {
        prop_assume!(config.validate().is_ok());
        let again = BackboneConfig::from_toml_str(&config.to_toml_string()).unwrap();
        prop_assert_eq!(again, config);
    }

    #[test]
    fn analytic_cost_matches_model(config in small_config(), res in prop::sample::select(vec![32usize, 64])) {
        prop_assume!(config.validate().is_ok());
        let report = report_model(&config, res, res).unwrap();
        prop_assert_eq!(report.total_params(), Backbone::build(&config, 0).unwrap().param_count() as u64);
        prop_assert_eq!(report.total_flops(), trace_model(&config, res, res).unwrap().total_flops());
    }
}
