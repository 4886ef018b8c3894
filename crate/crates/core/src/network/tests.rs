use super::*;
use crate::autodiff::avg_pool2;
use crate::losses::wavelet_loss_value;
use crate::wavelet::haar;
use proptest::prelude::*;
use rand::Rng;

fn image(shape: Shape, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

fn pyramid(x: &Tensor<f32>, k: usize) -> Vec<Tensor<f32>> {
    let mut out = vec![x.clone()];
    for _ in 1..k {
        let next = avg_pool2(out.last().unwrap()).unwrap();
        out.push(next);
    }
    out
}

fn run(x: &Tensor<f32>, params: &NetworkParams<f32>, cfg: &NetworkConfig, mode: Mode) -> Vec<Tensor<f32>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = mlwnet_forward(&mut g, xv, params, cfg, mode).unwrap();
    out.images.iter().map(|&v| g.value(v).clone()).collect()
}

#[test]
fn fresh_network_returns_the_resized_input() {
    let cfg = NetworkConfig::default();
    let params = init_params(&cfg, 7).unwrap();
    let x = image(Shape::new(2, 3, 32, 32), 1);
    let outs = run(&x, &params, &cfg, Mode::Train);
    assert_eq!(outs.len(), 3);
    for (o, want) in outs.iter().zip(pyramid(&x, 3)) {
        assert_eq!(o.max_abs_diff(&want).unwrap(), 0.0);
    }
    let shapes: Vec<Shape> = outs.iter().map(Tensor::shape).collect();
    assert_eq!(
        shapes,
        vec![Shape::new(2, 3, 32, 32), Shape::new(2, 3, 16, 16), Shape::new(2, 3, 8, 8)]
    );
}

#[test]
fn inference_matches_training_scale_one() {
    let cfg = NetworkConfig::default();
    let mut params = init_params::<f32>(&cfg, 3).unwrap();
    // make the heads live so the comparison is not between two copies of x
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for s in 1..=cfg.scales {
        for v in params.get_mut(&format!("head{s}.w")).unwrap().data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    let x = image(Shape::new(1, 3, 16, 16), 2);
    let train = run(&x, &params, &cfg, Mode::Train);
    let infer = run(&x, &params, &cfg, Mode::Inference);
    assert_eq!(infer.len(), 1);
    assert_eq!(train[0], infer[0]);
    assert!(train[0].max_abs_diff(&x).unwrap() > 0.0);
}

#[test]
fn initialisation_is_deterministic() {
    let cfg = NetworkConfig::default();
    let a = init_params::<f32>(&cfg, 11).unwrap();
    let b = init_params::<f32>(&cfg, 11).unwrap();
    let c = init_params::<f32>(&cfg, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn initial_banks_satisfy_reconstruction() {
    for n in [2, 4, 6] {
        let cfg = NetworkConfig {
            filter_len: n,
            ..NetworkConfig::default()
        };
        let params = init_params::<f64>(&cfg, 0).unwrap();
        let banks = params.banks().unwrap();
        assert_eq!(banks.len(), 2 * cfg.scales - 1);
        let total: f64 = banks.iter().map(|(_, b)| wavelet_loss_value(b)).sum();
        assert!(total < 1e-10, "{total}");
    }
}

#[test]
fn rejects_bad_inputs() {
    let cfg = NetworkConfig::default();
    let params = init_params::<f32>(&cfg, 0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 3, 12, 16)));
    assert!(matches!(
        mlwnet_forward(&mut g, x, &params, &cfg, Mode::Train),
        Err(Error::Divisibility { .. })
    ));
    let x = g.constant(Tensor::zeros(Shape::new(1, 1, 16, 16)));
    assert!(mlwnet_forward(&mut g, x, &params, &cfg, Mode::Train).is_err());
    let odd = NetworkConfig {
        base_width: 7,
        ..NetworkConfig::default()
    };
    assert!(init_params::<f32>(&odd, 0).is_err());
}

/// LWN parameters with identity channel maps and a centred delta depthwise
/// kernel.
fn identity_lwn(channels: usize, r: usize, bank: &FilterBank<f64>) -> NetworkParams<f64> {
    let wide = 4 * channels * r;
    let mut p = NetworkParams::new();
    let eye = |rows: usize, cols: usize| {
        Tensor::from_fn(Shape::new(rows, cols, 1, 1), |[o, i, ..]| if o == i { 1.0 } else { 0.0 })
    };
    p.insert("blk.pw1.w", eye(wide, 4 * channels)).unwrap();
    p.insert("blk.pw1.b", Tensor::zeros(Shape::vector(wide))).unwrap();
    let delta = Tensor::from_fn(Shape::new(wide, 1, 3, 3), |[_, _, y, x]| if y == 1 && x == 1 { 1.0 } else { 0.0 });
    p.insert("blk.dw.w", delta).unwrap();
    p.insert("blk.dw.b", Tensor::zeros(Shape::vector(wide))).unwrap();
    p.insert("blk.pw2.w", eye(4 * channels, wide)).unwrap();
    p.insert("blk.pw2.b", Tensor::zeros(Shape::vector(4 * channels))).unwrap();
    p.insert_bank("blk.bank", bank).unwrap();
    p
}

fn block_out(kind: BlockKind, params: &NetworkParams<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = kind.forward(&mut g, xv, &mut Binder::new(params), "blk").unwrap();
    g.value(out).clone()
}

fn random64(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn identity_lwn_is_identity() {
    let x = random64(Shape::new(2, 3, 8, 8), 4);
    for bank in [haar(), FilterBank::haar_padded(4).unwrap()] {
        let p = identity_lwn(3, 2, &bank);
        assert!(block_out(BlockKind::Lwn, &p, &x).max_abs_diff(&x).unwrap() < 1e-5);
    }
}

#[test]
fn zero_lwn_is_zero() {
    let mut p = identity_lwn(2, 2, &haar());
    for name in ["blk.pw1.w", "blk.dw.w", "blk.pw2.w"] {
        let t = p.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let x = random64(Shape::new(1, 2, 4, 4), 5);
    assert_eq!(block_out(BlockKind::Lwn, &p, &x).max_abs(), 0.0);
}

#[test]
fn lwn_gradient_reaches_the_bank() {
    let params = init_block_params::<f64>(BlockKind::Lwn, 2, 2, 4, 1, false).unwrap();
    let x = random64(Shape::new(1, 2, 8, 8), 6);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = lwn_forward(&mut g, xv, &mut Binder::new(&params), "blk").unwrap();
    let sq = g.mul(out, out).unwrap();
    let l = g.sum(sq).unwrap();
    let grads = g.backward(l).unwrap();
    let a0 = params.id("blk.bank.a0").unwrap();
    assert!(grads.param(a0).unwrap().max_abs() > 0.0);
}

#[test]
fn fresh_blocks_are_identities() {
    let x = random64(Shape::new(1, 4, 8, 8), 7);
    for kind in [BlockKind::Seb, BlockKind::Wfb, BlockKind::Whb] {
        let p = init_block_params::<f64>(kind, 4, 2, 4, 2, false).unwrap();
        assert_eq!(block_out(kind, &p, &x), x, "{kind:?}");
    }
}

#[test]
fn seb_of_zero_is_zero() {
    let p = init_block_params::<f64>(BlockKind::Seb, 4, 2, 4, 2, true).unwrap();
    let x = Tensor::zeros(Shape::new(1, 4, 8, 8));
    assert_eq!(block_out(BlockKind::Seb, &p, &x).max_abs(), 0.0);
}

#[test]
fn whb_output_equals_wfb_output() {
    let p = init_block_params::<f64>(BlockKind::Wfb, 4, 2, 4, 3, true).unwrap();
    let x = random64(Shape::new(1, 4, 8, 8), 8);
    let wfb = block_out(BlockKind::Wfb, &p, &x);
    assert_eq!(block_out(BlockKind::Whb, &p, &x), wfb);
    assert!(wfb.max_abs_diff(&x).unwrap() > 0.0);
}

#[test]
fn block_gradients() {
    for kind in BlockKind::ALL {
        let r = block_grad_check(kind, 0).unwrap();
        assert!(r.checked > 0);
        assert!(r.max_rel_error < 1e-4, "{kind:?}: {r:?}");
    }
}

#[test]
fn end_to_end_gradient() {
    let cfg = NetworkConfig::micro(8, 2);
    let r = network_grad_check(&cfg, 16, 16, 10, 0).unwrap();
    assert_eq!(r.checked, 10);
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn single_conv_mac_count() {
    assert_eq!(single_conv_macs(3, 16, 3, 64, 64), 1_769_472);
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 3, 64, 64)));
    let k = g.constant(Tensor::zeros(Shape::new(16, 3, 3, 3)));
    g.conv2d(x, k, None, same3x3(1)).unwrap();
    assert_eq!(g.macs(), 1_769_472);
}

#[test]
fn analytic_macs_match_the_executed_graph() {
    for cfg in [NetworkConfig::default(), NetworkConfig::micro(8, 2), NetworkConfig { r: 1, filter_len: 6, blocks_per_stage: vec![2, 1, 3], ..NetworkConfig::default() }] {
        let params = init_params::<f32>(&cfg, 0).unwrap();
        for mode in [Mode::Train, Mode::Inference] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::zeros(Shape::new(1, 3, 32, 64)));
            mlwnet_forward(&mut g, x, &params, &cfg, mode).unwrap();
            assert_eq!(count_macs(&cfg, 32, 64, mode).unwrap().total, g.macs(), "{cfg:?} {mode:?}");
        }
    }
}

#[test]
fn mac_scaling() {
    let cfg = NetworkConfig::default();
    let small = count_macs(&cfg, 64, 64, Mode::Train).unwrap().total;
    let large = count_macs(&cfg, 128, 128, Mode::Train).unwrap().total;
    assert_eq!(large, 4 * small);
    assert!(count_macs(&cfg, 64, 64, Mode::Inference).unwrap().total < small);

    let wide = NetworkConfig {
        base_width: 32,
        ..cfg.clone()
    };
    let ratio = count_macs(&wide, 64, 64, Mode::Train).unwrap().total as f64 / small as f64;
    assert!(ratio > 3.5 && ratio < 4.0, "{ratio}");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = NetworkConfig::micro(8, 2);
    let mut params = init_params::<f32>(&cfg, 5).unwrap();
    params.get_mut("fuse2.wfb.lwn.bank.a0").unwrap().data_mut()[1] = 0.123_456_79;
    save_checkpoint(dir.path(), &params, &cfg).unwrap();
    let (back, cfg2) = load_checkpoint::<f32>(dir.path()).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(back, params);

    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l == "embed.w 8x3x3x3 f32"));
    assert!(manifest.lines().any(|l| l == "dec1.whb.lwn.bank 4x4 bank"));
}

#[test]
fn checkpoint_rejects_wrong_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = NetworkConfig::micro(8, 2);
    save_checkpoint(dir.path(), &init_params::<f32>(&cfg, 5).unwrap(), &cfg).unwrap();
    std::fs::write(dir.path().join("config.txt"), NetworkConfig::micro(16, 2).to_text()).unwrap();
    assert!(load_checkpoint::<f32>(dir.path()).is_err());
}

#[test]
fn config_text_round_trip() {
    let cfg = NetworkConfig {
        blocks_per_stage: vec![2, 1, 3],
        ..NetworkConfig::default()
    };
    assert_eq!(NetworkConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    assert!(NetworkConfig::from_text("depth=3").is_err());
    let c = NetworkConfig::from_text("blocks_per_stage=2\nscales=4").unwrap();
    assert_eq!(c.blocks_per_stage, vec![2; 4]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn identity_at_init_for_any_config(
        base in 1usize..4,
        scales in 2usize..4,
        r in 1usize..3,
        half_n in 1usize..4,
        seed in any::<u64>(),
    ) {
        let cfg = NetworkConfig {
            base_width: 2 * base,
            scales,
            blocks_per_stage: vec![1; scales],
            r,
            filter_len: 2 * half_n,
        };
        let params = init_params::<f32>(&cfg, seed).unwrap();
        let side = 1usize << (scales + 1);
        let x = image(Shape::new(1, 3, side, side), seed);
        let outs = run(&x, &params, &cfg, Mode::Train);
        for (o, want) in outs.iter().zip(pyramid(&x, scales)) {
            prop_assert_eq!(o, &want);
        }
    }
}
