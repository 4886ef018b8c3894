//! Independent oracles for the transforms and convolutions: the 2D
//! transform against nested 1D transforms, and the transposed convolution
//! against the inner-product definition of the adjoint.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wavedeblur::conv::{conv2d_forward, conv2d_transpose_forward, ConvOptions, Padding};
use wavedeblur::wavelet::{db2, dwt1, dwt2, haar, idwt2, FilterBank};
use wavedeblur::{Shape, Tensor};

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn random_bank(n: usize, rng: &mut ChaCha8Rng) -> FilterBank<f64> {
    let mut f = || (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>();
    FilterBank::new(f(), f(), f(), f()).unwrap()
}

/// Rows first, then columns, with `dwt1` only.
fn nested_dwt(x: &[f64], h: usize, w: usize, bank: &FilterBank<f64>) -> [Vec<f64>; 4] {
    let (h2, w2) = (h / 2, w / 2);
    let mut row_lo = vec![0.0; h * w2];
    let mut row_hi = vec![0.0; h * w2];
    for i in 0..h {
        let s = dwt1(&x[i * w..(i + 1) * w], bank).unwrap();
        row_lo[i * w2..(i + 1) * w2].copy_from_slice(&s.approx);
        row_hi[i * w2..(i + 1) * w2].copy_from_slice(&s.detail);
    }
    let columns = |m: &[f64]| {
        let mut lo = vec![0.0; h2 * w2];
        let mut hi = vec![0.0; h2 * w2];
        for j in 0..w2 {
            let col: Vec<f64> = (0..h).map(|i| m[i * w2 + j]).collect();
            let s = dwt1(&col, bank).unwrap();
            for p in 0..h2 {
                lo[p * w2 + j] = s.approx[p];
                hi[p * w2 + j] = s.detail[p];
            }
        }
        (lo, hi)
    };
    let (ll, hl) = columns(&row_lo);
    let (lh, hh) = columns(&row_hi);
    [ll, lh, hl, hh]
}

fn separability_error(bank: &FilterBank<f64>, h: usize, w: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(Shape::new(1, 1, h, w), &mut rng);
    let y = dwt2(&x, bank).unwrap();
    let want = nested_dwt(x.data(), h, w, bank);
    let plane = (h / 2) * (w / 2);
    (0..4)
        .flat_map(|b| {
            let got = &y.data()[b * plane..(b + 1) * plane];
            got.iter().zip(&want[b]).map(|(a, e)| (a - e).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

#[test]
fn dwt2_is_nested_dwt1_for_classical_banks() {
    for bank in [haar(), db2()] {
        assert!(separability_error(&bank, 8, 8, 1) < 1e-12);
    }
}

/// `<conv(x), y> - <x, conv_t(y)>`, relative to the size of the terms.
fn adjoint_gap(opts: ConvOptions, c: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pad = opts.padding.before + opts.padding.after;
    let side = if (8 + pad - 3) % opts.stride == 0 { 8 } else { 9 };
    let x = random(Shape::new(2, c, side, side), &mut rng);
    let k = random(Shape::new(6, c / opts.groups, 3, 3), &mut rng);
    let (fx, _) = conv2d_forward(&x, &k, None, opts).unwrap();
    let y = random(fx.shape(), &mut rng);
    let (ty, _) = conv2d_transpose_forward(&y, &k, opts).unwrap();
    assert_eq!(ty.shape(), x.shape());
    let lhs = fx.dot(&y).unwrap();
    let rhs = x.dot(&ty).unwrap();
    (lhs - rhs).abs() / lhs.abs().max(1.0)
}

fn every_option(c: usize) -> Vec<ConvOptions> {
    let mut out = Vec::new();
    for stride in [1, 2] {
        for groups in [1, c] {
            for padding in [Padding::zero(1), Padding::circular(1), Padding::circular_leading(2), Padding::none()] {
                out.push(ConvOptions::new(stride, groups, padding));
            }
        }
    }
    out
}

#[test]
fn transposed_convolution_is_the_adjoint() {
    for (i, opts) in every_option(3).into_iter().enumerate() {
        let gap = adjoint_gap(opts, 3, i as u64);
        assert!(gap < 1e-10, "{opts:?}: {gap:e}");
    }
}

#[test]
fn only_matched_banks_reconstruct() {
    // A random bank is not perfect-reconstruction; its mismatch must show.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bank = random_bank(4, &mut rng);
    let x = random(Shape::new(1, 2, 8, 8), &mut rng);
    let back = idwt2(&dwt2(&x, &bank).unwrap(), &bank).unwrap();
    assert!(back.max_abs_diff(&x).unwrap() > 1e-3);
    let back = idwt2(&dwt2(&x, &db2()).unwrap(), &db2()).unwrap();
    assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn separability_holds_for_any_bank(seed in any::<u64>(), half_n in 1usize..4, hh in 2usize..6, hw in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = random_bank(2 * half_n, &mut rng);
        prop_assert!(separability_error(&bank, 2 * hh, 2 * hw, seed) < 1e-12);
    }

    #[test]
    fn adjoint_identity_holds(seed in any::<u64>(), c in 1usize..4, which in 0usize..16) {
        let opts = every_option(c)[which];
        prop_assert!(adjoint_gap(opts, c, seed) < 1e-10);
    }

    #[test]
    fn round_trip_for_classical_banks(seed in any::<u64>(), c in 1usize..4, hh in 1usize..6, hw in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(Shape::new(2, c, 2 * hh, 2 * hw), &mut rng);
        for bank in [haar(), db2()] {
            let back = idwt2(&dwt2(&x, &bank).unwrap(), &bank).unwrap();
            prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
        }
    }
}
