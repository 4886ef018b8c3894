//! Evaluation metrics: PSNR and SSIM.
//!
//! Both are computed in `f64` regardless of the tensor element type.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check<T: Element>(x: &Tensor<T>, y: &Tensor<T>, op: &'static str) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(op, x.shape(), y.shape()));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument(format!("{op} of an empty tensor")));
    }
    Ok(())
}

/// Terms are summed in sorted order, so any permutation of the pixels gives
/// the same bits.
pub fn mse<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check(x, y, "mse")?;
    let mut sq: Vec<f64> = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a.f64() - b.f64()).powi(2))
        .collect();
    sq.sort_unstable_by(f64::total_cmp);
    Ok(sq.iter().sum::<f64>() / x.len() as f64)
}

/// `10·log10(peak² / MSE)`; `f64::INFINITY` when the images are equal.
pub fn psnr_metric<T: Element>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalised 1D Gaussian taps.
fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable valid-window filtering of one plane.
fn blur(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Structural similarity with an 11×11 Gaussian window (σ = 1.5) over the
/// valid region, averaged over every channel of every batch item. Planes
/// smaller than the window use a window as large as the plane allows.
pub fn ssim_metric<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    ssim_with_peak(x, y, 1.0)
}

pub fn ssim_with_peak<T: Element>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    check(x, y, "ssim")?;
    let [_, _, h, w] = x.shape().0;
    let taps = gaussian(SSIM_WINDOW.min(h).min(w), SSIM_SIGMA);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    let mut planes = 0;
    for (px, py) in x.data().chunks(plane).zip(y.data().chunks(plane)) {
        let a: Vec<f64> = px.iter().map(|v| v.f64()).collect();
        let b: Vec<f64> = py.iter().map(|v| v.f64()).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let (mu_a, oh, ow) = blur(&a, h, w, &taps);
        let (mu_b, ..) = blur(&b, h, w, &taps);
        let (e_aa, ..) = blur(&prod(&a, &a), h, w, &taps);
        let (e_bb, ..) = blur(&prod(&b, &b), h, w, &taps);
        let (e_ab, ..) = blur(&prod(&a, &b), h, w, &taps);
        let mut sum = 0.0;
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            sum += num / den;
        }
        total += sum / (oh * ow) as f64;
        planes += 1;
    }
    Ok(total / planes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    fn pattern(shape: Shape, seed: u64) -> Tensor<f64> {
        Tensor::from_fn(shape, |[n, c, y, x]| {
            let h = (seed ^ ((n * 7919 + c * 104729 + y * 131 + x) as u64)).wrapping_mul(0x9E3779B97F4A7C15);
            (h >> 11) as f64 / (1u64 << 53) as f64
        })
    }

    #[test]
    fn equal_images() {
        let x = pattern(Shape::new(1, 3, 16, 16), 1);
        assert_eq!(psnr_metric(&x, &x, 1.0).unwrap(), f64::INFINITY);
        assert!((ssim_metric(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn twenty_decibels() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 8, 8), 0.5);
        let y = Tensor::full(Shape::new(1, 1, 8, 8), 0.6);
        assert!((psnr_metric(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn inverted_binary_image_is_anticorrelated() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 24, 24), |[_, _, y, x]| ((y / 3 + x / 2) % 2) as f64);
        let inv = x.map(|v| 1.0 - v);
        assert!(ssim_metric(&x, &inv).unwrap() < 0.0);
    }

    #[test]
    fn gaussian_window() {
        let g = gaussian(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
        assert!(g[5] > g[4]);
    }

    #[test]
    fn small_planes_shrink_the_window() {
        let x = pattern(Shape::new(1, 1, 5, 7), 2);
        assert!((ssim_metric(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_shapes() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 4));
        let y = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 5));
        assert!(psnr_metric(&x, &y, 1.0).is_err());
        assert!(ssim_metric(&x, &y).is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
            let x = pattern(Shape::new(1, 2, 13, 12), s1);
            let y = pattern(Shape::new(1, 2, 13, 12), s2);
            prop_assert_eq!(psnr_metric(&x, &y, 1.0).unwrap(), psnr_metric(&y, &x, 1.0).unwrap());
            let (a, b) = (ssim_metric(&x, &y).unwrap(), ssim_metric(&y, &x).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&a));
        }
    }
}
