//! Differentiable training losses.
//!
//! All losses are recorded on a [`Graph`] so they can be combined and
//! differentiated together with the network. Plain-value twins are provided
//! where tools need a number without a tape.

use crate::autodiff::{avg_pool2, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};
use crate::wavelet::{poly_product, BankVars, FilterBank};

/// Clamp added to the mean squared error before the logarithm.
pub const PSNR_LOSS_EPS: f64 = 1e-8;

/// `10·log10(MSE(x, y) + ε)`, the MSE taken per batch item and the
/// logarithms averaged over the batch.
pub fn psnr_loss<T: Element>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    if g.shape(x) != g.shape(y) {
        return Err(Error::shape("psnr_loss", g.shape(x), g.shape(y)));
    }
    let d = g.sub(x, y)?;
    let sq = g.mul(d, d)?;
    let mse = g.sample_mean(sq)?;
    let log = g.log10(mse, PSNR_LOSS_EPS)?;
    let mean = g.mean(log)?;
    g.scale(mean, 10.0)
}

pub fn psnr_loss_value<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("psnr_loss", x.shape(), y.shape()));
    }
    let n = x.shape().n();
    let per = x.len() / n;
    let mut total = 0.0;
    for (a, b) in x.data().chunks(per).zip(y.data().chunks(per)) {
        let mse = a.iter().zip(b).map(|(&p, &q)| (p.f64() - q.f64()).powi(2)).sum::<f64>() / per as f64;
        total += 10.0 * (mse + PSNR_LOSS_EPS).log10();
    }
    Ok(total / n as f64)
}

/// `[y, pool(y), pool(pool(y)), ...]` with `k` entries.
pub fn make_target_pyramid<T: Element>(y: &Tensor<T>, k: usize) -> Result<Vec<Tensor<T>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("pyramid needs at least one scale".into()));
    }
    let factor = 1usize << (k - 1);
    let s = y.shape();
    if s.h() % factor != 0 || s.w() % factor != 0 {
        return Err(Error::Divisibility {
            op: "make_target_pyramid",
            height: s.h(),
            width: s.w(),
            factor,
        });
    }
    let mut out = vec![y.clone()];
    for _ in 1..k {
        let next = avg_pool2(out.last().expect("non-empty"))?;
        out.push(next);
    }
    Ok(out)
}

/// Per-scale network outputs, finest first, with their loss weights.
#[derive(Clone, Debug)]
pub struct ScaleOutputs {
    pub images: Vec<Var>,
    pub weights: Vec<f64>,
}

impl ScaleOutputs {
    /// Weights default to `1/k` for scale `k = 1..K`.
    pub fn new(images: Vec<Var>) -> Self {
        let weights = (1..=images.len()).map(|k| 1.0 / k as f64).collect();
        ScaleOutputs { images, weights }
    }

    pub fn with_weights(images: Vec<Var>, weights: Vec<f64>) -> Result<Self> {
        if images.len() != weights.len() {
            return Err(Error::shape("ScaleOutputs", images.len(), weights.len()));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument("scale weights must be positive".into()));
        }
        Ok(ScaleOutputs { images, weights })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// `Σ_k w_k · psnr_loss(x_k, y_k)`.
pub fn multi_scale_loss<T: Element>(g: &mut Graph<T>, outputs: &ScaleOutputs, targets: &[Var]) -> Result<Var> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::shape("multi_scale_loss", outputs.len(), targets.len()));
    }
    for pair in outputs.images.windows(2) {
        let (fine, coarse) = (g.shape(pair[0]), g.shape(pair[1]));
        if coarse.h() * 2 != fine.h() || coarse.w() * 2 != fine.w() {
            return Err(Error::shape("multi_scale_loss", "half the previous resolution", coarse));
        }
    }
    let mut total: Option<Var> = None;
    for ((&x, &y), &w) in outputs.images.iter().zip(targets).zip(&outputs.weights) {
        let l = psnr_loss(g, x, y)?;
        let l = g.scale(l, w)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(total.expect("at least one scale"))
}

fn alternating_signs<T: Element>(n: usize) -> Tensor<T> {
    Tensor::from_fn(Shape::vector(n), |[.., i]| if i % 2 == 0 { T::one() } else { -T::one() })
}

fn reconstruction_target<T: Element>(n: usize) -> Tensor<T> {
    Tensor::from_fn(Shape::vector(2 * n - 1), |[.., i]| if i == n - 1 { T::of(2.0) } else { T::zero() })
}

/// Perfect-reconstruction penalty of a bank:
/// `Σ (a0*s0 + a1*s1 − 2δ_{N−1})² + Σ (ã0*s0 + ã1*s1)²` with
/// `ã[n] = (−1)ⁿ a[n]`.
pub fn wavelet_loss<T: Element>(g: &mut Graph<T>, bank: &BankVars) -> Result<Var> {
    let n = g.shape(bank.a0).numel();
    let p0 = g.poly_product(bank.a0, bank.s0)?;
    let p1 = g.poly_product(bank.a1, bank.s1)?;
    let p = g.add(p0, p1)?;
    let target = g.constant(reconstruction_target(n));
    let dp = g.sub(p, target)?;
    let dp2 = g.mul(dp, dp)?;
    let lp = g.sum(dp2)?;

    let signs = g.constant(alternating_signs(n));
    let m0 = g.mul(bank.a0, signs)?;
    let m1 = g.mul(bank.a1, signs)?;
    let q0 = g.poly_product(m0, bank.s0)?;
    let q1 = g.poly_product(m1, bank.s1)?;
    let q = g.add(q0, q1)?;
    let q2 = g.mul(q, q)?;
    let lq = g.sum(q2)?;
    g.add(lp, lq)
}

/// [`wavelet_loss`] evaluated directly in `f64`.
pub fn wavelet_loss_value<T: Element>(bank: &FilterBank<T>) -> f64 {
    let bank: FilterBank<f64> = bank.cast();
    let n = bank.len();
    let alt = |a: &[f64]| -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(i, &v)| if i % 2 == 0 { v } else { -v })
            .collect()
    };
    let conv = |u: &[f64], v: &[f64]| poly_product(u, v).expect("equal non-empty lengths");
    let p0 = conv(&bank.a0, &bank.s0);
    let p1 = conv(&bank.a1, &bank.s1);
    let q0 = conv(&alt(&bank.a0), &bank.s0);
    let q1 = conv(&alt(&bank.a1), &bank.s1);
    (0..2 * n - 1)
        .map(|m| {
            let target = if m == n - 1 { 2.0 } else { 0.0 };
            (p0[m] + p1[m] - target).powi(2) + (q0[m] + q1[m]).powi(2)
        })
        .sum()
}

/// Scalar handles of the pieces of [`total_loss`].
#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    pub total: Var,
    pub multi: Var,
    pub wavelet: Option<Var>,
}

/// `wavelet_weight · Σ_banks wavelet_loss + multi_scale_loss`. A weight of
/// one gives the plain sum; an empty bank list drops the wavelet term.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    outputs: &ScaleOutputs,
    targets: &[Var],
    banks: &[BankVars],
    wavelet_weight: f64,
) -> Result<TotalLoss> {
    let multi = multi_scale_loss(g, outputs, targets)?;
    let mut wavelet: Option<Var> = None;
    for bank in banks {
        let l = wavelet_loss(g, bank)?;
        wavelet = Some(match wavelet {
            Some(w) => g.add(w, l)?,
            None => l,
        });
    }
    let total = match wavelet {
        Some(w) => {
            let w = if wavelet_weight == 1.0 { w } else { g.scale(w, wavelet_weight)? };
            g.add(multi, w)?
        }
        None => multi,
    };
    Ok(TotalLoss { total, multi, wavelet })
}
