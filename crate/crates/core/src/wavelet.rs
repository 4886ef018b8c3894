//! Learnable discrete wavelet transforms.
//!
//! A [`FilterBank`] holds analysis filters `a0` (low-pass) and `a1`
//! (high-pass) and synthesis filters `s0`, `s1`, all of one even length
//! `N`. The 2D transform of a `C`-channel map is a grouped, stride-2
//! cross-correlation with `C` groups of four `N x N` kernels built from
//! outer products of the analysis filters; output channel `4c + b` holds
//! subband `b` (LL, LH, HL, HH) of input channel `c`.
//!
//! Boundaries are periodic, with `N - 2` samples of padding on the leading
//! side. The inverse is a grouped transposed convolution with the
//! synthesis kernels reversed along both axes under the same padding, which
//! reconstructs the input exactly whenever
//! `A0(z)S0(z) + A1(z)S1(z) = 2 z^-(N-1)` and
//! `A0(-z)S0(z) + A1(-z)S1(z) = 0` (see [`crate::losses::wavelet_loss`]).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::{poly_product_values, wavelet_kernel_values, Graph, Var, SUBBANDS};
use crate::conv::{self, ConvOptions, Padding};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

pub const DEFAULT_FILTER_LEN: usize = 4;

/// Analysis and synthesis filters of a two-channel filter bank.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank<T> {
    pub a0: Vec<T>,
    pub a1: Vec<T>,
    pub s0: Vec<T>,
    pub s1: Vec<T>,
    pub learnable: bool,
}

impl<T: Element> FilterBank<T> {
    pub fn new(a0: Vec<T>, a1: Vec<T>, s0: Vec<T>, s1: Vec<T>) -> Result<Self> {
        let n = a0.len();
        if n < 2 || n % 2 != 0 {
            return Err(Error::InvalidArgument(format!("filter length {n} must be even and >= 2")));
        }
        if a1.len() != n || s0.len() != n || s1.len() != n {
            return Err(Error::InvalidArgument(format!(
                "filter lengths differ: {} {} {} {}",
                n,
                a1.len(),
                s0.len(),
                s1.len()
            )));
        }
        Ok(FilterBank {
            a0,
            a1,
            s0,
            s1,
            learnable: true,
        })
    }

    /// Orthogonal bank from its analysis pair, with `s_i = reverse(a_i)`.
    pub fn orthogonal(a0: Vec<T>, a1: Vec<T>) -> Result<Self> {
        let s0 = a0.iter().rev().copied().collect();
        let s1 = a1.iter().rev().copied().collect();
        Self::new(a0, a1, s0, s1)
    }

    pub fn len(&self) -> usize {
        self.a0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a0.is_empty()
    }

    pub fn filters(&self) -> [&[T]; 4] {
        [&self.a0, &self.a1, &self.s0, &self.s1]
    }

    pub fn cast<U: Element>(&self) -> FilterBank<U> {
        let c = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect();
        FilterBank {
            a0: c(&self.a0),
            a1: c(&self.a1),
            s0: c(&self.s0),
            s1: c(&self.s1),
            learnable: self.learnable,
        }
    }

    /// Haar bank zero-padded symmetrically to length `n`, which keeps the
    /// reconstruction delay at `n - 1`.
    pub fn haar_padded(n: usize) -> Result<Self> {
        if n < 2 || n % 2 != 0 {
            return Err(Error::InvalidArgument(format!("filter length {n} must be even and >= 2")));
        }
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let off = (n - 2) / 2;
        let mut a0 = vec![T::zero(); n];
        let mut a1 = vec![T::zero(); n];
        a0[off] = T::of(h);
        a0[off + 1] = T::of(h);
        a1[off] = T::of(h);
        a1[off + 1] = T::of(-h);
        Self::orthogonal(a0, a1)
    }

    /// Text form: the length on the first line, then one line per filter.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.len());
        for (name, f) in ["a0", "a1", "s0", "s1"].iter().zip(self.filters()) {
            out.push_str(name);
            out.push(':');
            for v in f {
                write!(out, " {:.16e}", v.f64()).expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let n: usize = lines
            .next()
            .ok_or_else(|| Error::Format("empty filter bank file".into()))?
            .parse()
            .map_err(|_| Error::Format("first line must be the filter length".into()))?;
        let mut filters: [Vec<T>; 4] = Default::default();
        for (slot, name) in filters.iter_mut().zip(["a0", "a1", "s0", "s1"]) {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("missing `{name}:` line")))?;
            let rest = line
                .strip_prefix(name)
                .and_then(|r| r.strip_prefix(':'))
                .ok_or_else(|| Error::Format(format!("expected `{name}:`, got {line:?}")))?;
            let vals = rest
                .split_whitespace()
                .map(|v| v.parse::<f64>().map(T::of))
                .collect::<std::result::Result<Vec<T>, _>>()
                .map_err(|e| Error::Format(format!("{name}: {e}")))?;
            if vals.len() != n {
                return Err(Error::Format(format!("{name}: expected {n} values, got {}", vals.len())));
            }
            *slot = vals;
        }
        if lines.next().is_some() {
            return Err(Error::Format("trailing content after s1".into()));
        }
        let [a0, a1, s0, s1] = filters;
        Self::new(a0, a1, s0, s1).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Haar bank: `a0 = [1, 1]/√2`, `a1 = [1, -1]/√2`, `s_i = reverse(a_i)`.
pub fn haar<T: Element>() -> FilterBank<T> {
    FilterBank::haar_padded(2).expect("length 2 is valid")
}

/// Length-4 Daubechies bank with `s_i = reverse(a_i)`.
pub fn db2<T: Element>() -> FilterBank<T> {
    let r3 = 3f64.sqrt();
    let d = 4.0 * std::f64::consts::SQRT_2;
    let h = [(1.0 + r3) / d, (3.0 + r3) / d, (3.0 - r3) / d, (1.0 - r3) / d];
    // quadrature mirror: g[k] = (-1)^k h[N-1-k]
    let g: Vec<f64> = (0..4).map(|k| if k % 2 == 0 { h[3 - k] } else { -h[3 - k] }).collect();
    FilterBank::orthogonal(h.iter().map(|&v| T::of(v)).collect(), g.iter().map(|&v| T::of(v)).collect())
        .expect("length 4 is valid")
}

/// Resolves `haar`, `db2`, or a path to a bank text file.
pub fn named_bank<T: Element>(spec: &str) -> Result<FilterBank<T>> {
    match spec {
        "haar" => Ok(haar()),
        "db2" => Ok(db2()),
        path if Path::new(path).exists() => FilterBank::load(path),
        other => Err(Error::InvalidArgument(format!(
            "unknown bank {other:?} (expected haar, db2 or an existing file)"
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Analysis,
    Synthesis,
}

/// The four `N x N` subband kernels of a bank, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletKernel2D<T> {
    pub n: usize,
    pub ll: Vec<T>,
    pub lh: Vec<T>,
    pub hl: Vec<T>,
    pub hh: Vec<T>,
    pub direction: Direction,
}

fn outer<T: Element>(u: &[T], v: &[T]) -> Vec<T> {
    u.iter().flat_map(|&a| v.iter().map(move |&b| a * b)).collect()
}

fn build_kernel<T: Element>(lo: &[T], hi: &[T], direction: Direction) -> WaveletKernel2D<T> {
    WaveletKernel2D {
        n: lo.len(),
        ll: outer(lo, lo),
        lh: outer(lo, hi),
        hl: outer(hi, lo),
        hh: outer(hi, hi),
        direction,
    }
}

pub fn build_analysis_kernel<T: Element>(bank: &FilterBank<T>) -> WaveletKernel2D<T> {
    build_kernel(&bank.a0, &bank.a1, Direction::Analysis)
}

pub fn build_synthesis_kernel<T: Element>(bank: &FilterBank<T>) -> WaveletKernel2D<T> {
    build_kernel(&bank.s0, &bank.s1, Direction::Synthesis)
}

impl<T: Element> WaveletKernel2D<T> {
    pub fn subbands(&self) -> [&[T]; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }

    /// `K_w`: the subband kernels stacked in LL, LH, HL, HH order as a
    /// `(4, 1, N, N)` tensor.
    pub fn stacked(&self) -> Tensor<T> {
        let data = self.subbands().concat();
        Tensor::from_vec(Shape::new(4, 1, self.n, self.n), data).expect("kernel shape")
    }
}

/// Approximation and detail coefficients of one 1D decomposition level.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSignal1D<T> {
    pub approx: Vec<T>,
    pub detail: Vec<T>,
}

/// One level of the 1D transform: `c[p] = Σ_k a0[k] x[2p + k - (N-2)]`
/// (indices periodic), and likewise `d` with `a1`.
pub fn dwt1<T: Element>(signal: &[T], bank: &FilterBank<T>) -> Result<SubbandSignal1D<T>> {
    let len = signal.len();
    if len == 0 || len % 2 != 0 {
        return Err(Error::OddLength { op: "dwt1", len });
    }
    let n = bank.len();
    let lead = (n - 2) as isize;
    let corr = |f: &[T], p: usize| {
        f.iter().enumerate().fold(T::zero(), |acc, (k, &c)| {
            let i = (2 * p as isize + k as isize - lead).rem_euclid(len as isize) as usize;
            acc + c * signal[i]
        })
    };
    Ok(SubbandSignal1D {
        approx: (0..len / 2).map(|p| corr(&bank.a0, p)).collect(),
        detail: (0..len / 2).map(|p| corr(&bank.a1, p)).collect(),
    })
}

/// Full linear convolution `w[m] = Σ_n u[n] v[m - n]`, the coefficient
/// sequence of the product of the two z-transforms.
pub fn poly_product<T: Element>(u: &[T], v: &[T]) -> Result<Vec<T>> {
    if u.is_empty() || v.is_empty() {
        return Err(Error::InvalidArgument("poly_product of an empty vector".into()));
    }
    Ok(poly_product_values(u, v))
}

/// Stride, groups and padding of the transform of a `channels`-channel map.
pub fn transform_options(channels: usize, filter_len: usize) -> ConvOptions {
    ConvOptions::new(2, channels, Padding::circular_leading(filter_len - 2))
}

fn check_even(op: &'static str, shape: Shape) -> Result<()> {
    if shape.h() % 2 != 0 || shape.w() % 2 != 0 || shape.h() == 0 || shape.w() == 0 {
        return Err(Error::Divisibility {
            op,
            height: shape.h(),
            width: shape.w(),
            factor: 2,
        });
    }
    Ok(())
}

fn check_wavelet_channels(op: &'static str, shape: Shape) -> Result<usize> {
    if shape.c() == 0 || shape.c() % 4 != 0 {
        return Err(Error::GroupDivisibility {
            op,
            channels: shape.c(),
            groups: 4,
        });
    }
    Ok(shape.c() / 4)
}

fn checked<T: Element>(op: &'static str, t: Tensor<T>) -> Result<Tensor<T>> {
    if !t.all_finite() {
        return Err(Error::NonFinite {
            op,
            node: 0,
            label: String::new(),
        });
    }
    Ok(t)
}

/// Forward 2D transform `(B, C, H, W) -> (B, 4C, H/2, W/2)`.
pub fn dwt2<T: Element>(x: &Tensor<T>, bank: &FilterBank<T>) -> Result<Tensor<T>> {
    check_even("dwt2", x.shape())?;
    let c = x.shape().c();
    let kernel = wavelet_kernel_values(&bank.a0, &bank.a1, c, false);
    let (y, _) = conv::conv2d_forward(x, &kernel, None, transform_options(c, bank.len()))?;
    checked("dwt2", y)
}

/// Inverse 2D transform `(B, 4C, h, w) -> (B, C, 2h, 2w)`.
pub fn idwt2<T: Element>(y: &Tensor<T>, bank: &FilterBank<T>) -> Result<Tensor<T>> {
    let c = check_wavelet_channels("idwt2", y.shape())?;
    let kernel = wavelet_kernel_values(&bank.s0, &bank.s1, c, true);
    let (x, _) = conv::conv2d_transpose_forward(y, &kernel, transform_options(c, bank.len()))?;
    checked("idwt2", x)
}

/// Graph handles of the four filters of a bank.
#[derive(Clone, Copy, Debug)]
pub struct BankVars {
    pub a0: Var,
    pub a1: Var,
    pub s0: Var,
    pub s1: Var,
}

impl BankVars {
    /// Records the bank as leaves; learnable banks receive gradients.
    pub fn record<T: Element>(g: &mut Graph<T>, bank: &FilterBank<T>) -> Self {
        let mut leaf = |f: &[T]| {
            let t = Tensor::vector(f);
            if bank.learnable {
                g.variable(t)
            } else {
                g.constant(t)
            }
        };
        BankVars {
            a0: leaf(&bank.a0),
            a1: leaf(&bank.a1),
            s0: leaf(&bank.s0),
            s1: leaf(&bank.s1),
        }
    }

    pub fn vars(&self) -> [Var; 4] {
        [self.a0, self.a1, self.s0, self.s1]
    }
}

/// Differentiable [`dwt2`].
pub fn dwt2_graph<T: Element>(g: &mut Graph<T>, x: Var, bank: &BankVars) -> Result<Var> {
    let shape = g.shape(x);
    check_even("dwt2", shape)?;
    let n = g.shape(bank.a0).numel();
    let kernel = g.wavelet_kernel(bank.a0, bank.a1, shape.c(), false)?;
    g.conv2d(x, kernel, None, transform_options(shape.c(), n))
}

/// Differentiable [`idwt2`].
pub fn idwt2_graph<T: Element>(g: &mut Graph<T>, y: Var, bank: &BankVars) -> Result<Var> {
    let c = check_wavelet_channels("idwt2", g.shape(y))?;
    let n = g.shape(bank.s0).numel();
    let kernel = g.wavelet_kernel(bank.s0, bank.s1, c, true)?;
    g.conv2d_transpose(y, kernel, transform_options(c, n))
}

/// Subband of output channel `channel` (0 = LL, 1 = LH, 2 = HL, 3 = HH).
pub fn subband_index(channel: usize) -> usize {
    channel % SUBBANDS.len()
}

pub const SUBBAND_NAMES: [&str; 4] = ["LL", "LH", "HL", "HH"];
