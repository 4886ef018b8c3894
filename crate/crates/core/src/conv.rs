//! Grouped, strided 2D cross-correlation and its adjoints.
//!
//! All three kernels (forward, input gradient, weight gradient) go through
//! the same im2col / col2im index map, so the input gradient is the exact
//! adjoint of the forward pass for every padding mode. The transposed
//! convolution is that adjoint exposed as an operator of its own.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Periodic extension of the input.
    Circular,
}

/// Padding applied to both spatial axes: `before` rows/columns ahead of
/// the data and `after` behind it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub mode: PadMode,
    pub before: usize,
    pub after: usize,
}

impl Padding {
    pub const fn none() -> Self {
        Padding {
            mode: PadMode::Zero,
            before: 0,
            after: 0,
        }
    }

    pub const fn zero(p: usize) -> Self {
        Padding {
            mode: PadMode::Zero,
            before: p,
            after: p,
        }
    }

    pub const fn circular(p: usize) -> Self {
        Padding {
            mode: PadMode::Circular,
            before: p,
            after: p,
        }
    }

    /// Periodic padding of `p` placed entirely on the leading side.
    pub const fn circular_leading(p: usize) -> Self {
        Padding {
            mode: PadMode::Circular,
            before: p,
            after: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.before + self.after
    }

    /// Maps a padded coordinate back to the source, or `None` when it falls
    /// on a zero pad.
    #[inline]
    fn source(&self, padded: usize, len: usize) -> Option<usize> {
        let i = padded as isize - self.before as isize;
        match self.mode {
            PadMode::Zero => (i >= 0 && (i as usize) < len).then_some(i as usize),
            PadMode::Circular => Some(i.rem_euclid(len as isize) as usize),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl Default for ConvOptions {
    fn default() -> Self {
        ConvOptions {
            stride: 1,
            groups: 1,
            padding: Padding::none(),
        }
    }
}

impl ConvOptions {
    pub fn new(stride: usize, groups: usize, padding: Padding) -> Self {
        ConvOptions {
            stride,
            groups,
            padding,
        }
    }
}

/// Resolved sizes of one convolution. "Input" always refers to the
/// conv2d input (the transposed convolution's output).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub opts: ConvOptions,
}

impl ConvGeometry {
    fn check_common(kernel: Shape, in_ch: usize, opts: &ConvOptions, op: &'static str) -> Result<()> {
        if opts.stride == 0 || opts.groups == 0 {
            return Err(Error::InvalidArgument(format!("{op}: stride and groups must be positive")));
        }
        if in_ch % opts.groups != 0 {
            return Err(Error::GroupDivisibility {
                op,
                channels: in_ch,
                groups: opts.groups,
            });
        }
        if kernel.n() % opts.groups != 0 {
            return Err(Error::GroupDivisibility {
                op,
                channels: kernel.n(),
                groups: opts.groups,
            });
        }
        if kernel.c() != in_ch / opts.groups {
            return Err(Error::shape(
                op,
                format!("kernel with {} input channels per group", in_ch / opts.groups),
                kernel,
            ));
        }
        if kernel.h() == 0 || kernel.w() == 0 {
            return Err(Error::InvalidArgument(format!("{op}: empty kernel")));
        }
        Ok(())
    }

    /// Geometry of `conv2d(input, kernel)`.
    pub fn forward(input: Shape, kernel: Shape, opts: ConvOptions) -> Result<Self> {
        let [batch, in_ch, height, width] = input.0;
        Self::check_common(kernel, in_ch, &opts, "conv2d")?;
        let (kh, kw) = (kernel.h(), kernel.w());
        let ph = height + opts.padding.total();
        let pw = width + opts.padding.total();
        if ph < kh || pw < kw {
            return Err(Error::shape("conv2d", format!("padded input >= kernel {kh}x{kw}"), input));
        }
        if (ph - kh) % opts.stride != 0 || (pw - kw) % opts.stride != 0 {
            return Err(Error::Divisibility {
                op: "conv2d",
                height: ph - kh,
                width: pw - kw,
                factor: opts.stride,
            });
        }
        Ok(ConvGeometry {
            batch,
            in_ch,
            out_ch: kernel.n(),
            height,
            width,
            kh,
            kw,
            out_h: (ph - kh) / opts.stride + 1,
            out_w: (pw - kw) / opts.stride + 1,
            opts,
        })
    }

    /// Geometry of `conv2d_transpose(output, kernel)`: recovers the conv2d
    /// input size that `output` was produced from.
    pub fn transposed(output: Shape, kernel: Shape, opts: ConvOptions) -> Result<Self> {
        let [batch, out_ch, out_h, out_w] = output.0;
        if out_ch != kernel.n() {
            return Err(Error::shape(
                "conv2d_transpose",
                format!("{} input channels", kernel.n()),
                output,
            ));
        }
        if opts.stride == 0 || opts.groups == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("conv2d_transpose: empty geometry".into()));
        }
        let in_ch = kernel.c() * opts.groups;
        let ph = (out_h - 1) * opts.stride + kernel.h();
        let pw = (out_w - 1) * opts.stride + kernel.w();
        let total = opts.padding.total();
        if ph <= total || pw <= total {
            return Err(Error::shape("conv2d_transpose", "output larger than padding", output));
        }
        let input = Shape::new(batch, in_ch, ph - total, pw - total);
        let geom = Self::forward(input, kernel, opts)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (out_h, out_w));
        Ok(geom)
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(self.batch, self.in_ch, self.height, self.width)
    }

    pub fn output_shape(&self) -> Shape {
        Shape::new(self.batch, self.out_ch, self.out_h, self.out_w)
    }

    pub fn kernel_shape(&self) -> Shape {
        Shape::new(self.out_ch, self.in_ch / self.opts.groups, self.kh, self.kw)
    }

    fn in_per_group(&self) -> usize {
        self.in_ch / self.opts.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_ch / self.opts.groups
    }

    /// Rows of the im2col matrix for one group.
    fn patch_len(&self) -> usize {
        self.in_per_group() * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// True when the im2col matrix of a group is a view of the input.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == 1 && self.opts.padding.total() == 0
    }

    /// Multiply-accumulate count of the forward pass.
    pub fn macs(&self) -> u64 {
        (self.out_ch * self.in_per_group() * self.kh * self.kw) as u64
            * (self.out_h * self.out_w) as u64
            * self.batch as u64
    }

    /// For every output column, the flat source offset in one input plane of
    /// each kernel tap, or `usize::MAX` for a zero pad.
    fn tap_offsets(&self) -> Vec<usize> {
        let pad = self.opts.padding;
        let s = self.opts.stride;
        let rows: Vec<Vec<Option<usize>>> = (0..self.kh)
            .map(|ki| (0..self.out_h).map(|oy| pad.source(oy * s + ki, self.height)).collect())
            .collect();
        let cols: Vec<Vec<Option<usize>>> = (0..self.kw)
            .map(|kj| (0..self.out_w).map(|ox| pad.source(ox * s + kj, self.width)).collect())
            .collect();
        let mut out = Vec::with_capacity(self.kh * self.kw * self.out_plane());
        for ki in 0..self.kh {
            for kj in 0..self.kw {
                for oy in 0..self.out_h {
                    for ox in 0..self.out_w {
                        out.push(match (rows[ki][oy], cols[kj][ox]) {
                            (Some(y), Some(x)) => y * self.width + x,
                            _ => usize::MAX,
                        });
                    }
                }
            }
        }
        out
    }
}

fn im2col<T: Element>(plane_group: &[T], geom: &ConvGeometry, taps: &[usize], cols: &mut [T]) {
    let in_plane = geom.height * geom.width;
    let tap_len = geom.out_plane();
    let taps_per_ch = geom.kh * geom.kw;
    for ci in 0..geom.in_per_group() {
        let src = &plane_group[ci * in_plane..(ci + 1) * in_plane];
        for t in 0..taps_per_ch {
            let row = (ci * taps_per_ch + t) * tap_len;
            let offs = &taps[t * tap_len..(t + 1) * tap_len];
            for (dst, &o) in cols[row..row + tap_len].iter_mut().zip(offs) {
                *dst = if o == usize::MAX { T::zero() } else { src[o] };
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], geom: &ConvGeometry, taps: &[usize], plane_group: &mut [T]) {
    let in_plane = geom.height * geom.width;
    let tap_len = geom.out_plane();
    let taps_per_ch = geom.kh * geom.kw;
    for ci in 0..geom.in_per_group() {
        let dst = &mut plane_group[ci * in_plane..(ci + 1) * in_plane];
        for t in 0..taps_per_ch {
            let row = (ci * taps_per_ch + t) * tap_len;
            let offs = &taps[t * tap_len..(t + 1) * tap_len];
            for (&v, &o) in cols[row..row + tap_len].iter().zip(offs) {
                if o != usize::MAX {
                    dst[o] = dst[o] + v;
                }
            }
        }
    }
}

/// Cross-correlation: `y[b, o] = bias[o] + sum_i k[o, i] ⋆ pad(x)[b, g(o)·cin_g + i]`.
pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    opts: ConvOptions,
) -> Result<(Tensor<T>, ConvGeometry)> {
    let geom = ConvGeometry::forward(input.shape(), kernel.shape(), opts)?;
    if let Some(b) = bias {
        if b.len() != geom.out_ch {
            return Err(Error::shape("conv2d bias", geom.out_ch, b.len()));
        }
    }
    let out = forward_raw(input.data(), kernel.data(), bias.map(|b| b.data()), &geom);
    Ok((Tensor::from_vec(geom.output_shape(), out)?, geom))
}

pub(crate) fn forward_raw<T: Element>(
    x: &[T],
    k: &[T],
    bias: Option<&[T]>,
    geom: &ConvGeometry,
) -> Vec<T> {
    let groups = geom.opts.groups;
    let (cin_g, cout_g) = (geom.in_per_group(), geom.out_per_group());
    let in_plane = geom.height * geom.width;
    let out_plane = geom.out_plane();
    let patch = geom.patch_len();
    let mut out = vec![T::zero(); geom.batch * geom.out_ch * out_plane];
    if let Some(bias) = bias {
        for (o, chunk) in out.chunks_mut(out_plane).enumerate() {
            chunk.fill(bias[o % geom.out_ch]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    let pointwise = geom.is_pointwise();
    let taps = if pointwise { Vec::new() } else { geom.tap_offsets() };
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); patch * out_plane] };
    for b in 0..geom.batch {
        for g in 0..groups {
            let x_off = (b * geom.in_ch + g * cin_g) * in_plane;
            let xg = &x[x_off..x_off + cin_g * in_plane];
            let cols_ref: &[T] = if pointwise {
                xg
            } else {
                im2col(xg, geom, &taps, &mut cols);
                &cols
            };
            let kg = &k[g * cout_g * patch..(g + 1) * cout_g * patch];
            let y_off = (b * geom.out_ch + g * cout_g) * out_plane;
            T::gemm(
                cout_g,
                patch,
                out_plane,
                kg,
                false,
                cols_ref,
                false,
                &mut out[y_off..y_off + cout_g * out_plane],
                beta,
            );
        }
    }
    out
}

/// Adjoint of [`conv2d_forward`] with respect to its input.
pub(crate) fn input_grad_raw<T: Element>(dy: &[T], k: &[T], geom: &ConvGeometry) -> Vec<T> {
    let groups = geom.opts.groups;
    let (cin_g, cout_g) = (geom.in_per_group(), geom.out_per_group());
    let in_plane = geom.height * geom.width;
    let out_plane = geom.out_plane();
    let patch = geom.patch_len();
    let mut dx = vec![T::zero(); geom.batch * geom.in_ch * in_plane];
    let pointwise = geom.is_pointwise();
    let taps = if pointwise { Vec::new() } else { geom.tap_offsets() };
    let mut cols = vec![T::zero(); patch * out_plane];
    for b in 0..geom.batch {
        for g in 0..groups {
            let kg = &k[g * cout_g * patch..(g + 1) * cout_g * patch];
            let y_off = (b * geom.out_ch + g * cout_g) * out_plane;
            let x_off = (b * geom.in_ch + g * cin_g) * in_plane;
            let dxg = &mut dx[x_off..x_off + cin_g * in_plane];
            if pointwise {
                T::gemm(patch, cout_g, out_plane, kg, true, &dy[y_off..], false, dxg, T::zero());
            } else {
                T::gemm(patch, cout_g, out_plane, kg, true, &dy[y_off..], false, &mut cols, T::zero());
                col2im(&cols, geom, &taps, dxg);
            }
        }
    }
    dx
}

/// Gradient of [`conv2d_forward`] with respect to the kernel.
pub(crate) fn kernel_grad_raw<T: Element>(x: &[T], dy: &[T], geom: &ConvGeometry) -> Vec<T> {
    let groups = geom.opts.groups;
    let (cin_g, cout_g) = (geom.in_per_group(), geom.out_per_group());
    let in_plane = geom.height * geom.width;
    let out_plane = geom.out_plane();
    let patch = geom.patch_len();
    let mut dk = vec![T::zero(); geom.out_ch * patch];
    let pointwise = geom.is_pointwise();
    let taps = if pointwise { Vec::new() } else { geom.tap_offsets() };
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); patch * out_plane] };
    for b in 0..geom.batch {
        for g in 0..groups {
            let x_off = (b * geom.in_ch + g * cin_g) * in_plane;
            let xg = &x[x_off..x_off + cin_g * in_plane];
            let cols_ref: &[T] = if pointwise {
                xg
            } else {
                im2col(xg, geom, &taps, &mut cols);
                &cols
            };
            let y_off = (b * geom.out_ch + g * cout_g) * out_plane;
            T::gemm(
                cout_g,
                out_plane,
                patch,
                &dy[y_off..],
                false,
                cols_ref,
                true,
                &mut dk[g * cout_g * patch..(g + 1) * cout_g * patch],
                T::one(),
            );
        }
    }
    dk
}

pub(crate) fn bias_grad_raw<T: Element>(dy: &[T], geom: &ConvGeometry) -> Vec<T> {
    let out_plane = geom.out_plane();
    let mut db = vec![T::zero(); geom.out_ch];
    for (i, chunk) in dy.chunks(out_plane).enumerate() {
        let s = chunk.iter().fold(T::zero(), |acc, &v| acc + v);
        db[i % geom.out_ch] = db[i % geom.out_ch] + s;
    }
    db
}

/// Transposed convolution: the adjoint of `conv2d(·, kernel)` under the
/// same stride, groups and padding. The kernel keeps the conv2d layout
/// `(channels of input, channels of output / groups, kh, kw)`.
pub fn conv2d_transpose_forward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    opts: ConvOptions,
) -> Result<(Tensor<T>, ConvGeometry)> {
    let geom = ConvGeometry::transposed(input.shape(), kernel.shape(), opts)?;
    let out = input_grad_raw(input.data(), kernel.data(), &geom);
    Ok((Tensor::from_vec(geom.input_shape(), out)?, geom))
}
