//! Synthetic blurred/sharp image pairs and flip/rotate augmentation.
//!
//! Sharp scenes are procedural: a colour gradient overlaid with rectangles,
//! ellipses, line strokes and striped patches, so every frequency band has
//! content. Each scene is blurred with a trajectory kernel traced by a
//! random walk of bounded curvature, then Gaussian noise is added and the
//! result clamped to [0, 1].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Trajectory blur parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlurSpec {
    /// Path length in pixels; at most 1 gives the identity kernel.
    pub length: f64,
    /// Initial heading in radians.
    pub angle: f64,
    /// Standard deviation of the heading change per pixel travelled.
    pub curvature: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Largest noise level the generator accepts.
pub const MAX_NOISE_SIGMA: f64 = 0.02;

/// Square kernel with odd side, nonnegative and summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    pub size: usize,
    pub taps: Vec<f64>,
}

impl BlurKernel {
    pub fn identity() -> Self {
        BlurKernel {
            size: 1,
            taps: vec![1.0],
        }
    }
}

/// Traces the trajectory with half-pixel steps and splats it bilinearly.
pub fn trajectory_kernel(spec: &BlurSpec) -> BlurKernel {
    if spec.length <= 1.0 {
        return BlurKernel::identity();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let turn = Normal::new(0.0, spec.curvature.max(0.0) * 0.5 + f64::MIN_POSITIVE).expect("finite sigma");
    let steps = (spec.length * 2.0).ceil() as usize;
    let (mut x, mut y, mut heading) = (0.0f64, 0.0f64, spec.angle);
    let mut pts = vec![(x, y)];
    for _ in 0..steps {
        heading += turn.sample(&mut rng);
        x += 0.5 * heading.cos();
        y += 0.5 * heading.sin();
        pts.push((x, y));
    }
    let n = pts.len() as f64;
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x / n, b + y / n));
    let reach = pts
        .iter()
        .map(|&(x, y)| (x - cx).abs().max((y - cy).abs()))
        .fold(0.0, f64::max);
    let half = reach.ceil() as usize + 1;
    let size = 2 * half + 1;
    let mut taps = vec![0.0; size * size];
    for &(x, y) in &pts {
        let (fx, fy) = (x - cx + half as f64, y - cy + half as f64);
        let (x0, y0) = (fx.floor(), fy.floor());
        let (tx, ty) = (fx - x0, fy - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                taps[(y0 + dy) * size + x0 + dx] += wy * wx;
            }
        }
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    BlurKernel { size, taps }
}

/// Convolves every plane with `k`, replicating edge pixels.
pub fn apply_blur(img: &Tensor<f32>, k: &BlurKernel) -> Tensor<f32> {
    let [_, _, h, w] = img.shape().0;
    let half = (k.size / 2) as isize;
    let plane = h * w;
    let mut out = vec![0f32; img.len()];
    for (src, dst) in img.data().chunks(plane).zip(out.chunks_mut(plane)) {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for ky in 0..k.size {
                    let sy = (y as isize - ky as isize + half).clamp(0, h as isize - 1) as usize;
                    for kx in 0..k.size {
                        let t = k.taps[ky * k.size + kx];
                        if t == 0.0 {
                            continue;
                        }
                        let sx = (x as isize - kx as isize + half).clamp(0, w as isize - 1) as usize;
                        acc += t * src[sy * w + sx] as f64;
                    }
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    Tensor::from_vec(img.shape(), out).expect("same shape")
}

/// A `(1, 3, size, size)` procedural scene in [0, 1].
pub fn procedural_scene(size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let s = size as f64;
    let mut img = vec![[0f64; 3]; size * size];
    let base: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let slope: [f64; 3] = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
    let dir = rng.gen_range(0.0..std::f64::consts::TAU);
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f64 * dir.cos() + y as f64 * dir.sin()) / s).clamp(-1.0, 1.0);
            for c in 0..3 {
                img[y * size + x][c] = (base[c] + slope[c] * t).clamp(0.0, 1.0);
            }
        }
    }
    let shapes = rng.gen_range(6..12);
    for _ in 0..shapes {
        let colour: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let kind = rng.gen_range(0..4);
        let (a, b) = (rng.gen_range(2.0..(s / 3.0).max(3.0)), rng.gen_range(2.0..(s / 3.0).max(3.0)));
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let (ct, st) = (theta.cos(), theta.sin());
        let thick = rng.gen_range(0.7..2.5);
        let period = rng.gen_range(2.0..6.0);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let (u, v) = (dx * ct + dy * st, -dx * st + dy * ct);
                let inside = match kind {
                    0 => dx.abs() <= a && dy.abs() <= b,
                    1 => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
                    2 => v.abs() <= thick && u.abs() <= a * 1.5,
                    _ => u.abs() <= a && v.abs() <= b && (u / period).floor() as i64 % 2 == 0,
                };
                if inside {
                    img[y * size + x] = colour;
                }
            }
        }
    }
    Tensor::from_fn(Shape::new(1, 3, size, size), |[_, c, y, x]| img[y * size + x][c] as f32)
}

/// Random blur parameters for scene `seed`.
pub fn random_blur(rng: &mut ChaCha8Rng, noise_sigma: f64) -> BlurSpec {
    BlurSpec {
        length: rng.gen_range(3.0..11.0),
        angle: rng.gen_range(0.0..std::f64::consts::TAU),
        curvature: rng.gen_range(0.0..0.4),
        noise_sigma,
        seed: rng.gen(),
    }
}

/// Blurs `sharp` with `spec`, adds noise and clamps to [0, 1].
pub fn degrade(sharp: &Tensor<f32>, spec: &BlurSpec) -> Tensor<f32> {
    let blurred = apply_blur(sharp, &trajectory_kernel(spec));
    if spec.noise_sigma <= 0.0 {
        return blurred.map(|v| v.clamp(0.0, 1.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6e6f_6973_6521);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("positive sigma");
    let mut out = blurred;
    for v in out.data_mut() {
        *v = (*v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
    }
    out
}

/// A blurred image and its sharp original, both `(1, 3, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub blurred: Tensor<f32>,
    pub sharp: Tensor<f32>,
}

/// `n` deterministic pairs of side `size`. Item `i` depends only on
/// `(seed, i)`.
pub fn synth_dataset(n: usize, size: usize, multiple: usize, noise_sigma: f64, seed: u64) -> Result<Vec<Pair>> {
    if size == 0 || size % multiple.max(1) != 0 {
        return Err(Error::Divisibility {
            op: "synth_dataset",
            height: size,
            width: size,
            factor: multiple,
        });
    }
    if !(0.0..=MAX_NOISE_SIGMA).contains(&noise_sigma) {
        return Err(Error::Config(format!("noise_sigma must lie in [0, {MAX_NOISE_SIGMA}], got {noise_sigma}")));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let sharp = procedural_scene(size, &mut rng);
            let spec = random_blur(&mut rng, noise_sigma);
            Pair {
                blurred: degrade(&sharp, &spec),
                sharp,
            }
        })
        .collect())
}

/// The six flip/rotation symmetries used for augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    FlipHorizontal,
    FlipVertical,
    Rotate90,
    Rotate180,
    Rotate270,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Identity,
        Transform::FlipHorizontal,
        Transform::FlipVertical,
        Transform::Rotate90,
        Transform::Rotate180,
        Transform::Rotate270,
    ];

    pub fn apply(self, t: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [n, c, h, w] = t.shape().0;
        if matches!(self, Transform::Rotate90 | Transform::Rotate270) && h != w {
            return Err(Error::InvalidArgument(format!("cannot rotate a {h}x{w} image by a quarter turn")));
        }
        let src = |b, ch, y, x| t.at([b, ch, y, x]);
        Ok(Tensor::from_fn(Shape::new(n, c, h, w), |[b, ch, y, x]| match self {
            Transform::Identity => src(b, ch, y, x),
            Transform::FlipHorizontal => src(b, ch, y, w - 1 - x),
            Transform::FlipVertical => src(b, ch, h - 1 - y, x),
            // counter-clockwise quarter turn
            Transform::Rotate90 => src(b, ch, x, w - 1 - y),
            Transform::Rotate180 => src(b, ch, h - 1 - y, w - 1 - x),
            Transform::Rotate270 => src(b, ch, h - 1 - x, y),
        }))
    }
}

/// Applies one randomly chosen [`Transform`] to both images of the pair.
pub fn augment(pair: &Pair, rng: &mut impl Rng) -> Result<Pair> {
    let t = Transform::ALL[rng.gen_range(0..Transform::ALL.len())];
    Ok(Pair {
        blurred: t.apply(&pair.blurred)?,
        sharp: t.apply(&pair.sharp)?,
    })
}
