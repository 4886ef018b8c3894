//! Finite-difference suites over the differentiable operators, the wavelet
//! objective and the network, grouped the way the command line runs them.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheck, Graph, Var};
use crate::conv::{ConvGeometry, ConvOptions, Padding};
use crate::error::{Error, Result};
use crate::losses::{make_target_pyramid, multi_scale_loss, psnr_loss, total_loss, wavelet_loss, ScaleOutputs};
use crate::network::{block_grad_check, network_grad_check, BlockKind, NetworkConfig};
use crate::tensor::{Shape, Tensor};
use crate::wavelet::{dwt2_graph, idwt2_graph, BankVars};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const WAVELET_TOLERANCE: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-3;

const EPS: f64 = 1e-6;
const FLOOR: f64 = 1e-6;
const SAMPLES: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Ops,
    Wavelet,
    Network,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Ops, Target::Wavelet, Target::Network];

    pub fn name(self) -> &'static str {
        match self {
            Target::Ops => "ops",
            Target::Wavelet => "wavelet",
            Target::Network => "network",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

/// One finite-difference check and the relative error it must stay under.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub report: GradCheck,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub target: Target,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(Check::passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {} max_rel_error={:.3e} checked={} {}",
                self.target.name(),
                c.name,
                c.report.max_rel_error,
                c.report.checked,
                if c.passed() { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "{} max_rel_error={:.3e}", self.target.name(), self.max_rel_error())
    }
}

pub fn run_suite(target: Target, seed: u64) -> Result<SuiteReport> {
    let checks = match target {
        Target::Ops => op_checks(seed)?,
        Target::Wavelet => wavelet_checks(seed)?,
        Target::Network => network_checks(seed)?,
    };
    Ok(SuiteReport { target, checks })
}

fn random(shape: Shape, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("sized to shape")
}

/// `Σ out ⊙ w` for a weight tensor drawn once per check.
fn weighted(g: &mut Graph<f64>, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv)?;
    g.sum(prod)
}

type Body = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Runs `body` once to learn the output shape, then checks the weighted sum
/// of its output against central differences.
fn check_op(name: String, body: Body, params: Vec<Tensor<f64>>, rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.variable(p.clone())).collect();
    let out = body(&mut g, &vars)?;
    let w = random(g.shape(out), rng, -1.0, 1.0);
    let report = grad_check(
        |g: &mut Graph<f64>, v: &[Var]| {
            let out = body(g, v)?;
            weighted(g, out, &w)
        },
        &params,
        EPS,
        SAMPLES,
        FLOOR,
    )?;
    Ok(Check {
        name,
        report,
        tolerance: OP_TOLERANCE,
    })
}

fn op_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 4;
    let mut cases: Vec<(String, Body, Vec<Tensor<f64>>)> = Vec::new();
    let x = |rng: &mut ChaCha8Rng| random(Shape::new(2, c, 5, 5), rng, -1.0, 1.0);

    for stride in [1, 2] {
        for groups in [1, c] {
            for (pad_name, padding) in [("zero", Padding::zero(1)), ("circular", Padding::circular(1))] {
                let opts = ConvOptions::new(stride, groups, padding);
                let k = random(Shape::new(c, c / groups, 3, 3), &mut rng, -1.0, 1.0);
                let b = random(Shape::new(1, 1, 1, c), &mut rng, -1.0, 1.0);
                let tag = format!("stride={stride},groups={groups},{pad_name}");
                cases.push((
                    format!("conv2d[{tag}]"),
                    Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), opts)),
                    vec![x(&mut rng), k.clone(), b],
                ));
                let out = ConvGeometry::forward(Shape::new(2, c, 5, 5), k.shape(), opts)?.output_shape();
                cases.push((
                    format!("conv2d_transpose[{tag}]"),
                    Box::new(move |g, v| g.conv2d_transpose(v[0], v[1], opts)),
                    vec![random(out, &mut rng, -1.0, 1.0), k],
                ));
            }
        }
    }
    cases.push(("add".into(), Box::new(|g, v| g.add(v[0], v[1])), vec![x(&mut rng), x(&mut rng)]));
    cases.push(("sub".into(), Box::new(|g, v| g.sub(v[0], v[1])), vec![x(&mut rng), x(&mut rng)]));
    cases.push(("mul".into(), Box::new(|g, v| g.mul(v[0], v[1])), vec![x(&mut rng), x(&mut rng)]));
    cases.push(("scale".into(), Box::new(|g, v| g.scale(v[0], -1.7)), vec![x(&mut rng)]));
    cases.push((
        "resample_down2".into(),
        Box::new(|g, v| g.resample_down2(v[0])),
        vec![random(Shape::new(2, c, 6, 6), &mut rng, -1.0, 1.0)],
    ));
    cases.push(("resample_up2".into(), Box::new(|g, v| g.resample_up2(v[0])), vec![x(&mut rng)]));
    cases.push((
        "channel_layernorm".into(),
        Box::new(|g, v| g.channel_layernorm(v[0], v[1], v[2])),
        vec![
            x(&mut rng),
            random(Shape::new(1, 1, 1, c), &mut rng, 0.5, 1.5),
            random(Shape::new(1, 1, 1, c), &mut rng, -0.5, 0.5),
        ],
    ));
    cases.push(("simple_gate".into(), Box::new(|g, v| g.simple_gate(v[0])), vec![x(&mut rng)]));
    for flip in [false, true] {
        cases.push((
            format!("wavelet_kernel[flip={flip}]"),
            Box::new(move |g, v| g.wavelet_kernel(v[0], v[1], 2, flip)),
            vec![
                random(Shape::new(1, 1, 1, 4), &mut rng, -1.0, 1.0),
                random(Shape::new(1, 1, 1, 4), &mut rng, -1.0, 1.0),
            ],
        ));
    }
    cases.push((
        "poly_product".into(),
        Box::new(|g, v| g.poly_product(v[0], v[1])),
        vec![
            random(Shape::new(1, 1, 1, 4), &mut rng, -1.0, 1.0),
            random(Shape::new(1, 1, 1, 6), &mut rng, -1.0, 1.0),
        ],
    ));
    cases.push(("sum".into(), Box::new(|g, v| g.sum(v[0])), vec![x(&mut rng)]));
    cases.push(("mean".into(), Box::new(|g, v| g.mean(v[0])), vec![x(&mut rng)]));
    cases.push(("sample_mean".into(), Box::new(|g, v| g.sample_mean(v[0])), vec![x(&mut rng)]));
    cases.push((
        "log10".into(),
        Box::new(|g, v| g.log10(v[0], 1e-3)),
        vec![random(Shape::new(2, c, 5, 5), &mut rng, 0.2, 2.0)],
    ));

    let mut checks = cases
        .into_iter()
        .map(|(name, body, params)| check_op(name, body, params, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    checks.extend(loss_checks(&mut rng)?);
    Ok(checks)
}

fn loss_checks(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let mut push = |name: &str, report: GradCheck| {
        checks.push(Check {
            name: name.into(),
            report,
            tolerance: OP_TOLERANCE,
        })
    };
    let x = random(Shape::new(2, 3, 6, 6), rng, 0.0, 1.0);
    let y = random(Shape::new(2, 3, 6, 6), rng, 0.0, 1.0);
    let r = grad_check(
        |g, v| {
            let t = g.constant(y.clone());
            psnr_loss(g, v[0], t)
        },
        &[x],
        EPS,
        SAMPLES,
        FLOOR,
    )?;
    push("psnr_loss", r);

    let shapes = [8, 4, 2].map(|s| Shape::new(1, 3, s, s));
    let outs: Vec<Tensor<f64>> = shapes.iter().map(|&s| random(s, rng, 0.0, 1.0)).collect();
    let target = make_target_pyramid(&random(shapes[0], rng, 0.0, 1.0), 3)?;
    let r = grad_check(
        |g, v| {
            let t: Vec<Var> = target.iter().map(|t| g.constant(t.clone())).collect();
            multi_scale_loss(g, &ScaleOutputs::new(v.to_vec()), &t)
        },
        &outs,
        EPS,
        SAMPLES,
        FLOOR,
    )?;
    push("multi_scale_loss", r);

    let mut params = outs;
    params.extend(random_filters(4, rng));
    let r = grad_check(
        |g, v| {
            let t: Vec<Var> = target.iter().map(|t| g.constant(t.clone())).collect();
            Ok(total_loss(g, &ScaleOutputs::new(v[..3].to_vec()), &t, &[bank_vars(&v[3..])], 1.0)?.total)
        },
        &params,
        EPS,
        SAMPLES,
        FLOOR,
    )?;
    push("total_loss", r);
    Ok(checks)
}

fn bank_vars(v: &[Var]) -> BankVars {
    BankVars {
        a0: v[0],
        a1: v[1],
        s0: v[2],
        s1: v[3],
    }
}

fn random_filters(n: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    (0..4).map(|_| random(Shape::new(1, 1, 1, n), rng, -0.8, 0.8)).collect()
}

fn wavelet_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let mut push = |name: &str, report: GradCheck| {
        checks.push(Check {
            name: name.into(),
            report,
            tolerance: WAVELET_TOLERANCE,
        })
    };

    for n in [2, 4, 6] {
        let filters = random_filters(n, &mut rng);
        let r = grad_check(|g, v| wavelet_loss(g, &bank_vars(v)), &filters, EPS, SAMPLES, FLOOR)?;
        push(&format!("wavelet_loss[N={n}]"), r);
    }

    let mut params = random_filters(4, &mut rng);
    params.push(random(Shape::new(1, 2, 8, 8), &mut rng, -1.0, 1.0));
    let w = random(Shape::new(1, 8, 4, 4), &mut rng, -1.0, 1.0);
    let r = grad_check(
        |g, v| {
            let y = dwt2_graph(g, v[4], &bank_vars(v))?;
            weighted(g, y, &w)
        },
        &params,
        EPS,
        SAMPLES,
        FLOOR,
    )?;
    push("dwt2", r);

    let mut params = random_filters(4, &mut rng);
    params.push(random(Shape::new(1, 8, 4, 4), &mut rng, -1.0, 1.0));
    let w = random(Shape::new(1, 2, 8, 8), &mut rng, -1.0, 1.0);
    let r = grad_check(
        |g, v| {
            let x = idwt2_graph(g, v[4], &bank_vars(v))?;
            weighted(g, x, &w)
        },
        &params,
        EPS,
        SAMPLES,
        FLOOR,
    )?;
    push("idwt2", r);

    Ok(checks)
}

/// Micro network used by the end-to-end check.
pub fn grad_check_network() -> NetworkConfig {
    NetworkConfig::micro(8, 2)
}

fn network_checks(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for kind in BlockKind::ALL {
        checks.push(Check {
            name: kind.name().into(),
            report: block_grad_check(kind, seed)?,
            tolerance: OP_TOLERANCE,
        });
    }
    checks.push(Check {
        name: "end_to_end".into(),
        report: network_grad_check(&grad_check_network(), 16, 16, 10, seed)?,
        tolerance: NETWORK_TOLERANCE,
    });
    if checks.iter().any(|c| c.report.checked == 0) {
        return Err(Error::InvalidArgument("a gradient check sampled no coordinates".into()));
    }
    Ok(checks)
}
