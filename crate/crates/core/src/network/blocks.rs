//! Residual building blocks.
//!
//! Every block reads its parameters through a [`Binder`] under a name
//! prefix, so the same functions serve the full network and stand-alone
//! tests.

use crate::autodiff::{Graph, Var};
use crate::conv::ConvOptions;
use crate::error::{Error, Result};
use crate::tensor::Element;
use crate::wavelet::{dwt2_graph, idwt2_graph};

use super::{same3x3, Binder};

/// The four block types, usable on their own for testing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Lwn,
    Seb,
    Wfb,
    Whb,
}

impl BlockKind {
    pub const ALL: [BlockKind; 4] = [BlockKind::Lwn, BlockKind::Seb, BlockKind::Wfb, BlockKind::Whb];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Lwn => "lwn",
            BlockKind::Seb => "seb",
            BlockKind::Wfb => "wfb",
            BlockKind::Whb => "whb",
        }
    }

    pub fn forward<T: Element>(self, g: &mut Graph<T>, x: Var, p: &mut Binder<'_, T>, prefix: &str) -> Result<Var> {
        match self {
            BlockKind::Lwn => lwn_forward(g, x, p, prefix),
            BlockKind::Seb => seb_forward(g, x, p, prefix),
            BlockKind::Wfb => wfb_forward(g, x, p, prefix),
            BlockKind::Whb => whb_forward(g, x, p, prefix),
        }
    }
}

/// Learnable wavelet node:
/// `idwt2(pw2(dw3×3(pw1(dwt2(x)))))` with the node's own bank.
pub fn lwn_forward<T: Element>(g: &mut Graph<T>, x: Var, p: &mut Binder<'_, T>, prefix: &str) -> Result<Var> {
    let shape = g.shape(x);
    if shape.h() % 2 != 0 || shape.w() % 2 != 0 {
        return Err(Error::Divisibility {
            op: "lwn_forward",
            height: shape.h(),
            width: shape.w(),
            factor: 2,
        });
    }
    let bank = p.bank(g, &format!("{prefix}.bank"))?;
    let sub = dwt2_graph(g, x, &bank)?;
    let wide = p.conv(g, sub, &format!("{prefix}.pw1"), ConvOptions::default())?;
    let channels = g.shape(wide).c();
    let filtered = p.conv(g, wide, &format!("{prefix}.dw"), same3x3(channels))?;
    let narrow = p.conv(g, filtered, &format!("{prefix}.pw2"), ConvOptions::default())?;
    idwt2_graph(g, narrow, &bank)
}

fn normalize<T: Element>(g: &mut Graph<T>, x: Var, p: &mut Binder<'_, T>, prefix: &str) -> Result<Var> {
    let gain = p.var(g, &format!("{prefix}.ln.g"))?;
    let bias = p.var(g, &format!("{prefix}.ln.b"))?;
    g.channel_layernorm(x, gain, bias)
}

/// Simple encoder block:
/// `x + pw_out(gate(dw3×3(pw_in(norm(x)))))`.
pub fn seb_forward<T: Element>(g: &mut Graph<T>, x: Var, p: &mut Binder<'_, T>, prefix: &str) -> Result<Var> {
    let n = normalize(g, x, p, prefix)?;
    let wide = p.conv(g, n, &format!("{prefix}.pw_in"), ConvOptions::default())?;
    let channels = g.shape(wide).c();
    let filtered = p.conv(g, wide, &format!("{prefix}.dw"), same3x3(channels))?;
    let gated = g.simple_gate(filtered)?;
    let out = p.conv(g, gated, &format!("{prefix}.pw_out"), ConvOptions::default())?;
    g.add(x, out)
}

/// Wavelet fusion block:
/// `x + pw_out(gate(lwn(pw_in(norm(x)))))`.
pub fn wfb_forward<T: Element>(g: &mut Graph<T>, x: Var, p: &mut Binder<'_, T>, prefix: &str) -> Result<Var> {
    let n = normalize(g, x, p, prefix)?;
    let mixed = p.conv(g, n, &format!("{prefix}.pw_in"), ConvOptions::default())?;
    let filtered = lwn_forward(g, mixed, p, &format!("{prefix}.lwn"))?;
    let gated = g.simple_gate(filtered)?;
    let out = p.conv(g, gated, &format!("{prefix}.pw_out"), ConvOptions::default())?;
    g.add(x, out)
}

/// Wavelet head block. Structurally a WFB; its output also feeds the
/// per-scale head, which the caller applies.
pub fn whb_forward<T: Element>(g: &mut Graph<T>, x: Var, p: &mut Binder<'_, T>, prefix: &str) -> Result<Var> {
    wfb_forward(g, x, p, prefix)
}
