//! Closed-form multiply-accumulate count of the network.

use std::fmt;

use crate::error::Result;

use super::{Mode, NetworkConfig, IMAGE_CHANNELS};

/// Total MACs with a per-stage breakdown, for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacReport {
    pub total: u64,
    pub stages: Vec<(String, u64)>,
}

impl fmt::Display for MacReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, macs) in &self.stages {
            writeln!(f, "{name}={macs}")?;
        }
        write!(f, "total={}", self.total)
    }
}

/// `out · in_per_group · k² · area`.
fn conv(out: usize, in_per_group: usize, k: usize, area: usize) -> u64 {
    (out * in_per_group * k * k) as u64 * area as u64
}

fn seb(c: usize, area: usize) -> u64 {
    conv(2 * c, c, 1, area) + conv(2 * c, 1, 3, area) + conv(c, c, 1, area)
}

fn lwn(c: usize, r: usize, n: usize, area: usize) -> u64 {
    let quarter = area / 4;
    let wide = 4 * c * r;
    let transform = conv(4 * c, 1, n, quarter);
    transform + conv(wide, 4 * c, 1, quarter) + conv(wide, 1, 3, quarter) + conv(4 * c, wide, 1, quarter) + transform
}

fn wavelet_block(c: usize, r: usize, n: usize, area: usize) -> u64 {
    conv(c, c, 1, area) + lwn(c, r, n, area) + conv(c, c / 2, 1, area)
}

/// Counts every convolution and transposed convolution of the forward pass
/// on an `height × width` input.
pub fn count_macs(config: &NetworkConfig, height: usize, width: usize, mode: Mode) -> Result<MacReport> {
    config.validate()?;
    config.check_input(crate::tensor::Shape::new(1, IMAGE_CHANNELS, height, width))?;
    let s_max = config.scales;
    let w = |s: usize| config.width(s);
    let area = |s: usize| (height >> (s - 1)) * (width >> (s - 1));
    let (r, n) = (config.r, config.filter_len);
    let mut stages = vec![("embed".to_string(), conv(w(1), IMAGE_CHANNELS, 3, area(1)))];

    for s in 1..=s_max {
        let mut m = 0;
        if s > 1 {
            m += conv(w(s), w(s - 1), 1, area(s));
        }
        m += config.blocks_per_stage[s - 1] as u64 * seb(w(s), area(s));
        stages.push((format!("encoder{s}"), m));
    }
    for s in (2..=s_max).rev() {
        let join = if s == s_max {
            conv(w(s), w(s - 1), 1, area(s))
        } else {
            // the channel-halving conv runs before upsampling
            conv(w(s), w(s + 1), 1, area(s + 1))
        };
        stages.push((format!("fusion{s}"), join + wavelet_block(w(s), r, n, area(s))));
    }
    for s in (1..=s_max).rev() {
        let mut m = wavelet_block(w(s), r, n, area(s));
        if s < s_max {
            m += conv(w(s), w(s + 1), 1, area(s + 1));
        }
        if s == 1 {
            m += conv(w(1), w(2), 1, area(2));
        }
        if s == 1 || mode == Mode::Train {
            m += conv(IMAGE_CHANNELS, w(s), 3, area(s));
        }
        stages.push((format!("decoder{s}"), m));
    }
    let total = stages.iter().map(|(_, m)| m).sum();
    Ok(MacReport { total, stages })
}

/// MACs of a single stride-1 same-padded `k×k` convolution.
pub fn single_conv_macs(in_ch: usize, out_ch: usize, k: usize, height: usize, width: usize) -> u64 {
    conv(out_ch, in_ch, k, height * width)
}
