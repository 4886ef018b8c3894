//! Multi-scale wavelet deblurring network.
//!
//! The network is an encoder of SEB stages, a coarse-to-fine fusion path of
//! WFB blocks and a decoder of WHB blocks, each followed by a 3×3 head that
//! predicts a residual at its scale. WFB and WHB wrap a learnable wavelet
//! node (LWN) that filters features in the wavelet domain of its own
//! trainable filter bank.
//!
//! Parameters live in a [`NetworkParams`] store addressed by name; the
//! forward pass binds them into a [`Graph`] so the same code serves
//! training, inference and gradient checking.

mod blocks;
mod checkpoint;
mod gradcheck;
mod macs;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, Var};
use crate::conv::{ConvOptions, Padding};
use crate::error::{Error, Result};
use crate::io::parse_key_values;
use crate::tensor::{Element, Shape, Tensor};
use crate::wavelet::{BankVars, FilterBank, DEFAULT_FILTER_LEN};

pub use blocks::{lwn_forward, seb_forward, wfb_forward, whb_forward, BlockKind};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{block_grad_check, network_grad_check};
pub use macs::{count_macs, single_conv_macs, MacReport};

/// Number of image channels consumed and produced.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub base_width: usize,
    pub scales: usize,
    /// SEB count of each encoder stage, finest first.
    pub blocks_per_stage: Vec<usize>,
    /// Expansion factor inside the wavelet node.
    pub r: usize,
    pub filter_len: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_width: 16,
            scales: 3,
            blocks_per_stage: vec![1; 3],
            r: 2,
            filter_len: DEFAULT_FILTER_LEN,
        }
    }
}

/// Which outputs the forward pass produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Restored images at every scale.
    Train,
    /// Full resolution only.
    Inference,
}

impl NetworkConfig {
    pub fn micro(base_width: usize, scales: usize) -> Self {
        NetworkConfig {
            base_width,
            scales,
            blocks_per_stage: vec![1; scales],
            ..Self::default()
        }
    }

    pub fn width(&self, scale: usize) -> usize {
        self.base_width << (scale - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scales < 2 {
            return bad(format!("scales must be at least 2, got {}", self.scales));
        }
        if self.base_width < 2 || self.base_width % 2 != 0 {
            return bad(format!("base_width must be even and positive, got {}", self.base_width));
        }
        if self.r == 0 {
            return bad("r must be positive".into());
        }
        if self.filter_len < 2 || self.filter_len % 2 != 0 {
            return bad(format!("filter_len must be even and at least 2, got {}", self.filter_len));
        }
        if self.blocks_per_stage.len() != self.scales {
            return bad(format!(
                "blocks_per_stage lists {} stages for {} scales",
                self.blocks_per_stage.len(),
                self.scales
            ));
        }
        Ok(())
    }

    /// Required divisor of the input height and width.
    pub fn size_multiple(&self) -> usize {
        1 << self.scales
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let f = self.size_multiple();
        if shape.c() != IMAGE_CHANNELS {
            return Err(Error::shape("mlwnet_forward", format!("{IMAGE_CHANNELS} channels"), shape));
        }
        if shape.h() % f != 0 || shape.w() % f != 0 || shape.h() == 0 || shape.w() == 0 {
            return Err(Error::Divisibility {
                op: "mlwnet_forward",
                height: shape.h(),
                width: shape.w(),
                factor: f,
            });
        }
        Ok(())
    }

    /// Applies one `key=value` setting; returns false for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let int = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
        };
        match key {
            "base_width" => self.base_width = int(value)?,
            "scales" => {
                self.scales = int(value)?;
                if self.blocks_per_stage.len() != self.scales {
                    let fill = self.blocks_per_stage.first().copied().unwrap_or(1);
                    self.blocks_per_stage = vec![fill; self.scales];
                }
            }
            "blocks_per_stage" => {
                let parts = value.split(',').map(|p| int(p.trim())).collect::<Result<Vec<_>>>()?;
                self.blocks_per_stage = if parts.len() == 1 { vec![parts[0]; self.scales] } else { parts };
            }
            "r" => self.r = int(value)?,
            "filter_len" => self.filter_len = int(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let blocks: Vec<String> = self.blocks_per_stage.iter().map(|b| b.to_string()).collect();
        format!(
            "base_width={}\nscales={}\nblocks_per_stage={}\nr={}\nfilter_len={}\n",
            self.base_width,
            self.scales,
            blocks.join(","),
            self.r,
            self.filter_len
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = NetworkConfig::default();
        let kv = parse_key_values(text)?;
        // scales first so a later blocks_per_stage list is not overwritten
        if let Some((k, v)) = kv.iter().find(|(k, _)| k == "scales") {
            cfg.set(k, v)?;
        }
        for (k, v) in &kv {
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown network key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Uniform in `±1/√fan_in`.
    FanIn,
    Zero,
    One,
}

/// Named parameter tensors plus the filter-bank prefixes of every LWN.
/// Parameter `i` binds as `ParamId(i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    banks: Vec<String>,
}

impl<T: Element> Default for NetworkParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> NetworkParams<T> {
    pub fn new() -> Self {
        NetworkParams {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            banks: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name:?}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.names.len() - 1))
    }

    /// Registers a bank as four vector parameters `prefix.{a0,a1,s0,s1}`.
    pub fn insert_bank(&mut self, prefix: impl Into<String>, bank: &FilterBank<T>) -> Result<()> {
        let prefix = prefix.into();
        for (suffix, f) in BANK_SUFFIXES.iter().zip(bank.filters()) {
            self.insert(format!("{prefix}.{suffix}"), Tensor::vector(f))?;
        }
        self.banks.push(prefix);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.tensors[self.id(name)?.0])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = self.id(name)?.0;
        Ok(&mut self.tensors[i])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn bank_prefixes(&self) -> &[String] {
        &self.banks
    }

    pub fn is_bank_param(&self, id: ParamId) -> bool {
        let name = &self.names[id.0];
        self.banks.iter().any(|p| {
            name.strip_prefix(p.as_str())
                .and_then(|rest| rest.strip_prefix('.'))
                .is_some_and(|s| BANK_SUFFIXES.contains(&s))
        })
    }

    pub fn bank(&self, prefix: &str) -> Result<FilterBank<T>> {
        let f = |s: &str| -> Result<Vec<T>> { Ok(self.get(&format!("{prefix}.{s}"))?.data().to_vec()) };
        let mut bank = FilterBank::new(f("a0")?, f("a1")?, f("s0")?, f("s1")?)?;
        bank.learnable = true;
        Ok(bank)
    }

    pub fn banks(&self) -> Result<Vec<(String, FilterBank<T>)>> {
        self.banks.iter().map(|p| Ok((p.clone(), self.bank(p)?))).collect()
    }

    pub fn cast<U: Element>(&self) -> NetworkParams<U> {
        NetworkParams {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
            banks: self.banks.clone(),
        }
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

pub(crate) const BANK_SUFFIXES: [&str; 4] = ["a0", "a1", "s0", "s1"];

/// Binds parameters into a graph on first use.
pub struct Binder<'p, T> {
    params: &'p NetworkParams<T>,
    vars: Vec<Option<Var>>,
}

impl<'p, T: Element> Binder<'p, T> {
    pub fn new(params: &'p NetworkParams<T>) -> Self {
        Binder {
            params,
            vars: vec![None; params.len()],
        }
    }

    /// Uses vars already bound in parameter order, e.g. by a gradient check.
    pub fn with_vars(params: &'p NetworkParams<T>, vars: &[Var]) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::shape("Binder", params.len(), vars.len()));
        }
        Ok(Binder {
            params,
            vars: vars.iter().copied().map(Some).collect(),
        })
    }

    pub fn var(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let v = g.param(id, self.params.tensor(id).clone());
        g.label(v, name);
        self.vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn bank(&mut self, g: &mut Graph<T>, prefix: &str) -> Result<BankVars> {
        Ok(BankVars {
            a0: self.var(g, &format!("{prefix}.a0"))?,
            a1: self.var(g, &format!("{prefix}.a1"))?,
            s0: self.var(g, &format!("{prefix}.s0"))?,
            s1: self.var(g, &format!("{prefix}.s1"))?,
        })
    }

    /// `conv(x, name.w) + name.b`.
    pub fn conv(&mut self, g: &mut Graph<T>, x: Var, name: &str, opts: ConvOptions) -> Result<Var> {
        let w = self.var(g, &format!("{name}.w"))?;
        let b = self.var(g, &format!("{name}.b"))?;
        g.conv2d(x, w, Some(b), opts)
    }
}

pub(crate) fn same3x3(groups: usize) -> ConvOptions {
    ConvOptions::new(1, groups, Padding::zero(1))
}

/// Graph handles produced by [`mlwnet_forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Restored images, finest first.
    pub images: Vec<Var>,
    /// Banks of every LWN that ran, in parameter order.
    pub banks: Vec<BankVars>,
}

/// Records the network on `g`. In [`Mode::Train`] one restored image per
/// scale is returned, otherwise only the full-resolution one.
pub fn mlwnet_forward<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    params: &NetworkParams<T>,
    config: &NetworkConfig,
    mode: Mode,
) -> Result<ForwardOutput> {
    mlwnet_forward_bound(g, x, &mut Binder::new(params), config, mode)
}

/// [`mlwnet_forward`] reading parameters through an existing binder.
pub fn mlwnet_forward_bound<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    p: &mut Binder<'_, T>,
    config: &NetworkConfig,
    mode: Mode,
) -> Result<ForwardOutput> {
    config.validate()?;
    config.check_input(g.shape(x))?;
    let s_max = config.scales;

    let mut inputs = vec![x];
    for _ in 1..s_max {
        let prev = *inputs.last().expect("non-empty");
        inputs.push(g.resample_down2(prev)?);
    }

    // encoder
    let mut enc: Vec<Var> = Vec::with_capacity(s_max);
    let mut h = p.conv(g, x, "embed", same3x3(1))?;
    for s in 1..=s_max {
        if s > 1 {
            let pooled = g.resample_down2(h)?;
            h = p.conv(g, pooled, &format!("enc{s}.down"), ConvOptions::default())?;
        }
        for i in 0..config.blocks_per_stage[s - 1] {
            h = seb_forward(g, h, p, &format!("enc{s}.seb{i}"))?;
        }
        enc.push(h);
    }
    let e = |s: usize| enc[s - 1];

    // fusion, coarse to fine, scales S..2
    let mut fused: Vec<Option<Var>> = vec![None; s_max + 1];
    let mut banks = Vec::new();
    for s in (2..=s_max).rev() {
        let joined = if s == s_max {
            let pooled = g.resample_down2(e(s - 1))?;
            let d = p.conv(g, pooled, &format!("fuse{s}.down"), ConvOptions::default())?;
            g.add(e(s), d)?
        } else {
            let u = up(g, p, fused[s + 1].expect("coarser fusion"), &format!("fuse{s}.up"))?;
            g.add(u, e(s))?
        };
        let prefix = format!("fuse{s}.wfb");
        banks.push(p.bank(g, &format!("{prefix}.lwn.bank"))?);
        fused[s] = Some(wfb_forward(g, joined, p, &prefix)?);
    }

    // decoder, coarse to fine
    let mut images = vec![None; s_max + 1];
    let mut prev: Option<Var> = None;
    for s in (1..=s_max).rev() {
        let joined = match prev {
            None => e(s),
            Some(d) => {
                let u = up(g, p, d, &format!("dec{s}.up"))?;
                let mut j = g.add(u, if s == 1 { e(1) } else { fused[s].expect("fusion") })?;
                if s == 1 {
                    let f = up(g, p, fused[2].expect("fusion"), "dec1.fuse_up")?;
                    j = g.add(j, f)?;
                }
                j
            }
        };
        let prefix = format!("dec{s}.whb");
        banks.push(p.bank(g, &format!("{prefix}.lwn.bank"))?);
        let d = whb_forward(g, joined, p, &prefix)?;
        if s == 1 || mode == Mode::Train {
            let head = p.conv(g, d, &format!("head{s}"), same3x3(1))?;
            images[s] = Some(g.add(head, inputs[s - 1])?);
        }
        prev = Some(d);
    }
    let images = images.into_iter().flatten().collect();
    Ok(ForwardOutput { images, banks })
}

/// Channel-halving 1×1 conv followed by nearest 2× upsampling.
fn up<T: Element>(g: &mut Graph<T>, p: &mut Binder<'_, T>, x: Var, name: &str) -> Result<Var> {
    let narrowed = p.conv(g, x, name, ConvOptions::default())?;
    g.resample_up2(narrowed)
}

/// Runs inference on plain tensors and returns the full-resolution output.
pub fn restore<T: Element>(x: &Tensor<T>, params: &NetworkParams<T>, config: &NetworkConfig) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = mlwnet_forward(&mut g, xv, params, config, Mode::Inference)?;
    Ok(g.value(out.images[0]).clone())
}

struct Layout<'a, T> {
    params: NetworkParams<T>,
    rng: &'a mut ChaCha8Rng,
    filter_len: usize,
}

impl<T: Element> Layout<'_, T> {
    fn tensor(&mut self, name: String, shape: Shape, init: Init) -> Result<()> {
        let t = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::One => Tensor::ones(shape),
            Init::FanIn => {
                let fan_in = shape.c() * shape.h() * shape.w();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..shape.numel())
                    .map(|_| T::of(self.rng.gen_range(-bound..bound)))
                    .collect();
                Tensor::from_vec(shape, data)?
            }
        };
        self.params.insert(name, t).map(|_| ())
    }

    fn conv(&mut self, name: &str, out_ch: usize, in_per_group: usize, k: usize, init: Init) -> Result<()> {
        self.tensor(format!("{name}.w"), Shape::new(out_ch, in_per_group, k, k), init)?;
        self.tensor(format!("{name}.b"), Shape::vector(out_ch), Init::Zero)
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.tensor(format!("{name}.g"), Shape::vector(c), Init::One)?;
        self.tensor(format!("{name}.b"), Shape::vector(c), Init::Zero)
    }

    fn seb(&mut self, name: &str, c: usize) -> Result<()> {
        self.norm(&format!("{name}.ln"), c)?;
        self.conv(&format!("{name}.pw_in"), 2 * c, c, 1, Init::FanIn)?;
        self.conv(&format!("{name}.dw"), 2 * c, 1, 3, Init::FanIn)?;
        self.conv(&format!("{name}.pw_out"), c, c, 1, Init::Zero)
    }

    fn lwn(&mut self, name: &str, c: usize, r: usize) -> Result<()> {
        let wide = 4 * c * r;
        self.conv(&format!("{name}.pw1"), wide, 4 * c, 1, Init::FanIn)?;
        self.conv(&format!("{name}.dw"), wide, 1, 3, Init::FanIn)?;
        self.conv(&format!("{name}.pw2"), 4 * c, wide, 1, Init::FanIn)?;
        let bank = FilterBank::haar_padded(self.filter_len)?;
        self.params.insert_bank(format!("{name}.bank"), &bank)
    }

    fn wavelet_block(&mut self, name: &str, c: usize, r: usize) -> Result<()> {
        self.norm(&format!("{name}.ln"), c)?;
        self.conv(&format!("{name}.pw_in"), c, c, 1, Init::FanIn)?;
        self.lwn(&format!("{name}.lwn"), c, r)?;
        self.conv(&format!("{name}.pw_out"), c, c / 2, 1, Init::Zero)
    }
}

/// Parameters of a single block of `kind` on `channels` channels under the
/// prefix `"blk"`, initialised like the network's blocks. With
/// `random_out` the zero-initialised output projections are drawn at random
/// too, so the residual branch is live.
pub fn init_block_params<T: Element>(
    kind: BlockKind,
    channels: usize,
    r: usize,
    filter_len: usize,
    seed: u64,
    random_out: bool,
) -> Result<NetworkParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = Layout {
        params: NetworkParams::new(),
        rng: &mut rng,
        filter_len,
    };
    match kind {
        BlockKind::Lwn => l.lwn("blk", channels, r)?,
        BlockKind::Seb => l.seb("blk", channels)?,
        BlockKind::Wfb | BlockKind::Whb => l.wavelet_block("blk", channels, r)?,
    }
    let mut params = l.params;
    if random_out {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        if let Ok(w) = params.get_mut("blk.pw_out.w") {
            let bound = 1.0 / (w.shape().c() as f64).sqrt();
            for v in w.data_mut() {
                *v = T::of(rng.gen_range(-bound..bound));
            }
        }
    }
    Ok(params)
}

/// Deterministic initial parameters: fan-in uniform convolutions, zero
/// residual projections and heads, padded Haar banks.
pub fn init_params<T: Element>(config: &NetworkConfig, seed: u64) -> Result<NetworkParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = Layout {
        params: NetworkParams::new(),
        rng: &mut rng,
        filter_len: config.filter_len,
    };
    let w = |s: usize| config.width(s);
    let s_max = config.scales;
    l.conv("embed", w(1), IMAGE_CHANNELS, 3, Init::FanIn)?;
    for s in 1..=s_max {
        if s > 1 {
            l.conv(&format!("enc{s}.down"), w(s), w(s - 1), 1, Init::FanIn)?;
        }
        for i in 0..config.blocks_per_stage[s - 1] {
            l.seb(&format!("enc{s}.seb{i}"), w(s))?;
        }
    }
    for s in (2..=s_max).rev() {
        if s == s_max {
            l.conv(&format!("fuse{s}.down"), w(s), w(s - 1), 1, Init::FanIn)?;
        } else {
            l.conv(&format!("fuse{s}.up"), w(s), w(s + 1), 1, Init::FanIn)?;
        }
        l.wavelet_block(&format!("fuse{s}.wfb"), w(s), config.r)?;
    }
    for s in (1..=s_max).rev() {
        if s < s_max {
            l.conv(&format!("dec{s}.up"), w(s), w(s + 1), 1, Init::FanIn)?;
        }
        if s == 1 {
            l.conv("dec1.fuse_up", w(1), w(2), 1, Init::FanIn)?;
        }
        l.wavelet_block(&format!("dec{s}.whb"), w(s), config.r)?;
        l.conv(&format!("head{s}"), IMAGE_CHANNELS, w(s), 3, Init::Zero)?;
    }
    Ok(l.params)
}

#[cfg(test)]
mod tests;
