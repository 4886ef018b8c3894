//! Optimisation: filter learning on the reconstruction penalty alone, and
//! end-to-end training of the network on synthetic data.

mod config;
mod data;
mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId};
use crate::error::{Error, Result};
use crate::losses::{make_target_pyramid, total_loss, wavelet_loss, wavelet_loss_value, ScaleOutputs};
use crate::metrics::{psnr_metric, ssim_metric};
use crate::network::{init_params, mlwnet_forward, restore, Mode, NetworkParams};
use crate::tensor::{Element, Tensor};
use crate::wavelet::{BankVars, FilterBank};

pub use config::TrainConfig;
pub use data::{
    apply_blur, augment, degrade, procedural_scene, random_blur, synth_dataset, trajectory_kernel, BlurKernel,
    BlurSpec, Pair, Transform, MAX_NOISE_SIGMA,
};
pub use optim::{adamw_step, cosine_lr, AdamW, OptimState};

/// Final learning rate of the filter-learning schedule.
pub const FILTER_LR_MIN: f64 = 1e-7;

/// Adam epsilon used on filter banks.
pub const FILTER_EPS: f64 = 0.1;

/// Outcome of [`learn_filters`].
#[derive(Clone, Debug)]
pub struct FilterLearning {
    pub bank: FilterBank<f64>,
    /// Loss before any step, then after each step.
    pub losses: Vec<f64>,
}

/// Uniform `±1/√N` draws for all four filters.
pub fn random_bank(n: usize, seed: u64) -> Result<FilterBank<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (n as f64).sqrt();
    let mut f = || (0..n).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<f64>>();
    let (a0, a1, s0, s1) = (f(), f(), f(), f());
    let mut bank = FilterBank::new(a0, a1, s0, s1)?;
    bank.learnable = true;
    Ok(bank)
}

/// Minimises the reconstruction penalty of a bank of length `n` from a
/// random start with AdamW under a cosine schedule from `lr`.
pub fn learn_filters(n: usize, steps: usize, lr: f64, seed: u64) -> Result<FilterLearning> {
    learn_filters_from(random_bank(n, seed)?, steps, lr)
}

pub fn learn_filters_from(init: FilterBank<f64>, steps: usize, lr: f64) -> Result<FilterLearning> {
    learn_filters_with(init, steps, lr, AdamW { eps: FILTER_EPS, ..AdamW::default() })
}

pub fn learn_filters_with(init: FilterBank<f64>, steps: usize, lr: f64, hyper: AdamW) -> Result<FilterLearning> {
    let mut params: Vec<Tensor<f64>> = init.filters().iter().map(|f| Tensor::vector(f)).collect();
    let mut state = OptimState::new(hyper, &params);
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut g = Graph::new();
        let v: Vec<_> = params.iter().enumerate().map(|(i, p)| g.param(ParamId(i), p.clone())).collect();
        let bank = BankVars {
            a0: v[0],
            a1: v[1],
            s0: v[2],
            s1: v[3],
        };
        let loss = wavelet_loss(&mut g, &bank)?;
        losses.push(g.value(loss).item());
        if step == steps {
            break;
        }
        let grads = g.backward(loss)?;
        let grads: Vec<_> = (0..4).map(|i| grads.param(ParamId(i))).collect();
        adamw_step(&mut params, &grads, &mut state, cosine_lr(step, steps, lr, FILTER_LR_MIN.min(lr))?)?;
    }
    let [a0, a1, s0, s1] = [0, 1, 2, 3].map(|i| params[i].data().to_vec());
    let mut bank = FilterBank::new(a0, a1, s0, s1)?;
    bank.learnable = true;
    Ok(FilterLearning { bank, losses })
}

/// Header of the metrics log.
pub const LOG_HEADER: &str = "iter,lr,total_loss,wavelet_loss,val_psnr,val_ssim";

/// One metrics-log line. `iter` counts completed updates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    /// Mean training loss over the updates since the previous row.
    pub total_loss: f64,
    /// Summed reconstruction penalty of every bank at this point.
    pub wavelet_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{:.9},{:e},{:.6},{:.6}",
            self.iter, self.lr, self.total_loss, self.wavelet_loss, self.val_psnr, self.val_ssim
        )
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        writeln!(out, "{}", r.csv()).expect("string write");
    }
    out
}

/// Mean PSNR and SSIM between paired images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: f64,
}

pub fn mean_quality(pairs: impl IntoIterator<Item = (Tensor<f32>, Tensor<f32>)>) -> Result<Quality> {
    let (mut psnr, mut ssim, mut n) = (0.0, 0.0, 0usize);
    for (x, y) in pairs {
        psnr += psnr_metric(&x, &y, 1.0)?;
        ssim += ssim_metric(&x, &y)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no images to score".into()));
    }
    Ok(Quality {
        psnr: psnr / n as f64,
        ssim: ssim / n as f64,
    })
}

/// Quality of the blurred inputs themselves.
pub fn blurred_quality(set: &[Pair]) -> Result<Quality> {
    mean_quality(set.iter().map(|p| (p.blurred.clone(), p.sharp.clone())))
}

/// Restores every blurred image in inference mode and scores it.
pub fn evaluate(params: &NetworkParams<f32>, config: &TrainConfig, set: &[Pair]) -> Result<Quality> {
    let restored = set
        .iter()
        .map(|p| Ok((restore(&p.blurred, params, &config.network)?, p.sharp.clone())))
        .collect::<Result<Vec<_>>>()?;
    mean_quality(restored)
}

/// Summed reconstruction penalty of every bank in `params`.
pub fn bank_penalty<T: Element>(params: &NetworkParams<T>) -> Result<f64> {
    Ok(params.banks()?.iter().map(|(_, b)| wavelet_loss_value(b)).sum())
}

/// Seeds of the training and validation sets derived from the run seed.
pub fn dataset_seeds(seed: u64) -> (u64, u64) {
    (seed, seed ^ 0x7661_6c69_6461_7465)
}

/// Builds the training and validation sets a config describes.
pub fn make_datasets(config: &TrainConfig) -> Result<(Vec<Pair>, Vec<Pair>)> {
    let (ts, vs) = dataset_seeds(config.seed);
    let m = config.network.size_multiple();
    Ok((
        synth_dataset(config.train_count, config.patch, m, config.noise_sigma, ts)?,
        synth_dataset(config.val_count, config.patch, m, config.noise_sigma, vs)?,
    ))
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams<f32>,
    pub rows: Vec<LogRow>,
    /// Training loss of every iteration, at the parameters it updated.
    pub losses: Vec<f64>,
    /// Summed bank penalty before training and after every update.
    pub wavelet_trace: Vec<f64>,
    pub blurred: Option<Quality>,
}

impl TrainOutcome {
    pub fn final_row(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    pub fn max_wavelet_loss(&self) -> f64 {
        self.wavelet_trace.iter().copied().fold(0.0, f64::max)
    }
}

/// Trains a freshly initialised network. `on_row` sees every log row as it
/// is produced.
pub fn train_loop(
    config: &TrainConfig,
    train: &[Pair],
    val: &[Pair],
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let net = &config.network;
    for p in train.iter().chain(val) {
        net.check_input(p.blurred.shape())?;
    }
    let mut params: NetworkParams<f32> = init_params(net, config.seed)?;
    let base = AdamW {
        weight_decay: config.weight_decay,
        ..AdamW::default()
    };
    let bank = AdamW {
        eps: config.bank_eps,
        ..base
    };
    let hyper = (0..params.len())
        .map(|i| if params.is_bank_param(ParamId(i)) { bank } else { base })
        .collect();
    let mut state = OptimState::grouped(hyper, params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6261_7463_6865_73);
    let mut order: Vec<usize> = Vec::new();

    let validate = |params: &NetworkParams<f32>| -> Result<Quality> {
        if val.is_empty() {
            Ok(Quality {
                psnr: f64::NAN,
                ssim: f64::NAN,
            })
        } else {
            evaluate(params, config, val)
        }
    };

    let mut rows = Vec::new();
    let mut losses = Vec::with_capacity(config.iters);
    let mut wavelet_trace = vec![bank_penalty(&params)?];
    let mut window = (0.0, 0usize);
    let steps = config.iters.max(1);
    for it in 0..steps {
        if order.len() < config.batch {
            let mut epoch: Vec<usize> = (0..train.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let picked: Vec<usize> = order.drain(..config.batch.min(order.len())).collect();
        let mut batch = Vec::with_capacity(picked.len());
        for &i in &picked {
            batch.push(if config.augment { augment(&train[i], &mut rng)? } else { train[i].clone() });
        }
        let x = Tensor::stack_batch(&batch.iter().map(|p| p.blurred.clone()).collect::<Vec<_>>())?;
        let y = Tensor::stack_batch(&batch.iter().map(|p| p.sharp.clone()).collect::<Vec<_>>())?;

        let mut g = Graph::new();
        let xv = g.constant(x);
        g.label(xv, "input batch");
        let out = mlwnet_forward(&mut g, xv, &params, net, Mode::Train)?;
        let targets: Vec<_> = make_target_pyramid(&y, net.scales)?
            .into_iter()
            .map(|t| g.constant(t))
            .collect();
        let banks = if config.use_wavelet_loss { out.banks.clone() } else { Vec::new() };
        let loss = total_loss(&mut g, &ScaleOutputs::new(out.images), &targets, &banks, config.wavelet_weight)?;
        let value = g.value(loss.total).item().f64();
        let lr = cosine_lr(it, steps, config.lr_max, config.lr_min)?;

        if it == 0 {
            let q = validate(&params)?;
            let row = LogRow {
                iter: 0,
                lr,
                total_loss: value,
                wavelet_loss: wavelet_trace[0],
                val_psnr: q.psnr,
                val_ssim: q.ssim,
            };
            on_row(&row);
            rows.push(row);
        }
        if config.iters == 0 {
            break;
        }

        let grads = g.backward(loss.total)?;
        let grads: Vec<_> = (0..params.len()).map(|i| grads.param(ParamId(i))).collect();
        adamw_step(params.tensors_mut(), &grads, &mut state, lr)?;
        losses.push(value);
        wavelet_trace.push(bank_penalty(&params)?);
        window = (window.0 + value, window.1 + 1);

        let done = it + 1;
        let due = config.eval_interval > 0 && done % config.eval_interval == 0;
        if due || done == config.iters {
            let q = validate(&params)?;
            let row = LogRow {
                iter: done,
                lr,
                total_loss: window.0 / window.1 as f64,
                wavelet_loss: *wavelet_trace.last().expect("non-empty"),
                val_psnr: q.psnr,
                val_ssim: q.ssim,
            };
            on_row(&row);
            rows.push(row);
            window = (0.0, 0);
        }
    }
    let blurred = if val.is_empty() { None } else { Some(blurred_quality(val)?) };
    Ok(TrainOutcome {
        params,
        rows,
        losses,
        wavelet_trace,
        blurred,
    })
}
