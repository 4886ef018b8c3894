use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use wavedeblur::gradcheck::{run_suite, Target};
use wavedeblur::io::{decode_tensor, is_image_path, peek_tensor_header, read_image, write_image, write_tensor};
use wavedeblur::metrics::{psnr_metric, ssim_metric};
use wavedeblur::network::{count_macs, load_checkpoint, restore, save_checkpoint, Mode};
use wavedeblur::training::{learn_filters, log_csv, make_datasets, train_loop, TrainConfig};
use wavedeblur::wavelet::{dwt2, idwt2, named_bank, FilterBank, SUBBAND_NAMES};
use wavedeblur::{DType, Element, Error, Result, Shape, Tensor};

use crate::{Command, DwtArgs, EvalArgs, GradcheckArgs, IdwtArgs, LearnArgs, MacsArgs, ModeArg, TargetArg, TrainArgs};

pub fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Dwt(a) => dwt(a),
        Command::Idwt(a) => idwt(a),
        Command::LearnFilters(a) => learn(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Macs(a) => macs(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

/// Images load as f32; tensor files keep their stored precision.
fn read_any(path: &Path) -> Result<AnyTensor> {
    if is_image_path(path) {
        return Ok(AnyTensor::F32(read_image(path)?));
    }
    let bytes = fs::read(path)?;
    Ok(match peek_tensor_header(&bytes)?.0 {
        DType::F32 => AnyTensor::F32(decode_tensor(&bytes)?),
        DType::F64 => AnyTensor::F64(decode_tensor(&bytes)?),
    })
}

/// Writes an image when the extension names one, a tensor file otherwise.
fn write_any<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    if is_image_path(path) {
        write_image(path, t)
    } else {
        write_tensor(path, t)
    }
}

fn dwt(a: DwtArgs) -> Result<ExitCode> {
    let bank = named_bank::<f64>(&a.bank)?;
    match read_any(&a.input)? {
        AnyTensor::F32(x) => dwt_typed(x, &bank.cast(), &a),
        AnyTensor::F64(x) => dwt_typed(x, &bank, &a),
    }
}

fn dwt_typed<T: Element>(x: Tensor<T>, bank: &FilterBank<T>, a: &DwtArgs) -> Result<ExitCode> {
    let y = dwt2(&x, bank)?;
    write_tensor(&a.out, &y)?;
    println!("{} -> {} {}", x.shape(), y.shape(), a.out.display());
    if let Some(dir) = &a.subband_images {
        let written = write_subbands(dir, &y)?;
        println!("{written} subband images in {}", dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// One grayscale image per batch item, input channel and subband, each
/// stretched to the full range. Constant planes become black.
fn write_subbands<T: Element>(dir: &Path, y: &Tensor<T>) -> Result<usize> {
    fs::create_dir_all(dir)?;
    let [n, c, h, w] = y.shape().0;
    let plane = h * w;
    for b in 0..n {
        for ch in 0..c {
            let start = (b * c + ch) * plane;
            let vals = &y.data()[start..start + plane];
            let (lo, hi) = vals
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.f64()), hi.max(v.f64())));
            let range = hi - lo;
            let data = vals
                .iter()
                .map(|v| if range > 0.0 { (v.f64() - lo) / range } else { 0.0 })
                .collect();
            let img = Tensor::<f64>::from_vec(Shape::new(1, 1, h, w), data)?;
            let name = format!("n{b}_c{}_{}.pgm", ch / 4, SUBBAND_NAMES[ch % 4]);
            write_image(dir.join(name), &img)?;
        }
    }
    Ok(n * c)
}

fn idwt(a: IdwtArgs) -> Result<ExitCode> {
    if is_image_path(&a.input) {
        return Err(Error::Format(format!("{} is an image, expected a subband tensor", a.input.display())));
    }
    let bank = named_bank::<f64>(&a.bank)?;
    match read_any(&a.input)? {
        AnyTensor::F32(y) => idwt_typed(y, &bank.cast(), &a),
        AnyTensor::F64(y) => idwt_typed(y, &bank, &a),
    }
}

fn idwt_typed<T: Element>(y: Tensor<T>, bank: &FilterBank<T>, a: &IdwtArgs) -> Result<ExitCode> {
    let x = idwt2(&y, bank)?;
    write_any(&a.out, &x)?;
    println!("{} -> {} {}", y.shape(), x.shape(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn curve_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

fn learn(a: LearnArgs) -> Result<ExitCode> {
    let run = learn_filters(a.n, a.steps, a.lr, a.seed.seed.unwrap_or(0))?;
    run.bank.save(&a.out)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in run.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l:e}\n"));
    }
    let curve = a.curve.unwrap_or_else(|| curve_path(&a.out));
    fs::write(&curve, csv)?;
    let last = run.losses.last().copied().unwrap_or(f64::NAN);
    println!("final_loss={last:e}");
    Ok(ExitCode::SUCCESS)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = a.seed.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = train_config(&a)?;
    let (train_set, val_set) = make_datasets(&cfg)?;
    let quiet = a.quiet;
    if !quiet {
        println!("{}", wavedeblur::training::LOG_HEADER);
    }
    let out = train_loop(&cfg, &train_set, &val_set, |row| {
        if !quiet {
            println!("{}", row.csv());
        }
    })?;
    save_checkpoint(&a.out, &out.params, &cfg.network)?;
    fs::write(a.out.join("train.txt"), cfg.to_text())?;
    fs::write(a.out.join("metrics.csv"), log_csv(&out.rows))?;
    if let (Some(b), Some(r)) = (out.blurred, out.final_row()) {
        println!(
            "blurred_psnr={:.6} val_psnr={:.6} gain_db={:.6} max_wavelet_loss={:e}",
            b.psnr,
            r.val_psnr,
            r.val_psnr - b.psnr,
            out.max_wavelet_loss()
        );
    }
    Ok(ExitCode::SUCCESS)
}

/// Pairs of (name, blurred, reference) paths.
fn eval_pairs(input: &Path, reference: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if !input.is_dir() {
        let name = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(name, input.to_path_buf(), reference.to_path_buf())]);
    }
    if !reference.is_dir() {
        return Err(Error::InvalidArgument("--in is a directory, so --ref must be one too".into()));
    }
    let mut names: Vec<String> = fs::read_dir(input)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && is_image_path(p))
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!("no images in {}", input.display())));
    }
    names
        .into_iter()
        .map(|n| {
            let r = reference.join(&n);
            if !r.is_file() {
                return Err(Error::InvalidArgument(format!("no reference {}", r.display())));
            }
            Ok((n.clone(), input.join(&n), r))
        })
        .collect()
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let (params, net) = load_checkpoint::<f32>(&a.checkpoint)?;
    let pairs = eval_pairs(&a.input, &a.reference)?;
    let many = a.input.is_dir();
    if let (true, Some(out)) = (many, &a.out) {
        fs::create_dir_all(out)?;
    }
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    let mut csv = String::from("image,psnr,ssim\n");
    for (name, x, y) in &pairs {
        let x: Tensor<f32> = read_image(x)?;
        let y: Tensor<f32> = read_image(y)?;
        let restored = restore(&x, &params, &net)?;
        let psnr = psnr_metric(&restored, &y, 1.0)?;
        let ssim = ssim_metric(&restored, &y)?;
        psnr_sum += psnr;
        ssim_sum += ssim;
        csv.push_str(&format!("{name},{psnr:.6},{ssim:.6}\n"));
        if many {
            println!("{name} psnr={psnr:.6} ssim={ssim:.6}");
        } else {
            println!("psnr={psnr:.6} ssim={ssim:.6}");
        }
        if let Some(out) = &a.out {
            let path = if many { out.join(name) } else { out.clone() };
            write_image(path, &restored)?;
        }
    }
    if many {
        let n = pairs.len() as f64;
        println!("mean psnr={:.6} ssim={:.6}", psnr_sum / n, ssim_sum / n);
    }
    if let Some(path) = &a.csv {
        fs::write(path, csv)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn macs(a: MacsArgs) -> Result<ExitCode> {
    let cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let mode = match a.mode {
        ModeArg::Train => Mode::Train,
        ModeArg::Inference => Mode::Inference,
    };
    println!("{}", count_macs(&cfg.network, a.height, a.width, mode)?);
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let targets = match a.target {
        TargetArg::Ops => vec![Target::Ops],
        TargetArg::Wavelet => vec![Target::Wavelet],
        TargetArg::Network => vec![Target::Network],
        TargetArg::All => Target::ALL.to_vec(),
    };
    let mut ok = true;
    for t in targets {
        let report = run_suite(t, a.seed.seed.unwrap_or(0))?;
        println!("{report}");
        ok &= report.passed();
    }
    if ok {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: gradient check outside tolerance");
        Ok(ExitCode::from(1))
    }
}
