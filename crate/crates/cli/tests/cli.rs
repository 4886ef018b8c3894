use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use wavedeblur::io::{decode_pnm, read_image, read_tensor, write_image, write_tensor};
use wavedeblur::metrics::psnr_metric;
use wavedeblur::training::{random_bank, synth_dataset};
use wavedeblur::wavelet::FilterBank;
use wavedeblur::{Shape, Tensor};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wavedeblur"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn test_image() -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, 3, 12, 16), |[_, c, y, x]| ((c * 37 + y * 11 + x * 5) % 256) as f32 / 255.0)
}

const MICRO: &str = "base_width=8\nscales=2\nbatch=2\niters=3\npatch=16\ntrain_count=4\nval_count=2\neval_interval=2\n";

#[test]
fn dwt_idwt_round_trip_reproduces_the_image_file() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("in.ppm");
    write_image(&img, &test_image()).unwrap();
    let original = fs::read(&img).unwrap();
    for bank in ["haar", "db2"] {
        let sub = dir.path().join(format!("{bank}.mlwt"));
        let back = dir.path().join(format!("{bank}.ppm"));
        let raw = dir.path().join(format!("{bank}.back.mlwt"));
        assert_eq!(code(&run(&["dwt", "--in", p(&img), "--bank", bank, "--out", p(&sub)])), 0);
        assert_eq!(read_tensor::<f32>(&sub).unwrap().shape(), Shape::new(1, 12, 6, 8));
        assert_eq!(code(&run(&["idwt", "--in", p(&sub), "--bank", bank, "--out", p(&back)])), 0);
        assert_eq!(fs::read(&back).unwrap(), original);
        assert_eq!(code(&run(&["idwt", "--in", p(&sub), "--bank", bank, "--out", p(&raw)])), 0);
        let x: Tensor<f32> = decode_pnm(&original).unwrap();
        assert!(read_tensor::<f32>(&raw).unwrap().max_abs_diff(&x).unwrap() < 1e-5);
    }
    assert_eq!(fs::read(&img).unwrap(), original, "input untouched");
}

#[test]
fn repeated_runs_write_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("in.ppm");
    write_image(&img, &test_image()).unwrap();
    let a = dir.path().join("a.mlwt");
    let b = dir.path().join("b.mlwt");
    for out in [&a, &b] {
        assert_eq!(code(&run(&["dwt", "--in", p(&img), "--bank", "db2", "--out", p(out), "--seed", "3"])), 0);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let before = fs::read(&a).unwrap();
    assert_eq!(code(&run(&["dwt", "--in", p(&img), "--bank", "db2", "--out", p(&a), "--seed", "3"])), 0);
    assert_eq!(fs::read(&a).unwrap(), before);
}

#[test]
fn constant_image_gives_flat_subbands() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("gray.pgm");
    write_image(&img, &Tensor::<f32>::full(Shape::new(1, 1, 8, 8), 0.5)).unwrap();
    let sub = dir.path().join("s.mlwt");
    let pics = dir.path().join("pics");
    let out = run(&["dwt", "--in", p(&img), "--out", p(&sub), "--subband-images", p(&pics)]);
    assert_eq!(code(&out), 0);
    let y = read_tensor::<f32>(&sub).unwrap();
    let ll = y.at([0, 0, 0, 0]);
    assert!((ll - 2.0 * 128.0 / 255.0).abs() < 1e-5, "{ll}");
    for c in 0..4 {
        for i in 0..16 {
            let v = y.data()[c * 16 + i];
            if c == 0 {
                assert_eq!(v, ll);
            } else {
                assert!(v.abs() < 1e-6);
            }
        }
    }
    for name in ["LL", "LH", "HL", "HH"] {
        let t: Tensor<f32> = read_image(pics.join(format!("n0_c0_{name}.pgm"))).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 1, 4, 4));
        assert!(t.data().iter().all(|&v| v == t.data()[0]), "{name} not constant");
    }
}

#[test]
fn dwt_usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let img = dir.path().join("in.pgm");
    write_image(&img, &Tensor::<f32>::zeros(Shape::new(1, 1, 8, 8))).unwrap();
    let out = dir.path().join("o.mlwt");
    let bad_bank = run(&["dwt", "--in", p(&img), "--bank", "sym9", "--out", p(&out)]);
    assert_eq!(code(&bad_bank), 2);
    assert!(String::from_utf8_lossy(&bad_bank.stderr).contains("unknown bank"));
    let odd = dir.path().join("odd.pgm");
    write_image(&odd, &Tensor::<f32>::zeros(Shape::new(1, 1, 7, 8))).unwrap();
    assert_eq!(code(&run(&["dwt", "--in", p(&odd), "--out", p(&out)])), 2);
    let junk = dir.path().join("junk.mlwt");
    fs::write(&junk, b"not a tensor").unwrap();
    assert_eq!(code(&run(&["dwt", "--in", p(&junk), "--out", p(&out)])), 2);
    assert_eq!(code(&run(&["dwt", "--in", p(&img), "--out", p(&out), "--frobnicate"])), 2);
    assert_eq!(code(&run(&["dwt", "--out", p(&out)])), 2);
}

#[test]
fn idwt_contract() {
    let dir = TempDir::new().unwrap();
    let three = dir.path().join("three.mlwt");
    write_tensor(&three, &Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4))).unwrap();
    let out = dir.path().join("o.pgm");
    assert_eq!(code(&run(&["idwt", "--in", p(&three), "--out", p(&out)])), 2);

    let zeros = dir.path().join("zeros.mlwt");
    write_tensor(&zeros, &Tensor::<f32>::zeros(Shape::new(1, 12, 4, 4))).unwrap();
    let black = dir.path().join("black.ppm");
    assert_eq!(code(&run(&["idwt", "--in", p(&zeros), "--bank", "db2", "--out", p(&black)])), 0);
    let img: Tensor<f32> = read_image(&black).unwrap();
    assert_eq!(img.shape(), Shape::new(1, 3, 8, 8));
    assert!(img.data().iter().all(|&v| v == 0.0));
}

#[test]
fn learn_filters_writes_bank_and_curve() {
    let dir = TempDir::new().unwrap();
    let bank = dir.path().join("bank.txt");
    let out = run(&["learn-filters", "--out", p(&bank)]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let last: f64 = text.trim().strip_prefix("final_loss=").unwrap().parse().unwrap();
    assert!(last < 1e-6);
    let curve = fs::read_to_string(dir.path().join("bank.txt.loss.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("step,loss"));
    assert_eq!(curve.lines().count(), 5002);
    let loaded = FilterBank::<f64>::load(&bank).unwrap();
    assert_eq!(FilterBank::<f64>::from_text(&loaded.to_text()).unwrap(), loaded);
}

#[test]
fn zero_steps_write_the_random_start() {
    let dir = TempDir::new().unwrap();
    let bank = dir.path().join("b.txt");
    let curve = dir.path().join("c.csv");
    let out = run(&["learn-filters", "--steps", "0", "--seed", "5", "--out", p(&bank), "--curve", p(&curve)]);
    assert_eq!(code(&out), 0);
    let want = random_bank(4, 5).unwrap();
    assert_eq!(fs::read_to_string(&bank).unwrap(), want.to_text());
    let got = FilterBank::<f64>::load(&bank).unwrap();
    assert_eq!(got.filters(), want.filters());
    assert_eq!(fs::read_to_string(&curve).unwrap().lines().count(), 2);
}

#[test]
fn numeric_failure_exits_1() {
    let dir = TempDir::new().unwrap();
    let bank = dir.path().join("b.txt");
    let out = run(&["learn-filters", "--lr", "1e200", "--steps", "20", "--out", p(&bank)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn help_and_unknown_commands() {
    let help = run(&["--help"]);
    assert_eq!(code(&help), 0);
    for cmd in ["dwt", "idwt", "learn-filters", "train", "eval", "macs", "gradcheck"] {
        assert!(stdout(&help).contains(cmd), "{cmd} missing from help");
        let sub = run(&[cmd, "--help"]);
        assert_eq!(code(&sub), 0);
        assert!(stdout(&sub).contains("--seed"), "{cmd} lacks --seed");
    }
    assert_eq!(code(&run(&["deblur"])), 2);
    assert_eq!(code(&run(&[])), 2);
}

#[test]
fn macs_scaling_and_modes() {
    let total = |args: &[&str]| -> u64 {
        let out = run(args);
        assert_eq!(code(&out), 0);
        let text = stdout(&out);
        assert!(text.lines().any(|l| l.starts_with("embed=")));
        text.lines().last().unwrap().strip_prefix("total=").unwrap().parse().unwrap()
    };
    let t64 = total(&["macs", "--height", "64", "--width", "64"]);
    assert_eq!(t64, 119_980_032);
    assert_eq!(total(&["macs", "--height", "128", "--width", "128"]), 4 * t64);
    assert!(total(&["macs", "--mode", "inference"]) < t64);
    assert_eq!(code(&run(&["macs", "--height", "60"])), 2);
}

#[test]
fn gradcheck_wavelet_passes() {
    let out = run(&["gradcheck", "--target", "wavelet"]);
    assert_eq!(code(&out), 0);
    let last = stdout(&out).lines().last().unwrap().to_string();
    let err: f64 = last.strip_prefix("wavelet max_rel_error=").unwrap().parse().unwrap();
    assert!(err < 1e-6);
    assert_eq!(code(&run(&["gradcheck", "--target", "everything"])), 2);
}

#[test]
fn train_is_deterministic_and_eval_reports_identity_at_start() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("micro.cfg");
    fs::write(&cfg, MICRO).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = run(&["train", "--config", p(&cfg), "--out", p(out), "--quiet"]);
        assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 5);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?} differs");
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("iter,lr,total_loss,wavelet_loss,val_psnr,val_ssim"));

    let zero = dir.path().join("zero");
    let r = run(&["train", "--config", p(&cfg), "--set", "iters=0", "--out", p(&zero), "--quiet"]);
    assert_eq!(code(&r), 0);

    let pair = synth_dataset(1, 16, 4, 0.01, 9).unwrap().remove(0);
    let blurred = dir.path().join("blurred.ppm");
    let sharp = dir.path().join("sharp.ppm");
    write_image(&blurred, &pair.blurred).unwrap();
    write_image(&sharp, &pair.sharp).unwrap();
    let x: Tensor<f32> = read_image(&blurred).unwrap();
    let y: Tensor<f32> = read_image(&sharp).unwrap();
    let want = psnr_metric(&x, &y, 1.0).unwrap();
    let out = run(&["eval", "--checkpoint", p(&zero), "--in", p(&blurred), "--ref", p(&sharp)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let line = stdout(&out);
    let psnr: f64 = line.split_whitespace().next().unwrap().strip_prefix("psnr=").unwrap().parse().unwrap();
    assert!((psnr - want).abs() < 1e-4, "{psnr} vs {want}");
    assert!(line.contains("ssim="));

    let bad = run(&["train", "--config", p(&cfg), "--set", "patch=18", "--out", p(&zero)]);
    assert_eq!(code(&bad), 2);
    let missing = run(&["eval", "--checkpoint", p(&dir.path().join("nope")), "--in", p(&blurred), "--ref", p(&sharp)]);
    assert_ne!(code(&missing), 0);
}

#[test]
fn eval_scores_directories() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("micro.cfg");
    fs::write(&cfg, MICRO).unwrap();
    let ck = dir.path().join("ck");
    assert_eq!(code(&run(&["train", "--config", p(&cfg), "--out", p(&ck), "--quiet"])), 0);
    let (bd, sd, od) = (dir.path().join("b"), dir.path().join("s"), dir.path().join("o"));
    fs::create_dir_all(&bd).unwrap();
    fs::create_dir_all(&sd).unwrap();
    for (i, pair) in synth_dataset(2, 16, 4, 0.01, 4).unwrap().iter().enumerate() {
        write_image(bd.join(format!("{i}.ppm")), &pair.blurred).unwrap();
        write_image(sd.join(format!("{i}.ppm")), &pair.sharp).unwrap();
    }
    let csv = dir.path().join("scores.csv");
    let out = run(&["eval", "--checkpoint", p(&ck), "--in", p(&bd), "--ref", p(&sd), "--out", p(&od), "--csv", p(&csv)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("0.ppm psnr="));
    assert!(lines[2].starts_with("mean psnr="));
    assert!(od.join("1.ppm").is_file());
    let rows = fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().next(), Some("image,psnr,ssim"));
    assert_eq!(rows.lines().count(), 3);
}
