use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fcdiff::data::{self, DatasetSpec, RawTensor};
use fcdiff::filters::{band_consistency, make_mask, BandKind};
use fcdiff::{Shape, SpatialTensor};

const TINY: [&str; 12] = [
    "--set",
    "width=4",
    "--set",
    "timesteps=50",
    "--set",
    "num_images=40",
    "--set",
    "image_size=16",
    "--set",
    "batch_size=2",
    "--set",
    "sample_steps=5",
];

fn fcdiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcdiff"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sample_image(dir: &Path) -> PathBuf {
    let spec = DatasetSpec::default();
    let (img, _) = data::generate(&spec, 7).unwrap();
    let path = dir.join("a.ppm");
    data::write_ppm(&path, &img).unwrap();
    path
}

#[test]
fn filter_low_keeps_the_low_band() {
    let dir = tempfile::tempdir().unwrap();
    let a = sample_image(dir.path());
    let za = data::encode::<f64>(&data::read_ppm(&a).unwrap()).unwrap();
    let mask = make_mask(BandKind::Low, za.h(), za.w()).unwrap();

    let latent = dir.path().join("b.fcdt");
    let out = fcdiff(&["filter", "--band", "low", "--in", s(&a), "--out", s(&latent)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let zb = data::read_tensor(&latent).unwrap().into_spatial().unwrap().cast::<f64>();
    assert!(band_consistency(&za, &zb, &mask).unwrap() >= 0.999);

    // An 8-bit image adds clamping and quantization on top.
    let image = dir.path().join("b.ppm");
    let out = fcdiff(&["filter", "--band", "low", "--in", s(&a), "--out", s(&image)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let zb = data::encode::<f64>(&data::read_ppm(&image).unwrap()).unwrap();
    assert!(band_consistency(&za, &zb, &mask).unwrap() >= 0.99);
}

#[test]
fn filter_full_is_identity_up_to_rounding() {
    let dir = tempfile::tempdir().unwrap();
    let a = sample_image(dir.path());
    let b = dir.path().join("b.ppm");
    let out = fcdiff(&["filter", "--band", "full", "--in", s(&a), "--out", s(&b)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (ia, ib) = (data::read_ppm(&a).unwrap(), data::read_ppm(&b).unwrap());
    let worst = ia
        .pixels()
        .iter()
        .zip(ib.pixels())
        .map(|(x, y)| x.abs_diff(*y))
        .max()
        .unwrap();
    assert!(worst <= 1);
}

#[test]
fn shuffle_depends_only_on_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = sample_image(dir.path());
    let run = |seed: &str, name: &str| {
        let p = dir.path().join(name);
        let out = fcdiff(&["shuffle", "--band", "mini", "--seed", seed, "--in", s(&a), "--out", s(&p)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        std::fs::read(p).unwrap()
    };
    assert_eq!(run("1", "x.ppm"), run("1", "y.ppm"));
    assert_ne!(run("1", "x.ppm"), run("2", "z.ppm"));
}

#[test]
fn spectrum_lists_every_level() {
    let dir = tempfile::tempdir().unwrap();
    let a = sample_image(dir.path());
    let out = fcdiff(&["spectrum", "--in", s(&a)]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let levels: Vec<usize> = text
        .lines()
        .map(|l| {
            let (level, energy) = l.split_once('\t').unwrap();
            assert!(energy.parse::<f64>().unwrap() >= 0.0);
            level.parse().unwrap()
        })
        .collect();
    assert_eq!(levels, (0..=30).collect::<Vec<_>>());
}

#[test]
fn tensors_pass_through_filter() {
    let dir = tempfile::tempdir().unwrap();
    let z = SpatialTensor::<f32>::from_fn(Shape::new(6, 4, 2).unwrap(), |i, j, c| (i * 7 + j * 3 + c) as f32 * 0.1);
    let a = dir.path().join("z.fcdt");
    let b = dir.path().join("y.fcdt");
    data::write_tensor(&a, &RawTensor::from(&z)).unwrap();
    let out = fcdiff(&["filter", "--band", "full", "--in", s(&a), "--out", s(&b)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let back = data::read_tensor(&b).unwrap().into_spatial().unwrap();
    assert!(back.max_abs_diff(&z) < 1e-5);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let a = sample_image(dir.path());
    let b = dir.path().join("b.ppm");
    assert_eq!(code(&fcdiff(&["--help"])), 0);
    assert_eq!(code(&fcdiff(&["frobnicate"])), 1);
    assert_eq!(code(&fcdiff(&["filter", "--band", "wide", "--in", s(&a), "--out", s(&b)])), 1);
    assert_eq!(code(&fcdiff(&["filter", "--band", "custom:5:2", "--in", s(&a), "--out", s(&b)])), 1);
    assert_eq!(code(&fcdiff(&["--set", "nope=1", "spectrum", "--in", s(&a)])), 1);

    let missing = dir.path().join("missing.ppm");
    assert_eq!(code(&fcdiff(&["spectrum", "--in", s(&missing)])), 2);
    let garbage = dir.path().join("garbage.ppm");
    std::fs::write(&garbage, b"P6\n2 x\n255\n").unwrap();
    assert_eq!(code(&fcdiff(&["spectrum", "--in", s(&garbage)])), 2);

    let nan = dir.path().join("nan.fcdt");
    let mut z = SpatialTensor::<f32>::zeros(Shape::new(2, 2, 1).unwrap());
    z.set(1, 1, 0, f32::NAN);
    data::write_tensor(&nan, &RawTensor::from(&z)).unwrap();
    let out = fcdiff(&["filter", "--band", "low", "--in", s(&nan), "--out", s(&b)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let a = sample_image(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# test\nseed = 5\nsteps = 9\nlr = 0.01\n").unwrap();
    let out = fcdiff(&["--config", s(&cfg), "--set", "lr=0.5", "--steps", "3", "spectrum", "--in", s(&a)]);
    assert_eq!(code(&out), 0);
    let err = stderr(&out);
    assert!(err.contains("seed=5\n"), "{err}");
    assert!(err.contains("steps=3\n"));
    assert!(err.contains("lr=0.5\n"));
    assert!(err.contains("shuffle_shared_channels=false\n"));

    std::fs::write(&cfg, "colour = red\n").unwrap();
    assert_eq!(code(&fcdiff(&["--config", s(&cfg), "spectrum", "--in", s(&a)])), 1);
}

#[test]
fn gen_data_writes_images_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("data");
    let out = fcdiff(&["--set", "num_images=12", "--set", "image_size=16", "gen-data", "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let labels = std::fs::read_to_string(out_dir.join("labels.tsv")).unwrap();
    assert_eq!(labels.lines().count(), 13);
    assert!(labels.lines().nth(1).unwrap().starts_with("0\t0\twarm\t"));
    let img = data::read_ppm(out_dir.join("0011.ppm")).unwrap();
    assert_eq!((img.width(), img.height()), (16, 16));
}

#[test]
fn train_translate_and_evaluate_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base.fcck");
    let model = dir.path().join("mini.fcck");
    let with = |extra: &[&str]| {
        let mut args = TINY.to_vec();
        args.extend_from_slice(extra);
        fcdiff(&args)
    };

    let out = with(&["--steps", "4", "pretrain", "--out", s(&base)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let log = String::from_utf8(out.stdout).unwrap();
    let steps: Vec<usize> = log.lines().map(|l| l.split('\t').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![1, 2, 3, 4]);

    let again = with(&["--steps", "4", "pretrain", "--out", s(&dir.path().join("again.fcck"))]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), log);

    let out = with(&["--steps", "3", "train-branch", "--branch", "mini", "--in", s(&base), "--out", s(&model)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let (img, token) = data::generate(&DatasetSpec { num_images: 40, size: 16, seed: 0 }, 3).unwrap();
    let src = dir.path().join("src.ppm");
    data::write_ppm(&src, &img).unwrap();
    let token = token.to_string();
    let translate = |seed: &str, name: &str| {
        let p = dir.path().join(name);
        let out = with(&[
            "--seed", seed, "translate", "--model", s(&model), "--branch", "mini", "--shuffle", "--token", &token,
            "--in", s(&src), "--out", s(&p),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        std::fs::read(p).unwrap()
    };
    assert_eq!(translate("1", "o1.ppm"), translate("1", "o1b.ppm"));
    assert_ne!(translate("1", "o1.ppm"), translate("2", "o2.ppm"));

    let o = dir.path().join("x.ppm");
    let refused = with(&[
        "translate", "--model", s(&model), "--branch", "low", "--token", "0", "--in", s(&src), "--out", s(&o),
    ]);
    assert_eq!(code(&refused), 2, "missing branch: {}", stderr(&refused));
    let refused = with(&[
        "translate", "--model", s(&model), "--branch", "mini", "--token", "99", "--in", s(&src), "--out", s(&o),
    ]);
    assert_eq!(code(&refused), 1);

    let out = with(&["--set", "eval_count=2", "eval", "--model", s(&model), "--branch", "mini"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.contains("band_consistency\t") && report.contains("palette_agreement\t"));

    let untrained = with(&["train-branch", "--branch", "low", "--in", s(&dir.path().join("nothing.fcck")), "--out", s(&o)]);
    assert_eq!(code(&untrained), 2);
}

#[test]
fn selftest_passes() {
    let out = fcdiff(&["selftest"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS\t")).count(), 5);
}
