mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use fcdiff::data::{self, RawTensor};
use fcdiff::filters::{band_energy_profile, ffm_with, make_mask, ShuffleOptions};
use fcdiff::spectral::dct2;
use fcdiff::training::{self, EvalPair, Stage, TrainConfig, TrainReport};
use fcdiff::{checkpoint, mechanism, selftest, BandKind, Error, SpatialTensor};

use config::{Config, UsageError};

#[derive(Parser)]
#[command(name = "fcdiff", version, about = "DCT band filtering and frequency-controlled toy diffusion")]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Configuration override, repeatable; wins over the file.
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the `steps` key.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct InOut {
    /// PPM image or FCDT latent.
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    /// `.ppm` writes an image, any other extension an FCDT latent.
    #[arg(long = "out", value_name = "PATH")]
    output: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Keep one frequency band of an image or latent.
    Filter {
        #[command(flatten)]
        io: InOut,
        #[arg(long)]
        band: BandKind,
        /// Equifrequency-shuffle the kept coefficients.
        #[arg(long)]
        shuffle: bool,
    },
    /// Permute DCT coefficients within each frequency level.
    Shuffle {
        #[command(flatten)]
        io: InOut,
        #[arg(long, default_value = "full")]
        band: BandKind,
    },
    /// Print per-level spectral energy as `level<TAB>energy`.
    Spectrum {
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
    },
    /// Write the synthetic dataset as PPM files plus `labels.tsv`.
    GenData {
        #[arg(long = "out", value_name = "DIR")]
        output: PathBuf,
    },
    /// Train the base denoiser; loss log goes to stdout.
    Pretrain {
        #[arg(long = "out", value_name = "PATH")]
        output: PathBuf,
    },
    /// Train one control branch on a pretrained checkpoint.
    TrainBranch {
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        #[arg(long = "out", value_name = "PATH")]
        output: PathBuf,
        #[arg(long)]
        branch: BandKind,
    },
    /// Translate a source image through a trained branch.
    Translate {
        #[command(flatten)]
        io: InOut,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long)]
        branch: BandKind,
        /// Target label token.
        #[arg(long)]
        token: usize,
        #[arg(long)]
        shuffle: bool,
        /// Allow `--shuffle` on branches other than mini.
        #[arg(long)]
        allow_shuffle_any_band: bool,
    },
    /// Score a branch on held-out images translated to their own labels.
    Eval {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long)]
        branch: BandKind,
        #[arg(long)]
        shuffle: bool,
        /// Also run the paired low/mini versus uncontrolled comparison.
        #[arg(long)]
        compare: bool,
    },
    /// Run the transform, mask, shuffle, zero-init and gradient suites.
    Selftest,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidArgument(_) | Error::InvalidRange { .. } => 1,
                Error::NonFinite(_) | Error::UndefinedMetric(_) | Error::NonFiniteLoss { .. } => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<Config> {
    let mut cfg = Config::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)
            .with_context(|| format!("reading config {}", path.display()))?;
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = cli.steps {
        cfg.steps = steps;
    }
    eprint!("# resolved config\n{cfg}");
    Ok(cfg)
}

fn read_latent(path: &Path) -> anyhow::Result<SpatialTensor<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(b"P6") {
        let img = data::parse_ppm(&bytes).with_context(|| format!("parsing {}", path.display()))?;
        Ok(data::encode(&img)?)
    } else {
        Ok(data::parse_tensor(&bytes)
            .and_then(RawTensor::into_spatial)
            .with_context(|| format!("parsing {}", path.display()))?)
    }
}

/// `.ppm` paths get a decoded 8-bit image; anything else the raw latent.
fn write_latent(path: &Path, z: &SpatialTensor<f32>) -> anyhow::Result<()> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
        data::write_ppm(path, &data::decode(z)?)?;
    } else {
        data::write_tensor(path, &RawTensor::from(z))?;
    }
    Ok(())
}

fn filter_file(io: &InOut, band: BandKind, shuffle: Option<ShuffleOptions>) -> anyhow::Result<()> {
    let z = read_latent(&io.input)?;
    let mask = make_mask(band, z.h(), z.w())?;
    let out = ffm_with(&z, &mask, shuffle)?;
    write_latent(&io.output, &out)?;
    eprintln!("kept {} of {} coefficients per channel", mask.count(), z.h() * z.w());
    Ok(())
}

fn write_loss_log(report: &TrainReport) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(report.loss_log().as_bytes())?;
    let (first, last) = report.window_means(100);
    eprintln!(
        "{}: {} steps in {:.1}s, first-100 mean {first:.4}, final-100 mean {last:.4}",
        report.stage,
        report.losses.len(),
        report.wall_time.as_secs_f64()
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    let cfg = resolve(&cli)?;
    let shuffle_opts = |seed: u64| ShuffleOptions {
        seed,
        shared_channels: cfg.shuffle_shared_channels,
    };
    match &cli.command {
        Command::Filter { io, band, shuffle } => {
            filter_file(io, *band, shuffle.then(|| shuffle_opts(cfg.seed)))?;
        }
        Command::Shuffle { io, band } => {
            filter_file(io, *band, Some(shuffle_opts(cfg.seed)))?;
        }
        Command::Spectrum { input } => {
            let z = read_latent(input)?;
            let mut out = std::io::stdout().lock();
            for (level, energy) in band_energy_profile(&dct2(&z)?) {
                writeln!(out, "{level}\t{energy}")?;
            }
        }
        Command::GenData { output } => {
            let spec = cfg.dataset();
            spec.validate()?;
            fs::create_dir_all(output)?;
            let mut labels = String::from("index\ttoken\tpalette\tshape\tsplit\n");
            for i in 0..spec.num_images {
                let (img, token) = data::generate(&spec, i)?;
                data::write_ppm(output.join(format!("{i:04}.ppm")), &img)?;
                let (palette, shape) = data::token_parts(token)?;
                let split = if spec.is_held_out(i) { "held_out" } else { "train" };
                labels.push_str(&format!("{i}\t{token}\t{}\t{}\t{split}\n", palette.name(), shape.name()));
            }
            fs::write(output.join("labels.tsv"), labels)?;
            eprintln!("wrote {} images to {}", spec.num_images, output.display());
        }
        Command::Pretrain { output } => {
            let tc = TrainConfig {
                stage: Stage::Pretrain,
                ..cfg.train()
            };
            let (train_idx, _) = tc.dataset.split();
            let dataset = data::encode_all(&tc.dataset, &train_idx)?;
            let (model, report) = training::pretrain(&tc, &dataset)?;
            write_loss_log(&report)?;
            checkpoint::save(output, &model)?;
        }
        Command::TrainBranch { input, output, branch } => {
            let base = checkpoint::load(input).with_context(|| format!("loading {}", input.display()))?;
            let tc = TrainConfig {
                stage: Stage::Branch(*branch),
                ..cfg.train()
            };
            let (train_idx, _) = tc.dataset.split();
            let dataset = data::encode_all(&tc.dataset, &train_idx)?;
            let (model, report) = training::train_branch(&tc, &base, &dataset)?;
            write_loss_log(&report)?;
            checkpoint::save(output, &model)?;
        }
        Command::Translate {
            io,
            model,
            branch,
            token,
            shuffle,
            allow_shuffle_any_band,
        } => {
            let p = checkpoint::load(model).with_context(|| format!("loading {}", model.display()))?;
            let source = data::read_ppm(&io.input)?;
            let sched = cfg.schedule().build()?;
            let opts = cfg.translate_options(*shuffle, *allow_shuffle_any_band);
            let out = training::translate(&p, &sched, &source, *token, *branch, &opts, cfg.seed)?;
            data::write_ppm(&io.output, &out)?;
            let m = out.mean_color();
            eprintln!("mean color {:.1} {:.1} {:.1}", m[0], m[1], m[2]);
        }
        Command::Eval {
            model,
            branch,
            shuffle,
            compare,
        } => {
            let p = checkpoint::load(model).with_context(|| format!("loading {}", model.display()))?;
            let spec = cfg.dataset();
            let sched = cfg.schedule().build()?;
            let (_, held_out) = spec.split();
            let pairs = held_out
                .iter()
                .take(cfg.eval_count)
                .map(|&i| data::generate(&spec, i).map(|(source, target)| EvalPair { source, target }))
                .collect::<fcdiff::Result<Vec<_>>>()?;
            let opts = cfg.translate_options(*shuffle, false);
            let report = training::evaluate(&p, &sched, &pairs, *branch, &opts, cfg.seed, &spec)?;
            print!("{report}");
            if *compare {
                let rep = mechanism::compare_bands(&p, &sched, &spec, cfg.eval_count, &cfg.sampler(), cfg.seed)?;
                print!("{rep}");
                println!(
                    "low_wins\t{}/{}\nlow_mean\t{:.4}\t{:.4}",
                    rep.low_wins(),
                    rep.len(),
                    rep.mean_low_controlled(),
                    rep.mean_low_uncontrolled()
                );
                println!(
                    "color_wins\t{}/{}\ncolor_mean\t{:.2}\t{:.2}\ncorr_mean\t{:.4}\t{:.4}",
                    rep.color_wins(),
                    rep.len(),
                    rep.mean_color_shuffled(),
                    rep.mean_color_uncontrolled(),
                    rep.mean_corr_shuffled(),
                    rep.mean_corr_plain()
                );
            }
        }
        Command::Selftest => {
            let mut out = std::io::stdout().lock();
            let mut failed = 0;
            for r in selftest::run_all(cfg.seed) {
                writeln!(out, "{r}")?;
                failed += (!r.passed) as usize;
            }
            if failed > 0 {
                eprintln!("{failed} suite(s) failed");
                return Ok(3);
            }
        }
    }
    Ok(0)
}
