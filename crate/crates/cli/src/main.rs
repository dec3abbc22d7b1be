//! Single executable over the whole system: dataset generation, training,
//! evaluation, hyperparameter sweeps, ablations, gradient checking and
//! prediction rendering.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error (including a failed
//! gradient check). ADVERSEG_THREADS caps internal parallelism; the default
//! of 1 keeps runs bit-deterministic across machines with any core count.

use adverseg_core::data::{self, DatasetSpec, ShapeKind};
use adverseg_core::metrics::argmax_labels;
use adverseg_core::models::{forward_generator, Network};
use adverseg_core::tensor::{idx3, Tensor};
use adverseg_core::trainer::{self, SweepParam, TrainConfig};
use adverseg_core::types::LabelMap;
use adverseg_core::{gradcheck, netpbm, threads};
use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "adverseg", version, about = "Adversarial segmentation training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape dataset (PPM images, PGM masks, manifest).
    GenData {
        /// Dataset spec file ("key = value" lines).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train generator and discriminator per the config.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a dataset manifest.
    Eval {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        /// Evaluate the averaged weights stored in the checkpoint.
        #[arg(long)]
        swa: bool,
    },
    /// Train once per value of a hyperparameter; emit a summary CSV.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override config entries, e.g. --set n_iter=500.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Parameter to sweep: lambda, n or th_swa.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        /// Optional directory for the CSV (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare {baseline, standard, pixelwise} x {swa on/off}.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Replicates per condition.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        eps: f32,
    },
    /// Render image | ground truth | prediction triptychs.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Render the averaged weights stored in the checkpoint.
        #[arg(long)]
        swa: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Config file ("key = value" lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override config entries, e.g. --set lambda=0.1.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for runlog.csv and checkpoints.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("ADVERSEG_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => threads::set_threads(n),
            _ => {
                eprintln!("invalid ADVERSEG_THREADS value '{threads}'");
                return ExitCode::from(1);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Train(args) => train(args),
        Command::Eval { ckpt, data, swa } => {
            let csv = trainer::evaluate_checkpoint(&ckpt, &data, swa)?;
            print!("{csv}");
            Ok(())
        }
        Command::Sweep { config, set, param, values, out } => {
            let cfg = load_config(config.as_deref(), &set)?;
            print!("{}", cfg.echo());
            let param = SweepParam::parse(&param)?;
            let values: Vec<f64> = values
                .split(',')
                .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad value '{v}'")))
                .collect::<Result<_>>()?;
            let csv = trainer::sweep(&cfg, param, &values)?;
            print!("{csv}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("sweep.csv"), csv)?;
            }
            Ok(())
        }
        Command::Ablate { config, set, seeds, out } => {
            let cfg = load_config(config.as_deref(), &set)?;
            print!("{}", cfg.echo());
            let csv = trainer::ablation(&cfg, seeds)?;
            print!("{csv}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("ablation.csv"), csv)?;
            }
            Ok(())
        }
        Command::Gradcheck { eps } => gradcheck_cmd(eps),
        Command::Render { ckpt, data, out, swa } => render(&ckpt, &data, &out, swa),
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
        cfg.apply(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let spec = parse_dataset_spec(spec_path)?;
    let samples = data::gen_synthetic(&spec)?;
    let manifest = data::write_dataset(out, &samples)?;
    println!("wrote {} samples, manifest at {}", samples.len(), manifest.display());
    Ok(())
}

fn parse_dataset_spec(path: &Path) -> Result<DatasetSpec> {
    let mut spec = DatasetSpec {
        num_samples: 32,
        height: 32,
        width: 32,
        num_classes: 4,
        shapes_min: 1,
        shapes_max: 3,
        kinds: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
        noise_std: 0.25,
        seed: 7,
        boundary_ignore: false,
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("line {}: expected 'key = value'", ln + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let parse_ctx = || format!("line {}: bad value '{value}' for '{key}'", ln + 1);
        match key {
            "num_samples" => spec.num_samples = value.parse().with_context(parse_ctx)?,
            "height" => spec.height = value.parse().with_context(parse_ctx)?,
            "width" => spec.width = value.parse().with_context(parse_ctx)?,
            "num_classes" => spec.num_classes = value.parse().with_context(parse_ctx)?,
            "shapes_min" => spec.shapes_min = value.parse().with_context(parse_ctx)?,
            "shapes_max" => spec.shapes_max = value.parse().with_context(parse_ctx)?,
            "noise_std" => spec.noise_std = value.parse().with_context(parse_ctx)?,
            "seed" => spec.seed = value.parse().with_context(parse_ctx)?,
            "boundary_ignore" => spec.boundary_ignore = value.parse().with_context(parse_ctx)?,
            "kinds" => {
                spec.kinds = value
                    .split(',')
                    .map(|k| match k.trim() {
                        "rectangle" => Ok(ShapeKind::Rectangle),
                        "ellipse" => Ok(ShapeKind::Ellipse),
                        other => bail!("unknown shape kind '{other}'"),
                    })
                    .collect::<Result<_>>()?;
            }
            other => bail!("line {}: unknown dataset key '{other}'", ln + 1),
        }
    }
    Ok(spec)
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), &args.set)?;
    print!("{}", cfg.echo());
    let out = trainer::train_to_dir(&cfg, &args.out)?;
    if let Some(record) = out.runlog.records.last() {
        println!(
            "final: iter {} gen_loss {:.6} miou {:.6} miou_swa {}",
            record.iter,
            record.gen_loss,
            record.miou,
            if record.miou_swa.is_nan() { "nan".into() } else { format!("{:.6}", record.miou_swa) }
        );
    }
    println!("outputs in {}", args.out.display());
    Ok(())
}

fn gradcheck_cmd(eps: f32) -> Result<()> {
    let tolerance = 1e-3;
    let outcomes = gradcheck::full_suite(eps, tolerance)?;
    let mut all_pass = true;
    for o in &outcomes {
        println!(
            "{:<40} max_rel_err {:>12.3e} tol {:.0e} {}",
            o.name,
            o.max_rel_err,
            o.tolerance,
            if o.passed() { "PASS" } else { "FAIL" }
        );
        all_pass &= o.passed();
    }
    if !all_pass {
        bail!("gradient check failed");
    }
    println!("all {} checks passed", outcomes.len());
    Ok(())
}

/// Writes one PPM per sample: input | ground truth | prediction with a
/// 2-pixel white separator, classes recolored with the fixed palette.
fn render(ckpt: &Path, manifest: &Path, out: &Path, swa: bool) -> Result<()> {
    let records = adverseg_core::models::read_records(ckpt)?;
    let net = Network::from_records(&records, if swa { "swa." } else { "" })?;
    let samples = data::read_manifest(manifest, net.config().num_classes)?;
    std::fs::create_dir_all(out)?;
    for (i, sample) in samples.iter().enumerate() {
        let probs = forward_generator(&net, &sample.image)?;
        let pred = argmax_labels(probs.tensor())?;
        let triptych = compose_triptych(&sample.image, &sample.labels, &pred);
        netpbm::write_ppm(&out.join(format!("render_{i:03}.ppm")), &triptych)?;
    }
    println!("rendered {} triptychs into {}", samples.len(), out.display());
    Ok(())
}

fn compose_triptych(image: &Tensor, gt: &LabelMap, pred: &LabelMap) -> Tensor {
    let (h, w) = (gt.height(), gt.width());
    let sep = 2usize;
    let total_w = 3 * w + 2 * sep;
    let mut values = vec![1.0f32; 3 * h * total_w];
    let mut paste = |x0: usize, getter: &dyn Fn(usize, usize, usize) -> f32| {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    values[idx3(c, y, x0 + x, h, total_w)] = getter(c, y, x);
                }
            }
        }
    };
    paste(0, &|c, y, x| image.values()[idx3(c, y, x, h, w)]);
    paste(w + sep, &|c, y, x| data::class_color(gt.get(y, x))[c]);
    paste(2 * (w + sep), &|c, y, x| data::class_color(pred.get(y, x))[c]);
    Tensor::new(vec![3, h, total_w], values).unwrap()
}
