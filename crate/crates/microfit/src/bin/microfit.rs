//! `microfit` — simulate, preprocess, fit, train, and evaluate diffusion-MRI
//! microstructure models on synthetic prostate phantoms.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 4 I/O or format error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use microfit::cli::{
    cmd_evaluate, cmd_export_maps, cmd_fit_nlls, cmd_oracle_sphere, cmd_preprocess,
    cmd_reproduce, cmd_simulate, cmd_train, exit_code, parse_model, ExperimentConfig,
    TrainOverrides, VERSION,
};
use microfit::phantom::PhantomSpec;
use microfit::protocol::SubProtocol;
use microfit::{Error, Result};

#[derive(Parser)]
#[command(name = "microfit", version = VERSION, about = "Microstructure fitting on synthetic diffusion-MRI phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom and write its signal volume plus region masks.
    Simulate(SimulateArgs),
    /// Mask, flatten, and b0-normalize a volume into a signal table.
    Preprocess(PreprocessArgs),
    /// Levenberg-Marquardt fit of every voxel in a signal table.
    FitNlls(FitNllsArgs),
    /// Train a self-supervised network fitter.
    Train(TrainArgs),
    /// Score fitted parameters against measured signals.
    Evaluate(EvaluateArgs),
    /// Render parameter maps as PGM previews.
    ExportMaps(ExportMapsArgs),
    /// Reference implementations for cross-validation.
    #[command(subcommand)]
    Oracle(OracleCommand),
    /// Run the full experiment matrix from a JSON config.
    Reproduce(ReproduceArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Sub-protocol: 1, 2, or 3.
    #[arg(long)]
    sp: String,
    /// Phantom spec JSON; defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Noise seed; omit for a noise-free volume.
    #[arg(long)]
    noise_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value = "subj01")]
    subject: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitNllsArgs {
    #[arg(long)]
    table: PathBuf,
    /// dki or verdict
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// dki or verdict
    #[arg(long)]
    model: String,
    /// baseline or dense
    #[arg(long)]
    arch: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportMapsArgs {
    #[arg(long)]
    params: PathBuf,
    /// Parameter name, e.g. f_ic or k.
    #[arg(long)]
    param: String,
    /// Grid as slices,height,width.
    #[arg(long)]
    dims: String,
    /// Display window lo:hi, e.g. 0:0.4.
    #[arg(long)]
    window: String,
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Monte-Carlo restricted-diffusion sphere signal vs the analytic form.
    Sphere(SphereArgs),
}

#[derive(Args)]
struct SphereArgs {
    #[arg(long)]
    sp: String,
    /// Sphere radius in μm.
    #[arg(long)]
    r: f64,
    /// Intrinsic diffusivity in μm²/ms.
    #[arg(long, default_value_t = 2.0)]
    d: f64,
    /// Gradient strength in mT/m.
    #[arg(long)]
    g: f64,
    #[arg(long, default_value_t = 200_000)]
    walkers: usize,
    /// Time step in ms.
    #[arg(long, default_value_t = 0.02)]
    dt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReproduceArgs {
    /// ExperimentConfig JSON file.
    #[arg(long)]
    config: PathBuf,
}

fn parse_sp(s: &str) -> Result<SubProtocol> {
    s.parse()
}

fn parse_window(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 2 {
        return Err(Error::InvalidConfig(format!("window '{s}' is not lo:hi")));
    }
    let lo: f64 = parts[0]
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad window bound '{}'", parts[0])))?;
    let hi: f64 = parts[1]
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad window bound '{}'", parts[1])))?;
    Ok((lo, hi))
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidConfig(format!("dims '{s}' is not s,h,w")));
    }
    let p = |t: &str| -> Result<usize> {
        t.parse()
            .map_err(|_| Error::InvalidConfig(format!("bad dimension '{t}'")))
    };
    Ok((p(parts[0])?, p(parts[1])?, p(parts[2])?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => {
            let sp = parse_sp(&a.sp)?;
            let spec: PhantomSpec = match a.spec {
                Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
                None => PhantomSpec::default(),
            };
            cmd_simulate(sp, &spec, a.noise_seed, &a.out)?;
            println!("wrote {} (+ .gland/.lesion/.normal masks)", a.out.display());
        }
        Command::Preprocess(a) => {
            let discarded = cmd_preprocess(&a.volume, &a.mask, &a.subject, &a.out)?;
            println!("wrote {} ({discarded} zero-b0 voxels discarded)", a.out.display());
        }
        Command::FitNlls(a) => {
            let model = parse_model(&a.model)?;
            let pt = cmd_fit_nlls(&a.table, model, a.seed, &a.out)?;
            println!("fitted {} voxels → {}", pt.rows.len(), a.out.display());
        }
        Command::Train(a) => {
            let model = parse_model(&a.model)?;
            let arch = a.arch.parse()?;
            let overrides = TrainOverrides {
                epochs: a.epochs,
                batch_size: a.batch_size,
                lr0: a.lr,
                scheduler: None,
                seed: Some(a.seed),
                restarts: None,
            };
            let ck = cmd_train(&a.train, &a.val, model, arch, &overrides, &a.out)?;
            println!(
                "trained {} {} — best val MSE {:.6e} at epoch {} → {}",
                ck.arch,
                ck.model,
                ck.best_val_loss,
                ck.best_epoch,
                a.out.display()
            );
        }
        Command::Evaluate(a) => {
            let ev = cmd_evaluate(&a.table, &a.params, &a.out)?;
            println!(
                "{} / {}: MSE {:.6e}, AICc {:.2}, BIC {:.2}",
                ev.model, ev.fitter, ev.mse, ev.aicc, ev.bic
            );
        }
        Command::ExportMaps(a) => {
            let dims = parse_dims(&a.dims)?;
            let window = parse_window(&a.window)?;
            let written = cmd_export_maps(&a.params, &a.param, dims, window, &a.out_prefix)?;
            for p in written {
                println!("wrote {}", p.display());
            }
        }
        Command::Oracle(OracleCommand::Sphere(a)) => {
            let sp = parse_sp(&a.sp)?;
            let rep = cmd_oracle_sphere(sp, a.r, a.d, a.g, a.walkers, a.dt, a.seed)?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
        }
        Command::Reproduce(a) => {
            let config: ExperimentConfig = serde_json::from_slice(&std::fs::read(&a.config)?)?;
            let report = cmd_reproduce(&config)?;
            println!(
                "report written to {}/report.json ({} sub-protocol sections)",
                config.out_dir,
                report.per_sp.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
