use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bronco::io::{save_mask, save_volume, ScalarType};
use bronco::phantom::{generate, ChestParams, PhantomSpec};
use bronco::pipeline::{artifacts, parse_stages, run_pipeline, PipelineConfig, Volumes};
use bronco::volume_qa::fit_regression;
use bronco::{BroncoError, Result};

#[derive(Parser)]
#[command(name = "bronco", version, about = "Bronchovascular bundle modelling from chest CT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (part of) the pipeline on one volume.
    Run(RunArgs),
    /// Write a synthetic chest phantom with its ground truth.
    Phantom(PhantomArgs),
    /// Fit the lung-to-bundle volume regression from finished runs.
    FitRegression(FitArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphFormat {
    Json,
    Graphml,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    lung_mask: Option<PathBuf>,
    #[arg(long = "out")]
    out: Option<PathBuf>,
    /// `all`, a range `gmm..qa` or a list `lung,trachea`.
    #[arg(long)]
    stages: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write a 0/1 mask of vessels and bronchi.
    #[arg(long)]
    binary: bool,
    /// Write the uint16 branch label map.
    #[arg(long)]
    labeled: bool,
    /// Graph exports are always written; the flag only checks the format name.
    #[arg(long, value_enum)]
    graph: Option<GraphFormat>,
    #[arg(long)]
    regression: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// The trachea enters at the lowest axial index (feet-first volumes).
    #[arg(long)]
    flip_axial: bool,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long = "out")]
    out: PathBuf,
    /// Custom phantom spec (JSON); overrides the chest preset options.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    dims: usize,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 20.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add a dense blob attached to the right vessel tree.
    #[arg(long)]
    blob: bool,
}

#[derive(Args)]
struct FitArgs {
    /// Output directories of runs that reached the `volumes` stage.
    #[arg(required = true, num_args = 3..)]
    runs: Vec<PathBuf>,
    #[arg(long = "out")]
    out: PathBuf,
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("BRONCO_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| BroncoError::Usage(format!("BRONCO_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| BroncoError::Usage(format!("thread pool: {e}")))
}

fn run(args: RunArgs) -> Result<u8> {
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::from_json(&fs::read_to_string(p)?)?,
        None => PipelineConfig::default(),
    };
    if let Some(p) = args.input {
        cfg.input = p;
    }
    if args.lung_mask.is_some() {
        cfg.lung_mask = args.lung_mask;
    }
    match args.out {
        Some(p) => cfg.out_dir = p,
        None if args.config.is_none() => return Err(BroncoError::Usage("--out is required".into())),
        None => {}
    }
    if cfg.input.as_os_str().is_empty() {
        return Err(BroncoError::Usage("--input is required".into()));
    }
    if let Some(s) = &args.stages {
        cfg.stages = parse_stages(s)?;
    }
    cfg.export.binary |= args.binary;
    cfg.export.labeled |= args.labeled;
    if args.regression.is_some() {
        cfg.regression = args.regression;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.flip_axial |= args.flip_axial;

    let report = run_pipeline(&cfg)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(q) = &report.qa {
        eprintln!("qa: {}", q.verdict.as_str());
    }
    Ok(report.exit_code() as u8)
}

fn phantom(args: PhantomArgs) -> Result<u8> {
    let spec = match &args.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => PhantomSpec::chest(&ChestParams {
            dims: [args.dims; 3],
            scale: args.scale,
            noise_std: args.noise,
            blob: args.blob,
            seed: args.seed,
            ..Default::default()
        })?,
    };
    let p = generate(&spec)?;
    fs::create_dir_all(&args.out)?;
    save_volume(&p.ct, args.out.join("ct.nii.gz"), ScalarType::I16)?;
    save_mask(&p.lung, args.out.join("lung_mask.nii.gz"))?;
    save_mask(&p.truth.airway_lumen, args.out.join("truth_airway.nii.gz"))?;
    fs::write(args.out.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
    Ok(0)
}

fn read_volumes(dir: &Path) -> Result<Volumes> {
    let p = dir.join(artifacts::VOLUMES);
    let s = fs::read_to_string(&p).map_err(|e| BroncoError::Usage(format!("cannot read {}: {e}", p.display())))?;
    Ok(serde_json::from_str(&s)?)
}

fn fit(args: FitArgs) -> Result<u8> {
    let pairs = args
        .runs
        .iter()
        .map(|d| read_volumes(d).map(|v| (v.lung_ml, v.bundle_ml)))
        .collect::<Result<Vec<_>>>()?;
    let model = fit_regression(&pairs)?;
    fs::write(&args.out, model.to_json()?)?;
    println!(
        "bundle_ml = {:.6} * lung_ml + {:.6} (n = {}, residual std {:.4} ml)",
        model.slope, model.intercept, model.n, model.residual_std
    );
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Exit code 2 is reserved for QA warnings.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Run(a) => run(a),
        Command::Phantom(a) => phantom(a),
        Command::FitRegression(a) => fit(a),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
