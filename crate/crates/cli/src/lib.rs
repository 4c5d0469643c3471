//! `capinv` command line: generate datasets, train models, fit regressions,
//! run inverse prediction and the noise/timing sweeps.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use capinv_core::field::{
    generate_dataset, test_d_values, uniform_d_values, CapacitorConfig, Dataset, FieldGrid,
    SorOptions,
};
use capinv_core::generative::{
    loss_history_csv, train_generative, GenerativeModel, ModelKind, NoiseMode, TrainConfig,
};
use capinv_core::harness::{
    export_results, run_noise_sweep, run_timing, timing_csv, Method, Stage, SweepConfig,
    SweepInputs, SweepResult, MIN_TIMING_REPETITIONS, TABLE2_FILE,
};
use capinv_core::inverse::{
    FullspaceInverter, InverseOptions, Inverter, LatentInverter, NoiseSpace, RecoverOptions,
    RegressionModel, Space, DEFAULT_RCOND,
};
use capinv_core::nn::{rows_to_matrix, OptimizerConfig, OptimizerKind, Schedule};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

#[derive(Debug, Parser)]
#[command(name = "capinv", version, arg_required_else_help = true)]
#[command(about = "Capacitor field inverse prediction in full and latent space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the capacitor for a set of separations and write a dataset CSV.
    Generate(GenerateArgs),
    /// Train an AE/VAE, or fit a regression (`--kind regression`).
    Train(TrainArgs),
    /// Recover the field for a target separation.
    Invert(InvertArgs),
    /// Run the noise sweep (and timing) described by a TOML file.
    Sweep(ConfigArgs),
    /// Run only the stage timing described by a TOML file.
    Bench(ConfigArgs),
}

#[derive(Debug, Args)]
struct GeometryArgs {
    #[arg(long, default_value_t = 0.25)]
    a: f64,
    #[arg(long, default_value_t = 0.75)]
    b: f64,
    #[arg(long, default_value_t = 1.0)]
    v0: f64,
    #[arg(long, default_value_t = 401)]
    fine_n: usize,
    #[arg(long, default_value_t = 21)]
    coarse_n: usize,
    /// Over-relaxation factor [default: 2/(1+sin(π/fine_n))].
    #[arg(long)]
    omega: Option<f64>,
    /// Stop when the largest node update falls below this [default: 1e-6·v0].
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 100_000)]
    max_sweeps: usize,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    geometry: GeometryArgs,
    #[arg(long, default_value_t = 0.1)]
    d_min: f64,
    #[arg(long, default_value_t = 0.9)]
    d_max: f64,
    #[arg(long, default_value_t = 120)]
    count: usize,
    /// Explicit comma-separated separations; overrides the range.
    #[arg(long, value_delimiter = ',', conflicts_with = "test_set")]
    d: Option<Vec<f64>>,
    /// Use the standard test separations.
    #[arg(long)]
    test_set: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainKind {
    Ae,
    Vae,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    Momentum,
    Adam,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Momentum => OptimizerKind::Momentum,
            OptimizerArg::Adam => OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SpaceArg {
    Fullspace,
    Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NoiseSpaceArg {
    Search,
    Field,
}

impl From<NoiseSpaceArg> for NoiseSpace {
    fn from(n: NoiseSpaceArg) -> Self {
        match n {
            NoiseSpaceArg::Search => NoiseSpace::Search,
            NoiseSpaceArg::Field => NoiseSpace::Field,
        }
    }
}

#[derive(Debug, Args)]
struct RecoverArgs {
    /// Relative singular-value cutoff of the regression fit.
    #[arg(long, default_value_t = DEFAULT_RCOND)]
    rcond: f64,
    /// Separation of the training sample used as initial estimate.
    #[arg(long, default_value_t = 0.5)]
    anchor_d: f64,
    #[arg(long, default_value_t = 0.2)]
    anchor_tolerance: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    kind: TrainKind,
    /// Training dataset CSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "momentum")]
    optimizer: OptimizerArg,
    /// Learning rate [default: 1e-5 for momentum, 1e-3 for adam].
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
    #[arg(long, default_value_t = 20_000)]
    iters: usize,
    #[arg(long, default_value_t = 20)]
    batch: usize,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "200")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    latent: usize,
    /// Weight of the KL term (VAE only).
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Train the VAE with ε = 0.
    #[arg(long)]
    zero_noise: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Loss history CSV [default: <out>.loss.csv].
    #[arg(long)]
    history: Option<PathBuf>,
    /// Regression space (`--kind regression`).
    #[arg(long, value_enum, default_value = "fullspace")]
    space: SpaceArg,
    /// Trained model whose encoder defines the latent space.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    recover: RecoverArgs,
}

#[derive(Debug, Args)]
struct InvertArgs {
    /// Regression file written by `train --kind regression`.
    #[arg(long, conflicts_with = "data")]
    regression: Option<PathBuf>,
    /// Fit the regression on this training CSV instead.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Generative model (latent approach).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    d: f64,
    /// Noise variance of the initial estimate.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "search")]
    noise_space: NoiseSpaceArg,
    /// Gradient step [default: 0.5/|φ|²].
    #[arg(long)]
    step: Option<f64>,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iterations: usize,
    #[command(flatten)]
    recover: RecoverArgs,
    /// Write the field in volts for this plate potential instead of normalized.
    #[arg(long)]
    v0: Option<f64>,
    /// Groundtruth dataset; prints the ssd when it holds `d`.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
}

/// Sweep/bench description. Relative paths are taken from the config file's
/// directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepFile {
    train: PathBuf,
    test: PathBuf,
    #[serde(default)]
    models: Vec<PathBuf>,
    out_dir: PathBuf,
    noise_levels: Option<Vec<f64>>,
    test_d: Option<Vec<f64>>,
    seeds: Option<Vec<u64>>,
    methods: Option<Vec<String>>,
    fig6_d: Option<f64>,
    timing_repetitions: Option<usize>,
    #[serde(default)]
    recover: RecoverFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecoverFile {
    rcond: Option<f64>,
    anchor_d: Option<f64>,
    anchor_tolerance: Option<f64>,
    noise_space: Option<String>,
    step: Option<f64>,
    tol: Option<f64>,
    max_iterations: Option<usize>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => match a.kind {
            TrainKind::Regression => fit(a),
            _ => train(a),
        },
        Command::Invert(a) => invert(a),
        Command::Sweep(a) => sweep(&a.config, false),
        Command::Bench(a) => sweep(&a.config, true),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_csv(&read(path)?)
        .map_err(anyhow::Error::msg)
        .with_context(|| format!("parsing {}", path.display()))
}

fn load_model(path: &Path) -> Result<GenerativeModel> {
    GenerativeModel::from_text(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let g = &a.geometry;
    let base = CapacitorConfig {
        a: g.a,
        b: g.b,
        d: 0.5,
        v0: g.v0,
        fine_n: g.fine_n,
        coarse_n: g.coarse_n,
    };
    let defaults = SorOptions::for_grid(g.fine_n, g.v0);
    let options = SorOptions {
        omega: g.omega.unwrap_or(defaults.omega),
        tol: g.tol.unwrap_or(defaults.tol),
        max_sweeps: g.max_sweeps,
    };
    let d_values = if a.test_set {
        test_d_values()
    } else if let Some(d) = a.d {
        d
    } else {
        ensure!(a.d_min <= a.d_max, "--d-min exceeds --d-max");
        uniform_d_values(a.d_min, a.d_max, a.count)
    };
    ensure!(!d_values.is_empty(), "no separations requested");
    let dataset = generate_dataset(&d_values, &base, Some(options))?;
    write(&a.out, &dataset.to_csv())?;
    println!(
        "wrote {} fields ({}x{}) to {}",
        dataset.len(),
        dataset.grid,
        dataset.grid,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let kind = match a.kind {
        TrainKind::Ae => ModelKind::Ae,
        TrainKind::Vae => ModelKind::Vae,
        TrainKind::Regression => unreachable!("handled by fit"),
    };
    let data = load_dataset(&a.data)?;
    let fields = rows_to_matrix(&data.fields())?;
    let optimizer_kind = OptimizerKind::from(a.optimizer);
    let defaults = OptimizerConfig::default_for(optimizer_kind);
    let config = TrainConfig {
        kind,
        hidden: a.hidden,
        latent_dim: a.latent,
        optimizer: OptimizerConfig {
            kind: optimizer_kind,
            learning_rate: a.lr.unwrap_or(defaults.learning_rate),
            momentum: a.momentum,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
        },
        schedule: Schedule {
            max_iterations: a.iters,
            minibatch_size: a.batch,
        },
        beta: a.beta,
        noise: if a.zero_noise {
            NoiseMode::Zero
        } else {
            NoiseMode::Sample
        },
    };
    let (model, history) = train_generative(&fields, &config, a.seed)?;
    write(&a.out, &model.to_text())?;
    let history_path = a.history.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write(&history_path, &loss_history_csv(&history))?;
    if let Some(last) = history.last() {
        println!(
            "{kind}-{optimizer_kind}: {} iterations, final loss {:.6} (rec {:.6}, kld {:.6})",
            history.len(),
            last.total,
            last.rec,
            last.kld
        );
    }
    println!("wrote {} and {}", a.out.display(), history_path.display());
    Ok(())
}

fn recover_options(r: &RecoverArgs) -> RecoverOptions {
    RecoverOptions {
        rcond: r.rcond,
        anchor_d: r.anchor_d,
        anchor_tolerance: r.anchor_tolerance,
        ..RecoverOptions::default()
    }
}

fn fit_inverter(
    space: SpaceArg,
    model: Option<&Path>,
    data: &Dataset,
    options: &RecoverOptions,
) -> Result<Inverter> {
    Ok(match space {
        SpaceArg::Fullspace => Inverter::Fullspace(FullspaceInverter::fit(data, options)?),
        SpaceArg::Latent => {
            let path = model.context("latent regression needs --model")?;
            Inverter::Latent(LatentInverter::fit(load_model(path)?, data, options)?)
        }
    })
}

fn fit(a: TrainArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let options = recover_options(&a.recover);
    let inverter = fit_inverter(a.space, a.model.as_deref(), &data, &options)?;
    let (anchor_d, anchor) = match &inverter {
        Inverter::Fullspace(f) => (f.anchor_d, &f.anchor),
        Inverter::Latent(l) => (l.anchor_d, &l.anchor_code),
    };
    let regression = inverter.regression();
    write(&a.out, &regression.to_text(Some((anchor_d, anchor))))?;
    println!(
        "{} regression over {} coefficients, rms residual {:.3e}; wrote {}",
        regression.space,
        regression.dim(),
        regression.fit_residual,
        a.out.display()
    );
    Ok(())
}

fn inverter_from_file(path: &Path, model: Option<&Path>) -> Result<Inverter> {
    let (regression, anchor) = RegressionModel::from_text(&read(path)?)
        .with_context(|| format!("parsing {}", path.display()))?;
    let (anchor_d, anchor) =
        anchor.with_context(|| format!("{} carries no initial estimate", path.display()))?;
    Ok(match regression.space {
        Space::Fullspace => {
            ensure!(model.is_none(), "fullspace regression takes no --model");
            let grid = (regression.dim() as f64).sqrt().round() as usize;
            ensure!(
                grid * grid == regression.dim(),
                "fullspace width is not square"
            );
            Inverter::Fullspace(FullspaceInverter {
                grid,
                regression,
                anchor_d,
                anchor,
            })
        }
        Space::Latent => {
            let model = load_model(model.context("latent regression needs --model")?)?;
            let grid = (model.input_dim() as f64).sqrt().round() as usize;
            ensure!(
                regression.dim() == model.latent_dim(),
                "regression has {} coefficients but the model latent has {}",
                regression.dim(),
                model.latent_dim()
            );
            Inverter::Latent(LatentInverter::from_parts(
                grid, model, regression, anchor_d, anchor,
            ))
        }
    })
}

fn grid_csv(field: &FieldGrid) -> String {
    let mut out = String::new();
    for r in 0..field.n() {
        let row: Vec<String> = field.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn invert(a: InvertArgs) -> Result<()> {
    let mut options = recover_options(&a.recover);
    options.noise_space = a.noise_space.into();
    options.inverse = InverseOptions {
        step: a.step,
        tol: a.tol,
        max_iterations: a.max_iterations,
    };
    let inverter = match (&a.regression, &a.data) {
        (Some(path), None) => {
            let inverter = inverter_from_file(path, a.model.as_deref())?;
            ensure!(
                options.noise_space == NoiseSpace::Search || inverter.space() == Space::Fullspace,
                "--noise-space field needs the training fields; use --data"
            );
            inverter
        }
        (None, Some(path)) => {
            let space = if a.model.is_some() {
                SpaceArg::Latent
            } else {
                SpaceArg::Fullspace
            };
            fit_inverter(space, a.model.as_deref(), &load_dataset(path)?, &options)?
        }
        _ => bail!("give either --regression or --data"),
    };
    let field = inverter.recover_field(a.d, a.noise, a.seed, &options)?;
    let out_field = match a.v0 {
        Some(v0) => field.in_volts(v0),
        None => field.clone(),
    };
    write(&a.out, &grid_csv(&out_field))?;
    print!(
        "{} inverse for d = {} (noise {}, seed {}); wrote {}",
        inverter.space(),
        a.d,
        a.noise,
        a.seed,
        a.out.display()
    );
    if let Some(path) = &a.truth {
        let truth = load_dataset(path)?;
        let record = truth
            .records
            .iter()
            .find(|r| r.d == a.d)
            .with_context(|| format!("{} has no field for d = {}", path.display(), a.d))?;
        let ssd = capinv_core::harness::ssd(&record.grid(truth.grid), &field)?;
        print!("; ssd {ssd:.6}");
    }
    println!();
    Ok(())
}

fn sweep_config(file: &SweepFile) -> Result<SweepConfig> {
    let mut config = SweepConfig::default();
    if let Some(v) = &file.noise_levels {
        config.noise_levels = v.clone();
    }
    if let Some(v) = &file.test_d {
        config.test_d = v.clone();
    }
    if let Some(v) = &file.seeds {
        config.seeds = v.clone();
    }
    if let Some(v) = &file.methods {
        config.methods = v
            .iter()
            .map(|m| m.parse::<Method>().map_err(anyhow::Error::msg))
            .collect::<Result<_>>()?;
    }
    if let Some(v) = file.fig6_d {
        config.fig6_d = v;
    }
    let r = &file.recover;
    let defaults = RecoverOptions::default();
    config.recover = RecoverOptions {
        rcond: r.rcond.unwrap_or(defaults.rcond),
        anchor_d: r.anchor_d.unwrap_or(defaults.anchor_d),
        anchor_tolerance: r.anchor_tolerance.unwrap_or(defaults.anchor_tolerance),
        noise_space: match r.noise_space.as_deref() {
            None | Some("search") => NoiseSpace::Search,
            Some("field") => NoiseSpace::Field,
            Some(other) => bail!("unknown noise_space `{other}`"),
        },
        inverse: InverseOptions {
            step: r.step.or(defaults.inverse.step),
            tol: r.tol.unwrap_or(defaults.inverse.tol),
            max_iterations: r.max_iterations.unwrap_or(defaults.inverse.max_iterations),
        },
    };
    config.validate()?;
    Ok(config)
}

fn sweep(path: &Path, timing_only: bool) -> Result<()> {
    let file: SweepFile =
        toml::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &Path| base.join(p);
    let config = sweep_config(&file)?;
    let inputs = SweepInputs {
        train: load_dataset(&resolve(&file.train))?,
        test: load_dataset(&resolve(&file.test))?,
        models: file
            .models
            .iter()
            .map(|p| load_model(&resolve(p)))
            .collect::<Result<_>>()?,
    };
    let repetitions = file.timing_repetitions.unwrap_or(MIN_TIMING_REPETITIONS);
    let out_dir = resolve(&file.out_dir);

    let mut result = if timing_only {
        SweepResult::default()
    } else {
        let result = run_noise_sweep(&config, &inputs)?;
        println!("{} cells, {} failed", result.cells.len(), result.failures());
        for agg in result.aggregates() {
            println!(
                "{:>14} d={:<5} e={:<5} median ssd {:.4} (IQR {:.4})",
                agg.method.to_string(),
                agg.d,
                agg.e,
                agg.median,
                agg.iqr()
            );
        }
        result
    };
    if timing_only || repetitions > 0 {
        let inverters = inputs.inverters(&config)?;
        let table = run_timing(
            &inverters,
            &inputs.train,
            &config.test_d,
            &config.recover,
            repetitions,
        )?;
        for row in &table.rows {
            let stages: Vec<String> = Stage::ALL
                .iter()
                .map(|s| match row.median_ms.get(s).copied().flatten() {
                    Some(ms) => format!("{s} {ms:.4} ms"),
                    None => format!("{s} -"),
                })
                .collect();
            println!(
                "{:>14} dim {:>3}: {}",
                row.method.to_string(),
                row.dim,
                stages.join(", ")
            );
        }
        if timing_only {
            let path = out_dir.join(TABLE2_FILE);
            write(&path, &timing_csv(Some(&table)))?;
            println!("wrote {}", path.display());
            return Ok(());
        }
        result.timing = Some(table);
    }
    for p in export_results(&result, &out_dir)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
