//! `dlista`: generate matrices and data, train networks, run experiments and
//! inspect reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dlista::datagen::{gen_dataset, Dataset};
use dlista::harness::{
    self, read_report, verify_manifest, write_manifest, write_trace, ExperimentConfig, SigmaSource,
    CONFIG_FILE, MODEL_FILE, TRACE_FILE,
};
use dlista::lista::{train_stagewise, ListaParams, TrainConfig};
use dlista::measurement::{Ensemble, MeasurementMatrix};
use dlista::{Error, Result};

const MATRIX_FILE: &str = "matrix.json";
const DATASET_FILE: &str = "dataset.json";

#[derive(Parser)]
#[command(name = "dlista", version, about = "Debiased LISTA experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a measurement matrix.
    GenMatrix(GenMatrix),
    /// Generate a training dataset for a saved matrix.
    GenData(GenData),
    /// Train a network on a saved matrix and dataset.
    Train(Train),
    /// Train (or load) a network and run the interval experiment.
    Run(Run),
    /// Run the experiment with the true signal in place of the network output.
    Oracle(Experiment),
    /// Summarize a report directory and check its manifest.
    Report(Report),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnsembleArg {
    Gaussian,
    #[value(alias = "hadamard-subsampled")]
    Hadamard,
}

impl From<EnsembleArg> for Ensemble {
    fn from(e: EnsembleArg) -> Self {
        match e {
            EnsembleArg::Gaussian => Ensemble::Gaussian,
            EnsembleArg::Hadamard => Ensemble::HadamardSubsampled,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SigmaArg {
    Known,
    Residual,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Args)]
struct GenMatrix {
    #[arg(long, value_enum, default_value = "gaussian")]
    ensemble: EnsembleArg,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "out")]
    output_dir: PathBuf,
}

#[derive(Args)]
struct GenData {
    /// Matrix file written by `gen-matrix`.
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 0.1)]
    p: f64,
    #[arg(long, default_value_t = 20.0, allow_negative_numbers = true)]
    snr_db: f64,
    #[arg(long, default_value_t = 2)]
    seed: u64,
    #[arg(long, default_value = "out")]
    output_dir: PathBuf,
}

/// Overrides for [`TrainConfig`]; unset flags keep the base value.
#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    alpha0: Option<f64>,
    /// Two comma-separated factors for the fine-tuning rates.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    rate_decays: Option<Vec<f64>>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_stage_iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    init_lambda: Option<f64>,
    #[arg(long)]
    weight_rate_scale: Option<f64>,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut TrainConfig) {
        set(&mut cfg.alpha0, self.alpha0);
        if let Some(d) = &self.rate_decays {
            cfg.rate_decays = [d[0], d[1]];
        }
        set(&mut cfg.gamma, self.gamma);
        set(&mut cfg.patience, self.patience);
        set(&mut cfg.max_stage_iters, self.max_stage_iters);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.seed, self.train_seed);
        set(&mut cfg.validation_fraction, self.validation_fraction);
        set(&mut cfg.eval_every, self.eval_every);
        set(&mut cfg.init_lambda, self.init_lambda);
        if self.weight_rate_scale.is_some() {
            cfg.weight_rate_scale = self.weight_rate_scale;
        }
    }
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value = "out")]
    output_dir: PathBuf,
}

/// Experiment configuration: a config file or preset, then flag overrides.
#[derive(Args)]
struct Experiment {
    /// TOML file with every experiment key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base values when no config file is given.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long, value_enum)]
    ensemble: Option<EnsembleArg>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    snr_db: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed_matrix: Option<u64>,
    #[arg(long)]
    seed_dataset: Option<u64>,
    #[arg(long)]
    seed_trials: Option<u64>,
    #[arg(long, value_enum)]
    sigma_source: Option<SigmaArg>,
    #[arg(long)]
    qq_trial: Option<usize>,
    #[arg(long)]
    qq_multiplier: Option<f64>,
    /// Keep only this many interval rows, largest |x*_i| first.
    #[arg(long)]
    ci_top: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

impl Experiment {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let ensemble = self.ensemble.map(Ensemble::from).unwrap_or(Ensemble::Gaussian);
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => {
                let m = self.m.unwrap_or(128);
                match self.preset {
                    Preset::Desk => ExperimentConfig::desk(ensemble, m),
                    Preset::Full => ExperimentConfig::full(ensemble, m),
                }
            }
        };
        if let Some(e) = self.ensemble {
            cfg.ensemble = e.into();
        }
        set(&mut cfg.n, self.n);
        set(&mut cfg.m, self.m);
        set(&mut cfg.k, self.k);
        set(&mut cfg.p, self.p);
        set(&mut cfg.snr_db, self.snr_db);
        set(&mut cfg.alpha, self.alpha);
        set(&mut cfg.n_train, self.n_train);
        set(&mut cfg.trials, self.trials);
        set(&mut cfg.seeds.matrix, self.seed_matrix);
        set(&mut cfg.seeds.dataset, self.seed_dataset);
        set(&mut cfg.seeds.trials, self.seed_trials);
        if let Some(s) = self.sigma_source {
            cfg.sigma_source = match s {
                SigmaArg::Known => SigmaSource::Known,
                SigmaArg::Residual => SigmaSource::Residual,
            };
        }
        set(&mut cfg.qq_trial, self.qq_trial);
        set(&mut cfg.qq_multiplier, self.qq_multiplier);
        if self.ci_top.is_some() {
            cfg.ci_top = self.ci_top;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        self.train.apply(&mut cfg.train);
        cfg.validate()?;
        if cfg.is_large() {
            eprintln!(
                "warning: full-scale settings (N = {}, up to {} updates per phase); expect hours of runtime",
                cfg.n, cfg.train.max_stage_iters
            );
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct Run {
    #[command(flatten)]
    experiment: Experiment,
    /// Use a trained model instead of training one.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct Report {
    #[arg(long, default_value = "out")]
    dir: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_owned(),
        source: e,
    })
}

fn gen_matrix(args: &GenMatrix) -> Result<()> {
    let a = match Ensemble::from(args.ensemble) {
        Ensemble::Gaussian => dlista::measurement::gen_gaussian(args.m, args.n, args.seed)?,
        Ensemble::HadamardSubsampled => MeasurementMatrix::hadamard(args.n, args.m, args.seed)?,
    };
    create_dir(&args.output_dir)?;
    a.save(&args.output_dir.join(MATRIX_FILE))?;
    write_manifest(&args.output_dir, &a.fingerprint(), &[MATRIX_FILE])?;
    println!(
        "{}: {} x {} {} matrix, fingerprint {}",
        args.output_dir.join(MATRIX_FILE).display(),
        a.rows(),
        a.cols(),
        a.ensemble(),
        a.fingerprint()
    );
    Ok(())
}

fn gen_data(args: &GenData) -> Result<()> {
    let a = MeasurementMatrix::load(&args.matrix)?;
    let data = gen_dataset(&a, args.n_train, args.p, args.snr_db, args.seed)?;
    create_dir(&args.output_dir)?;
    data.save(&args.output_dir.join(DATASET_FILE))?;
    write_manifest(&args.output_dir, &a.fingerprint(), &[DATASET_FILE])?;
    let mean_s0 = data.signals.iter().map(|s| s.s0()).sum::<usize>() as f64 / data.len() as f64;
    println!(
        "{}: {} samples, mean sparsity {mean_s0:.2}",
        args.output_dir.join(DATASET_FILE).display(),
        data.len()
    );
    Ok(())
}

fn train(args: &Train) -> Result<()> {
    let a = MeasurementMatrix::load(&args.matrix)?;
    let data = Dataset::load(&args.data)?;
    let mut cfg = TrainConfig::default();
    args.train.apply(&mut cfg);
    let out = train_stagewise(&a, &data, &cfg, args.k)?;
    create_dir(&args.output_dir)?;
    out.params.save(&args.output_dir.join(MODEL_FILE), &cfg.hash())?;
    write_trace(&args.output_dir.join(TRACE_FILE), &out.trace)?;
    write_manifest(&args.output_dir, &cfg.hash(), &[MODEL_FILE, TRACE_FILE])?;
    println!("initial NMSE {:.2} dB", out.init_nmse_db);
    for (k, db) in out.best_so_far_db().iter().enumerate() {
        println!("stage {:>2}: {db:.2} dB", k + 1);
    }
    println!("{} updates, model in {}", out.updates, args.output_dir.join(MODEL_FILE).display());
    Ok(())
}

fn print_summary(dir: &Path, report: &harness::AggregateReport) {
    let s = &report.summary;
    println!("estimator      {}", s.estimator);
    println!("config hash    {}", s.config_hash);
    println!("trials         {}", s.trials);
    println!("mean h         {:.4}", s.mean_h);
    match s.mean_h_s {
        Some(v) => println!("mean h_S       {v:.4}"),
        None => println!("mean h_S       undefined (empty support)"),
    }
    println!("mean NMSE      {:.2} dB", s.mean_nmse_db);
    println!("R exceedance   {:.4}", s.remainder_exceedance);
    if let Some(v) = s.theta0_exceedance {
        println!("θ₀ exceedance  {v:.4}");
    }
    if let Some(v) = s.qq_correlation {
        println!("Q-Q corr       {v:.5}");
    }
    println!(
        "wall clock     train {:.1} s, trials {:.1} s",
        report.timing.train_secs, report.timing.trials_secs
    );
    println!("records in     {}", dir.display());
}

fn run(args: &Run) -> Result<()> {
    let cfg = args.experiment.resolve()?;
    let report = match &args.model {
        Some(path) => {
            let (params, _hash) = ListaParams::load(path)?;
            let a = harness::build_matrix(&cfg)?;
            harness::run_with_params(&cfg, &a, &params)?
        }
        None => harness::run_experiment(&cfg)?,
    };
    print_summary(&cfg.output_dir, &report);
    Ok(())
}

fn oracle(args: &Experiment) -> Result<()> {
    let cfg = args.resolve()?;
    let report = harness::run_oracle_coverage(&cfg)?;
    print_summary(&cfg.output_dir, &report);
    Ok(())
}

fn report(args: &Report) -> Result<()> {
    let report = read_report(&args.dir)?;
    ExperimentConfig::load(&args.dir.join(CONFIG_FILE))?;
    print_summary(&args.dir, &report);
    let bad = verify_manifest(&args.dir)?;
    if !bad.is_empty() {
        return Err(Error::Format {
            path: args.dir.clone(),
            message: format!("files do not match the manifest: {}", bad.join(", ")),
        });
    }
    Ok(())
}

/// Exit status for each error category.
fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "parameter" => 10,
        "dimension" => 11,
        "resource" => 12,
        "degenerate-signal" => 13,
        "divergence" => 14,
        "format" => 15,
        "io" => 16,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenMatrix(a) => gen_matrix(a),
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Run(a) => run(a),
        Command::Oracle(a) => oracle(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
