//! Command-line surface. Every command reads one JSON [`RunConfig`] (unknown
//! keys rejected), applies flag overrides, and writes its outputs plus a
//! `manifest.json` (config hash, version, wall time, failures) to `--out`.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CapError, Result};
use crate::evaluate::{
    coverage_experiment, dfd_accuracy_experiment, write_coverage_table, write_json, write_long_csv,
    FailedReplication, ReplicationReport, Scenario,
};
use crate::ingest::{self, format_float};
use crate::model::{whiten, Hyperparameters, StateDims, TimeSeriesDataset};
use crate::sampler::io::{read_chain_csv, write_draws};
use crate::sampler::{
    fit, order_components, summarize, ChainStats, DrawIndex, HmcConfig, PosteriorDraws,
    PosteriorSummary,
};
use crate::selection::{posterior_mean_dfd, select_d, DEFAULT_CUTOFF};
use crate::simulate::{simulate, TruthRecord};
use crate::spd::{Matrix, SpdMatrix};

#[derive(Debug, Parser)]
#[command(
    name = "capreg",
    version,
    about = "Bayesian covariate-assisted principal regression"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Overrides,
}

/// Flags shared by all commands; each overrides the matching config field.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub chains: Option<usize>,
    #[arg(long, global = true)]
    pub warmup: Option<usize>,
    #[arg(long, global = true)]
    pub draws: Option<usize>,
    /// Number of components (`fit`) or largest candidate (`select`, `dfd-accuracy`).
    #[arg(long, global = true)]
    pub d: Option<usize>,
    #[arg(long, global = true)]
    pub cutoff: Option<f64>,
    /// Bonferroni-corrected loading intervals.
    #[arg(long, global = true)]
    pub bonferroni: bool,
    /// Thin each subject to the data's effective sample size before fitting.
    #[arg(long, global = true)]
    pub ess_thin: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Simulate a dataset with known truth.
    Simulate {
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long = "time-points", short = 't')]
        t: Option<usize>,
    },
    /// Fit the model with a fixed number of components.
    Fit {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Choose the number of components by the DfD rule.
    Select {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Re-summarize draws written by `fit`.
    Summarize {
        /// Output directory of a previous `fit`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Recovery metrics and interval coverage over simulated replications.
    Coverage {
        #[arg(long)]
        replications: Option<usize>,
    },
    /// How often the DfD rule recovers the true number of components.
    DfdAccuracy {
        #[arg(long)]
        replications: Option<usize>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// Signals CSV (`subject,t,y1,…,yp`).
    #[arg(long)]
    pub signals: Option<PathBuf>,
    /// Covariates CSV (`subject,x1,…,xq`).
    #[arg(long)]
    pub covariates: Option<PathBuf>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Fit { .. } => "fit",
            Command::Select { .. } => "select",
            Command::Summarize { .. } => "summarize",
            Command::Coverage { .. } => "coverage",
            Command::DfdAccuracy { .. } => "dfd-accuracy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub signals: Option<PathBuf>,
    pub covariates: Option<PathBuf>,
    /// Prepend a column of ones to the covariates.
    pub add_intercept: bool,
    /// Added to the diagonal of Σ* before whitening.
    pub jitter: f64,
    pub ess_thin: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            signals: None,
            covariates: None,
            add_intercept: true,
            jitter: 0.0,
            ess_thin: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub level: f64,
    pub bonferroni: bool,
    pub b_sd: f64,
    pub sigma2_rate: f64,
    /// Row-major `p × p` scale of the loading prior; identity when absent.
    pub psi: Option<Vec<Vec<f64>>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 2,
            level: 0.95,
            bonferroni: false,
            b_sd: Hyperparameters::DEFAULT_B_SD,
            sigma2_rate: Hyperparameters::DEFAULT_SIGMA2_RATE,
            psi: None,
        }
    }
}

impl ModelConfig {
    pub fn hyperparameters(&self, p: usize) -> Result<Hyperparameters> {
        match &self.psi {
            None => Hyperparameters::with_priors(p, self.b_sd, self.sigma2_rate),
            Some(rows) => {
                if rows.len() != p || rows.iter().any(|r| r.len() != p) {
                    return Err(CapError::Validation(format!("model.psi must be {p} x {p}")));
                }
                let psi =
                    SpdMatrix::with_context(Matrix::from_fn(p, p, |i, j| rows[i][j]), "model.psi")?;
                Hyperparameters::new(psi, self.b_sd, self.sigma2_rate)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectConfig {
    pub d_max: usize,
    pub cutoff: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            d_max: 3,
            cutoff: DEFAULT_CUTOFF,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub p: usize,
    pub n: usize,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenarios: Vec<ScenarioSpec>,
    pub replications: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenarios: vec![ScenarioSpec { p: 5, n: 50, t: 10 }],
            replications: 10,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SummarizeConfig {
    pub input: Option<PathBuf>,
}

/// The full configuration of one run. `seed` drives everything: simulation,
/// the sampler (`hmc.seed` is replaced by it), and replication seeds
/// `seed, seed + 1, …`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: Option<usize>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub select: SelectConfig,
    pub hmc: HmcConfig,
    pub simulate: ScenarioSpec,
    pub experiment: ExperimentConfig,
    pub summarize: SummarizeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("capreg-out"),
            jobs: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            select: SelectConfig::default(),
            hmc: HmcConfig::default(),
            simulate: ScenarioSpec { p: 5, n: 50, t: 10 },
            experiment: ExperimentConfig::default(),
            summarize: SummarizeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            CapError::Json(err) => CapError::Parse {
                path: path.to_path_buf(),
                line: err.line(),
                message: err.to_string(),
            },
            other => other,
        })
    }

    /// Flags win over the file.
    pub fn apply(&mut self, flags: &Overrides, command: &Command) {
        if let Some(v) = flags.seed {
            self.seed = v;
        }
        if let Some(v) = &flags.out {
            self.out = v.clone();
        }
        if let Some(v) = flags.jobs {
            self.jobs = Some(v);
        }
        if let Some(v) = flags.chains {
            self.hmc.chains = v;
        }
        if let Some(v) = flags.warmup {
            self.hmc.warmup = v;
        }
        if let Some(v) = flags.draws {
            self.hmc.draws = v;
        }
        if let Some(v) = flags.d {
            match command {
                Command::Select { .. } | Command::DfdAccuracy { .. } => self.select.d_max = v,
                _ => self.model.d = v,
            }
        }
        if let Some(v) = flags.cutoff {
            self.select.cutoff = v;
        }
        if flags.bonferroni {
            self.model.bonferroni = true;
        }
        if flags.ess_thin {
            self.data.ess_thin = true;
        }
        match command {
            Command::Simulate { p, n, t } => {
                if let Some(v) = p {
                    self.simulate.p = *v;
                }
                if let Some(v) = n {
                    self.simulate.n = *v;
                }
                if let Some(v) = t {
                    self.simulate.t = *v;
                }
            }
            Command::Fit { data } | Command::Select { data } => {
                if let Some(v) = &data.signals {
                    self.data.signals = Some(v.clone());
                }
                if let Some(v) = &data.covariates {
                    self.data.covariates = Some(v.clone());
                }
            }
            Command::Summarize { input } => {
                if let Some(v) = input {
                    self.summarize.input = Some(v.clone());
                }
            }
            Command::Coverage { replications } | Command::DfdAccuracy { replications } => {
                if let Some(v) = replications {
                    self.experiment.replications = *v;
                }
            }
        }
        self.hmc.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.hmc.validate()?;
        if self.jobs == Some(0) {
            return Err(CapError::Argument("jobs must be positive".into()));
        }
        if !(self.model.level > 0.0 && self.model.level < 1.0) {
            return Err(CapError::Validation(format!(
                "model.level must lie in (0, 1), got {}",
                self.model.level
            )));
        }
        if self.model.d == 0 {
            return Err(CapError::Validation("model.d must be positive".into()));
        }
        if !self.select.cutoff.is_finite() {
            return Err(CapError::Validation("select.cutoff must be finite".into()));
        }
        if !(self.data.jitter >= 0.0 && self.data.jitter.is_finite()) {
            return Err(CapError::Validation(
                "data.jitter must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON of the effective configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub config: RunConfig,
    pub started_unix: u64,
    pub wall_time_seconds: f64,
    pub outputs: Vec<PathBuf>,
    pub failures: Vec<FailedReplication>,
    pub error: Option<String>,
}

/// What a successful command produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub failures: Vec<FailedReplication>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub dims: StateDims,
    pub summary: PosteriorSummary,
    /// Posterior-mean log-DfD of the fitted `d`.
    pub dfd_mean: f64,
    pub divergences: usize,
    pub chains: Vec<ChainStats>,
    /// Maximum-posterior draw used as the alignment reference.
    pub alignment_reference: Option<DrawIndex>,
    pub effective_sample_size: Option<usize>,
    pub sigma_star: Vec<Vec<f64>>,
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| m.row(r).iter().copied().collect())
        .collect()
}

fn load_data(cfg: &RunConfig) -> Result<(TimeSeriesDataset, Option<usize>)> {
    let (Some(sig), Some(cov)) = (&cfg.data.signals, &cfg.data.covariates) else {
        return Err(CapError::Argument(
            "data.signals and data.covariates (or --signals/--covariates) are required".into(),
        ));
    };
    let data = ingest::load(sig, cov, cfg.data.add_intercept)?;
    if cfg.data.ess_thin {
        let ess = ingest::effective_sample_size(&data)?;
        Ok((ingest::thin(&data, ess)?, Some(ess)))
    } else {
        Ok((data, None))
    }
}

fn cmd_simulate(cfg: &RunConfig) -> Result<Outcome> {
    let s = cfg.simulate;
    let (data, truth) = simulate(s.p, s.n, s.t, cfg.seed)?;
    let signals = cfg.out.join("signals.csv");
    let covariates = cfg.out.join("covariates.csv");
    let truth_path = cfg.out.join("truth.json");
    ingest::write(&data, &signals, &covariates, true)?;
    write_json(&truth_path, &TruthRecord::from_truth(&truth))?;
    Ok(Outcome {
        outputs: vec![signals, covariates, truth_path],
        failures: Vec::new(),
    })
}

fn fit_report(
    draws: &PosteriorDraws,
    cfg: &RunConfig,
    dfd_mean: f64,
    ess: Option<usize>,
    star: &Matrix,
) -> FitReport {
    FitReport {
        dims: draws.dims,
        summary: summarize(draws, cfg.model.level, cfg.model.bonferroni),
        dfd_mean,
        divergences: draws.total_divergences(),
        chains: draws.stats.clone(),
        alignment_reference: draws.reference,
        effective_sample_size: ess,
        sigma_star: matrix_rows(star),
    }
}

fn cmd_fit(cfg: &RunConfig) -> Result<Outcome> {
    let (data, ess) = load_data(cfg)?;
    if cfg.model.d > data.p() {
        return Err(CapError::Argument(format!(
            "d = {} exceeds the signal dimension p = {}",
            cfg.model.d,
            data.p()
        )));
    }
    let white = whiten(&data, cfg.data.jitter)?;
    let hyper = cfg.model.hyperparameters(data.p())?;
    let draws = order_components(fit(&white, cfg.model.d, &hyper, &cfg.hmc)?);
    let dfd = posterior_mean_dfd(&draws, &white)?;
    let mut outputs = write_draws(&cfg.out.join("draws"), &draws)?;
    let report = fit_report(&draws, cfg, dfd, ess, white.sigma_star().matrix());
    let path = cfg.out.join("summary.json");
    write_json(&path, &report)?;
    outputs.push(path);
    Ok(Outcome {
        outputs,
        failures: Vec::new(),
    })
}

fn cmd_select(cfg: &RunConfig) -> Result<Outcome> {
    let (data, _) = load_data(cfg)?;
    let white = whiten(&data, cfg.data.jitter)?;
    let hyper = cfg.model.hyperparameters(data.p())?;
    let report = select_d(
        &white,
        cfg.select.d_max,
        cfg.select.cutoff,
        &hyper,
        &cfg.hmc,
    )?;
    let path = cfg.out.join("select.json");
    write_json(&path, &report)?;
    Ok(Outcome {
        outputs: vec![path],
        failures: Vec::new(),
    })
}

fn cmd_summarize(cfg: &RunConfig) -> Result<Outcome> {
    let input = cfg.summarize.input.as_ref().ok_or_else(|| {
        CapError::Argument("summarize needs --input (a fit output directory)".into())
    })?;
    let previous: FitReport = serde_json::from_reader(std::io::BufReader::new(
        std::fs::File::open(input.join("summary.json"))?,
    ))?;
    let dims = previous.dims;
    let mut chains = Vec::new();
    for c in 1.. {
        let path = input.join("draws").join(format!("chain_{c}.csv"));
        if !path.exists() {
            break;
        }
        chains.push(read_chain_csv(&path, dims)?);
    }
    if chains.is_empty() {
        return Err(CapError::Argument(format!(
            "no chain CSVs under {}",
            input.join("draws").display()
        )));
    }
    let draws = PosteriorDraws {
        dims,
        chains,
        stats: previous.chains.clone(),
        reference: previous.alignment_reference,
        component_variance: Some(previous.summary.component_variance.clone()),
    };
    let report = FitReport {
        summary: summarize(&draws, cfg.model.level, cfg.model.bonferroni),
        ..previous
    };
    let path = cfg.out.join("summary.json");
    write_json(&path, &report)?;
    Ok(Outcome {
        outputs: vec![path],
        failures: Vec::new(),
    })
}

fn replication_seeds(cfg: &RunConfig) -> Result<Vec<u64>> {
    if cfg.experiment.replications == 0 {
        return Err(CapError::Argument(
            "experiment.replications must be positive".into(),
        ));
    }
    if cfg.experiment.scenarios.is_empty() {
        return Err(CapError::Argument("experiment.scenarios is empty".into()));
    }
    Ok((0..cfg.experiment.replications as u64)
        .map(|r| cfg.seed.wrapping_add(r))
        .collect())
}

fn scenario(cfg: &RunConfig, s: &ScenarioSpec) -> Scenario {
    Scenario {
        p: s.p,
        n: s.n,
        t: s.t,
        level: cfg.model.level,
        bonferroni: cfg.model.bonferroni,
    }
}

fn cmd_coverage(cfg: &RunConfig) -> Result<Outcome> {
    let seeds = replication_seeds(cfg)?;
    if seeds.len() < 2 {
        return Err(CapError::Argument(
            "coverage needs at least 2 replications".into(),
        ));
    }
    let mut reports: Vec<ReplicationReport> = Vec::new();
    let mut failures = Vec::new();
    for spec in &cfg.experiment.scenarios {
        let sc = scenario(cfg, spec);
        let hyper = cfg.model.hyperparameters(sc.p)?;
        let report = coverage_experiment(&sc, &seeds, &hyper, &cfg.hmc)?;
        failures.extend(report.failures.iter().cloned());
        reports.push(report);
    }
    let metrics = cfg.out.join("metrics.csv");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&metrics)?);
    for (i, r) in reports.iter().enumerate() {
        write_long_csv(&mut out, r, i == 0)?;
    }
    drop(out);
    let table = cfg.out.join("coverage.csv");
    write_coverage_table(
        &mut std::io::BufWriter::new(std::fs::File::create(&table)?),
        &reports,
    )?;
    let json = cfg.out.join("coverage.json");
    write_json(&json, &reports)?;
    Ok(Outcome {
        outputs: vec![metrics, table, json],
        failures,
    })
}

fn cmd_dfd_accuracy(cfg: &RunConfig) -> Result<Outcome> {
    let seeds = replication_seeds(cfg)?;
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let long = cfg.out.join("dfd_accuracy.csv");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&long)?);
    use std::io::Write;
    writeln!(out, "scenario,replication,metric,value")?;
    for spec in &cfg.experiment.scenarios {
        let sc = scenario(cfg, spec);
        let hyper = cfg.model.hyperparameters(sc.p)?;
        let report = dfd_accuracy_experiment(
            &sc,
            &seeds,
            cfg.select.d_max,
            cfg.select.cutoff,
            &hyper,
            &cfg.hmc,
        )?;
        for rep in &report.replications {
            let label = sc.label();
            writeln!(
                out,
                "{label},{},chosen_d,{}",
                rep.replication + 1,
                rep.chosen_d
            )?;
            for c in &rep.candidates {
                writeln!(
                    out,
                    "{label},{},dfd_{},{}",
                    rep.replication + 1,
                    c.d,
                    format_float(c.dfd_mean)
                )?;
            }
        }
        failures.extend(report.failures.iter().cloned());
        reports.push(report);
    }
    drop(out);
    let json = cfg.out.join("dfd_accuracy.json");
    write_json(&json, &reports)?;
    Ok(Outcome {
        outputs: vec![long, json],
        failures,
    })
}

fn dispatch(command: &Command, cfg: &RunConfig) -> Result<Outcome> {
    match command {
        Command::Simulate { .. } => cmd_simulate(cfg),
        Command::Fit { .. } => cmd_fit(cfg),
        Command::Select { .. } => cmd_select(cfg),
        Command::Summarize { .. } => cmd_summarize(cfg),
        Command::Coverage { .. } => cmd_coverage(cfg),
        Command::DfdAccuracy { .. } => cmd_dfd_accuracy(cfg),
    }
}

/// Resolves the configuration, runs the command inside a thread pool of
/// `jobs` workers, and writes the manifest (also on failure, once the output
/// directory exists).
pub fn run(cli: &Cli) -> Result<Outcome> {
    let mut cfg = match &cli.flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(&cli.flags, &cli.command);
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;

    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cfg.jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| {
        CapError::Argument(format!(
            "cannot start {} workers: {e}",
            cfg.jobs.unwrap_or(0)
        ))
    })?;
    let result = pool.install(|| dispatch(&cli.command, &cfg));

    let (outputs, failures, error) = match &result {
        Ok(o) => (o.outputs.clone(), o.failures.clone(), None),
        Err(e) => (Vec::new(), Vec::new(), Some(e.to_string())),
    };
    let manifest = Manifest {
        command: cli.command.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: cfg.hash(),
        config: cfg.clone(),
        started_unix,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        outputs,
        failures,
        error,
    };
    write_json(&cfg.out.join("manifest.json"), &manifest)?;
    result
}
