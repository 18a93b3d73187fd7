//! Command-line front end: `estimate`, `simulate` and `truth`.
//!
//! Settings come from a TOML file with one table per concern (`run`,
//! `data`, `propensity`, `outcome`, `estimate`, `engine`, `simulate`,
//! `truth`, `output`); command-line flags override it. The resolved
//! settings, defaults included, are echoed into each JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{load_study, validate_study, CsvSchema, EffectKind, EffectRequest, Policy};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorOptions, Family, FittedModels};
use crate::features::FeatureMap;
use crate::inference::{infer_effects, targets_for, EffectInference};
use crate::policy::{Engine, DEFAULT_EXACT_ENUM_LIMIT, DEFAULT_MC_DRAWS};
use crate::propensity::{fit_propensity, PropensityModel, PropensityOptions};
use crate::simlab::{self, Scenario, ScenarioSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "spillover",
    version,
    about = "Effect estimation under partial interference"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides `run.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (overrides `run.workers`).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate effects on a CSV study.
    Estimate {
        /// Data file (overrides `data.path`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the simulation study for one scenario.
    Simulate {
        /// i, ii, iii or iv (overrides `simulate.scenario`).
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Print analytic true values of the simulation design.
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub workers: usize,
    pub level: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 1,
            workers: 1,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub group: String,
    pub treatment: String,
    pub outcome: String,
    /// Absent: every remaining column.
    pub covariates: Option<Vec<String>>,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = CsvSchema::default();
        DataSection {
            path: None,
            group: s.group,
            treatment: s.treatment,
            outcome: s.outcome,
            covariates: s.covariates,
        }
    }
}

impl DataSection {
    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            group: self.group.clone(),
            treatment: self.treatment.clone(),
            outcome: self.outcome.clone(),
            covariates: self.covariates.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropensitySection {
    pub terms: Vec<String>,
    pub fix_sigma_zero: bool,
    pub floor: Option<f64>,
    /// Known fixed effects; skips fitting. `known_log_sigma` absent means
    /// `σ_b = 0`.
    pub known: Option<Vec<f64>>,
    pub known_log_sigma: Option<f64>,
}

impl Default for PropensitySection {
    fn default() -> Self {
        PropensitySection {
            terms: vec!["1".into()],
            fix_sigma_zero: false,
            floor: None,
            known: None,
            known_log_sigma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeSection {
    pub terms: Vec<String>,
}

impl Default for OutcomeSection {
    fn default() -> Self {
        OutcomeSection {
            terms: vec!["1".into(), "A".into(), "prop".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateSection {
    pub families: Vec<String>,
    pub effects: Vec<String>,
    pub alphas: Vec<f64>,
    /// Reference policy of IE, TE and OE.
    pub alpha0: f64,
    pub marginal_extension: bool,
}

impl Default for EstimateSection {
    fn default() -> Self {
        EstimateSection {
            families: vec!["IPW".into(), "REG".into(), "DRBC".into(), "DRWLS".into()],
            effects: vec!["DE".into()],
            alphas: vec![0.5],
            alpha0: 0.4,
            marginal_extension: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    /// `exact` or `monte_carlo`.
    pub kind: String,
    pub limit: usize,
    pub draws: usize,
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection {
            kind: "exact".into(),
            limit: DEFAULT_EXACT_ENUM_LIMIT,
            draws: DEFAULT_MC_DRAWS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub scenario: String,
    pub k: usize,
    pub group_size: usize,
    pub alpha: f64,
    pub replications: usize,
    pub families: Vec<String>,
    pub sigma_b_squared: f64,
    /// Adds the propensity-covariate family at the reduced size (k=50, N=8).
    pub picov: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        let d = ScenarioSpec::new(Scenario::I);
        SimulateSection {
            scenario: "i".into(),
            k: d.k,
            group_size: d.group_size,
            alpha: d.alpha.alpha(),
            replications: d.replications,
            families: d.families.iter().map(|f| f.to_string()).collect(),
            sigma_b_squared: d.sigma_b_squared,
            picov: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthSection {
    pub group_sizes: Vec<usize>,
    pub alphas: Vec<f64>,
}

impl Default for TruthSection {
    fn default() -> Self {
        TruthSection {
            group_sizes: vec![30],
            alphas: vec![0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "out".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub propensity: PropensitySection,
    pub outcome: OutcomeSection,
    pub estimate: EstimateSection,
    pub engine: EngineSection,
    pub simulate: SimulateSection,
    pub truth: TruthSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn engine(&self) -> Result<Engine> {
        match self.engine.kind.as_str() {
            "exact" => Ok(Engine::Exact {
                limit: self.engine.limit,
            }),
            "monte_carlo" | "mc" => {
                if self.engine.draws == 0 {
                    return Err(Error::Config("engine.draws must be positive".into()));
                }
                Ok(Engine::MonteCarlo {
                    draws: self.engine.draws,
                    seed: self.run.seed,
                })
            }
            other => Err(Error::Config(format!("unknown engine kind {other}"))),
        }
    }

    fn families(list: &[String]) -> Result<Vec<Family>> {
        let mut out: Vec<Family> = Vec::new();
        for s in list {
            let f = Family::parse(s)?;
            if !out.contains(&f) {
                out.push(f);
            }
        }
        if out.is_empty() {
            return Err(Error::Config(
                "at least one estimator family is required".into(),
            ));
        }
        Ok(out)
    }

    fn policy(alpha: f64, what: &str) -> Result<Policy> {
        Policy::new(alpha).map_err(|_| Error::Config(format!("{what} = {alpha} is not in (0,1)")))
    }

    /// Effect requests in output order: for each α, each requested kind.
    pub fn effect_requests(&self) -> Result<Vec<EffectRequest>> {
        let kinds: Vec<EffectKind> = self
            .estimate
            .effects
            .iter()
            .map(|s| EffectKind::parse(s))
            .collect::<Result<_>>()?;
        if kinds.is_empty() || self.estimate.alphas.is_empty() {
            return Err(Error::Config(
                "at least one effect and one alpha are required".into(),
            ));
        }
        let alpha0 = Self::policy(self.estimate.alpha0, "estimate.alpha0")?;
        let mut out = Vec::new();
        for &a in &self.estimate.alphas {
            let a = Self::policy(a, "estimate.alphas")?;
            for &k in &kinds {
                out.push(EffectRequest::new(k, a, alpha0));
            }
        }
        Ok(out)
    }

    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        let s = &self.simulate;
        let mut spec = ScenarioSpec {
            k: s.k,
            group_size: s.group_size,
            alpha: Self::policy(s.alpha, "simulate.alpha")?,
            replications: s.replications,
            master_seed: self.run.seed,
            families: Self::families(&s.families)?,
            sigma_b_squared: s.sigma_b_squared,
            engine: self.engine()?,
            level: self.run.level,
            ..ScenarioSpec::new(Scenario::parse(&s.scenario)?)
        };
        if s.picov {
            spec = spec.with_picov();
        }
        spec.validate()?;
        Ok(spec)
    }

    fn apply(&mut self, cli: &Cli) {
        if let Some(s) = cli.seed {
            self.run.seed = s;
        }
        if let Some(w) = cli.workers {
            self.run.workers = w;
        }
        if let Some(o) = &cli.out {
            self.output.dir = o.clone();
        }
        match &cli.command {
            Command::Estimate { data: Some(d) } => self.data.path = Some(d.clone()),
            Command::Simulate {
                scenario,
                replications,
            } => {
                if let Some(s) = scenario {
                    self.simulate.scenario = s.clone();
                }
                if let Some(r) = replications {
                    self.simulate.replications = *r;
                }
            }
            _ => {}
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn to_json(value: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("json values serialize");
    s.push('\n');
    s.into_bytes()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateOutput {
    pub results: Vec<EffectInference>,
    pub parameter_counts: Vec<(Family, usize)>,
}

/// Fits every model once and evaluates all requested cells.
pub fn cmd_estimate(config: &RunConfig) -> Result<EstimateOutput> {
    let path = config
        .data
        .path
        .as_ref()
        .ok_or_else(|| Error::Config("estimate needs data.path or --data".into()))?;
    let families = RunConfig::families(&config.estimate.families)?;
    let requests = config.effect_requests()?;
    let options = EstimatorOptions {
        engine: config.engine()?,
        marginal_extension: config.estimate.marginal_extension,
    };
    let targets = targets_for(&requests);
    for &f in &families {
        for &t in &targets {
            crate::estimators::check_supported(f, t, &options)?;
        }
    }
    let study = load_study(path, &config.data.schema())?;
    validate_study(&study)?;
    let names = study.covariate_names().to_vec();
    let out_map = FeatureMap::parse(&config.outcome.terms, &names)?;
    let prop_map = FeatureMap::parse(&config.propensity.terms, &names)?;
    let prop = if families.iter().any(|f| f.uses_propensity()) {
        Some(match &config.propensity.known {
            Some(g) => PropensityModel::from_parameters(
                prop_map,
                g.clone(),
                config.propensity.known_log_sigma,
            )?
            .with_floor(config.propensity.floor),
            None => {
                let opts = PropensityOptions {
                    fix_sigma_zero: config.propensity.fix_sigma_zero,
                    floor: config.propensity.floor,
                    ..Default::default()
                };
                fit_propensity(&study, &prop_map, &opts)?
            }
        })
    } else {
        None
    };
    let mut fitted = FittedModels::fit(&study, &out_map, prop, &families, &targets, &options)?;
    fitted.propensity_known = config.propensity.known.is_some();
    let mut results = Vec::new();
    let mut counts = Vec::new();
    for &f in &families {
        let (stack, _, r) =
            infer_effects(f, &study, &fitted, &requests, &options, config.run.level)?;
        counts.push((f, stack.dim()));
        results.extend(r);
    }
    let out = EstimateOutput {
        results,
        parameter_counts: counts,
    };

    let dir = &config.output.dir;
    create_dir(dir)?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record([
        "family", "effect", "alpha1", "alpha0", "estimate", "se", "lower", "upper",
    ])?;
    for r in &out.results {
        csv.write_record([
            r.family.to_string(),
            r.kind.to_string(),
            r.alpha1.to_string(),
            r.alpha0.to_string(),
            r.estimate.to_string(),
            r.se.to_string(),
            r.lower.to_string(),
            r.upper.to_string(),
        ])?;
    }
    let bytes = csv
        .into_inner()
        .map_err(|e| Error::io("results.csv", e.into_error()))?;
    write_file(&dir.join("results.csv"), &bytes)?;

    let prop_json = fitted.propensity.as_ref().map(|p| {
        json!({
            "parameters": p.param_labels().into_iter().zip(p.params()).collect::<Vec<_>>(),
            "fit": p.fit_info,
        })
    });
    let mut outcome_json = Vec::new();
    if let Some(o) = &fitted.ols {
        outcome_json.push(json!({"mode": "OLS", "coefficients": o.param_labels().into_iter().zip(o.beta().to_vec()).collect::<Vec<_>>(), "fit": o.fit_info}));
    }
    for (name, list) in [("WLS", &fitted.wls), ("PICOV", &fitted.picov)] {
        for (t, o) in list {
            outcome_json.push(json!({"mode": name, "target": t.label(), "coefficients": o.param_labels().into_iter().zip(o.beta().to_vec()).collect::<Vec<_>>(), "fit": o.fit_info}));
        }
    }
    let meta = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "estimate",
        "config": config,
        "engine": options.engine,
        "exact_policy_sums": matches!(options.engine, Engine::Exact { .. }),
        "groups": study.num_groups(),
        "individuals": study.num_individuals(),
        "propensity": prop_json,
        "outcome_models": outcome_json,
        "parameter_counts": out.parameter_counts.iter().map(|(f, n)| json!({"family": f, "parameters": n})).collect::<Vec<_>>(),
    });
    write_file(&dir.join("results.json"), &to_json(&meta))?;
    Ok(out)
}

pub fn cmd_simulate(config: &RunConfig) -> Result<simlab::SimulationSummary> {
    let spec = config.scenario_spec()?;
    let out = simlab::run_replications(&spec)?;
    let dir = &config.output.dir;
    create_dir(dir)?;
    let mut buf = Vec::new();
    simlab::write_summary_csv(&out.summary, &mut buf)?;
    write_file(&dir.join("summary.csv"), &buf)?;
    let mut buf = Vec::new();
    simlab::write_plot_csv(&out.summary, &mut buf)?;
    write_file(&dir.join("plot.csv"), &buf)?;

    let mut reps = csv::Writer::from_writer(Vec::new());
    reps.write_record([
        "replicate",
        "seed",
        "family",
        "mu0",
        "mu1",
        "de",
        "se_mu0",
        "se_mu1",
        "se_de",
        "failure",
    ])?;
    for r in &out.replications {
        if let Some(f) = &r.failure {
            let mut row = vec![r.index.to_string(), r.seed.to_string()];
            row.extend(std::iter::repeat_n(String::new(), 7));
            row.push(f.clone());
            reps.write_record(&row)?;
        }
        for f in &r.families {
            reps.write_record([
                r.index.to_string(),
                r.seed.to_string(),
                f.family.to_string(),
                f.mu0.to_string(),
                f.mu1.to_string(),
                f.de.to_string(),
                f.se_mu0.to_string(),
                f.se_mu1.to_string(),
                f.se_de.to_string(),
                String::new(),
            ])?;
        }
    }
    let bytes = reps
        .into_inner()
        .map_err(|e| Error::io("replications.csv", e.into_error()))?;
    write_file(&dir.join("replications.csv"), &bytes)?;
    let meta = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "simulate",
        "config": config,
        "spec": spec,
        "truth": out.summary.truth,
        "failures": out.summary.failures,
    });
    write_file(&dir.join("simulation.json"), &to_json(&meta))?;
    Ok(out.summary)
}

/// Truth table as CSV text.
pub fn cmd_truth(config: &RunConfig) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["group_size", "alpha", "mu0", "mu1", "mu_marginal", "DE"])?;
    for &n in &config.truth.group_sizes {
        if n == 0 {
            return Err(Error::Config("truth.group_sizes must be positive".into()));
        }
        for &a in &config.truth.alphas {
            RunConfig::policy(a, "truth.alphas")?;
            let t = simlab::true_values(n, a);
            w.write_record([
                n.to_string(),
                a.to_string(),
                t.mu0.to_string(),
                t.mu1.to_string(),
                t.mu_marginal.to_string(),
                t.de.to_string(),
            ])?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io("truth", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn dispatch(cli: &Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.apply(cli);
    if config.run.workers == 0 {
        return Err(Error::Config("run.workers must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.run.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Estimate { .. } => cmd_estimate(&config).map(|_| ()),
        Command::Simulate { .. } => cmd_simulate(&config).map(|_| ()),
        Command::Truth => {
            print!("{}", cmd_truth(&config)?);
            Ok(())
        }
    })
}

/// Runs the CLI and returns the process exit code. Errors are reported on
/// one stderr line: `error[<class>]: <message>`.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[config]: {}", first.trim_start_matches("error: "));
            return crate::error::ErrorClass::Config.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let class = e.class();
            eprintln!(
                "error[{}]: {}",
                class.as_str(),
                e.to_string().replace('\n', " ")
            );
            class.exit_code()
        }
    }
}
