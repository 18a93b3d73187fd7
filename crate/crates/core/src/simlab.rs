//! Simulation study: the four-scenario data-generating process, analytic
//! truths, a replication runner with bias / ASE / coverage summaries, and
//! brute-force oracles used by the tests.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EffectRequest, GroupRecord, Policy, Study};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorOptions, Family, FittedModels};
use crate::features::FeatureMap;
use crate::inference::infer_effects;
use crate::policy::{derive_seed, Engine, MeanFunction, MuTarget};
use crate::propensity::{fit_propensity, PropensityOptions};
use crate::quadrature::expit;

pub const COVARIATES: [&str; 2] = ["x1", "x2"];
pub const CORRECT_OUTCOME: [&str; 6] = ["1", "A", "prop", "abs(x1)", "x2", "abs(x1)*x2"];
pub const WRONG_OUTCOME: [&str; 5] = ["1", "A", "prop", "x1", "x2"];
pub const CORRECT_PROPENSITY: [&str; 3] = ["1", "abs(x1)", "abs(x1)*x2"];
pub const WRONG_PROPENSITY: [&str; 2] = ["1", "x1"];
pub const DEFAULT_FAMILIES: [Family; 4] = [Family::Ipw, Family::Reg, Family::DrBc, Family::DrWls];
/// Share of failed replications above which a run is abandoned.
pub const MAX_FAILURE_RATE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    I,
    II,
    III,
    IV,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::I, Scenario::II, Scenario::III, Scenario::IV];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i" | "1" => Ok(Scenario::I),
            "ii" | "2" => Ok(Scenario::II),
            "iii" | "3" => Ok(Scenario::III),
            "iv" | "4" => Ok(Scenario::IV),
            other => Err(Error::Config(format!("unknown scenario {other}"))),
        }
    }

    pub fn correct_outcome(self) -> bool {
        matches!(self, Scenario::I | Scenario::II)
    }

    pub fn correct_propensity(self) -> bool {
        matches!(self, Scenario::I | Scenario::III)
    }

    pub fn outcome_terms(self) -> &'static [&'static str] {
        if self.correct_outcome() {
            &CORRECT_OUTCOME
        } else {
            &WRONG_OUTCOME
        }
    }

    pub fn propensity_terms(self) -> &'static [&'static str] {
        if self.correct_propensity() {
            &CORRECT_PROPENSITY
        } else {
            &WRONG_PROPENSITY
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::I => "i",
            Scenario::II => "ii",
            Scenario::III => "iii",
            Scenario::IV => "iv",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub k: usize,
    pub group_size: usize,
    pub alpha: Policy,
    pub replications: usize,
    pub master_seed: u64,
    pub families: Vec<Family>,
    /// Variance of the group effect in the treatment model.
    pub sigma_b_squared: f64,
    pub engine: Engine,
    pub level: f64,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario) -> Self {
        ScenarioSpec {
            scenario,
            k: 100,
            group_size: 30,
            alpha: Policy::new(0.5).unwrap(),
            replications: 200,
            master_seed: 20_160_101,
            families: DEFAULT_FAMILIES.to_vec(),
            sigma_b_squared: 0.3,
            engine: Engine::default(),
            level: 0.95,
        }
    }

    /// Reduced-size configuration under which the propensity-covariate
    /// family is affordable.
    pub fn with_picov(mut self) -> Self {
        self.k = 50;
        self.group_size = 8;
        if !self.families.contains(&Family::DrPicov) {
            self.families.push(Family::DrPicov);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.k < 2 {
            bad.push(format!("k = {} (need at least 2 groups)", self.k));
        }
        if self.group_size < 1 {
            bad.push("group_size must be positive".to_string());
        }
        if self.replications < 1 {
            bad.push("replications must be positive".to_string());
        }
        if self.families.is_empty() {
            bad.push("no estimator families".to_string());
        }
        if !(self.sigma_b_squared >= 0.0 && self.sigma_b_squared.is_finite()) {
            bad.push(format!("sigma_b_squared = {}", self.sigma_b_squared));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            bad.push(format!("level = {}", self.level));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Switches for degenerate draws used when checking the generator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeneratorOverrides {
    pub zero_noise: bool,
    pub zero_group_effect: bool,
    pub force_treatment: Option<u8>,
}

/// Seed of replicate `index`'s data stream. Independent of the scenario, so
/// all four scenarios see identical data.
pub fn replicate_seed(master: u64, index: usize) -> u64 {
    derive_seed(&[master, index as u64])
}

pub fn generate_study(spec: &ScenarioSpec, index: usize) -> Study {
    generate_study_with(spec, index, GeneratorOverrides::default())
}

pub fn generate_study_with(spec: &ScenarioSpec, index: usize, ov: GeneratorOverrides) -> Study {
    let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed(spec.master_seed, index));
    let sd_b = spec.sigma_b_squared.sqrt();
    let width = spec.k.to_string().len();
    let n = spec.group_size;
    let mut groups = Vec::with_capacity(spec.k);
    for i in 0..spec.k {
        let z: f64 = rng.sample(StandardNormal);
        let b = if ov.zero_group_effect { 0.0 } else { sd_b * z };
        let mut xs = Vec::with_capacity(n);
        let mut ts = Vec::with_capacity(n);
        for _ in 0..n {
            let x1: f64 = rng.sample(StandardNormal);
            let x2 = rng.random::<f64>() < 0.5;
            let x2 = x2 as u8 as f64;
            let u: f64 = rng.random();
            let p = expit(0.1 + 0.2 * x1.abs() + 0.2 * x1.abs() * x2 + b);
            let a = ov.force_treatment.unwrap_or((u < p) as u8);
            xs.push(vec![x1, x2]);
            ts.push(a);
        }
        let prop = ts.iter().map(|&a| a as f64).sum::<f64>() / n as f64;
        let ys = (0..n)
            .map(|j| {
                let e: f64 = rng.sample(StandardNormal);
                let e = if ov.zero_noise { 0.0 } else { e };
                let (x1, x2) = (xs[j][0], xs[j][1]);
                2.0 + 2.0 * ts[j] as f64 + prop - 1.5 * x1.abs() + 2.0 * x2 - 3.0 * x1.abs() * x2
                    + e
            })
            .collect();
        groups.push(GroupRecord::new(format!("g{i:0width$}"), xs, ts, ys));
    }
    Study::new(groups, COVARIATES.iter().map(|s| s.to_string()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrueValues {
    pub group_size: usize,
    pub alpha: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub mu_marginal: f64,
    pub de: f64,
}

/// Analytic `mu_{a,alpha}` under the generator: `E|X1| = sqrt(2/pi)`,
/// `E X2 = 1/2` and `E p(A_i) = (a + (N-1) alpha) / N`.
pub fn true_values(group_size: usize, alpha: f64) -> TrueValues {
    let n = group_size as f64;
    let e_abs = (2.0 / std::f64::consts::PI).sqrt();
    let base = 2.0 - 1.5 * e_abs + 2.0 * 0.5 - 3.0 * e_abs * 0.5;
    let mu = |a: f64| base + 2.0 * a + (a + (n - 1.0) * alpha) / n;
    TrueValues {
        group_size,
        alpha,
        mu0: mu(0.0),
        mu1: mu(1.0),
        mu_marginal: alpha * mu(1.0) + (1.0 - alpha) * mu(0.0),
        de: 2.0 + 1.0 / n,
    }
}

/// Literal `Σ_{a_(-j)} m(a, a_(-j)) π(a_(-j); α)` by nested enumeration with
/// plain products.
pub fn oracle_policy_sum<M: MeanFunction + ?Sized>(
    model: &M,
    j: usize,
    a: u8,
    alpha: f64,
) -> Result<f64> {
    let n = model.group_size();
    if n > 15 {
        return Err(Error::Capability(format!(
            "oracle enumeration limited to 15 members, got {n}"
        )));
    }
    if j >= n {
        return Err(Error::IndexOutOfRange { index: j, len: n });
    }
    let mut total = 0.0;
    for mask in 0u32..(1u32 << n) {
        if ((mask >> j) & 1) as u8 != a {
            continue;
        }
        let t: Vec<u8> = (0..n).map(|k| ((mask >> k) & 1) as u8).collect();
        let mut w = 1.0;
        for (k, &tk) in t.iter().enumerate() {
            if k != j {
                w *= if tk == 1 { alpha } else { 1.0 - alpha };
            }
        }
        total += w * model.mean_at(&t, j)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyReplicate {
    pub family: Family,
    pub mu0: f64,
    pub mu1: f64,
    pub de: f64,
    pub se_mu0: f64,
    pub se_mu1: f64,
    pub se_de: f64,
    pub cover_mu0: bool,
    pub cover_mu1: bool,
    pub cover_de: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationResult {
    pub index: usize,
    pub seed: u64,
    pub families: Vec<FamilyReplicate>,
    pub failure: Option<String>,
}

fn run_one(spec: &ScenarioSpec, index: usize, truth: &TrueValues) -> Result<Vec<FamilyReplicate>> {
    let study = generate_study(spec, index);
    let names = study.covariate_names().to_vec();
    let prop = if spec.families.iter().any(|f| f.uses_propensity()) {
        let map = FeatureMap::parse(spec.scenario.propensity_terms(), &names)?;
        Some(fit_propensity(&study, &map, &PropensityOptions::default())?)
    } else {
        None
    };
    let out_map = FeatureMap::parse(spec.scenario.outcome_terms(), &names)?;
    let alpha = spec.alpha;
    let targets = [
        MuTarget::Conditional { a: 0, alpha },
        MuTarget::Conditional { a: 1, alpha },
    ];
    let options = EstimatorOptions {
        engine: spec.engine,
        marginal_extension: false,
    };
    let fitted = FittedModels::fit(&study, &out_map, prop, &spec.families, &targets, &options)?;
    let de = [EffectRequest::direct(alpha)];
    let mut out = Vec::with_capacity(spec.families.len());
    for &family in &spec.families {
        let (stack, sw, effects) =
            infer_effects(family, &study, &fitted, &de, &options, spec.level)?;
        let i0 = stack.target_index(targets[0]).unwrap();
        let i1 = stack.target_index(targets[1]).unwrap();
        let (mu0, mu1) = (stack.theta()[i0], stack.theta()[i1]);
        let (se0, se1) = (
            sw.variance(i0).max(0.0).sqrt(),
            sw.variance(i1).max(0.0).sqrt(),
        );
        let z = crate::inference::wald_ci(0.0, 1.0, spec.level)?.1;
        let covers = |est: f64, se: f64, t: f64| (est - z * se..=est + z * se).contains(&t);
        let e = &effects[0];
        out.push(FamilyReplicate {
            family,
            mu0,
            mu1,
            de: e.estimate,
            se_mu0: se0,
            se_mu1: se1,
            se_de: e.se,
            cover_mu0: covers(mu0, se0, truth.mu0),
            cover_mu1: covers(mu1, se1, truth.mu1),
            cover_de: (e.lower..=e.upper).contains(&truth.de),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scenario: Scenario,
    pub family: Family,
    pub estimand: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    pub ase: f64,
    pub coverage: f64,
    pub n_reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub spec: ScenarioSpec,
    pub truth: TrueValues,
    pub rows: Vec<SummaryRow>,
    pub failures: usize,
}

impl SimulationSummary {
    pub fn row(&self, family: Family, estimand: &str) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.family == family && r.estimand == estimand)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationOutput {
    pub replications: Vec<ReplicationResult>,
    pub summary: SimulationSummary,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn summarize(
    spec: &ScenarioSpec,
    truth: &TrueValues,
    reps: &[ReplicationResult],
) -> SimulationSummary {
    let ok: Vec<&ReplicationResult> = reps.iter().filter(|r| r.failure.is_none()).collect();
    let mut rows = Vec::new();
    for (fi, &family) in spec.families.iter().enumerate() {
        type Pick = fn(&FamilyReplicate) -> (f64, f64, bool);
        let estimands: [(&str, f64, Pick); 3] = [
            ("mu0", truth.mu0, |r| (r.mu0, r.se_mu0, r.cover_mu0)),
            ("mu1", truth.mu1, |r| (r.mu1, r.se_mu1, r.cover_mu1)),
            ("DE", truth.de, |r| (r.de, r.se_de, r.cover_de)),
        ];
        for (name, t, pick) in estimands {
            let vals: Vec<(f64, f64, bool)> = ok.iter().map(|r| pick(&r.families[fi])).collect();
            let est: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let se: Vec<f64> = vals.iter().map(|v| v.1).collect();
            let cov = vals.iter().filter(|v| v.2).count() as f64 / vals.len().max(1) as f64;
            let m = mean(&est);
            rows.push(SummaryRow {
                scenario: spec.scenario,
                family,
                estimand: name.to_string(),
                truth: t,
                mean: m,
                bias: m - t,
                sd: sample_sd(&est),
                ase: mean(&se),
                coverage: cov,
                n_reps: vals.len(),
            });
        }
    }
    SimulationSummary {
        spec: spec.clone(),
        truth: *truth,
        rows,
        failures: reps.len() - ok.len(),
    }
}

/// Runs every replication (in parallel on the current rayon pool) and
/// summarizes them in replicate order.
pub fn run_replications(spec: &ScenarioSpec) -> Result<SimulationOutput> {
    spec.validate()?;
    let truth = true_values(spec.group_size, spec.alpha.alpha());
    let reps: Vec<ReplicationResult> = (0..spec.replications)
        .into_par_iter()
        .map(|index| {
            let seed = replicate_seed(spec.master_seed, index);
            match run_one(spec, index, &truth) {
                Ok(families) => ReplicationResult {
                    index,
                    seed,
                    families,
                    failure: None,
                },
                Err(e) => {
                    log::warn!("replication {index} failed: {e}");
                    ReplicationResult {
                        index,
                        seed,
                        families: Vec::new(),
                        failure: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let failures = reps.iter().filter(|r| r.failure.is_some()).count();
    if failures as f64 >= MAX_FAILURE_RATE * spec.replications as f64 && failures > 0 {
        let first = reps
            .iter()
            .find_map(|r| r.failure.clone())
            .unwrap_or_default();
        return Err(Error::Fit(format!(
            "{failures} of {} replications failed (limit {:.0}%); first: {first}",
            spec.replications,
            MAX_FAILURE_RATE * 100.0
        )));
    }
    let summary = summarize(spec, &truth, &reps);
    Ok(SimulationOutput {
        replications: reps,
        summary,
    })
}

/// One row per family × estimand.
pub fn write_summary_csv<W: Write>(summary: &SimulationSummary, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "scenario", "family", "estimand", "truth", "mean", "bias", "sd", "ase", "coverage",
        "n_reps",
    ])?;
    for r in &summary.rows {
        w.write_record([
            r.scenario.to_string(),
            r.family.to_string(),
            r.estimand.clone(),
            r.truth.to_string(),
            r.mean.to_string(),
            r.bias.to_string(),
            r.sd.to_string(),
            r.ase.to_string(),
            r.coverage.to_string(),
            r.n_reps.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("summary csv", e))?;
    Ok(())
}

/// Long format (scenario, family, estimand, metric, value) for plotting.
pub fn write_plot_csv<W: Write>(summary: &SimulationSummary, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["scenario", "family", "estimand", "metric", "value"])?;
    for r in &summary.rows {
        for (metric, v) in [
            ("abs_bias", r.bias.abs()),
            ("bias", r.bias),
            ("sd", r.sd),
            ("ase", r.ase),
            ("coverage", r.coverage),
        ] {
            w.write_record([
                r.scenario.to_string(),
                r.family.to_string(),
                r.estimand.clone(),
                metric.to_string(),
                v.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("plot csv", e))?;
    Ok(())
}
