//! Stacked estimating functions and the empirical sandwich covariance.
//!
//! For an estimator family the parameter vector is laid out as
//! `[mu targets..., beta block(s)..., gamma (+ log sigma_b)]`. Each group
//! contributes `G_i(theta)`: the `mu` rows are `Ŷ_i - mu` computed by the
//! same evaluator as the point estimates, followed by the outcome
//! regression's normal equations and the propensity score.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{EffectRequest, Study};
use crate::error::{Error, Result};
use crate::estimators::{
    check_supported, effect_targets, group_value_with, ordered_mean, EstimatorOptions, Family,
    FittedModels,
};
use crate::linalg;
use crate::outcome::OutcomeModel;
use crate::policy::{Engine, MuTarget};
use crate::propensity::PropensityModel;

/// Largest tolerated `|k^-1 Σ G_i(θ̂)|` before a stack is rejected outright.
const RESIDUAL_HARD_LIMIT: f64 = 1e-4;
/// Above this the stack is used but logged.
pub const RESIDUAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BlockKind {
    Mu,
    Beta,
    Gamma,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Block {
    pub kind: BlockKind,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct ThetaStack {
    family: Family,
    targets: Vec<MuTarget>,
    outcomes: Vec<Arc<OutcomeModel>>,
    /// Outcome block serving each target.
    outcome_of: Vec<usize>,
    propensity: Option<Arc<PropensityModel>>,
    engine: Engine,
    theta: Vec<f64>,
    labels: Vec<String>,
    blocks: Vec<Block>,
    /// `log f(A_i|X_i)` and score at `γ̂`, reused while `γ` is unperturbed.
    base_log_f: Vec<f64>,
    base_score: Vec<Vec<f64>>,
}

fn dedup_targets(targets: &[MuTarget]) -> Vec<MuTarget> {
    let mut out: Vec<MuTarget> = Vec::new();
    for &t in targets {
        if !out.iter().any(|u| u.same_as(t)) {
            out.push(t);
        }
    }
    out
}

/// Targets needed by a set of effect requests, in order of first use.
pub fn targets_for(requests: &[EffectRequest]) -> Vec<MuTarget> {
    let all: Vec<MuTarget> = requests.iter().flat_map(effect_targets).collect();
    dedup_targets(&all)
}

pub fn build_stack(
    family: Family,
    study: &Study,
    fitted: &FittedModels,
    targets: &[MuTarget],
    options: &EstimatorOptions,
) -> Result<ThetaStack> {
    let targets = dedup_targets(targets);
    if targets.is_empty() {
        return Err(Error::InvalidArgument(
            "stack needs at least one target".into(),
        ));
    }
    let mut outcomes: Vec<Arc<OutcomeModel>> = Vec::new();
    let mut outcome_of = Vec::new();
    for &t in &targets {
        check_supported(family, t, options)?;
        if !family.uses_outcome() {
            outcome_of.push(usize::MAX);
            continue;
        }
        let m = fitted.outcome_for(family, t)?;
        let idx = match outcomes.iter().position(|o| Arc::ptr_eq(o, m)) {
            Some(i) => i,
            None => {
                outcomes.push(m.clone());
                outcomes.len() - 1
            }
        };
        outcome_of.push(idx);
    }
    let propensity = if family.uses_propensity() {
        Some(fitted.propensity()?.clone())
    } else {
        None
    };

    let mut theta = Vec::new();
    let mut labels = Vec::new();
    let mut blocks = Vec::new();
    let mut push_block = |kind, values: Vec<f64>, names: Vec<String>| {
        blocks.push(Block {
            kind,
            start: theta.len(),
            len: values.len(),
        });
        theta.extend(values);
        labels.extend(names);
    };
    // μ̂ values are filled in after the cached propensity pieces exist.
    push_block(
        BlockKind::Mu,
        vec![0.0; targets.len()],
        targets.iter().map(|t| t.label()).collect(),
    );
    for o in &outcomes {
        push_block(BlockKind::Beta, o.beta().to_vec(), o.param_labels());
    }
    if let Some(p) = propensity.as_ref().filter(|_| !fitted.propensity_known) {
        push_block(BlockKind::Gamma, p.params(), p.param_labels());
    }

    let (base_log_f, base_score): (Vec<f64>, Vec<Vec<f64>>) = match &propensity {
        Some(p) => study
            .groups()
            .par_iter()
            .map(|g| p.log_prob_and_score(g))
            .collect::<Vec<_>>()
            .into_iter()
            .unzip(),
        None => (Vec::new(), Vec::new()),
    };
    let mut stack = ThetaStack {
        family,
        targets,
        outcomes,
        outcome_of,
        propensity,
        engine: options.engine,
        theta,
        labels,
        blocks,
        base_log_f,
        base_score,
    };
    let g = stack.evaluate(study, &stack.theta.clone())?;
    for t in 0..stack.targets.len() {
        let col: Vec<f64> = g.iter().map(|row| row[t]).collect();
        stack.theta[t] = ordered_mean(&col);
    }
    Ok(stack)
}

impl ThetaStack {
    pub fn family(&self) -> Family {
        self.family
    }

    pub fn targets(&self) -> &[MuTarget] {
        &self.targets
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Position of a target's `mu` in `θ`.
    pub fn target_index(&self, target: MuTarget) -> Option<usize> {
        self.targets.iter().position(|t| t.same_as(target))
    }

    fn gamma_block(&self) -> Option<&Block> {
        self.blocks.iter().find(|b| b.kind == BlockKind::Gamma)
    }

    /// `G_i(θ)` for every group, in canonical order.
    pub fn evaluate(&self, study: &Study, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
        if theta.len() != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "theta of length {} for a {}-parameter stack",
                theta.len(),
                self.dim()
            )));
        }
        let gamma = self.gamma_block().map(|b| &theta[b.start..b.start + b.len]);
        let base_gamma = self
            .gamma_block()
            .map(|b| &self.theta[b.start..b.start + b.len]);
        let perturbed = match (gamma, base_gamma) {
            (Some(g), Some(b)) => g.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()),
            _ => false,
        };
        let prop: Option<Arc<PropensityModel>> = match (&self.propensity, gamma) {
            (Some(p), Some(g)) if perturbed => Some(Arc::new(p.with_params(g))),
            (p, _) => p.clone(),
        };
        let beta_blocks: Vec<&Block> = self
            .blocks
            .iter()
            .filter(|b| b.kind == BlockKind::Beta)
            .collect();
        let outcomes: Vec<OutcomeModel> = self
            .outcomes
            .iter()
            .zip(&beta_blocks)
            .map(|(o, b)| {
                let m = o.with_beta(&theta[b.start..b.start + b.len]);
                if perturbed {
                    m.with_propensity(prop.clone())
                } else {
                    m
                }
            })
            .collect();
        let nt = self.targets.len();
        let has_gamma = self.gamma_block().is_some();
        study
            .groups()
            .par_iter()
            .enumerate()
            .map(|(i, g)| {
                let (log_f, score) = match &prop {
                    Some(p) if perturbed => {
                        let (l, s) = p.log_prob_and_score(g);
                        (Some(l), s)
                    }
                    Some(_) => (Some(self.base_log_f[i]), self.base_score[i].clone()),
                    None => (None, Vec::new()),
                };
                let mut row = Vec::with_capacity(theta.len());
                for (t, &target) in self.targets.iter().enumerate() {
                    let out = outcomes.get(self.outcome_of[t]);
                    let v = group_value_with(self.family, g, i, target, log_f, out, self.engine)?;
                    row.push(v - theta[t]);
                }
                debug_assert_eq!(row.len(), nt);
                for (o, b) in outcomes.iter().zip(&beta_blocks) {
                    row.extend(o.estimating_function(g, &theta[b.start..b.start + b.len], log_f));
                }
                if has_gamma {
                    row.extend(score);
                }
                Ok(row)
            })
            .collect()
    }
}

fn column_means(g: &[Vec<f64>], p: usize) -> Vec<f64> {
    (0..p)
        .map(|c| ordered_mean(&g.iter().map(|r| r[c]).collect::<Vec<_>>()))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SandwichResult {
    pub labels: Vec<String>,
    pub theta: Vec<f64>,
    #[serde(skip)]
    pub u_hat: DMatrix<f64>,
    #[serde(skip)]
    pub v_hat: DMatrix<f64>,
    /// Covariance of `θ̂`, already scaled by `1/k`.
    #[serde(skip)]
    pub sigma: DMatrix<f64>,
    pub groups: usize,
    pub max_residual: f64,
    pub bread_condition: f64,
}

impl SandwichResult {
    pub fn variance(&self, index: usize) -> f64 {
        self.sigma[(index, index)]
    }
}

pub fn sandwich(stack: &ThetaStack, study: &Study) -> Result<SandwichResult> {
    sandwich_with_step(stack, study, 1.0)
}

/// As [`sandwich`], with the finite-difference step multiplied by `scale`.
pub fn sandwich_with_step(stack: &ThetaStack, study: &Study, scale: f64) -> Result<SandwichResult> {
    let k = study.num_groups();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "sandwich variance needs at least 2 groups, got {k}"
        )));
    }
    let p = stack.dim();
    let theta = stack.theta().to_vec();
    let g = stack.evaluate(study, &theta)?;
    let gbar = column_means(&g, p);
    let max_residual = gbar.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_residual.is_nan() || max_residual > RESIDUAL_HARD_LIMIT {
        return Err(Error::Contract(format!(
            "estimating functions not solved at theta-hat (max |mean G| = {max_residual:.3e})"
        )));
    }
    if max_residual > RESIDUAL_TOLERANCE {
        log::warn!("estimating-function residual {max_residual:.3e} above {RESIDUAL_TOLERANCE:e}");
    }

    let mut v = DMatrix::<f64>::zeros(p, p);
    for row in &g {
        let r = DVector::from_column_slice(row);
        v += &r * r.transpose();
    }
    v /= k as f64;
    let v = (&v + v.transpose()) * 0.5;

    let mut u = DMatrix::<f64>::zeros(p, p);
    for c in 0..p {
        let h = scale * f64::max(1e-5, 1e-5 * theta[c].abs());
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[c] += h;
        dn[c] -= h;
        let gu = column_means(&stack.evaluate(study, &up)?, p);
        let gd = column_means(&stack.evaluate(study, &dn)?, p);
        for r in 0..p {
            u[(r, c)] = -(gu[r] - gd[r]) / (2.0 * h);
        }
    }
    let bread_condition = linalg::condition_number(&u);
    let u_inv = linalg::inverse(&u, "sandwich bread matrix")?;
    let sigma = &u_inv * &v * u_inv.transpose() / k as f64;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok(SandwichResult {
        labels: stack.labels().to_vec(),
        theta,
        u_hat: u,
        v_hat: v,
        sigma,
        groups: k,
        max_residual,
        bread_condition,
    })
}

/// `τ Σ τᵀ`.
pub fn effect_variance(result: &SandwichResult, contrast: &[f64]) -> Result<f64> {
    let p = result.sigma.nrows();
    if contrast.len() != p {
        return Err(Error::InvalidArgument(format!(
            "contrast of length {} for a {p}-parameter covariance",
            contrast.len()
        )));
    }
    let t = DVector::from_column_slice(contrast);
    Ok((t.transpose() * &result.sigma * &t)[(0, 0)].max(0.0))
}

/// `τ` of an effect over a stack holding both of its targets.
pub fn effect_contrast(stack: &ThetaStack, request: &EffectRequest) -> Result<Vec<f64>> {
    let mut tau = vec![0.0; stack.dim()];
    for (target, sign) in effect_targets(request).into_iter().zip([1.0, -1.0]) {
        let i = stack
            .target_index(target)
            .ok_or_else(|| Error::Contract(format!("{} is not in the stack", target.label())))?;
        tau[i] += sign;
    }
    Ok(tau)
}

/// `estimate ± z_{(1+level)/2} sqrt(variance)`.
pub fn wald_ci(estimate: f64, variance: f64, level: f64) -> Result<(f64, f64)> {
    if variance.is_nan() || variance < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "negative variance {variance}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence level {level} outside (0,1)"
        )));
    }
    let z = Normal::standard().inverse_cdf(0.5 * (1.0 + level));
    let half = z * variance.sqrt();
    Ok((estimate - half, estimate + half))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectInference {
    pub family: Family,
    pub request: String,
    pub kind: crate::data::EffectKind,
    pub alpha1: f64,
    pub alpha0: f64,
    pub estimate: f64,
    pub variance: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

/// Point estimates and Wald intervals of several effects for one family,
/// from a single stack holding every target they need.
pub fn infer_effects(
    family: Family,
    study: &Study,
    fitted: &FittedModels,
    requests: &[EffectRequest],
    options: &EstimatorOptions,
    level: f64,
) -> Result<(ThetaStack, SandwichResult, Vec<EffectInference>)> {
    let stack = build_stack(family, study, fitted, &targets_for(requests), options)?;
    let result = sandwich(&stack, study)?;
    let mut out = Vec::with_capacity(requests.len());
    for r in requests {
        let tau = effect_contrast(&stack, r)?;
        let estimate: f64 = tau.iter().zip(stack.theta()).map(|(t, v)| t * v).sum();
        let variance = effect_variance(&result, &tau)?;
        let (lower, upper) = wald_ci(estimate, variance, level)?;
        out.push(EffectInference {
            family,
            request: format!("{}({},{})", r.kind, r.alpha1, r.alpha0),
            kind: r.kind,
            alpha1: r.alpha1.alpha(),
            alpha0: r.alpha0.alpha(),
            estimate,
            variance,
            se: variance.sqrt(),
            lower,
            upper,
            level,
        });
    }
    Ok((stack, result, out))
}
