//! Mixed-effects logistic propensity model
//! `logit P(A_ij = 1 | X_i, b_i) = x_ij·γ + b_i`, `b_i ~ N(0, σ_b²)`,
//! fitted by maximum likelihood with `b_i` integrated out by adaptive
//! Gauss–Hermite quadrature.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{GroupRecord, Study};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::linalg;
use crate::quadrature::{default_rule, log_marginal, GaussHermite, MarginalLik, DEFAULT_NODES};

/// `log σ_b` below this is reported as the `σ_b = 0` boundary.
const BOUNDARY_LOG_SIGMA: f64 = -8.0;
const DIVERGENCE_BOUND: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropensityOptions {
    /// Fit a plain logistic model (`σ_b = 0`).
    pub fix_sigma_zero: bool,
    /// Lower clamp for group probabilities, off by default.
    pub floor: Option<f64>,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub relative_change_tolerance: f64,
    pub nodes: usize,
}

impl Default for PropensityOptions {
    fn default() -> Self {
        PropensityOptions {
            fix_sigma_zero: false,
            floor: None,
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            relative_change_tolerance: 1e-10,
            nodes: DEFAULT_NODES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropensityFitInfo {
    pub converged: bool,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub gradient_max_norm: f64,
    pub sigma_at_boundary: bool,
    /// Log-likelihood after each accepted step.
    pub trace: Vec<f64>,
    /// Inverse observed information of `(γ, log σ_b)`.
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupLikelihood {
    pub log_prob: f64,
    pub quadrature_nodes_used: usize,
}

#[derive(Debug, Clone)]
pub struct PropensityModel {
    feature_map: Arc<FeatureMap>,
    fixed: Vec<f64>,
    log_sigma: Option<f64>,
    floor: Option<f64>,
    rule: Arc<GaussHermite>,
    pub fit_info: PropensityFitInfo,
}

impl PropensityModel {
    /// A model with given parameters, marked converged. Useful for known
    /// propensities and tests.
    pub fn from_parameters(
        feature_map: FeatureMap,
        fixed: Vec<f64>,
        log_sigma: Option<f64>,
    ) -> Result<Self> {
        if feature_map.uses_treatment() {
            return Err(Error::FeatureMap(
                "propensity feature maps may not contain treatment terms".into(),
            ));
        }
        if fixed.len() != feature_map.dim() {
            return Err(Error::InvalidArgument(format!(
                "{} fixed effects for a {}-term map",
                fixed.len(),
                feature_map.dim()
            )));
        }
        Ok(PropensityModel {
            feature_map: Arc::new(feature_map),
            fixed,
            log_sigma,
            floor: None,
            rule: Arc::new(default_rule().clone()),
            fit_info: PropensityFitInfo {
                converged: true,
                log_likelihood: f64::NAN,
                iterations: 0,
                gradient_max_norm: 0.0,
                sigma_at_boundary: false,
                trace: Vec::new(),
                covariance: Vec::new(),
            },
        })
    }

    pub fn with_floor(mut self, floor: Option<f64>) -> Self {
        self.floor = floor;
        self
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.feature_map
    }

    pub fn fixed_effects(&self) -> &[f64] {
        &self.fixed
    }

    pub fn log_sigma(&self) -> Option<f64> {
        self.log_sigma
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.map_or(0.0, f64::exp)
    }

    pub fn floor(&self) -> Option<f64> {
        self.floor
    }

    pub fn n_params(&self) -> usize {
        self.fixed.len() + self.log_sigma.is_some() as usize
    }

    pub fn param_labels(&self) -> Vec<String> {
        let mut l: Vec<String> = self
            .feature_map
            .labels()
            .into_iter()
            .map(|t| format!("gamma[{t}]"))
            .collect();
        if self.log_sigma.is_some() {
            l.push("log_sigma_b".into());
        }
        l
    }

    /// `(γ, log σ_b)` flattened, `log σ_b` omitted when `σ_b` is fixed at 0.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.fixed.clone();
        p.extend(self.log_sigma);
        p
    }

    pub fn with_params(&self, params: &[f64]) -> PropensityModel {
        let q = self.fixed.len();
        let mut m = self.clone();
        m.fixed.copy_from_slice(&params[..q]);
        if m.log_sigma.is_some() {
            m.log_sigma = Some(params[q]);
        }
        m
    }

    /// Stable fingerprint of the parameter values.
    pub fn fingerprint(&self) -> u64 {
        let bits: Vec<u64> = self.params().iter().map(|v| v.to_bits()).collect();
        crate::policy::derive_seed(&bits)
    }

    pub fn eta(&self, group: &GroupRecord) -> Vec<f64> {
        let mut row = vec![0.0; self.fixed.len()];
        (0..group.size())
            .map(|j| {
                self.feature_map
                    .row_into(group, j, &group.treatments, &mut row);
                row.iter().zip(&self.fixed).map(|(x, g)| x * g).sum()
            })
            .collect()
    }

    fn clamp(&self, log_prob: f64) -> f64 {
        match self.floor {
            Some(fl) if log_prob < fl.ln() => {
                log::warn!(
                    "propensity {:.3e} clamped at floor {:.3e}",
                    log_prob.exp(),
                    fl
                );
                fl.ln()
            }
            _ => log_prob,
        }
    }

    /// `log f(t | X_i)` for an arbitrary treatment vector, using precomputed
    /// linear predictors.
    pub fn log_prob_with_eta(&self, eta: &[f64], t: &[u8]) -> f64 {
        let l = log_marginal(eta, t, self.sigma(), &self.rule, false);
        self.clamp(l.log_prob)
    }

    pub fn log_prob_vector(&self, group: &GroupRecord, t: &[u8]) -> Result<f64> {
        if t.len() != group.size() {
            return Err(Error::InvalidArgument(format!(
                "treatment vector of length {} for group of size {}",
                t.len(),
                group.size()
            )));
        }
        Ok(self.log_prob_with_eta(&self.eta(group), t))
    }

    /// `f(A_i | X_i; γ)` for the observed treatments.
    pub fn group_prob(&self, group: &GroupRecord) -> GroupLikelihood {
        let l = log_marginal(
            &self.eta(group),
            &group.treatments,
            self.sigma(),
            &self.rule,
            false,
        );
        GroupLikelihood {
            log_prob: self.clamp(l.log_prob),
            quadrature_nodes_used: l.nodes_used,
        }
    }

    /// `f(a, A_i(-j) | X_i; γ)`: observed treatments with member `j` set to `a`.
    pub fn group_prob_override(
        &self,
        group: &GroupRecord,
        j: usize,
        a: u8,
    ) -> Result<GroupLikelihood> {
        if j >= group.size() {
            return Err(Error::IndexOutOfRange {
                index: j,
                len: group.size(),
            });
        }
        let mut t = group.treatments.clone();
        t[j] = a;
        let l = log_marginal(&self.eta(group), &t, self.sigma(), &self.rule, false);
        Ok(GroupLikelihood {
            log_prob: self.clamp(l.log_prob),
            quadrature_nodes_used: l.nodes_used,
        })
    }

    /// Observed-treatment log probability (floor applied) together with the
    /// group's score `∂ log f(A_i|X_i) / ∂(γ, log σ_b)` (floor not applied).
    pub fn log_prob_and_score(&self, group: &GroupRecord) -> (f64, Vec<f64>) {
        let l = log_marginal(
            &self.eta(group),
            &group.treatments,
            self.sigma(),
            &self.rule,
            true,
        );
        let score = self.score_from(group, &l);
        (self.clamp(l.log_prob), score)
    }

    fn score_from(&self, group: &GroupRecord, l: &MarginalLik) -> Vec<f64> {
        let q = self.fixed.len();
        let mut s = vec![0.0; self.n_params()];
        let mut row = vec![0.0; q];
        for j in 0..group.size() {
            self.feature_map
                .row_into(group, j, &group.treatments, &mut row);
            for c in 0..q {
                s[c] += row[c] * l.d_eta[j];
            }
        }
        if self.log_sigma.is_some() {
            s[q] = l.d_log_sigma;
        }
        s
    }
}

/// Per-group estimating function of the propensity parameters: the score of
/// the integrated log-likelihood, evaluated by quadrature.
pub fn propensity_score_equations(model: &PropensityModel, group: &GroupRecord) -> Vec<f64> {
    model.log_prob_and_score(group).1
}

struct Objective<'a> {
    designs: Vec<DMatrix<f64>>,
    groups: &'a [GroupRecord],
    rule: &'a GaussHermite,
    q: usize,
    with_sigma: bool,
}

impl Objective<'_> {
    fn eval(&self, theta: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let gamma = DVector::from_column_slice(&theta[..self.q]);
        let sigma = if self.with_sigma {
            theta[self.q].exp()
        } else {
            0.0
        };
        let mut ll = 0.0;
        let mut grad = vec![0.0; theta.len()];
        for (x, g) in self.designs.iter().zip(self.groups) {
            let eta = x * &gamma;
            let l = log_marginal(eta.as_slice(), &g.treatments, sigma, self.rule, want_grad);
            ll += l.log_prob;
            if want_grad {
                for (j, d) in l.d_eta.iter().enumerate() {
                    for c in 0..self.q {
                        grad[c] += x[(j, c)] * d;
                    }
                }
                if self.with_sigma {
                    grad[self.q] += l.d_log_sigma;
                }
            }
        }
        (ll, grad)
    }

    fn hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        let p = theta.len();
        let mut h = DMatrix::zeros(p, p);
        let mut t = theta.to_vec();
        for c in 0..p {
            let step = 1e-4 * theta[c].abs().max(1.0);
            t[c] = theta[c] + step;
            let gp = self.eval(&t, true).1;
            t[c] = theta[c] - step;
            let gm = self.eval(&t, true).1;
            t[c] = theta[c];
            for r in 0..p {
                h[(r, c)] = (gp[r] - gm[r]) / (2.0 * step);
            }
        }
        (&h + h.transpose()) * 0.5
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct NewtonOutcome {
    theta: Vec<f64>,
    ll: f64,
    grad_norm: f64,
    iterations: usize,
    trace: Vec<f64>,
    neg_hessian: DMatrix<f64>,
}

/// Damped Newton ascent with a finite-difference Hessian of the analytic
/// gradient and a backtracking line search.
fn maximize(
    obj: &Objective<'_>,
    start: Vec<f64>,
    opts: &PropensityOptions,
) -> Result<NewtonOutcome> {
    let mut theta = start;
    let (mut ll, mut grad) = obj.eval(&theta, true);
    let mut trace = vec![ll];
    let mut last_change = 0.0f64;
    for it in 0..opts.max_iterations {
        let gnorm = max_abs(&grad);
        if !ll.is_finite() {
            return Err(Error::Fit("log-likelihood became non-finite".into()));
        }
        if gnorm < opts.gradient_tolerance && last_change < opts.relative_change_tolerance {
            let neg_hessian = -obj.hessian(&theta);
            return Ok(NewtonOutcome {
                theta,
                ll,
                grad_norm: gnorm,
                iterations: it,
                trace,
                neg_hessian,
            });
        }
        if max_abs(&theta) > DIVERGENCE_BOUND {
            return Err(Error::Fit(format!(
                "parameters diverging (|θ| > {DIVERGENCE_BOUND}) after {it} iterations, \
                 likely separation; trace tail {:?}",
                &trace[trace.len().saturating_sub(5)..]
            )));
        }
        let neg_h = -obj.hessian(&theta);
        let g = DVector::from_column_slice(&grad);
        let scale = neg_h.diagonal().iter().fold(1e-8f64, |m, v| m.max(v.abs()));
        let mut lambda = 0.0;
        let mut moved = false;
        for _ in 0..30 {
            let mut m = neg_h.clone();
            for d in 0..m.nrows() {
                m[(d, d)] += lambda;
            }
            let dir = match m.cholesky() {
                Some(ch) => ch.solve(&g),
                None => {
                    lambda = if lambda == 0.0 {
                        1e-6 * scale
                    } else {
                        lambda * 10.0
                    };
                    continue;
                }
            };
            let mut t = 1.0;
            for _ in 0..40 {
                let cand: Vec<f64> = theta
                    .iter()
                    .zip(dir.iter())
                    .map(|(a, d)| a + t * d)
                    .collect();
                let (cll, cgrad) = obj.eval(&cand, true);
                if cll.is_finite() && cll >= ll - 1e-12 * ll.abs() {
                    last_change = (cll - ll).abs() / ll.abs().max(1.0);
                    theta = cand;
                    ll = cll;
                    grad = cgrad;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if moved {
                break;
            }
            lambda = if lambda == 0.0 {
                1e-6 * scale
            } else {
                lambda * 10.0
            };
        }
        if !moved {
            return Err(Error::Fit(format!(
                "line search failed at iteration {it}; gradient max-norm {gnorm:.3e}; \
                 trace tail {:?}",
                &trace[trace.len().saturating_sub(5)..]
            )));
        }
        trace.push(ll);
    }
    Err(Error::Fit(format!(
        "no convergence after {} iterations; gradient max-norm {:.3e}; trace tail {:?}",
        opts.max_iterations,
        max_abs(&grad),
        &trace[trace.len().saturating_sub(5)..]
    )))
}

/// Maximum-likelihood fit of the propensity model.
pub fn fit_propensity(
    study: &Study,
    feature_map: &FeatureMap,
    opts: &PropensityOptions,
) -> Result<PropensityModel> {
    if feature_map.uses_treatment() {
        return Err(Error::FeatureMap(
            "propensity feature maps may not contain treatment terms".into(),
        ));
    }
    let groups = study.groups();
    let q = feature_map.dim();
    let n_total = study.num_individuals();
    let treated: usize = groups
        .iter()
        .map(|g| g.treatments.iter().filter(|&&a| a == 1).count())
        .sum();
    if treated == 0 || treated == n_total {
        return Err(Error::Fit(format!(
            "all {n_total} treatments equal {}; the likelihood has no interior maximum",
            (treated > 0) as u8
        )));
    }
    let designs: Vec<DMatrix<f64>> = groups
        .iter()
        .map(|g| {
            let mut x = DMatrix::zeros(g.size(), q);
            for j in 0..g.size() {
                let r = feature_map.row(g, j, &g.treatments);
                for c in 0..q {
                    x[(j, c)] = r[c];
                }
            }
            x
        })
        .collect();
    let mut pooled = DMatrix::zeros(n_total, q);
    let mut r0 = 0;
    for x in &designs {
        pooled.view_mut((r0, 0), (x.nrows(), q)).copy_from(x);
        r0 += x.nrows();
    }
    linalg::check_full_rank(&pooled, &feature_map.labels())?;

    let rule = GaussHermite::new(opts.nodes);
    let mut obj = Objective {
        designs,
        groups,
        rule: &rule,
        q,
        with_sigma: false,
    };
    let mut start = vec![0.0; q];
    let p_bar = treated as f64 / n_total as f64;
    start[feature_map.intercept_index()] = (p_bar / (1.0 - p_bar)).ln();
    let mut out = maximize(&obj, start, opts)?;
    if !opts.fix_sigma_zero {
        obj.with_sigma = true;
        let mut s = out.theta.clone();
        s.push(0.5f64.ln());
        out = maximize(&obj, s, opts)?;
    }
    let cov = linalg::inverse(&out.neg_hessian, "propensity information matrix")
        .map(|m| {
            (0..m.nrows())
                .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
                .collect()
        })
        .unwrap_or_default();
    let log_sigma = if opts.fix_sigma_zero {
        None
    } else {
        Some(out.theta[q])
    };
    Ok(PropensityModel {
        feature_map: Arc::new(feature_map.clone()),
        fixed: out.theta[..q].to_vec(),
        log_sigma,
        floor: opts.floor,
        rule: Arc::new(rule.clone()),
        fit_info: PropensityFitInfo {
            converged: true,
            log_likelihood: out.ll,
            iterations: out.iterations,
            gradient_max_norm: out.grad_norm,
            sigma_at_boundary: log_sigma.is_some_and(|l| l < BOUNDARY_LOG_SIGMA),
            trace: out.trace,
            covariance: cov,
        },
    })
}
