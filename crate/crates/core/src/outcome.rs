//! Linear outcome regression `m_ij(a_i, X_i; β) = L_ij β` fitted by ordinary
//! least squares, by propensity-weighted least squares, or with the policy /
//! propensity ratio as an extra regressor.
//!
//! The weighted and augmented fits are specific to one target `(a, α)` (or
//! `α` for the marginal extension). For a conditional target only members
//! with `A_ij = a` enter, and the map is specialized with the own-treatment
//! factor replaced by `a`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::data::{GroupRecord, Study};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::linalg;
use crate::policy::{pi_full, pi_minus, MeanFunction, MuTarget, Slot};
use crate::propensity::PropensityModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum OutcomeMode {
    Ols,
    Wls(MuTarget),
    Picov(MuTarget),
}

impl OutcomeMode {
    pub fn target(self) -> Option<MuTarget> {
        match self {
            OutcomeMode::Ols => None,
            OutcomeMode::Wls(t) | OutcomeMode::Picov(t) => Some(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutcomeFitInfo {
    pub n_used: usize,
    /// The ratio regressor was collinear with the base design and dropped
    /// (its coefficient held at 0).
    pub ratio_dropped: bool,
}

#[derive(Debug, Clone)]
pub struct OutcomeModel {
    base_map: Arc<FeatureMap>,
    map: Arc<FeatureMap>,
    beta: Vec<f64>,
    mode: OutcomeMode,
    propensity: Option<Arc<PropensityModel>>,
    pub fit_info: OutcomeFitInfo,
}

impl OutcomeModel {
    /// An OLS-mode model with given coefficients.
    pub fn from_coefficients(map: FeatureMap, beta: Vec<f64>) -> Result<Self> {
        if beta.len() != map.dim() {
            return Err(Error::InvalidArgument(format!(
                "{} coefficients for a {}-term map",
                beta.len(),
                map.dim()
            )));
        }
        let map = Arc::new(map);
        Ok(OutcomeModel {
            base_map: map.clone(),
            map,
            beta,
            mode: OutcomeMode::Ols,
            propensity: None,
            fit_info: OutcomeFitInfo {
                n_used: 0,
                ratio_dropped: false,
            },
        })
    }

    pub fn mode(&self) -> OutcomeMode {
        self.mode
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Map of the fitted regression (specialized for conditional targets).
    pub fn feature_map(&self) -> &FeatureMap {
        &self.map
    }

    pub fn base_map(&self) -> &FeatureMap {
        &self.base_map
    }

    pub fn propensity(&self) -> Option<&PropensityModel> {
        self.propensity.as_deref()
    }

    pub fn n_params(&self) -> usize {
        self.beta.len()
    }

    /// Index of the ratio coefficient for the augmented mode.
    pub fn ratio_index(&self) -> Option<usize> {
        matches!(self.mode, OutcomeMode::Picov(_)).then_some(self.map.dim())
    }

    pub fn param_labels(&self) -> Vec<String> {
        let tag = match self.mode {
            OutcomeMode::Ols => String::new(),
            OutcomeMode::Wls(t) | OutcomeMode::Picov(t) => format!("@{}", t.label()),
        };
        let mut l: Vec<String> = self
            .map
            .labels()
            .into_iter()
            .map(|s| format!("beta{tag}[{s}]"))
            .collect();
        if self.ratio_index().is_some() {
            l.push(format!("beta{tag}[ratio]"));
        }
        l
    }

    pub fn with_beta(&self, beta: &[f64]) -> OutcomeModel {
        let mut m = self.clone();
        m.beta.copy_from_slice(beta);
        m
    }

    pub fn with_propensity(&self, prop: Option<Arc<PropensityModel>>) -> OutcomeModel {
        let mut m = self.clone();
        if m.propensity.is_some() {
            m.propensity = prop;
        }
        m
    }

    /// Refuses use of a weighted/augmented model for a different target.
    pub fn check_target(&self, target: MuTarget) -> Result<()> {
        match self.mode.target() {
            Some(t) if !t.same_as(target) => Err(Error::Contract(format!(
                "outcome model fitted for {} used for {}",
                t.label(),
                target.label()
            ))),
            _ => Ok(()),
        }
    }

    fn stratum(&self) -> Option<u8> {
        match self.mode.target() {
            Some(MuTarget::Conditional { a, .. }) => Some(a),
            _ => None,
        }
    }

    /// Policy/propensity ratio for member `j` under vector `t`, given
    /// `log f` of the vector whose probability is needed.
    fn ratio(&self, t: &[u8], j: usize, log_f: f64) -> f64 {
        match self.mode.target() {
            Some(MuTarget::Conditional { alpha, .. }) => {
                (pi_minus(t, j, alpha.alpha()).unwrap().log_value - log_f).exp()
            }
            Some(MuTarget::Marginal { alpha }) => {
                (pi_full(t, alpha.alpha()).log_value - log_f).exp()
            }
            None => 0.0,
        }
    }

    /// Regressor rows and weights of one group's observed members as they
    /// enter this model's estimating equation. `log_f_obs` is
    /// `log f(A_i | X_i)` under the propensity in use.
    fn observed_design(
        &self,
        group: &GroupRecord,
        log_f_obs: Option<f64>,
    ) -> Vec<(usize, Vec<f64>, f64)> {
        let n = group.size();
        let mut out = Vec::with_capacity(n);
        for j in 0..n {
            if let Some(a) = self.stratum() {
                if group.treatments[j] != a {
                    continue;
                }
            }
            let mut row = self.map.row(group, j, &group.treatments);
            let w = match self.mode {
                OutcomeMode::Ols => 1.0,
                OutcomeMode::Wls(_) => {
                    self.ratio(&group.treatments, j, log_f_obs.unwrap()) / n as f64
                }
                OutcomeMode::Picov(_) => {
                    row.push(self.ratio(&group.treatments, j, log_f_obs.unwrap()));
                    1.0 / n as f64
                }
            };
            out.push((j, row, w));
        }
        out
    }

    /// Per-group estimating function of `β` at the supplied coefficients.
    pub fn estimating_function(
        &self,
        group: &GroupRecord,
        beta: &[f64],
        log_f_obs: Option<f64>,
    ) -> Vec<f64> {
        let mut g = vec![0.0; beta.len()];
        for (j, row, w) in self.observed_design(group, log_f_obs) {
            let fit: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum();
            let r = w * (group.outcomes[j] - fit);
            for (gc, x) in g.iter_mut().zip(&row) {
                *gc += x * r;
            }
        }
        g
    }

    /// `Σ_i Σ_j w_ij (Y_ij - m_ij)` with the weight of the doubly robust
    /// correction, and the matching scale `Σ |w_ij Y_ij|`.
    pub fn weighted_residual_sum(&self, study: &Study) -> Result<(f64, f64)> {
        let target = self.mode.target().ok_or_else(|| {
            Error::Contract("first-order check needs a weighted or augmented model".into())
        })?;
        let prop = self.propensity.as_deref();
        let mut sum = 0.0;
        let mut scale = 0.0;
        for g in study.groups() {
            let log_f = match prop {
                Some(p) => p.group_prob(g).log_prob,
                None => return Err(Error::Contract("model carries no propensity".into())),
            };
            let pred = self.bind(g);
            for j in 0..g.size() {
                if let MuTarget::Conditional { a, .. } = target {
                    if g.treatments[j] != a {
                        continue;
                    }
                }
                let w = match target {
                    MuTarget::Conditional { alpha, .. } => {
                        (pi_minus(&g.treatments, j, alpha.alpha())?.log_value - log_f).exp()
                    }
                    MuTarget::Marginal { alpha } => {
                        (pi_full(&g.treatments, alpha.alpha()).log_value - log_f).exp()
                    }
                } / g.size() as f64;
                let r = g.outcomes[j] - pred.mean_at(&g.treatments, j)?;
                sum += w * r;
                scale += (w * g.outcomes[j]).abs();
            }
        }
        Ok((sum, scale))
    }

    /// `m_ij` at treatment vector `t`.
    pub fn predict(&self, group: &GroupRecord, t: &[u8], j: usize) -> Result<f64> {
        self.map.check_group(group)?;
        self.bind(group).mean_at(t, j)
    }

    /// Binds the model to a group; the result caches propensity evaluations
    /// of the augmented mode across calls.
    pub fn bind<'a>(&'a self, group: &'a GroupRecord) -> GroupPredictor<'a> {
        GroupPredictor {
            model: self,
            group,
            eta: self.propensity.as_ref().map(|p| p.eta(group)),
            log_f_cache: RefCell::new(HashMap::new()),
            row: RefCell::new(vec![0.0; self.map.dim()]),
        }
    }
}

/// An outcome model bound to one group.
pub struct GroupPredictor<'a> {
    model: &'a OutcomeModel,
    group: &'a GroupRecord,
    eta: Option<Vec<f64>>,
    log_f_cache: RefCell<HashMap<Vec<u8>, f64>>,
    row: RefCell<Vec<f64>>,
}

impl GroupPredictor<'_> {
    fn log_f(&self, t: &[u8]) -> f64 {
        if let Some(v) = self.log_f_cache.borrow().get(t) {
            return *v;
        }
        let p = self.model.propensity.as_ref().unwrap();
        let v = p.log_prob_with_eta(self.eta.as_ref().unwrap(), t);
        self.log_f_cache.borrow_mut().insert(t.to_vec(), v);
        v
    }
}

impl MeanFunction for GroupPredictor<'_> {
    fn group_size(&self) -> usize {
        self.group.size()
    }

    fn mean_at(&self, t: &[u8], j: usize) -> Result<f64> {
        let n = self.group.size();
        if t.len() != n {
            return Err(Error::InvalidArgument(format!(
                "treatment vector of length {} for group of size {n}",
                t.len()
            )));
        }
        if j >= n {
            return Err(Error::IndexOutOfRange { index: j, len: n });
        }
        let m = self.model;
        let mut row = self.row.borrow_mut();
        m.map.row_into(self.group, j, t, &mut row);
        let mut v: f64 = row.iter().zip(&m.beta).map(|(x, b)| x * b).sum();
        if let OutcomeMode::Picov(target) = m.mode {
            let coef = m.beta[m.map.dim()];
            if coef != 0.0 {
                let log_f = match target {
                    MuTarget::Conditional { a, .. } if t[j] != a => {
                        let mut tt = t.to_vec();
                        tt[j] = a;
                        self.log_f(&tt)
                    }
                    _ => self.log_f(t),
                };
                v += coef * m.ratio(t, j, log_f);
            }
        }
        Ok(v)
    }

    fn policy_mean(&self, j: usize, slot: Slot, alpha: f64) -> Option<f64> {
        let m = self.model;
        if matches!(m.mode, OutcomeMode::Picov(_)) || !m.map.affine_for(slot) {
            return None;
        }
        let mut row = self.row.borrow_mut();
        m.map
            .expected_row_into(self.group, j, slot, alpha, &mut row);
        Some(row.iter().zip(&m.beta).map(|(x, b)| x * b).sum())
    }
}

fn check_study(study: &Study, map: &FeatureMap) -> Result<()> {
    for g in study.groups() {
        map.check_group(g)?;
    }
    Ok(())
}

fn collect(
    model: &OutcomeModel,
    study: &Study,
    log_f: Option<&[f64]>,
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    for (i, g) in study.groups().iter().enumerate() {
        for (j, row, w) in model.observed_design(g, log_f.map(|l| l[i])) {
            rows.push(row);
            ys.push(g.outcomes[j]);
            ws.push(w);
        }
    }
    (rows, ys, ws)
}

fn solve_rows(
    rows: &[Vec<f64>],
    ys: &[f64],
    ws: Option<&[f64]>,
    p: usize,
    labels: &[String],
) -> Result<Vec<f64>> {
    let x = DMatrix::from_fn(rows.len(), p, |r, c| rows[r][c]);
    linalg::least_squares(&x, ys, ws, labels)
}

fn solve(model: &OutcomeModel, study: &Study, log_f: Option<&[f64]>) -> Result<(Vec<f64>, usize)> {
    let (rows, ys, ws) = collect(model, study, log_f);
    if rows.is_empty() {
        return Err(Error::EmptyStratum(model.stratum().unwrap_or(0)));
    }
    let mut labels = model.map.labels();
    labels.push("ratio".into());
    let weights = (!matches!(model.mode, OutcomeMode::Ols)).then_some(ws.as_slice());
    let beta = solve_rows(&rows, &ys, weights, rows[0].len(), &labels)?;
    Ok((beta, rows.len()))
}

/// Least squares over every member of every group.
pub fn fit_ols(study: &Study, map: &FeatureMap) -> Result<OutcomeModel> {
    check_study(study, map)?;
    let mut model = OutcomeModel::from_coefficients(map.clone(), vec![0.0; map.dim()])?;
    let (beta, n) = solve(&model, study, None)?;
    model.beta = beta;
    model.fit_info.n_used = n;
    Ok(model)
}

fn stratified(map: &FeatureMap, target: MuTarget) -> FeatureMap {
    match target {
        MuTarget::Conditional { a, .. } => map.specialize_own(a),
        MuTarget::Marginal { .. } => map.clone(),
    }
}

fn observed_log_f(study: &Study, prop: &PropensityModel) -> Vec<f64> {
    study
        .groups()
        .iter()
        .map(|g| prop.group_prob(g).log_prob)
        .collect()
}

fn require_stratum(study: &Study, target: MuTarget) -> Result<()> {
    if let MuTarget::Conditional { a, .. } = target {
        if !study.groups().iter().any(|g| g.treatments.contains(&a)) {
            return Err(Error::EmptyStratum(a));
        }
    }
    Ok(())
}

/// Weighted least squares with weight `π(A_i(-j); α) / (N_i f(A_i | X_i))`
/// on members with `A_ij = a` (`π(A_i; α)` on everyone for a marginal
/// target).
pub fn fit_wls(
    study: &Study,
    map: &FeatureMap,
    prop: &PropensityModel,
    target: MuTarget,
) -> Result<OutcomeModel> {
    check_study(study, map)?;
    require_stratum(study, target)?;
    let rmap = stratified(map, target);
    let mut model = OutcomeModel {
        base_map: Arc::new(map.clone()),
        beta: vec![0.0; rmap.dim()],
        map: Arc::new(rmap),
        mode: OutcomeMode::Wls(target),
        propensity: Some(Arc::new(prop.clone())),
        fit_info: OutcomeFitInfo {
            n_used: 0,
            ratio_dropped: false,
        },
    };
    let log_f = observed_log_f(study, prop);
    let (beta, n) = solve(&model, study, Some(&log_f))?;
    model.beta = beta;
    model.fit_info.n_used = n;
    Ok(model)
}

/// Least squares on the target's members with the ratio
/// `π(A_i(-j); α) / f(a, A_i(-j) | X_i)` appended as a regressor; members
/// are weighted `1 / N_i` so that unequal group sizes still give the
/// doubly robust identity.
pub fn fit_picov(
    study: &Study,
    map: &FeatureMap,
    prop: &PropensityModel,
    target: MuTarget,
) -> Result<OutcomeModel> {
    check_study(study, map)?;
    require_stratum(study, target)?;
    let rmap = stratified(map, target);
    let mut model = OutcomeModel {
        base_map: Arc::new(map.clone()),
        beta: vec![0.0; rmap.dim() + 1],
        map: Arc::new(rmap),
        mode: OutcomeMode::Picov(target),
        propensity: Some(Arc::new(prop.clone())),
        fit_info: OutcomeFitInfo {
            n_used: 0,
            ratio_dropped: false,
        },
    };
    let log_f = observed_log_f(study, prop);
    match solve(&model, study, Some(&log_f)) {
        Ok((beta, n)) => {
            model.beta = beta;
            model.fit_info.n_used = n;
        }
        Err(Error::SingularDesign(msg)) => {
            let (rows, ys, ws) = collect(&model, study, Some(&log_f));
            let p = model.map.dim();
            let base: Vec<Vec<f64>> = rows.iter().map(|r| r[..p].to_vec()).collect();
            // A deficient base design still errors here.
            let mut beta = solve_rows(&base, &ys, Some(&ws), p, &model.map.labels())?;
            log::warn!("ratio regressor collinear with the base design ({msg}); dropped");
            beta.push(0.0);
            model.beta = beta;
            model.fit_info.n_used = rows.len();
            model.fit_info.ratio_dropped = true;
        }
        Err(e) => return Err(e),
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Policy;
    use crate::policy::{policy_average_exact, DEFAULT_EXACT_ENUM_LIMIT};
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn names() -> Vec<String> {
        vec!["x".into()]
    }

    /// Small deterministic study with unequal group sizes.
    fn study(noise: bool) -> Study {
        let mut groups = Vec::new();
        for i in 0..12 {
            let n = 2 + i % 3;
            let mut xs = Vec::new();
            let mut ts = Vec::new();
            let mut ys = Vec::new();
            for j in 0..n {
                let x = ((i * 7 + j * 3) as f64 * 0.61).sin();
                let t = ((i + 2 * j) % 3 != 0) as u8;
                xs.push(vec![x]);
                ts.push(t);
            }
            let prop = ts.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            for j in 0..n {
                let e = if noise {
                    ((i * 13 + j * 5) as f64).cos() * 0.3
                } else {
                    0.0
                };
                ys.push(1.0 + 2.0 * ts[j] as f64 + 0.5 * prop - xs[j][0] + e);
            }
            groups.push(GroupRecord::new(format!("g{i:02}"), xs, ts, ys));
        }
        Study::new(groups, names())
    }

    fn map() -> FeatureMap {
        FeatureMap::parse(&["1", "A", "prop", "x"], &names()).unwrap()
    }

    fn propensity() -> PropensityModel {
        let m = FeatureMap::parse(&["1", "x"], &names()).unwrap();
        PropensityModel::from_parameters(m, vec![0.3, -0.4], Some(0.5f64.ln())).unwrap()
    }

    fn target(a: u8, alpha: f64) -> MuTarget {
        MuTarget::Conditional {
            a,
            alpha: Policy::new(alpha).unwrap(),
        }
    }

    #[test]
    fn ols_recovers_noise_free_coefficients() {
        let m = fit_ols(&study(false), &map()).unwrap();
        for (b, t) in m.beta().iter().zip([1.0, 2.0, 0.5, -1.0]) {
            assert_relative_eq!(*b, t, epsilon = 1e-10);
        }
    }

    #[test]
    fn wls_matches_normal_equations() {
        let s = study(true);
        let p = propensity();
        let alpha = 0.4;
        let m = fit_wls(&s, &map(), &p, target(1, alpha)).unwrap();
        // independent oracle: explicit normal equations on (1, prop, x)
        let mut xtx = nalgebra::DMatrix::<f64>::zeros(3, 3);
        let mut xty = DVector::<f64>::zeros(3);
        for g in s.groups() {
            let n = g.size() as f64;
            let f = p.log_prob_vector(g, &g.treatments).unwrap().exp();
            let prop = g.treatments.iter().map(|&v| v as f64).sum::<f64>() / n;
            for j in 0..g.size() {
                if g.treatments[j] != 1 {
                    continue;
                }
                let others = g.treatments.iter().map(|&v| v as i32).sum::<i32>() - 1;
                let pi = alpha.powi(others) * (1.0 - alpha).powi(g.size() as i32 - 1 - others);
                let w = pi / f / n;
                let r = DVector::from_vec(vec![1.0, prop, g.covariates[j][0]]);
                xtx += w * &r * r.transpose();
                xty += w * g.outcomes[j] * r;
            }
        }
        let beta = xtx.cholesky().unwrap().solve(&xty);
        assert_eq!(m.beta().len(), 3);
        for c in 0..3 {
            assert_relative_eq!(m.beta()[c], beta[c], epsilon = 1e-9);
        }
    }

    #[test]
    fn weighted_fits_zero_the_weighted_residual() {
        let s = study(true);
        let p = propensity();
        for a in [0u8, 1] {
            for m in [
                fit_wls(&s, &map(), &p, target(a, 0.3)).unwrap(),
                fit_picov(&s, &map(), &p, target(a, 0.3)).unwrap(),
            ] {
                let (sum, scale) = m.weighted_residual_sum(&s).unwrap();
                assert!(sum.abs() < 1e-10 * scale.max(1.0), "{sum} vs {scale}");
            }
        }
    }

    #[test]
    fn constant_ratio_is_dropped() {
        // σ = 0, γ = 0 and α = 0.5 make π/f = 2 for every member
        let s = study(true);
        let pm = FeatureMap::parse(&["1"], &names()).unwrap();
        let p = PropensityModel::from_parameters(pm, vec![0.0], None).unwrap();
        let m = fit_picov(&s, &map(), &p, target(1, 0.5)).unwrap();
        assert!(m.fit_info.ratio_dropped);
        assert_eq!(*m.beta().last().unwrap(), 0.0);
    }

    #[test]
    fn closed_form_policy_mean_matches_enumeration() {
        let s = study(true);
        let m = fit_ols(&s, &map()).unwrap();
        let g = &s.groups()[2];
        let pred = m.bind(g);
        for slot in [Slot::Conditional(0), Slot::Conditional(1), Slot::Marginal] {
            let closed = pred.policy_mean(1, slot, 0.35).unwrap();
            let mut brute = 0.0;
            let n = g.size();
            for mask in 0u32..(1 << n) {
                let t: Vec<u8> = (0..n).map(|k| ((mask >> k) & 1) as u8).collect();
                if let Slot::Conditional(a) = slot {
                    if t[1] != a {
                        continue;
                    }
                }
                let w = match slot {
                    Slot::Conditional(_) => pi_minus(&t, 1, 0.35).unwrap().value(),
                    Slot::Marginal => pi_full(&t, 0.35).value(),
                };
                brute += w * m.predict(g, &t, 1).unwrap();
            }
            assert_relative_eq!(closed, brute, epsilon = 1e-12);
        }
    }

    #[test]
    fn augmented_model_is_enumerated() {
        let s = study(true);
        let m = fit_picov(&s, &map(), &propensity(), target(1, 0.3)).unwrap();
        let g = &s.groups()[1];
        let pred = m.bind(g);
        assert!(pred.policy_mean(0, Slot::Conditional(1), 0.3).is_none());
        let v = policy_average_exact(
            &pred,
            0,
            Slot::Conditional(1),
            0.3,
            DEFAULT_EXACT_ENUM_LIMIT,
        )
        .unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn misuse_is_rejected() {
        let s = study(true);
        let g = &s.groups()[0];
        let m = fit_ols(&s, &map()).unwrap();
        assert!(matches!(
            m.predict(g, &[1], 0),
            Err(Error::InvalidArgument(_))
        ));
        let w = fit_wls(&s, &map(), &propensity(), target(1, 0.3)).unwrap();
        assert!(matches!(
            w.check_target(target(0, 0.3)),
            Err(Error::Contract(_))
        ));
        assert!(w.check_target(target(1, 0.3)).is_ok());
        let mut groups = s.groups().to_vec();
        for g in &mut groups {
            g.treatments.iter_mut().for_each(|t| *t = 0);
        }
        let none = Study::new(groups, names());
        assert!(matches!(
            fit_wls(&none, &map(), &propensity(), target(1, 0.3)),
            Err(Error::EmptyStratum(1))
        ));
    }
}
