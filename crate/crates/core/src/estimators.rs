//! Group-level and population-level estimates of `mu_{a,alpha}` and
//! `mu_alpha`, and the effect contrasts built from them.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EffectKind, EffectRequest, GroupRecord, Study};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::outcome::{fit_ols, fit_picov, fit_wls, OutcomeModel};
use crate::policy::{pi_full, pi_minus, policy_average, Engine, MeanFunction, MuTarget};
use crate::propensity::PropensityModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Family {
    Ipw,
    Reg,
    DrBc,
    DrWls,
    DrPicov,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Ipw,
        Family::Reg,
        Family::DrBc,
        Family::DrWls,
        Family::DrPicov,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace(['-', '_', '.'], "").as_str() {
            "IPW" => Ok(Family::Ipw),
            "REG" => Ok(Family::Reg),
            "DRBC" => Ok(Family::DrBc),
            "DRWLS" => Ok(Family::DrWls),
            "DRPICOV" => Ok(Family::DrPicov),
            other => Err(Error::Config(format!("unknown estimator family {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Ipw => "IPW",
            Family::Reg => "REG",
            Family::DrBc => "DRBC",
            Family::DrWls => "DRWLS",
            Family::DrPicov => "DRPICOV",
        }
    }

    pub fn uses_propensity(self) -> bool {
        self != Family::Reg
    }

    pub fn uses_outcome(self) -> bool {
        self != Family::Ipw
    }

    /// Families whose outcome regression is refitted per target.
    pub fn targeted(self) -> bool {
        matches!(self, Family::DrWls | Family::DrPicov)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub engine: Engine,
    /// Enables `mu_alpha` (and so OE) for the targeted families.
    pub marginal_extension: bool,
}

/// How the policy sums behind an estimate were evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComputationMeta {
    pub exact: bool,
    pub mc_draws: Option<usize>,
    pub seed: Option<u64>,
}

impl ComputationMeta {
    fn new(family: Family, engine: Engine) -> Self {
        match (family, engine) {
            (Family::Ipw, _) | (_, Engine::Exact { .. }) => ComputationMeta {
                exact: true,
                mc_draws: None,
                seed: None,
            },
            (_, Engine::MonteCarlo { draws, seed }) => ComputationMeta {
                exact: false,
                mc_draws: Some(draws),
                seed: Some(seed),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MuEstimate {
    pub value: f64,
    pub target: MuTarget,
    pub family: Family,
    pub group_values: Vec<f64>,
    pub meta: ComputationMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectEstimate {
    pub kind: EffectKind,
    pub alpha1: f64,
    pub alpha0: f64,
    pub value: f64,
    pub components: [MuEstimate; 2],
}

/// The two means differenced by an effect, minuend first.
pub fn effect_targets(request: &EffectRequest) -> [MuTarget; 2] {
    let (a1, a0) = (request.alpha1, request.alpha0);
    let c = |a, alpha| MuTarget::Conditional { a, alpha };
    match request.kind {
        EffectKind::DE => [c(1, a1), c(0, a1)],
        EffectKind::IE => [c(0, a1), c(0, a0)],
        EffectKind::TE => [c(1, a1), c(0, a0)],
        EffectKind::OE => [
            MuTarget::Marginal { alpha: a1 },
            MuTarget::Marginal { alpha: a0 },
        ],
    }
}

/// Rejects family/target pairs that are not defined without the extension.
pub fn check_supported(family: Family, target: MuTarget, options: &EstimatorOptions) -> Result<()> {
    if family.targeted()
        && matches!(target, MuTarget::Marginal { .. })
        && !options.marginal_extension
    {
        return Err(Error::Unsupported(format!(
            "{} for {family} requires the marginal extension",
            target.label()
        )));
    }
    Ok(())
}

/// Fitted component models for a set of families and targets.
#[derive(Debug, Clone, Default)]
pub struct FittedModels {
    pub propensity: Option<Arc<PropensityModel>>,
    /// The propensity is known rather than estimated, so its parameters
    /// carry no sampling variability.
    pub propensity_known: bool,
    pub ols: Option<Arc<OutcomeModel>>,
    pub wls: Vec<(MuTarget, Arc<OutcomeModel>)>,
    pub picov: Vec<(MuTarget, Arc<OutcomeModel>)>,
}

impl FittedModels {
    /// Outcome model used by `family` for `target`.
    pub fn outcome_for(&self, family: Family, target: MuTarget) -> Result<&Arc<OutcomeModel>> {
        match family {
            Family::Ipw => Err(Error::Contract("IPW uses no outcome model".into())),
            Family::Reg | Family::DrBc => self
                .ols
                .as_ref()
                .ok_or_else(|| Error::Contract("no outcome model fitted".into())),
            Family::DrWls => find_target(&self.wls, family, target),
            Family::DrPicov => find_target(&self.picov, family, target),
        }
    }

    pub fn propensity(&self) -> Result<&Arc<PropensityModel>> {
        self.propensity
            .as_ref()
            .ok_or_else(|| Error::Contract("no propensity model fitted".into()))
    }

    /// Fits whatever outcome models `families` need for `targets`, given an
    /// already fitted propensity (required unless only REG is requested).
    pub fn fit(
        study: &Study,
        outcome_map: &FeatureMap,
        propensity: Option<PropensityModel>,
        families: &[Family],
        targets: &[MuTarget],
        options: &EstimatorOptions,
    ) -> Result<FittedModels> {
        let mut fitted = FittedModels {
            propensity: propensity.map(Arc::new),
            ..Default::default()
        };
        if families.iter().any(|f| f.uses_propensity()) && fitted.propensity.is_none() {
            return Err(Error::Contract("families need a propensity model".into()));
        }
        if families
            .iter()
            .any(|f| matches!(f, Family::Reg | Family::DrBc))
        {
            fitted.ols = Some(Arc::new(fit_ols(study, outcome_map)?));
        }
        for &family in families.iter().filter(|f| f.targeted()) {
            for &t in targets {
                check_supported(family, t, options)?;
                let prop = fitted.propensity()?.clone();
                let slot = if family == Family::DrWls {
                    &mut fitted.wls
                } else {
                    &mut fitted.picov
                };
                if slot.iter().any(|(u, _)| u.same_as(t)) {
                    continue;
                }
                let m = if family == Family::DrWls {
                    fit_wls(study, outcome_map, &prop, t)?
                } else {
                    fit_picov(study, outcome_map, &prop, t)?
                };
                slot.push((t, Arc::new(m)));
            }
        }
        Ok(fitted)
    }
}

fn find_target(
    v: &[(MuTarget, Arc<OutcomeModel>)],
    family: Family,
    target: MuTarget,
) -> Result<&Arc<OutcomeModel>> {
    v.iter()
        .find(|(t, _)| t.same_as(target))
        .map(|(_, m)| m)
        .ok_or_else(|| {
            Error::Contract(format!(
                "no {family} outcome model fitted for {}",
                target.label()
            ))
        })
}

/// Inverse-probability weight of member `j` for `target`, given `log f(A_i|X_i)`.
fn ipw_weight(group: &GroupRecord, j: usize, target: MuTarget, log_f: f64) -> Result<Option<f64>> {
    Ok(match target {
        MuTarget::Conditional { a, alpha } => {
            if group.treatments[j] != a {
                None
            } else {
                Some((pi_minus(&group.treatments, j, alpha.alpha())?.log_value - log_f).exp())
            }
        }
        MuTarget::Marginal { alpha } => {
            Some((pi_full(&group.treatments, alpha.alpha()).log_value - log_f).exp())
        }
    })
}

/// `Ŷ_i` of one group. `log_f` is `log f(A_i|X_i)` under the propensity in
/// use (ignored by REG and the targeted families); `outcome` must already
/// carry the propensity in use when it depends on one.
pub(crate) fn group_value_with(
    family: Family,
    group: &GroupRecord,
    group_index: usize,
    target: MuTarget,
    log_f: Option<f64>,
    outcome: Option<&OutcomeModel>,
    engine: Engine,
) -> Result<f64> {
    let n = group.size();
    let missing = || Error::Contract(format!("{family} needs both component models"));
    let mut total = 0.0;
    if family.uses_outcome() {
        let out = outcome.ok_or_else(missing)?;
        if family.targeted() {
            out.check_target(target)?;
        }
        let pred = out.bind(group);
        for j in 0..n {
            total += policy_average(&pred, group_index, j, target.slot(), target.alpha(), engine)?;
        }
        if family == Family::DrBc {
            let log_f = log_f.ok_or_else(missing)?;
            for j in 0..n {
                if let Some(w) = ipw_weight(group, j, target, log_f)? {
                    total += (group.outcomes[j] - pred.mean_at(&group.treatments, j)?) * w;
                }
            }
        }
    } else {
        let log_f = log_f.ok_or_else(missing)?;
        for j in 0..n {
            if let Some(w) = ipw_weight(group, j, target, log_f)? {
                total += group.outcomes[j] * w;
            }
        }
    }
    Ok(total / n as f64)
}

/// `Ŷ_i` for every group, in canonical group order.
pub fn group_values(
    family: Family,
    study: &Study,
    target: MuTarget,
    propensity: Option<&PropensityModel>,
    outcome: Option<&OutcomeModel>,
    engine: Engine,
) -> Result<Vec<f64>> {
    study
        .groups()
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let log_f = propensity
                .filter(|_| matches!(family, Family::Ipw | Family::DrBc))
                .map(|p| p.group_prob(g).log_prob);
            group_value_with(family, g, i, target, log_f, outcome, engine)
        })
        .collect()
}

/// Sequential sum in index order, so the result does not depend on threading.
pub(crate) fn ordered_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population estimate for one family and target from explicit models.
pub fn mu_with(
    family: Family,
    study: &Study,
    target: MuTarget,
    propensity: Option<&PropensityModel>,
    outcome: Option<&OutcomeModel>,
    options: &EstimatorOptions,
) -> Result<MuEstimate> {
    check_supported(family, target, options)?;
    if study.num_groups() == 0 {
        return Err(Error::InvalidArgument("study has no groups".into()));
    }
    let values = group_values(family, study, target, propensity, outcome, options.engine)?;
    Ok(MuEstimate {
        value: ordered_mean(&values),
        target,
        family,
        group_values: values,
        meta: ComputationMeta::new(family, options.engine),
    })
}

pub fn ipw_mu(study: &Study, prop: &PropensityModel, target: MuTarget) -> Result<MuEstimate> {
    mu_with(
        Family::Ipw,
        study,
        target,
        Some(prop),
        None,
        &EstimatorOptions::default(),
    )
}

pub fn reg_mu(
    study: &Study,
    out: &OutcomeModel,
    target: MuTarget,
    engine: Engine,
) -> Result<MuEstimate> {
    let options = EstimatorOptions {
        engine,
        ..Default::default()
    };
    mu_with(Family::Reg, study, target, None, Some(out), &options)
}

pub fn drbc_mu(
    study: &Study,
    prop: &PropensityModel,
    out: &OutcomeModel,
    target: MuTarget,
    engine: Engine,
) -> Result<MuEstimate> {
    let options = EstimatorOptions {
        engine,
        ..Default::default()
    };
    mu_with(Family::DrBc, study, target, Some(prop), Some(out), &options)
}

/// Policy-averaged predictions of a weighted fit; `options` must enable the
/// marginal extension for a marginal target.
pub fn drwls_mu(
    study: &Study,
    out: &OutcomeModel,
    target: MuTarget,
    options: &EstimatorOptions,
) -> Result<MuEstimate> {
    mu_with(Family::DrWls, study, target, None, Some(out), options)
}

pub fn drpicov_mu(
    study: &Study,
    out: &OutcomeModel,
    target: MuTarget,
    options: &EstimatorOptions,
) -> Result<MuEstimate> {
    mu_with(Family::DrPicov, study, target, None, Some(out), options)
}

/// Population estimate for `family` using the matching fitted models.
pub fn estimate_mu(
    family: Family,
    study: &Study,
    fitted: &FittedModels,
    target: MuTarget,
    options: &EstimatorOptions,
) -> Result<MuEstimate> {
    check_supported(family, target, options)?;
    let prop = if matches!(family, Family::Ipw | Family::DrBc) {
        Some(fitted.propensity()?.as_ref())
    } else {
        None
    };
    let out = if family.uses_outcome() {
        Some(fitted.outcome_for(family, target)?.as_ref())
    } else {
        None
    };
    mu_with(family, study, target, prop, out, options)
}

pub fn effect(
    request: &EffectRequest,
    family: Family,
    study: &Study,
    fitted: &FittedModels,
    options: &EstimatorOptions,
) -> Result<EffectEstimate> {
    let [t1, t0] = effect_targets(request);
    let m1 = estimate_mu(family, study, fitted, t1, options)?;
    let m0 = estimate_mu(family, study, fitted, t0, options)?;
    Ok(EffectEstimate {
        kind: request.kind,
        alpha1: request.alpha1.alpha(),
        alpha0: request.alpha0.alpha(),
        value: m1.value - m0.value,
        components: [m1, m0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Policy;
    use approx::assert_relative_eq;

    fn pol(a: f64) -> Policy {
        Policy::new(a).unwrap()
    }

    fn cond(a: u8, alpha: f64) -> MuTarget {
        MuTarget::Conditional {
            a,
            alpha: pol(alpha),
        }
    }

    /// One group, N=2, Y=(1,2), A=(1,0) and f(A|X) = 0.25.
    fn toy() -> (Study, PropensityModel) {
        let names = vec!["x".to_string()];
        let g = GroupRecord::new("g", vec![vec![0.0], vec![0.0]], vec![1, 0], vec![1.0, 2.0]);
        let map = FeatureMap::parse(&["1"], &names).unwrap();
        let p = PropensityModel::from_parameters(map, vec![0.0], None).unwrap();
        (Study::new(vec![g], names), p)
    }

    #[test]
    fn hand_ipw_values() {
        let (s, p) = toy();
        assert_relative_eq!(
            ipw_mu(&s, &p, cond(1, 0.5)).unwrap().value,
            1.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            ipw_mu(&s, &p, cond(0, 0.5)).unwrap().value,
            2.0,
            epsilon = 1e-12
        );
        let m = MuTarget::Marginal { alpha: pol(0.5) };
        assert_relative_eq!(ipw_mu(&s, &p, m).unwrap().value, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn ipw_empty_indicator_is_zero() {
        let (s, p) = toy();
        let mut g = s.groups()[0].clone();
        g.treatments = vec![0, 0];
        let s = Study::new(vec![g], s.covariate_names().to_vec());
        assert_eq!(ipw_mu(&s, &p, cond(1, 0.3)).unwrap().value, 0.0);
    }

    #[test]
    fn hand_drbc_value() {
        // m = 0.5 + A: reg part 0.5 + 1 = 1.5 for a=1, correction (1 - 1.5)·0.5/0.25 / 2
        let (s, p) = toy();
        let map = FeatureMap::parse(&["1", "A"], s.covariate_names()).unwrap();
        let out = OutcomeModel::from_coefficients(map, vec![0.5, 1.0]).unwrap();
        let v = drbc_mu(&s, &p, &out, cond(1, 0.5), Engine::default())
            .unwrap()
            .value;
        assert_relative_eq!(v, 1.5 - 0.5, epsilon = 1e-12);
    }

    #[test]
    fn effect_contrasts_telescope() {
        let (s, p) = toy();
        let fitted = FittedModels {
            propensity: Some(Arc::new(p)),
            ..Default::default()
        };
        let o = EstimatorOptions::default();
        let de = effect(
            &EffectRequest::direct(pol(0.6)),
            Family::Ipw,
            &s,
            &fitted,
            &o,
        )
        .unwrap();
        let ie = effect(
            &EffectRequest::new(EffectKind::IE, pol(0.6), pol(0.3)),
            Family::Ipw,
            &s,
            &fitted,
            &o,
        )
        .unwrap();
        let te = effect(
            &EffectRequest::new(EffectKind::TE, pol(0.6), pol(0.3)),
            Family::Ipw,
            &s,
            &fitted,
            &o,
        )
        .unwrap();
        assert_relative_eq!(te.value, de.value + ie.value, epsilon = 1e-14);
        for kind in [EffectKind::IE, EffectKind::OE] {
            let e = effect(
                &EffectRequest::new(kind, pol(0.4), pol(0.4)),
                Family::Ipw,
                &s,
                &fitted,
                &o,
            )
            .unwrap();
            assert_eq!(e.value, 0.0);
        }
    }

    #[test]
    fn marginal_targeted_needs_extension() {
        let t = MuTarget::Marginal { alpha: pol(0.5) };
        let o = EstimatorOptions::default();
        assert!(matches!(
            check_supported(Family::DrWls, t, &o),
            Err(Error::Unsupported(_))
        ));
        assert!(check_supported(Family::DrBc, t, &o).is_ok());
        let on = EstimatorOptions {
            marginal_extension: true,
            ..o
        };
        assert!(check_supported(Family::DrPicov, t, &on).is_ok());
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(Family::parse(f.as_str()).unwrap(), f);
        }
        assert_eq!(Family::parse("dr-bc").unwrap(), Family::DrBc);
        assert!(Family::parse("aipw").is_err());
    }
}
