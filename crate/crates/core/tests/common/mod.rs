#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spillover::data::{GroupRecord, Policy, Study};
use spillover::features::FeatureMap;
use spillover::policy::MuTarget;
use spillover::propensity::PropensityModel;

pub fn names() -> Vec<String> {
    vec!["x1".into(), "x2".into()]
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `k` groups of 2..=max_n members with both treatment values present
/// somewhere in the study.
pub fn random_study(rng: &mut ChaCha8Rng, k: usize, max_n: usize) -> Study {
    let groups: Vec<GroupRecord> = (0..k)
        .map(|i| {
            let n = rng.random_range(2..=max_n);
            let xs: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    vec![
                        rng.random_range(-2.0..2.0),
                        (rng.random::<f64>() < 0.5) as u8 as f64,
                    ]
                })
                .collect();
            let mut ts: Vec<u8> = (0..n).map(|_| (rng.random::<f64>() < 0.55) as u8).collect();
            // keep both strata populated
            if i == 0 {
                ts[0] = 0;
                ts[1] = 1;
            }
            let ys = (0..n).map(|_| rng.random_range(-3.0..5.0)).collect();
            GroupRecord::new(format!("g{i:03}"), xs, ts, ys)
        })
        .collect();
    Study::new(groups, names())
}

/// Replaces outcomes by the exact linear predictor of `map`·`beta`.
pub fn noiseless(study: &Study, map: &FeatureMap, beta: &[f64]) -> Study {
    let groups = study
        .groups()
        .iter()
        .map(|g| {
            let mut g = g.clone();
            g.outcomes = (0..g.size())
                .map(|j| {
                    map.row(&g, j, &g.treatments)
                        .iter()
                        .zip(beta)
                        .map(|(x, b)| x * b)
                        .sum()
                })
                .collect();
            g
        })
        .collect();
    Study::new(groups, names())
}

pub fn outcome_map() -> FeatureMap {
    FeatureMap::parse(&["1", "A", "prop", "x1", "x2", "A*x1"], &names()).unwrap()
}

pub fn random_propensity(rng: &mut ChaCha8Rng) -> PropensityModel {
    let map = FeatureMap::parse(&["1", "x1", "x2"], &names()).unwrap();
    let g = vec![
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    ];
    let log_sigma = if rng.random::<f64>() < 0.3 {
        None
    } else {
        Some(rng.random_range(-1.5..0.0))
    };
    PropensityModel::from_parameters(map, g, log_sigma).unwrap()
}

pub fn cond(a: u8, alpha: f64) -> MuTarget {
    MuTarget::Conditional {
        a,
        alpha: Policy::new(alpha).unwrap(),
    }
}

pub fn marginal(alpha: f64) -> MuTarget {
    MuTarget::Marginal {
        alpha: Policy::new(alpha).unwrap(),
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}
