//! Counterfactual allocation probabilities and policy-averaged predictions.
//!
//! Probabilities are carried as natural logs; a group of 100 members under
//! `alpha = 0.5` already sits at `2^-100`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Policy;
use crate::error::{Error, Result};

/// Which part of a member's treatment vector the policy randomizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    /// Own treatment fixed at the given value, neighbours drawn from the policy.
    Conditional(u8),
    /// Whole vector drawn from the policy, own treatment included.
    Marginal,
}

impl Slot {
    fn code(self) -> u64 {
        match self {
            Slot::Conditional(a) => a as u64,
            Slot::Marginal => 2,
        }
    }
}

/// A population mean targeted by an estimator: `mu_{a,alpha}` or `mu_alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MuTarget {
    Conditional { a: u8, alpha: Policy },
    Marginal { alpha: Policy },
}

impl MuTarget {
    pub fn slot(self) -> Slot {
        match self {
            MuTarget::Conditional { a, .. } => Slot::Conditional(a),
            MuTarget::Marginal { .. } => Slot::Marginal,
        }
    }

    pub fn alpha(self) -> f64 {
        match self {
            MuTarget::Conditional { alpha, .. } | MuTarget::Marginal { alpha } => alpha.alpha(),
        }
    }

    pub fn label(self) -> String {
        match self {
            MuTarget::Conditional { a, alpha } => format!("mu[{a},{alpha}]"),
            MuTarget::Marginal { alpha } => format!("mu[{alpha}]"),
        }
    }

    /// Bitwise identity, so targets can be used as lookup keys.
    pub fn same_as(self, other: MuTarget) -> bool {
        self.slot() == other.slot() && self.alpha().to_bits() == other.alpha().to_bits()
    }
}

/// Log of a product-Bernoulli probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyWeight {
    pub log_value: f64,
}

impl PolicyWeight {
    pub fn value(self) -> f64 {
        self.log_value.exp()
    }
}

fn log_bernoulli(treated: usize, total: usize, alpha: f64) -> f64 {
    let untreated = total - treated;
    let mut lv = 0.0;
    if treated > 0 {
        lv += treated as f64 * alpha.ln();
    }
    if untreated > 0 {
        lv += untreated as f64 * (-alpha).ln_1p();
    }
    lv
}

/// `pi(a; alpha)`: probability of the whole vector `a` under the policy.
pub fn pi_full(a: &[u8], alpha: f64) -> PolicyWeight {
    let treated = a.iter().filter(|&&v| v == 1).count();
    PolicyWeight {
        log_value: log_bernoulli(treated, a.len(), alpha),
    }
}

/// `pi(a_(-j); alpha)`: probability of everyone but member `j`.
pub fn pi_minus(a: &[u8], j: usize, alpha: f64) -> Result<PolicyWeight> {
    if j >= a.len() {
        return Err(Error::IndexOutOfRange {
            index: j,
            len: a.len(),
        });
    }
    let treated = a.iter().filter(|&&v| v == 1).count() - (a[j] == 1) as usize;
    Ok(PolicyWeight {
        log_value: log_bernoulli(treated, a.len() - 1, alpha),
    })
}

/// A fitted mean model bound to one group.
pub trait MeanFunction {
    fn group_size(&self) -> usize;

    /// Model mean for member `j` under treatment vector `t`.
    fn mean_at(&self, t: &[u8], j: usize) -> Result<f64>;

    /// Closed-form policy average, if the model admits one.
    fn policy_mean(&self, _j: usize, _slot: Slot, _alpha: f64) -> Option<f64> {
        None
    }
}

pub const DEFAULT_EXACT_ENUM_LIMIT: usize = 15;
pub const DEFAULT_MC_DRAWS: usize = 1000;

/// How policy sums are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Engine {
    Exact { limit: usize },
    MonteCarlo { draws: usize, seed: u64 },
}

impl Default for Engine {
    fn default() -> Self {
        Engine::Exact {
            limit: DEFAULT_EXACT_ENUM_LIMIT,
        }
    }
}

/// Exact policy average of `m_ij` for member `j`.
///
/// Uses the model's closed form when it has one, otherwise enumerates every
/// assignment of the randomized positions (`N-1` for a conditional slot, `N`
/// for a marginal one), refusing when that exceeds `limit`.
pub fn policy_average_exact<M: MeanFunction + ?Sized>(
    model: &M,
    j: usize,
    slot: Slot,
    alpha: f64,
    limit: usize,
) -> Result<f64> {
    let n = model.group_size();
    if j >= n {
        return Err(Error::IndexOutOfRange { index: j, len: n });
    }
    if let Some(v) = model.policy_mean(j, slot, alpha) {
        return Ok(v);
    }
    let positions: Vec<usize> = match slot {
        Slot::Conditional(_) => (0..n).filter(|&k| k != j).collect(),
        Slot::Marginal => (0..n).collect(),
    };
    let m = positions.len();
    if m > limit {
        return Err(Error::Capability(format!(
            "exact policy sum over {m} positions exceeds the enumeration limit {limit}; \
             use the Monte Carlo engine"
        )));
    }
    let mut t = vec![0u8; n];
    if let Slot::Conditional(a) = slot {
        t[j] = a;
    }
    let mut total = 0.0;
    for mask in 0u64..(1u64 << m) {
        for (bit, &pos) in positions.iter().enumerate() {
            t[pos] = ((mask >> bit) & 1) as u8;
        }
        let lp = log_bernoulli(mask.count_ones() as usize, m, alpha);
        total += model.mean_at(&t, j)? * lp.exp();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McAverage {
    pub mean: f64,
    /// Standard error of `mean` from the draw variance (0 for a single draw).
    pub std_error: f64,
    pub draws: usize,
}

/// Monte Carlo policy average: mean of `m_ij` over `draws` vectors drawn
/// i.i.d. Bernoulli(alpha), with the own slot fixed for conditional slots.
pub fn policy_average_mc<M: MeanFunction + ?Sized>(
    model: &M,
    j: usize,
    slot: Slot,
    alpha: f64,
    draws: usize,
    seed: u64,
) -> Result<McAverage> {
    let n = model.group_size();
    if j >= n {
        return Err(Error::IndexOutOfRange { index: j, len: n });
    }
    if draws == 0 {
        return Err(Error::InvalidArgument("mc_draws must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = vec![0u8; n];
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for d in 0..draws {
        for v in t.iter_mut() {
            *v = (rng.random::<f64>() < alpha) as u8;
        }
        if let Slot::Conditional(a) = slot {
            t[j] = a;
        }
        let y = model.mean_at(&t, j)?;
        let delta = y - mean;
        mean += delta / (d + 1) as f64;
        m2 += delta * (y - mean);
    }
    let std_error = if draws > 1 {
        (m2 / (draws - 1) as f64 / draws as f64).sqrt()
    } else {
        0.0
    };
    Ok(McAverage {
        mean,
        std_error,
        draws,
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a list of integers into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Seed of the Monte Carlo stream for one (group, member, slot) cell.
pub fn mc_seed(master: u64, group_index: usize, j: usize, slot: Slot) -> u64 {
    derive_seed(&[master, group_index as u64, j as u64, slot.code()])
}

/// Dispatches to the exact or Monte Carlo evaluator.
pub fn policy_average<M: MeanFunction + ?Sized>(
    model: &M,
    group_index: usize,
    j: usize,
    slot: Slot,
    alpha: f64,
    engine: Engine,
) -> Result<f64> {
    match engine {
        Engine::Exact { limit } => policy_average_exact(model, j, slot, alpha, limit),
        Engine::MonteCarlo { draws, seed } => Ok(policy_average_mc(
            model,
            j,
            slot,
            alpha,
            draws,
            mc_seed(seed, group_index, j, slot),
        )?
        .mean),
    }
}
