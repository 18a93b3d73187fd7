//! Adaptive Gauss–Hermite integration of a random-intercept logistic
//! likelihood over the group effect `b ~ N(0, sigma^2)`.

use std::sync::OnceLock;

pub const DEFAULT_NODES: usize = 21;

/// Nodes and weights for `∫ g(x) exp(-x^2) dx`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub log_weights: Vec<f64>,
}

impl GaussHermite {
    /// Newton iteration on the orthonormal Hermite recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let pim4 = std::f64::consts::PI.powf(-0.25);
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let m = n.div_ceil(2);
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => {
                    (2.0 * n as f64 + 1.0).sqrt()
                        - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0)
                }
                1 => z - 1.14 * (n as f64).powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for jj in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    p1 = z * (2.0 / (jj + 1) as f64).sqrt() * p2
                        - (jj as f64 / (jj + 1) as f64).sqrt() * p3;
                }
                pp = (2.0 * n as f64).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        GaussHermite {
            nodes: x,
            log_weights: w.iter().map(|v| v.ln()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Cached 21-node rule.
pub fn default_rule() -> &'static GaussHermite {
    static RULE: OnceLock<GaussHermite> = OnceLock::new();
    RULE.get_or_init(|| GaussHermite::new(DEFAULT_NODES))
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Conditional log-likelihood of a treatment vector given the group effect.
#[inline]
fn conditional_loglik(eta: &[f64], a: &[u8], b: f64) -> f64 {
    eta.iter()
        .zip(a)
        .map(|(&e, &ai)| {
            let z = e + b;
            ai as f64 * z - softplus(z)
        })
        .sum()
}

/// Log of the integrated group probability and its score.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalLik {
    pub log_prob: f64,
    /// Posterior mean of `A_j - expit(eta_j + b)`; the score with respect to
    /// `eta_j`.
    pub d_eta: Vec<f64>,
    /// Derivative with respect to `log sigma` (0 when `sigma` is 0).
    pub d_log_sigma: f64,
    pub nodes_used: usize,
}

fn posterior_mode(eta: &[f64], a: &[u8], sigma: f64) -> (f64, f64) {
    let prec = 1.0 / (sigma * sigma);
    let h = |b: f64| conditional_loglik(eta, a, b) - 0.5 * b * b * prec;
    let mut b = 0.0;
    let mut hb = h(b);
    for _ in 0..200 {
        let mut g = -b * prec;
        let mut curv = -prec;
        for (&e, &ai) in eta.iter().zip(a) {
            let p = expit(e + b);
            g += ai as f64 - p;
            curv -= p * (1.0 - p);
        }
        let mut step = -g / curv;
        let mut accepted = false;
        for _ in 0..60 {
            let nb = b + step;
            let nh = h(nb);
            if nh >= hb - 1e-14 * hb.abs() {
                b = nb;
                hb = nh;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.abs() <= 1e-12 * (1.0 + b.abs()) {
            break;
        }
    }
    let mut curv = prec;
    for &e in eta {
        let p = expit(e + b);
        curv += p * (1.0 - p);
    }
    (b, 1.0 / curv.sqrt())
}

/// `log ∫ Π_j expit(eta_j+b)^a_j (1-expit(eta_j+b))^(1-a_j) φ(b; 0, σ²) db`.
///
/// With `sigma == 0` the integral degenerates to the plain product.
pub fn log_marginal(
    eta: &[f64],
    a: &[u8],
    sigma: f64,
    rule: &GaussHermite,
    score: bool,
) -> MarginalLik {
    let n = eta.len();
    if sigma <= 0.0 {
        let log_prob = conditional_loglik(eta, a, 0.0);
        let d_eta = if score {
            eta.iter()
                .zip(a)
                .map(|(&e, &ai)| ai as f64 - expit(e))
                .collect()
        } else {
            Vec::new()
        };
        return MarginalLik {
            log_prob,
            d_eta,
            d_log_sigma: 0.0,
            nodes_used: 0,
        };
    }
    let (mode, scale) = posterior_mode(eta, a, sigma);
    let var = sigma * sigma;
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * var).ln();
    let spread = std::f64::consts::SQRT_2 * scale;
    let q = rule.len();
    let mut lw = vec![0.0; q];
    let mut bs = vec![0.0; q];
    for k in 0..q {
        let x = rule.nodes[k];
        let b = mode + spread * x;
        bs[k] = b;
        lw[k] = rule.log_weights[k] + x * x + conditional_loglik(eta, a, b) - 0.5 * b * b / var
            + log_norm;
    }
    let mx = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = lw.iter().map(|v| (v - mx).exp()).sum();
    let log_prob = spread.ln() + mx + sum.ln();
    let (d_eta, d_log_sigma) = if score {
        let mut d_eta = vec![0.0; n];
        let mut d_ls = 0.0;
        for k in 0..q {
            let wk = (lw[k] - mx).exp() / sum;
            if wk == 0.0 {
                continue;
            }
            let b = bs[k];
            for j in 0..n {
                d_eta[j] += wk * (a[j] as f64 - expit(eta[j] + b));
            }
            d_ls += wk * (b * b / var - 1.0);
        }
        (d_eta, d_ls)
    } else {
        (Vec::new(), 0.0)
    };
    MarginalLik {
        log_prob,
        d_eta,
        d_log_sigma,
        nodes_used: q,
    }
}
