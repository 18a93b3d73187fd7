use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Columns are treated as dependent when their pivoted `|R_ii|` falls below
/// this multiple of the largest diagonal.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Least squares via column-pivoted QR. Row weights, when given, multiply
/// the squared residuals; rows with zero weight are ignored.
pub fn least_squares(
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    labels: &[String],
) -> Result<Vec<f64>> {
    let (rows, cols) = x.shape();
    let keep: Vec<usize> = match weights {
        Some(w) => (0..rows).filter(|&i| w[i] != 0.0).collect(),
        None => (0..rows).collect(),
    };
    if keep.len() < cols {
        return Err(Error::SingularDesign(format!(
            "{} usable rows for {} coefficients",
            keep.len(),
            cols
        )));
    }
    let mut xs = DMatrix::zeros(keep.len(), cols);
    let mut ys = DVector::zeros(keep.len());
    for (r, &i) in keep.iter().enumerate() {
        let s = weights.map_or(1.0, |w| w[i].sqrt());
        for c in 0..cols {
            xs[(r, c)] = x[(i, c)] * s;
        }
        ys[r] = y[i] * s;
    }
    let qr = xs.col_piv_qr();
    let r = qr.r();
    let perm = qr.p();
    let mut order = DMatrix::from_fn(1, cols, |_, c| c as f64);
    perm.permute_columns(&mut order);
    let dmax = (0..cols).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let dependent: Vec<usize> = (0..cols)
        .filter(|&i| r[(i, i)].is_nan() || r[(i, i)].abs() <= RANK_TOLERANCE * dmax)
        .map(|i| order[(0, i)] as usize)
        .collect();
    if !dependent.is_empty() {
        let names: Vec<&str> = dependent
            .iter()
            .map(|&c| labels.get(c).map_or("?", String::as_str))
            .collect();
        return Err(Error::SingularDesign(format!(
            "collinear terms: {}",
            names.join(", ")
        )));
    }
    let qty = qr.q().transpose() * ys;
    let z = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::SingularDesign("triangular solve failed".into()))?;
    let mut coef = vec![0.0; cols];
    for i in 0..cols {
        coef[order[(0, i)] as usize] = z[i];
    }
    Ok(coef)
}

/// Numerical rank check of a design without solving anything.
pub fn check_full_rank(x: &DMatrix<f64>, labels: &[String]) -> Result<()> {
    let y = vec![0.0; x.nrows()];
    least_squares(x, &y, None, labels).map(|_| ())
}

/// 2-norm condition number from singular values.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a square matrix, rejecting ill-conditioned inputs.
pub fn inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let cond = condition_number(m);
    if !cond.is_finite() || cond > 1e14 {
        return Err(Error::NumericalSingularity {
            context: context.to_string(),
            condition: cond,
        });
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::NumericalSingularity {
            context: context.to_string(),
            condition: cond,
        })
}
