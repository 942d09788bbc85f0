//! Dense linear algebra, stable softmax, and reverse-mode gradients for the
//! handful of operations the prompt-tuning pipeline differentiates through.

mod finite_diff;
mod matrix;
mod tape;

pub use finite_diff::{finite_diff_grad, max_rel_err, REL_ERR_FLOOR};
pub use matrix::{dot, norm, Matrix};
pub use tape::{Dual, Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na < MIN_NORM || nb < MIN_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(dot(a, b) / (na * nb))
}

pub fn l2_normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = norm(row);
        if n < MIN_NORM {
            return Err(Error::ZeroVector);
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of `m / temperature`, shifted by the row max.
pub fn softmax_rows(m: &Matrix, temperature: f64) -> Result<Matrix> {
    check_temperature(temperature)?;
    let mut out = m.scale(1.0 / temperature);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    Ok(out)
}

/// `-log softmax(row)[label]`, kept accurate when the loss is tiny.
pub fn neg_log_softmax(row: &[f64], label: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rest: f64 = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, x)| (x - max).exp())
        .sum();
    if row[label] == max {
        rest.ln_1p()
    } else {
        (max - row[label]) + (rest + (row[label] - max).exp()).ln()
    }
}

/// `1 - softmax(row)[label]` without cancellation.
pub fn softmax_complement(row: &[f64], label: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut rest = 0.0;
    let mut own = 0.0;
    for (j, x) in row.iter().enumerate() {
        let e = (x - max).exp();
        if j == label {
            own = e;
        } else {
            rest += e;
        }
    }
    rest / (rest + own)
}

pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

pub fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(temperature))
    }
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
