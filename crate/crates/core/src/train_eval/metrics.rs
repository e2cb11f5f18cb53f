//! Regression and divergence metrics for marginal predictions.

/// Smallest predicted precision used when scoring Gaussian KL.
pub const MIN_PRECISION: f64 = 1e-3;
/// Clamp applied to predicted Bernoulli probabilities.
pub const PROB_CLAMP: f64 = 1e-6;

/// `1 - SS_res / SS_tot` pooled over all values. Returns NaN when there are
/// no values or the targets are constant.
pub fn r2_score(preds: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(preds.len(), targets.len(), "prediction/target length mismatch");
    if targets.is_empty() {
        return f64::NAN;
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum();
    if ss_tot == 0.0 {
        return f64::NAN;
    }
    1.0 - ss_res / ss_tot
}

/// Mean over output columns of the pooled R² of each column.
pub fn r2_columns(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let width = targets.first().map_or(0, Vec::len);
    if width == 0 {
        return f64::NAN;
    }
    let per: Vec<f64> = (0..width)
        .map(|c| {
            let p: Vec<f64> = preds.iter().map(|r| r[c]).collect();
            let t: Vec<f64> = targets.iter().map(|r| r[c]).collect();
            r2_score(&p, &t)
        })
        .collect();
    per.iter().sum::<f64>() / width as f64
}

pub fn mse(preds: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(preds.len(), targets.len(), "prediction/target length mismatch");
    if targets.is_empty() {
        return f64::NAN;
    }
    preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / targets.len() as f64
}

/// `KL(N(0, σ²_t) || N(0, σ²_p))`.
pub fn kl_gaussian(true_var: f64, pred_var: f64) -> f64 {
    assert!(true_var > 0.0 && pred_var > 0.0, "variances must be positive");
    let r = true_var / pred_var;
    0.5 * (r - 1.0 - r.ln())
}

/// Gaussian KL from marginal precisions, with the predicted precision
/// clamped at [`MIN_PRECISION`].
pub fn kl_gaussian_precision(true_precision: f64, pred_precision: f64) -> f64 {
    kl_gaussian(1.0 / true_precision, 1.0 / pred_precision.max(MIN_PRECISION))
}

/// `KL(Bern(p) || Bern(q))` with `q` clamped to `[1e-6, 1 - 1e-6]`.
pub fn kl_bernoulli(p: f64, q: f64) -> f64 {
    let q = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(p, q) + term(1.0 - p, 1.0 - q)
}
