//! Small statistical helpers shared by the diagnostics and the harness.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

/// Standard error of the mean.
pub fn std_err(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// `(E xᵖ)^{1/p}` over non-negative samples, with its jackknife standard error.
pub fn root_moment_jackknife(xs: &[f64], p: u32) -> (f64, f64) {
    let n = xs.len();
    let pf = f64::from(p);
    let powers: Vec<f64> = xs.iter().map(|x| x.powi(p as i32)).collect();
    let total: f64 = powers.iter().sum();
    let estimate = (total / n as f64).max(0.0).powf(1.0 / pf);
    if n < 2 {
        return (estimate, f64::NAN);
    }
    let loo: Vec<f64> = powers
        .iter()
        .map(|v| ((total - v) / (n - 1) as f64).max(0.0).powf(1.0 / pf))
        .collect();
    let loo_mean = mean(&loo);
    let ss: f64 = loo.iter().map(|t| (t - loo_mean) * (t - loo_mean)).sum();
    (estimate, ((n - 1) as f64 / n as f64 * ss).sqrt())
}

/// Grand mean and batch-means standard error from per-batch means of equal
/// weight.
pub fn batch_means(batch_means: &[f64]) -> (f64, f64) {
    (mean(batch_means), std_err(batch_means))
}

/// Lengths of `batches` contiguous batches covering `total` samples; the
/// remainder is spread over the first batches.
pub fn batch_lengths(total: usize, batches: usize) -> Vec<usize> {
    let base = total / batches;
    let extra = total % batches;
    (0..batches)
        .map(|b| base + usize::from(b < extra))
        .collect()
}
