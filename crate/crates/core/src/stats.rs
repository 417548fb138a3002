//! Scalar summaries shared by the sampler diagnostics and the data intake.

/// Sample quantile with linear interpolation between order statistics
/// (Hyndman–Fan type 7). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let prob = prob.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

pub fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() as f64 - 1.0)
}

/// Biased autocovariance at `lag` (divides by `n`), about the sample mean.
pub fn autocovariance(x: &[f64], mean: f64, lag: usize) -> f64 {
    let n = x.len();
    if lag >= n {
        return 0.0;
    }
    let mut acc = 0.0;
    for t in 0..(n - lag) {
        acc += (x[t] - mean) * (x[t + lag] - mean);
    }
    acc / n as f64
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence
/// estimator on the combined autocorrelation.
pub fn chain_ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    if m == 0 {
        return 0.0;
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < 4 {
        return (m * n) as f64;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let vars: Vec<f64> = chains
        .iter()
        .zip(&means)
        .map(|(c, &mu)| autocovariance(&c[..n], mu, 0) * n as f64 / (n as f64 - 1.0))
        .collect();
    let within = mean(&vars);
    let grand = mean(&means);
    let between = if m > 1 {
        n as f64 * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0)
    } else {
        0.0
    };
    let var_plus = (n as f64 - 1.0) / n as f64 * within + between / n as f64;
    if !(var_plus > 0.0) {
        return (m * n) as f64;
    }
    let rho = |lag: usize| -> f64 {
        let acov: f64 = chains
            .iter()
            .zip(&means)
            .map(|(c, &mu)| autocovariance(&c[..n], mu, lag))
            .sum::<f64>()
            / m as f64;
        1.0 - (within - acov) / var_plus
    };

    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let mut pair = rho(lag) + rho(lag + 1);
        if pair < 0.0 {
            break;
        }
        if pair > prev_pair {
            pair = prev_pair;
        }
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    let total = (m * n) as f64;
    let tau = tau.max(1.0 / total.log10().max(1.0));
    total / tau
}

/// Split-chain potential scale reduction factor.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    if half < 2 {
        return f64::NAN;
    }
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[half..2 * half]])
        .collect();
    let m = halves.len() as f64;
    let nh = half as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let within = halves.iter().map(|h| variance(h)).sum::<f64>() / m;
    let grand = mean(&means);
    let between = nh * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1.0);
    if within == 0.0 {
        return if between == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (nh - 1.0) / nh * within + between / nh;
    (var_plus / within).sqrt()
}
