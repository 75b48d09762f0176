/// Arithmetic mean; 0 for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation (divisor `n − 1`); 0 below two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// Expected per-round cost from per-group medians, weighted by group size.
/// Robust to scheduler spikes yet still sensitive to how often the expensive
/// group occurs, which a plain median of a mixed series is not.
pub fn stratified_median(groups: &[&[f64]]) -> f64 {
    let total: usize = groups.iter().map(|g| g.len()).sum();
    if total == 0 {
        return 0.0;
    }
    groups.iter().map(|g| g.len() as f64 * median(g)).sum::<f64>() / total as f64
}
