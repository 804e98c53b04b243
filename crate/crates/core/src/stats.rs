//! Small numeric helpers shared by the metric modules.

/// Arithmetic mean that returns the common value exactly when all inputs are
/// equal, so centering a constant block yields exact zeros.
pub fn mean(xs: &[f64]) -> f64 {
    debug_assert!(!xs.is_empty());
    let first = xs[0];
    if xs.iter().all(|&x| x == first) {
        return first;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (1/N).
pub fn pop_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Pearson correlation with population moments; `None` when either side has
/// zero variance or fewer than two points.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    if xs.len() < 2 {
        return None;
    }
    let mx = mean(xs);
    let my = mean(ys);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Indices attaining the maximum (exact equality).
pub fn argmax_set(xs: &[f64]) -> Vec<usize> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    xs.iter()
        .enumerate()
        .filter(|(_, &x)| x == max)
        .map(|(i, _)| i)
        .collect()
}

pub fn max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Gap between the largest and second-largest value; 0 when the maximum is
/// attained more than once.
pub fn top1_margin(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    match sorted.as_slice() {
        [a, b, ..] => a - b,
        _ => 0.0,
    }
}

/// Kendall's tau-b over paired observations, `None` when either side has no
/// untied pair.
pub fn kendall_tau_b(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut tied_x, mut tied_y) = (0i64, 0i64);
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = xs[i] - xs[j];
            let dy = ys[i] - ys[j];
            if dx == 0.0 {
                tied_x += 1;
            }
            if dy == 0.0 {
                tied_y += 1;
            }
            if dx != 0.0 && dy != 0.0 {
                if (dx > 0.0) == (dy > 0.0) {
                    concordant += 1;
                } else {
                    discordant += 1;
                }
            }
        }
    }
    let pairs = (n * n.saturating_sub(1) / 2) as i64;
    let denom_x = pairs - tied_x;
    let denom_y = pairs - tied_y;
    if denom_x <= 0 || denom_y <= 0 {
        return None;
    }
    Some((concordant - discordant) as f64 / ((denom_x as f64) * (denom_y as f64)).sqrt())
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// SplitMix64 finalizer; derives independent stream ids from (seed, index).
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64, index: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, index))
}
