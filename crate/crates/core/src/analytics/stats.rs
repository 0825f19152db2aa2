//! Rank tests with exact small-sample p-values and the BCa bootstrap.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::{keyed, streams};

/// Largest total sample size for which p-values are enumerated exactly.
pub const EXACT_MAX: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub exact: bool,
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Midranks (1-based) of `x` plus the tie-group sizes.
pub fn midranks(x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

fn tie_sum(ties: &[usize]) -> f64 {
    ties.iter().map(|&t| (t * t * t - t) as f64).sum()
}

/// Deviations within this many ulps of the observed one count as "at least
/// as extreme"; midrank sums are multiples of 0.5, so this only absorbs
/// rounding.
const DEV_TOL: f64 = 1e-9;

/// Two-sided continuity-corrected normal p for a statistic with mean `mu`
/// and variance `var`.
fn normal_p(stat: f64, mu: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((stat - mu).abs() - 0.5).max(0.0) / var.sqrt();
    (2.0 * (1.0 - std_normal().cdf(z))).min(1.0)
}

/// Visits every `k`-subset of `0..n` as a membership mask.
fn for_each_subset(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..=n - (k - cur.len()) {
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), f);
}

/// Two-sided Mann-Whitney U test. The statistic is `min(U_a, U_b)`.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("Mann-Whitney needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Contract("Mann-Whitney samples must be finite".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let r_a: f64 = ranks[..na].iter().sum();
    let u_a = r_a - (na * (na + 1)) as f64 / 2.0;
    let u = u_a.min((na * nb) as f64 - u_a);
    let mu = (na * nb) as f64 / 2.0;

    if n <= EXACT_MAX {
        let mean_rank_sum = na as f64 * (n + 1) as f64 / 2.0;
        let obs = (r_a - mean_rank_sum).abs();
        let (mut hit, mut total) = (0u64, 0u64);
        for_each_subset(n, na, &mut |idx| {
            let s: f64 = idx.iter().map(|&i| ranks[i]).sum();
            total += 1;
            if (s - mean_rank_sum).abs() >= obs - DEV_TOL {
                hit += 1;
            }
        });
        return Ok(TestResult {
            statistic: u,
            p_value: hit as f64 / total as f64,
            exact: true,
        });
    }
    let nf = n as f64;
    let var = (na * nb) as f64 / 12.0 * ((nf + 1.0) - tie_sum(&ties) / (nf * (nf - 1.0)));
    Ok(TestResult {
        statistic: u,
        p_value: normal_p(u_a, mu, var),
        exact: false,
    })
}

/// Two-sided Wilcoxon signed-rank test on paired differences. Zero
/// differences are dropped; the statistic is `min(W+, W-)`.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<TestResult> {
    if diffs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("Wilcoxon differences must be finite".into()));
    }
    let d: Vec<f64> = diffs.iter().copied().filter(|v| *v != 0.0).collect();
    if d.len() < 5 {
        return Err(Error::Contract(format!(
            "Wilcoxon needs at least 5 non-zero differences, got {}",
            d.len()
        )));
    }
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = midranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let total: f64 = ranks.iter().sum();
    let w = w_plus.min(total - w_plus);
    let mu = total / 2.0;

    if n <= EXACT_MAX {
        let obs = (w_plus - mu).abs();
        let mut hit = 0u64;
        for signs in 0u32..(1 << n) {
            let s: f64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
            if (s - mu).abs() >= obs - DEV_TOL {
                hit += 1;
            }
        }
        return Ok(TestResult {
            statistic: w,
            p_value: hit as f64 / (1u64 << n) as f64,
            exact: true,
        });
    }
    let nf = n as f64;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_sum(&ties) / 48.0;
    Ok(TestResult {
        statistic: w,
        p_value: normal_p(w_plus, mu, var),
        exact: false,
    })
}

/// Linear-interpolation quantile of sorted data, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    /// Bias-correction `z0`.
    pub z0: f64,
    /// Jackknife acceleration.
    pub accel: f64,
}

/// Replicate `b` of the bootstrap distribution. Each replicate draws from
/// its own stream so replicates can be computed in any order.
fn replicate(samples: &[f64], statistic: &dyn Fn(&[f64]) -> f64, seed: u64, b: u64, buf: &mut Vec<f64>) -> f64 {
    let mut rng = keyed(seed, streams::BOOTSTRAP, b);
    buf.clear();
    buf.extend((0..samples.len()).map(|_| samples[rng.random_range(0..samples.len())]));
    statistic(buf)
}

/// Sorted bootstrap distribution of `statistic`.
pub fn bootstrap_distribution(
    samples: &[f64],
    statistic: &dyn Fn(&[f64]) -> f64,
    n_boot: usize,
    seed: u64,
) -> Vec<f64> {
    let mut buf = Vec::with_capacity(samples.len());
    let mut out: Vec<f64> = (0..n_boot as u64)
        .map(|b| replicate(samples, statistic, seed, b, &mut buf))
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Most jackknife replicates used for the acceleration estimate.
pub const JACKKNIFE_GROUPS: usize = 1000;

/// Bias-corrected and accelerated bootstrap interval.
pub fn bca_bootstrap_ci(
    samples: &[f64],
    statistic: &dyn Fn(&[f64]) -> f64,
    n_boot: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi> {
    if samples.len() < 10 {
        return Err(Error::Contract(format!(
            "BCa bootstrap needs at least 10 samples, got {}",
            samples.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) || n_boot < 2 {
        return Err(Error::Config(format!(
            "bootstrap needs level in (0, 1) and n_boot >= 2, got {level} and {n_boot}"
        )));
    }
    let theta = statistic(samples);
    let boot = bootstrap_distribution(samples, statistic, n_boot, seed);
    let below = boot.iter().filter(|t| **t < theta).count() as f64;
    let equal = boot.iter().filter(|t| **t == theta).count() as f64;
    let b = n_boot as f64;
    // keep the proportion strictly inside (0, 1) so z0 stays finite
    let prop = ((below + 0.5 * equal) / b).clamp(0.5 / b, 1.0 - 0.5 / b);
    let nd = std_normal();
    let z0 = nd.inverse_cdf(prop);

    let n = samples.len();
    // delete-one jackknife up to JACKKNIFE_GROUPS samples, delete-a-group
    // (interleaved groups) beyond
    let groups = n.min(JACKKNIFE_GROUPS);
    let mut loo = Vec::with_capacity(n);
    let jack: Vec<f64> = (0..groups)
        .map(|g| {
            loo.clear();
            loo.extend(
                samples
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| j % groups != g)
                    .map(|(_, v)| *v),
            );
            statistic(&loo)
        })
        .collect();
    let jbar = jack.iter().sum::<f64>() / groups as f64;
    let num: f64 = jack.iter().map(|t| (jbar - t).powi(3)).sum();
    let den = 6.0 * jack.iter().map(|t| (jbar - t).powi(2)).sum::<f64>().powf(1.5);
    let accel = if den > 0.0 { num / den } else { 0.0 };

    let adjust = |alpha: f64| {
        let z = nd.inverse_cdf(alpha);
        let w = z0 + z;
        nd.cdf(z0 + w / (1.0 - accel * w))
    };
    let tail = (1.0 - level) / 2.0;
    Ok(BootstrapCi {
        lo: quantile_sorted(&boot, adjust(tail)),
        hi: quantile_sorted(&boot, adjust(1.0 - tail)),
        level,
        z0,
        accel,
    })
}

/// Plain percentile interval of the same bootstrap distribution.
pub fn percentile_ci(
    samples: &[f64],
    statistic: &dyn Fn(&[f64]) -> f64,
    n_boot: usize,
    level: f64,
    seed: u64,
) -> (f64, f64) {
    let boot = bootstrap_distribution(samples, statistic, n_boot, seed);
    let tail = (1.0 - level) / 2.0;
    (quantile_sorted(&boot, tail), quantile_sorted(&boot, 1.0 - tail))
}
