//! Quantitative evaluation: fit-quality metrics, information criteria,
//! variability and contrast metrics, and the hypothesis-test battery with
//! its normality-gated decision tree.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, FisherSnedecor, Normal, StudentsT};

use crate::error::{Error, Result};

/// Mean squared error between two equally-shaped tables.
pub fn mse(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Stats("mse: shape mismatch".into()));
    }
    if a.is_empty() {
        return Err(Error::Stats("mse: empty input".into()));
    }
    let s: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// Small-sample-corrected Akaike information criterion under Gaussian
/// residuals: n·ln(SSR/n) + 2k + 2k(k+1)/(n−k−1).
pub fn aicc(ssr: f64, n: usize, k: usize) -> Result<f64> {
    if n <= k + 1 {
        return Err(Error::Stats(format!("aicc: need n > k+1, got n={n}, k={k}")));
    }
    if ssr <= 0.0 {
        return Err(Error::Stats("aicc: SSR must be positive".into()));
    }
    let (n, k) = (n as f64, k as f64);
    Ok(n * (ssr / n).ln() + 2.0 * k + 2.0 * k * (k + 1.0) / (n - k - 1.0))
}

/// Bayesian information criterion: n·ln(SSR/n) + k·ln(n).
pub fn bic(ssr: f64, n: usize, k: usize) -> Result<f64> {
    if n == 0 || ssr <= 0.0 {
        return Err(Error::Stats("bic: need n > 0 and SSR > 0".into()));
    }
    let (n, k) = (n as f64, k as f64);
    Ok(n * (ssr / n).ln() + k * n.ln())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample (n−1) standard deviation.
pub fn sample_sd(x: &[f64]) -> f64 {
    let m = mean(x);
    let ss: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (x.len() as f64 - 1.0)).sqrt()
}

/// Coefficient of variation in percent: 100·sampleSD/mean.
pub fn cov_percent(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Stats("cov_percent: need ≥ 2 values".into()));
    }
    let m = mean(values);
    if m == 0.0 {
        return Err(Error::Stats("cov_percent: zero mean".into()));
    }
    Ok(100.0 * sample_sd(values) / m)
}

/// Sample SD over a concatenation of per-patient voxel values.
pub fn pooled_sd(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Stats("pooled_sd: need ≥ 2 values".into()));
    }
    Ok(sample_sd(values))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnrResult {
    pub cnr: f64,
    /// Combined variance fell below the floor; `cnr` is a +∞ sentinel.
    pub degenerate: bool,
}

/// Two-region contrast-to-noise ratio |μT − μN| / √(σT² + σN²).
pub fn cnr(tumour: &[f64], normal: &[f64]) -> Result<CnrResult> {
    if tumour.len() < 2 || normal.len() < 2 {
        return Err(Error::Stats("cnr: need ≥ 2 values per region".into()));
    }
    let (st, sn) = (sample_sd(tumour), sample_sd(normal));
    let var = st * st + sn * sn;
    if var < 1e-12 {
        return Ok(CnrResult {
            cnr: f64::INFINITY,
            degenerate: true,
        });
    }
    Ok(CnrResult {
        cnr: (mean(tumour) - mean(normal)).abs() / var.sqrt(),
        degenerate: false,
    })
}

/// Linear-interpolation quantile of sorted-copy data (R type 7).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return Err(Error::Stats("quantile: empty input or q outside [0,1]".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let h = q * (v.len() as f64 - 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    pub method: String,
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub exact: bool,
    /// Zero-variance or otherwise degenerate input.
    pub degenerate: bool,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

// ---------------------------------------------------------------------------
// Shapiro-Wilk, Royston (1995) approximation (AS R94).

/// Shapiro-Wilk normality test for 3 ≤ n ≤ 5000.
pub fn shapiro_wilk(x: &[f64]) -> Result<StatTestResult> {
    let n = x.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::Stats(format!("shapiro_wilk: n = {n} outside [3, 5000]")));
    }
    let mut xs = x.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    if xs[n - 1] - xs[0] < 1e-300 {
        return Ok(StatTestResult {
            method: "shapiro-wilk".into(),
            statistic: 1.0,
            p_value: 1.0,
            n,
            exact: false,
            degenerate: true,
        });
    }
    let norm = std_normal();
    let nf = n as f64;
    // Blom-type expected normal order statistics
    let m: Vec<f64> = (1..=n)
        .map(|i| norm.inverse_cdf((i as f64 - 0.375) / (nf + 0.25)))
        .collect();
    let m_sq: f64 = m.iter().map(|v| v * v).sum();
    let rsn = 1.0 / nf.sqrt();
    let c: Vec<f64> = m.iter().map(|v| v / m_sq.sqrt()).collect();

    let mut a = vec![0.0; n];
    if n == 3 {
        a[2] = (0.5f64).sqrt();
        a[0] = -a[2];
    } else {
        // polynomial-corrected extreme weights, then renormalize the interior
        let an = -2.706056 * rsn.powi(5) + 4.434685 * rsn.powi(4) - 2.071190 * rsn.powi(3)
            - 0.147981 * rsn.powi(2)
            + 0.221157 * rsn
            + c[n - 1];
        if n > 5 {
            let an1 = -3.582633 * rsn.powi(5) + 5.682633 * rsn.powi(4)
                - 1.752461 * rsn.powi(3)
                - 0.293762 * rsn.powi(2)
                + 0.042981 * rsn
                + c[n - 2];
            let phi = (m_sq - 2.0 * m[n - 1] * m[n - 1] - 2.0 * m[n - 2] * m[n - 2])
                / (1.0 - 2.0 * an * an - 2.0 * an1 * an1);
            for i in 2..n - 2 {
                a[i] = m[i] / phi.sqrt();
            }
            a[n - 1] = an;
            a[n - 2] = an1;
            a[0] = -an;
            a[1] = -an1;
        } else {
            let phi = (m_sq - 2.0 * m[n - 1] * m[n - 1]) / (1.0 - 2.0 * an * an);
            for i in 1..n - 1 {
                a[i] = m[i] / phi.sqrt();
            }
            a[n - 1] = an;
            a[0] = -an;
        }
    }

    let xbar = mean(&xs);
    let num: f64 = a.iter().zip(&xs).map(|(ai, xi)| ai * xi).sum();
    let den: f64 = xs.iter().map(|v| (v - xbar) * (v - xbar)).sum();
    let w = (num * num / den).min(1.0);

    let p = if n == 3 {
        let p = 6.0 / std::f64::consts::PI
            * (w.sqrt().asin() - (0.75f64).sqrt().asin());
        p.clamp(0.0, 1.0)
    } else if n <= 11 {
        let gamma = -2.273 + 0.459 * nf;
        let lw = -(gamma - (1.0 - w).ln()).ln();
        let mu = 0.5440 - 0.39978 * nf + 0.025054 * nf * nf - 0.0006714 * nf * nf * nf;
        let sigma = (1.3822 - 0.77857 * nf + 0.062767 * nf * nf - 0.0020322 * nf * nf * nf).exp();
        1.0 - norm.cdf((lw - mu) / sigma)
    } else {
        let lw = (1.0 - w).ln();
        let ln_n = nf.ln();
        let mu = -1.5861 - 0.31082 * ln_n - 0.083751 * ln_n * ln_n + 0.0038915 * ln_n.powi(3);
        let sigma = (-0.4803 - 0.082676 * ln_n + 0.0030302 * ln_n * ln_n).exp();
        1.0 - norm.cdf((lw - mu) / sigma)
    };
    Ok(StatTestResult {
        method: "shapiro-wilk".into(),
        statistic: w,
        p_value: p.clamp(0.0, 1.0),
        n,
        exact: false,
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// t-tests

/// Two-sided paired t-test. Zero-variance differences yield p = 1 with the
/// degenerate flag rather than NaN.
pub fn paired_t(x: &[f64], y: &[f64]) -> Result<StatTestResult> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Stats("paired_t: need equal lengths ≥ 2".into()));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let n = d.len();
    let sd = sample_sd(&d);
    if sd == 0.0 {
        return Ok(StatTestResult {
            method: "paired-t".into(),
            statistic: 0.0,
            p_value: 1.0,
            n,
            exact: false,
            degenerate: true,
        });
    }
    let t = mean(&d) / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("df ≥ 1");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(StatTestResult {
        method: "paired-t".into(),
        statistic: t,
        p_value: p.clamp(0.0, 1.0),
        n,
        exact: false,
        degenerate: false,
    })
}

/// Two-sided two-sample t-test; `pooled` selects equal-variance pooling,
/// otherwise Welch's unequal-variance form.
pub fn two_sample_t(x: &[f64], y: &[f64], pooled: bool) -> Result<StatTestResult> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Stats("two_sample_t: need ≥ 2 per group".into()));
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (vx, vy) = (sample_sd(x).powi(2), sample_sd(y).powi(2));
    let (t, df) = if pooled {
        let sp2 = ((nx - 1.0) * vx + (ny - 1.0) * vy) / (nx + ny - 2.0);
        if sp2 == 0.0 {
            return Ok(StatTestResult {
                method: "pooled-t".into(),
                statistic: 0.0,
                p_value: 1.0,
                n: x.len() + y.len(),
                exact: false,
                degenerate: true,
            });
        }
        (
            (mean(x) - mean(y)) / (sp2 * (1.0 / nx + 1.0 / ny)).sqrt(),
            nx + ny - 2.0,
        )
    } else {
        let se2 = vx / nx + vy / ny;
        if se2 == 0.0 {
            return Ok(StatTestResult {
                method: "welch-t".into(),
                statistic: 0.0,
                p_value: 1.0,
                n: x.len() + y.len(),
                exact: false,
                degenerate: true,
            });
        }
        let df = se2 * se2
            / ((vx / nx).powi(2) / (nx - 1.0) + (vy / ny).powi(2) / (ny - 1.0));
        ((mean(x) - mean(y)) / se2.sqrt(), df)
    };
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(StatTestResult {
        method: if pooled { "pooled-t" } else { "welch-t" }.into(),
        statistic: t,
        p_value: p.clamp(0.0, 1.0),
        n: x.len() + y.len(),
        exact: false,
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Rank tests

/// Average ranks of `values`; ties share the mean of their rank block.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn tie_blocks(sorted: &[f64]) -> Vec<usize> {
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        blocks.push(j - i + 1);
        i = j + 1;
    }
    blocks
}

/// Two-sided Wilcoxon signed-rank test. Zero differences are dropped and
/// ties get average ranks. Exact enumeration for n ≤ 25 (doubled ranks keep
/// the distribution integral even with half-ranks); tie-corrected normal
/// approximation with continuity correction beyond.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<StatTestResult> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Stats("wilcoxon: need equal non-empty lengths".into()));
    }
    let d: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|v| *v != 0.0)
        .collect();
    let n = d.len();
    if n == 0 {
        return Ok(StatTestResult {
            method: "wilcoxon-signed-rank".into(),
            statistic: 0.0,
            p_value: 1.0,
            n: 0,
            exact: true,
            degenerate: true,
        });
    }
    let abs_d: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs_d);
    let w_plus: f64 = d
        .iter()
        .zip(&ranks)
        .filter(|(di, _)| **di > 0.0)
        .map(|(_, r)| r)
        .sum();

    if n <= 25 {
        // distribution of 2·W⁺ over all 2ⁿ sign patterns by DP
        let ranks2: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let total: u64 = ranks2.iter().sum();
        let mut counts = vec![0.0f64; total as usize + 1];
        counts[0] = 1.0;
        for &r in &ranks2 {
            for s in (r as usize..counts.len()).rev() {
                counts[s] += counts[s - r as usize];
            }
        }
        let denom = 2.0f64.powi(n as i32);
        let w2 = (2.0 * w_plus).round() as usize;
        let lower: f64 = counts[..=w2].iter().sum::<f64>() / denom;
        let upper: f64 = counts[w2..].iter().sum::<f64>() / denom;
        let p = (2.0 * lower.min(upper)).min(1.0);
        return Ok(StatTestResult {
            method: "wilcoxon-signed-rank".into(),
            statistic: w_plus,
            p_value: p,
            n,
            exact: true,
            degenerate: false,
        });
    }

    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let mut sorted_abs = abs_d.clone();
    sorted_abs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let tie_term: f64 = tie_blocks(&sorted_abs)
        .iter()
        .map(|&t| (t * t * t - t) as f64)
        .sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (w_plus - mu).abs() - 0.5;
    let p = 2.0 * (1.0 - std_normal().cdf(z.max(0.0) / var.sqrt()));
    Ok(StatTestResult {
        method: "wilcoxon-signed-rank".into(),
        statistic: w_plus,
        p_value: p.clamp(0.0, 1.0),
        n,
        exact: false,
        degenerate: false,
    })
}

fn u_statistic(x: &[f64], y: &[f64]) -> f64 {
    let mut u = 0.0;
    for a in x {
        for b in y {
            if a > b {
                u += 1.0;
            } else if a == b {
                u += 0.5;
            }
        }
    }
    u
}

/// Two-sided Mann-Whitney U. Exact enumeration over all group assignments
/// for n_x + n_y ≤ 16; tie-corrected normal approximation with continuity
/// correction otherwise.
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<StatTestResult> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Stats("mann_whitney: empty group".into()));
    }
    let (nx, ny) = (x.len(), y.len());
    let u_x = u_statistic(x, y);
    let n = nx + ny;

    if n <= 16 {
        let mut pooled: Vec<f64> = x.iter().chain(y).copied().collect();
        pooled.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        // every (n choose nx) assignment of pooled values to group x
        let mut lower = 0u64;
        let mut upper = 0u64;
        let mut total = 0u64;
        let mut chosen = vec![false; n];
        fn walk(
            pooled: &[f64],
            chosen: &mut Vec<bool>,
            start: usize,
            left: usize,
            u_obs: f64,
            lower: &mut u64,
            upper: &mut u64,
            total: &mut u64,
        ) {
            if left == 0 {
                let gx: Vec<f64> = pooled
                    .iter()
                    .zip(chosen.iter())
                    .filter(|(_, &c)| c)
                    .map(|(v, _)| *v)
                    .collect();
                let gy: Vec<f64> = pooled
                    .iter()
                    .zip(chosen.iter())
                    .filter(|(_, &c)| !c)
                    .map(|(v, _)| *v)
                    .collect();
                let u = u_statistic(&gx, &gy);
                *total += 1;
                if u <= u_obs + 1e-9 {
                    *lower += 1;
                }
                if u >= u_obs - 1e-9 {
                    *upper += 1;
                }
                return;
            }
            if pooled.len() - start < left {
                return;
            }
            chosen[start] = true;
            walk(pooled, chosen, start + 1, left - 1, u_obs, lower, upper, total);
            chosen[start] = false;
            walk(pooled, chosen, start + 1, left, u_obs, lower, upper, total);
        }
        walk(
            &pooled,
            &mut chosen,
            0,
            nx,
            u_x,
            &mut lower,
            &mut upper,
            &mut total,
        );
        let p = (2.0 * (lower.min(upper) as f64) / total as f64).min(1.0);
        return Ok(StatTestResult {
            method: "mann-whitney-u".into(),
            statistic: u_x,
            p_value: p,
            n,
            exact: true,
            degenerate: false,
        });
    }

    let (nxf, nyf, nf) = (nx as f64, ny as f64, n as f64);
    let mu = nxf * nyf / 2.0;
    let mut pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let tie_term: f64 = tie_blocks(&pooled)
        .iter()
        .map(|&t| (t * t * t - t) as f64)
        .sum();
    let var = nxf * nyf / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return Ok(StatTestResult {
            method: "mann-whitney-u".into(),
            statistic: u_x,
            p_value: 1.0,
            n,
            exact: false,
            degenerate: true,
        });
    }
    let z = ((u_x - mu).abs() - 0.5).max(0.0) / var.sqrt();
    let p = 2.0 * (1.0 - std_normal().cdf(z));
    Ok(StatTestResult {
        method: "mann-whitney-u".into(),
        statistic: u_x,
        p_value: p.clamp(0.0, 1.0),
        n,
        exact: false,
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Variance homogeneity

/// Levene's test in the Brown–Forsythe variant (deviations from medians).
pub fn levene(x: &[f64], y: &[f64]) -> Result<StatTestResult> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Stats("levene: need ≥ 2 per group".into()));
    }
    let med = |v: &[f64]| quantile(v, 0.5).expect("non-empty");
    let (mx, my) = (med(x), med(y));
    let zx: Vec<f64> = x.iter().map(|v| (v - mx).abs()).collect();
    let zy: Vec<f64> = y.iter().map(|v| (v - my).abs()).collect();
    let (nx, ny) = (zx.len() as f64, zy.len() as f64);
    let nf = nx + ny;
    let (zbx, zby) = (mean(&zx), mean(&zy));
    let zbar = (nx * zbx + ny * zby) / nf;
    let between = nx * (zbx - zbar).powi(2) + ny * (zby - zbar).powi(2);
    let within: f64 = zx.iter().map(|z| (z - zbx).powi(2)).sum::<f64>()
        + zy.iter().map(|z| (z - zby).powi(2)).sum::<f64>();
    if within == 0.0 {
        return Ok(StatTestResult {
            method: "levene-bf".into(),
            statistic: 0.0,
            p_value: 1.0,
            n: x.len() + y.len(),
            exact: false,
            degenerate: true,
        });
    }
    let stat = (nf - 2.0) * between / within; // k = 2 groups
    let dist = FisherSnedecor::new(1.0, nf - 2.0).expect("valid dof");
    let p = 1.0 - dist.cdf(stat);
    Ok(StatTestResult {
        method: "levene-bf".into(),
        statistic: stat,
        p_value: p.clamp(0.0, 1.0),
        n: x.len() + y.len(),
        exact: false,
        degenerate: false,
    })
}

/// Bartlett's variance homogeneity test (two groups).
pub fn bartlett(x: &[f64], y: &[f64]) -> Result<StatTestResult> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Stats("bartlett: need ≥ 2 per group".into()));
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (vx, vy) = (sample_sd(x).powi(2), sample_sd(y).powi(2));
    if vx == 0.0 || vy == 0.0 {
        return Ok(StatTestResult {
            method: "bartlett".into(),
            statistic: 0.0,
            p_value: if vx == vy { 1.0 } else { 0.0 },
            n: x.len() + y.len(),
            exact: false,
            degenerate: true,
        });
    }
    let nf = nx + ny;
    let sp2 = ((nx - 1.0) * vx + (ny - 1.0) * vy) / (nf - 2.0);
    let num = (nf - 2.0) * sp2.ln() - ((nx - 1.0) * vx.ln() + (ny - 1.0) * vy.ln());
    let corr = 1.0 + (1.0 / (nx - 1.0) + 1.0 / (ny - 1.0) - 1.0 / (nf - 2.0)) / 3.0;
    let stat = num / corr;
    let dist = ChiSquared::new(1.0).expect("1 dof");
    let p = 1.0 - dist.cdf(stat.max(0.0));
    Ok(StatTestResult {
        method: "bartlett".into(),
        statistic: stat,
        p_value: p.clamp(0.0, 1.0),
        n: x.len() + y.len(),
        exact: false,
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Decision tree

pub const GATE_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecidedTest {
    pub result: StatTestResult,
    /// Which branch of the decision tree fired.
    pub branch: String,
    /// Gate test p-values that drove the choice.
    pub gates: Vec<(String, f64)>,
}

/// Normality-gated comparison at α = 0.05.
///
/// Paired: Shapiro-Wilk on the differences picks a paired t-test or the
/// Wilcoxon signed-rank test. Unpaired: Shapiro-Wilk on both groups picks a
/// t-test (pooled or Welch by Levene/Bartlett agreement) or Mann-Whitney U.
pub fn decide_and_test(x: &[f64], y: &[f64], paired: bool) -> Result<DecidedTest> {
    if paired {
        if x.len() != y.len() {
            return Err(Error::Stats("paired comparison needs equal lengths".into()));
        }
        let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let sw = shapiro_wilk(&d)?;
        let gates = vec![("shapiro-wilk-diffs".to_string(), sw.p_value)];
        if sw.p_value >= GATE_ALPHA {
            Ok(DecidedTest {
                result: paired_t(x, y)?,
                branch: "paired-t".into(),
                gates,
            })
        } else {
            Ok(DecidedTest {
                result: wilcoxon_signed_rank(x, y)?,
                branch: "wilcoxon".into(),
                gates,
            })
        }
    } else {
        let swx = shapiro_wilk(x)?;
        let swy = shapiro_wilk(y)?;
        let mut gates = vec![
            ("shapiro-wilk-x".to_string(), swx.p_value),
            ("shapiro-wilk-y".to_string(), swy.p_value),
        ];
        if swx.p_value >= GATE_ALPHA && swy.p_value >= GATE_ALPHA {
            let lev = levene(x, y)?;
            let bar = bartlett(x, y)?;
            gates.push(("levene".to_string(), lev.p_value));
            gates.push(("bartlett".to_string(), bar.p_value));
            let equal_var = lev.p_value >= GATE_ALPHA && bar.p_value >= GATE_ALPHA;
            Ok(DecidedTest {
                result: two_sample_t(x, y, equal_var)?,
                branch: if equal_var { "pooled-t" } else { "welch-t" }.into(),
                gates,
            })
        } else {
            Ok(DecidedTest {
                result: mann_whitney_u(x, y)?,
                branch: "mann-whitney".into(),
                gates,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Model ranking and the evaluation report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub name: String,
    pub mse: f64,
    pub aicc: f64,
    pub bic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRanking {
    /// Model names ordered best (lowest criterion) first.
    pub by_aicc: Vec<String>,
    pub by_bic: Vec<String>,
    pub orderings_agree: bool,
}

pub fn rank_models(scores: &[ModelScore]) -> Result<ModelRanking> {
    if scores.is_empty() {
        return Err(Error::Stats("rank_models: no scores".into()));
    }
    let order_by = |key: fn(&ModelScore) -> f64| {
        let mut v: Vec<&ModelScore> = scores.iter().collect();
        v.sort_by(|a, b| key(a).partial_cmp(&key(b)).expect("finite criteria"));
        v.into_iter().map(|s| s.name.clone()).collect::<Vec<_>>()
    };
    let by_aicc = order_by(|s| s.aicc);
    let by_bic = order_by(|s| s.bic);
    let agree = by_aicc == by_bic;
    Ok(ModelRanking {
        by_aicc,
        by_bic,
        orderings_agree: agree,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariabilityReport {
    pub pooled_sd: f64,
    pub cov_percent: f64,
    pub cnr_median: f64,
    pub cnr_q1: f64,
    pub cnr_q3: f64,
    pub degenerate_cnr_count: usize,
}

/// Table-6-style variability summary from per-patient tumour/normal values.
pub fn variability_report(
    per_patient_tumour: &[Vec<f64>],
    per_patient_normal: &[Vec<f64>],
) -> Result<VariabilityReport> {
    if per_patient_tumour.len() != per_patient_normal.len() || per_patient_tumour.is_empty() {
        return Err(Error::Stats("variability: patient lists must match".into()));
    }
    let patient_means: Vec<f64> = per_patient_tumour.iter().map(|v| mean(v)).collect();
    let all_tumour: Vec<f64> = per_patient_tumour.iter().flatten().copied().collect();
    let mut cnrs = Vec::new();
    let mut degenerate = 0;
    for (t, n) in per_patient_tumour.iter().zip(per_patient_normal) {
        let c = cnr(t, n)?;
        if c.degenerate {
            degenerate += 1;
        } else {
            cnrs.push(c.cnr);
        }
    }
    if cnrs.is_empty() {
        return Err(Error::Stats("variability: all CNRs degenerate".into()));
    }
    Ok(VariabilityReport {
        pooled_sd: pooled_sd(&all_tumour)?,
        cov_percent: cov_percent(&patient_means)?,
        cnr_median: quantile(&cnrs, 0.5)?,
        cnr_q1: quantile(&cnrs, 0.25)?,
        cnr_q3: quantile(&cnrs, 0.75)?,
        degenerate_cnr_count: degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal as NormalDist, StandardNormal};

    #[test]
    fn mse_examples() {
        let a = array![[1.0, 0.0]];
        let b = array![[1.0, 1.0]];
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 0.5);
        assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
        assert!(mse(&a, &array![[1.0]]).is_err());
    }

    #[test]
    fn aicc_frozen_example_and_limits() {
        // n=100, k=2, SSR=1: 100·ln(0.01) + 4 + 12/97
        assert_relative_eq!(
            aicc(1.0, 100, 2).unwrap(),
            -456.39330725860293,
            max_relative = 1e-14
        );
        assert!(aicc(1.0, 100, 3).unwrap() > aicc(1.0, 100, 2).unwrap());
        // AICc → AIC as n → ∞
        let aic = |n: usize, k: usize| (n as f64) * (1.0f64 / n as f64).ln() + 2.0 * k as f64;
        let diff = aicc(1.0, 1_000_000, 2).unwrap() - aic(1_000_000, 2);
        assert!(diff.abs() < 1e-4);
        assert!(aicc(1.0, 3, 2).is_err());
    }

    #[test]
    fn bic_against_manual() {
        let n = 100usize;
        let expect = 100.0 * (0.01f64).ln() + 2.0 * (100.0f64).ln();
        assert_relative_eq!(bic(1.0, n, 2).unwrap(), expect, max_relative = 1e-14);
    }

    #[test]
    fn cov_pooled_and_cnr_examples() {
        assert_eq!(cov_percent(&[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_relative_eq!(
            cov_percent(&[1.0, 3.0]).unwrap(),
            100.0 * std::f64::consts::SQRT_2 / 2.0,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            cov_percent(&[2.0, 6.0]).unwrap(),
            cov_percent(&[1.0, 3.0]).unwrap(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            pooled_sd(&[0.0, 0.0, 1.0, 1.0]).unwrap(),
            (1.0f64 / 3.0).sqrt(),
            max_relative = 1e-12
        );
        let deg = cnr(&[2.0, 2.0, 2.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!(deg.degenerate && deg.cnr.is_infinite());
        let same = cnr(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(same.cnr, 0.0);
    }

    #[test]
    fn cnr_converges_to_plugin_value() {
        // T ~ N(2,1), N ~ N(1,1) → CNR → 1/√2
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = NormalDist::new(0.0, 1.0).unwrap();
        let t: Vec<f64> = (0..200_000).map(|_| 2.0 + d.sample(&mut rng)).collect();
        let n: Vec<f64> = (0..200_000).map(|_| 1.0 + d.sample(&mut rng)).collect();
        let c = cnr(&t, &n).unwrap();
        assert_relative_eq!(c.cnr, 1.0 / std::f64::consts::SQRT_2, max_relative = 0.02);
    }

    #[test]
    fn shapiro_wilk_separates_normal_from_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut normal_pass = 0;
        for _ in 0..9 {
            let x: Vec<f64> = (0..500).map(|_| rng.sample(StandardNormal)).collect();
            if shapiro_wilk(&x).unwrap().p_value > 0.05 {
                normal_pass += 1;
            }
        }
        assert!(normal_pass >= 7, "normal data rejected too often: {normal_pass}/9");
        let u: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert!(shapiro_wilk(&u).unwrap().p_value < 0.001);
        assert!(shapiro_wilk(&[1.0, 2.0]).is_err());
        assert!(shapiro_wilk(&vec![0.0; 5001]).is_err());
        let c = shapiro_wilk(&[3.0, 3.0, 3.0, 3.0]).unwrap();
        assert!(c.degenerate);
    }

    #[test]
    fn shapiro_wilk_small_n_statistic_sane() {
        // W ∈ (0, 1]; perfectly linear spacing is maximally normal-looking
        for n in [3usize, 5, 8, 11, 12, 50] {
            let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let r = shapiro_wilk(&x).unwrap();
            assert!(r.statistic > 0.9 && r.statistic <= 1.0, "n={n} W={}", r.statistic);
            assert!((0.0..=1.0).contains(&r.p_value));
        }
    }

    /// Numerical t CDF by Simpson quadrature as an independent oracle.
    fn t_two_sided_p(t: f64, df: f64) -> f64 {
        let density = |x: f64| {
            let c = statrs::function::gamma::ln_gamma((df + 1.0) / 2.0)
                - statrs::function::gamma::ln_gamma(df / 2.0)
                - 0.5 * (df * std::f64::consts::PI).ln();
            (c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp()
        };
        // ∫_{|t|}^{60} by Simpson, doubled
        let (a, b, m) = (t.abs(), 60.0, 20_000);
        let h = (b - a) / m as f64;
        let mut s = density(a) + density(b);
        for i in 1..m {
            let x = a + i as f64 * h;
            s += density(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        2.0 * s * h / 3.0
    }

    #[test]
    fn paired_t_matches_quadrature_oracle() {
        let x = [5.1, 4.8, 6.0, 5.5, 5.9, 4.9, 5.2, 5.7];
        let y = [4.6, 4.9, 5.5, 5.1, 5.6, 4.7, 4.8, 5.3];
        let r = paired_t(&x, &y).unwrap();
        let oracle = t_two_sided_p(r.statistic, 7.0);
        assert_relative_eq!(r.p_value, oracle, max_relative = 1e-6);
        // antisymmetry
        let rev = paired_t(&y, &x).unwrap();
        assert_relative_eq!(r.statistic, -rev.statistic, max_relative = 1e-12);
        // degenerate
        let same = paired_t(&x, &x).unwrap();
        assert!(same.degenerate && same.p_value == 1.0);
    }

    #[test]
    fn wilcoxon_matches_brute_force_at_n6() {
        let x = [1.2, 3.4, 2.2, 5.1, 0.4, 2.8];
        let y = [0.8, 2.9, 2.5, 3.0, 1.1, 2.0];
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert!(r.exact);
        // brute force over all 2^6 sign patterns
        let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let abs_d: Vec<f64> = d.iter().map(|v| v.abs()).collect();
        let ranks = average_ranks(&abs_d);
        let w_obs: f64 = d
            .iter()
            .zip(&ranks)
            .filter(|(di, _)| **di > 0.0)
            .map(|(_, r)| r)
            .sum();
        let (mut lo, mut hi) = (0, 0);
        for pattern in 0..64u32 {
            let w: f64 = (0..6)
                .filter(|i| pattern & (1 << i) != 0)
                .map(|i| ranks[i])
                .sum();
            if w <= w_obs + 1e-9 {
                lo += 1;
            }
            if w >= w_obs - 1e-9 {
                hi += 1;
            }
        }
        let p_brute = (2.0 * (lo.min(hi) as f64) / 64.0).min(1.0);
        assert_abs_diff_eq!(r.p_value, p_brute, epsilon = 1e-12);
        // degenerate: identical vectors
        let same = wilcoxon_signed_rank(&x, &x).unwrap();
        assert!(same.degenerate && same.p_value == 1.0);
    }

    #[test]
    fn wilcoxon_exact_and_normal_agree_at_n25() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x: Vec<f64> = (0..25).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = (0..25)
            .map(|_| 0.3 + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let exact = wilcoxon_signed_rank(&x, &y).unwrap();
        assert!(exact.exact);
        // rerun through the approximation path by padding to n = 26
        let mut x2 = x.clone();
        let mut y2 = y.clone();
        x2.push(1.0);
        y2.push(0.5);
        let approx_26 = wilcoxon_signed_rank(&x2, &y2).unwrap();
        assert!(!approx_26.exact);
        // exact vs its own normal approximation at the same data
        let nf = 25.0f64;
        let mu = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0;
        let z = ((exact.statistic - mu).abs() - 0.5) / var.sqrt();
        let p_norm = 2.0 * (1.0 - std_normal().cdf(z));
        assert!((exact.p_value - p_norm).abs() < 0.01);
    }

    #[test]
    fn mann_whitney_identity_and_brute_force() {
        let x = [1.0, 4.0, 2.5, 7.0];
        let y = [2.0, 3.0, 5.0];
        let ux = u_statistic(&x, &y);
        let uy = u_statistic(&y, &x);
        assert_eq!(ux + uy, (x.len() * y.len()) as f64);

        let r = mann_whitney_u(&x, &y).unwrap();
        assert!(r.exact);
        // brute force over all C(7,4) = 35 assignments
        let pooled: Vec<f64> = x.iter().chain(&y).copied().collect();
        let n = pooled.len();
        let (mut lo, mut hi, mut total) = (0u32, 0u32, 0u32);
        for bits in 0u32..(1 << n) {
            if bits.count_ones() as usize != x.len() {
                continue;
            }
            let gx: Vec<f64> = (0..n).filter(|i| bits & (1 << i) != 0).map(|i| pooled[i]).collect();
            let gy: Vec<f64> = (0..n).filter(|i| bits & (1 << i) == 0).map(|i| pooled[i]).collect();
            let u = u_statistic(&gx, &gy);
            total += 1;
            if u <= ux + 1e-9 {
                lo += 1;
            }
            if u >= ux - 1e-9 {
                hi += 1;
            }
        }
        let p_brute = (2.0 * (lo.min(hi) as f64) / total as f64).min(1.0);
        assert_abs_diff_eq!(r.p_value, p_brute, epsilon = 1e-12);

        let same = mann_whitney_u(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(same.p_value > 0.9);
    }

    #[test]
    fn mann_whitney_large_sample_detects_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..120).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = (0..120)
            .map(|_| 1.0 + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let r = mann_whitney_u(&x, &y).unwrap();
        assert!(!r.exact);
        assert!(r.p_value < 1e-6);
    }

    #[test]
    fn variance_tests_power_and_null() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..200).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let shifted: Vec<f64> = x.iter().map(|v| v + 5.0).collect();
        assert!(levene(&x, &shifted).unwrap().p_value > 0.05);
        assert!(bartlett(&x, &shifted).unwrap().p_value > 0.05);
        let wide: Vec<f64> = (0..200)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * (10.0f64).sqrt())
            .collect();
        assert!(levene(&x, &wide).unwrap().p_value < 0.01);
        assert!(bartlett(&x, &wide).unwrap().p_value < 0.01);
        assert!(levene(&[1.0], &x).is_err());
        assert!(bartlett(&[1.0], &x).is_err());
    }

    #[test]
    fn decision_tree_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let n = 60;
        let x: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| v + 0.5 + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let d = decide_and_test(&x, &y, true).unwrap();
        assert_eq!(d.branch, "paired-t");

        // heavy-tailed paired differences → Wilcoxon
        let y_heavy: Vec<f64> = x
            .iter()
            .map(|v| {
                let t: f64 = rng.sample(StandardNormal);
                v + t * t * t * t * t // quintic tail
            })
            .collect();
        let d = decide_and_test(&x, &y_heavy, true).unwrap();
        assert_eq!(d.branch, "wilcoxon");

        // unpaired, grossly non-normal → Mann-Whitney
        let u: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..1.0)).collect();
        let u2: Vec<f64> = (0..200).map(|_| rng.gen_range(0.3..1.3)).collect();
        let d = decide_and_test(&u, &u2, false).unwrap();
        assert_eq!(d.branch, "mann-whitney");

        // unpaired normal, equal variance → pooled t
        let a: Vec<f64> = (0..100).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..100)
            .map(|_| 0.2 + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let d = decide_and_test(&a, &b, false).unwrap();
        assert!(d.branch == "pooled-t" || d.branch == "welch-t");
        assert!(!d.gates.is_empty());
    }

    #[test]
    fn rank_models_basics() {
        let single = vec![ModelScore {
            name: "verdict".into(),
            mse: 0.1,
            aicc: -10.0,
            bic: -9.0,
        }];
        let r = rank_models(&single).unwrap();
        assert_eq!(r.by_aicc, vec!["verdict"]);
        assert!(r.orderings_agree);

        // same k, strictly better SSR → better on both criteria
        let n = 100;
        let good = ModelScore {
            name: "good".into(),
            mse: 0.01,
            aicc: aicc(1.0, n, 2).unwrap(),
            bic: bic(1.0, n, 2).unwrap(),
        };
        let bad = ModelScore {
            name: "bad".into(),
            mse: 0.02,
            aicc: aicc(2.0, n, 2).unwrap(),
            bic: bic(2.0, n, 2).unwrap(),
        };
        let r = rank_models(&[bad, good]).unwrap();
        assert_eq!(r.by_aicc[0], "good");
        assert_eq!(r.by_bic[0], "good");
        assert!(r.orderings_agree);
    }

    #[test]
    fn variability_report_orders_quartiles() {
        let t = vec![vec![0.4, 0.5, 0.45], vec![0.42, 0.48, 0.5], vec![0.3, 0.5, 0.6]];
        let n = vec![vec![0.2, 0.25, 0.22], vec![0.18, 0.2, 0.24], vec![0.2, 0.21, 0.26]];
        let r = variability_report(&t, &n).unwrap();
        assert!(r.cnr_q1 <= r.cnr_median && r.cnr_median <= r.cnr_q3);
        assert!(r.pooled_sd > 0.0 && r.cov_percent > 0.0);
        assert_eq!(r.degenerate_cnr_count, 0);
    }

    #[test]
    fn permutation_invariance() {
        let v = [3.0, 1.0, 4.0, 1.5, 9.0];
        let mut p = v;
        p.reverse();
        // invariant up to summation-order rounding
        assert_relative_eq!(pooled_sd(&v).unwrap(), pooled_sd(&p).unwrap(), max_relative = 1e-12);
        assert_relative_eq!(cov_percent(&v).unwrap(), cov_percent(&p).unwrap(), max_relative = 1e-12);
        let t = [2.0, 2.5, 3.0];
        let n = [1.0, 1.2, 0.9];
        let mut tp = t;
        tp.reverse();
        assert_relative_eq!(cnr(&t, &n).unwrap().cnr, cnr(&tp, &n).unwrap().cnr, max_relative = 1e-12);
    }
}
