//! Monte-Carlo random-walk oracle for PGSE diffusion inside an impermeable
//! sphere. Validates the GPD series in [`crate::models`].

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{gamma_g_rad_per_ms_um, PulseTiming};

const WALKERS_PER_BATCH: u64 = 1024;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McConfig {
    pub n_walkers: usize,
    pub dt_ms: f64,
    pub seed: u64,
    pub r_um: f64,
    pub d_um2_ms: f64,
    pub g_mt_m: f64,
    pub timing: PulseTiming,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        self.timing.validate()?;
        if self.n_walkers < 1 {
            return Err(Error::InvalidConfig("n_walkers must be ≥ 1".into()));
        }
        if self.r_um <= 0.0 || self.d_um2_ms < 0.0 || self.g_mt_m < 0.0 {
            return Err(Error::InvalidConfig(
                "need r > 0, d ≥ 0, g ≥ 0".to_string(),
            ));
        }
        if !(self.dt_ms > 0.0) || self.dt_ms > self.timing.delta_ms / 50.0 {
            return Err(Error::InvalidConfig(format!(
                "dt = {} must satisfy 0 < dt ≤ δ/50 = {}",
                self.dt_ms,
                self.timing.delta_ms / 50.0
            )));
        }
        let step = (6.0 * self.d_um2_ms * self.dt_ms).sqrt();
        if step > self.r_um / 10.0 {
            return Err(Error::InvalidConfig(format!(
                "step length {step:.4} μm exceeds R/10 = {:.4}; reduce dt",
                self.r_um / 10.0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McEstimate {
    pub signal: f64,
    pub standard_error: f64,
    pub n_walkers: usize,
}

/// Gradient waveform segments with constant amplitude sign:
/// +G on [0, δ], 0 on [δ, Δ], −G on [Δ, Δ+δ].
fn segments(timing: &PulseTiming) -> [(f64, f64, f64); 3] {
    let (d, bd) = (timing.delta_ms, timing.big_delta_ms);
    [(0.0, d, 1.0), (d, bd, 0.0), (bd, bd + d, -1.0)]
}

fn uniform_in_sphere(rng: &mut ChaCha8Rng, r: f64) -> [f64; 3] {
    loop {
        let p = [
            rng.gen_range(-r..=r),
            rng.gen_range(-r..=r),
            rng.gen_range(-r..=r),
        ];
        if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= r * r {
            return p;
        }
    }
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> [f64; 3] {
    let d = rand::distributions::Standard;
    let mut draw = || {
        // Box-Muller
        let u1: f64 = rng.sample::<f64, _>(d).max(f64::MIN_POSITIVE);
        let u2: f64 = rng.sample(d);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    [draw() * sigma, draw() * sigma, draw() * sigma]
}

/// Move a walker by `disp`, reflecting specularly off the sphere boundary.
fn step_with_reflection(pos: [f64; 3], disp: [f64; 3], r: f64) -> [f64; 3] {
    let mut p0 = pos;
    let mut v = disp;
    for _ in 0..16 {
        let p1 = [p0[0] + v[0], p0[1] + v[1], p0[2] + v[2]];
        let r1sq = p1[0] * p1[0] + p1[1] * p1[1] + p1[2] * p1[2];
        if r1sq <= r * r {
            return p1;
        }
        // solve |p0 + t·v| = r for t ∈ (0, 1]
        let a = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        let b = 2.0 * (p0[0] * v[0] + p0[1] * v[1] + p0[2] * v[2]);
        let c = p0[0] * p0[0] + p0[1] * p0[1] + p0[2] * p0[2] - r * r;
        let disc = (b * b - 4.0 * a * c).max(0.0);
        let t = ((-b + disc.sqrt()) / (2.0 * a)).clamp(0.0, 1.0);
        let hit = [p0[0] + t * v[0], p0[1] + t * v[1], p0[2] + t * v[2]];
        let nrm = (hit[0] * hit[0] + hit[1] * hit[1] + hit[2] * hit[2]).sqrt();
        let n = [hit[0] / nrm, hit[1] / nrm, hit[2] / nrm];
        let rem = [
            (1.0 - t) * v[0],
            (1.0 - t) * v[1],
            (1.0 - t) * v[2],
        ];
        let dot = rem[0] * n[0] + rem[1] * n[1] + rem[2] * n[2];
        v = [
            rem[0] - 2.0 * dot * n[0],
            rem[1] - 2.0 * dot * n[1],
            rem[2] - 2.0 * dot * n[2],
        ];
        p0 = hit;
    }
    // pathological multi-reflection chain: clamp inside radially
    let nrm = (p0[0] * p0[0] + p0[1] * p0[1] + p0[2] * p0[2]).sqrt();
    if nrm > r {
        let s = r / nrm * (1.0 - 1e-12);
        [p0[0] * s, p0[1] * s, p0[2] * s]
    } else {
        p0
    }
}

/// Accumulated cos(φ) over one batch of walkers.
fn run_batch(cfg: &McConfig, batch: u64, n: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(batch);
    let gg = gamma_g_rad_per_ms_um(cfg.g_mt_m);
    let segs = segments(&cfg.timing);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let mut pos = uniform_in_sphere(&mut rng, cfg.r_um);
        let mut phase = 0.0;
        for &(t0, t1, sign) in &segs {
            let span = t1 - t0;
            let n_steps = (span / cfg.dt_ms).ceil().max(1.0) as usize;
            let dt = span / n_steps as f64;
            let sigma = (2.0 * cfg.d_um2_ms * dt).sqrt();
            for _ in 0..n_steps {
                let before = pos[0];
                if sigma > 0.0 {
                    let disp = gaussian3(&mut rng, sigma);
                    pos = step_with_reflection(pos, disp, cfg.r_um);
                }
                // trapezoid in x over the step
                if sign != 0.0 {
                    phase += sign * gg * dt * 0.5 * (before + pos[0]);
                }
            }
        }
        let c = phase.cos();
        sum += c;
        sum_sq += c * c;
    }
    (sum, sum_sq)
}

/// Mean of cos(φ) over all walkers and its standard error.
///
/// Walker batches use counter-based ChaCha streams so results are
/// bit-identical regardless of worker scheduling.
pub fn mc_sphere_signal(cfg: &McConfig) -> Result<McEstimate> {
    cfg.validate()?;
    if cfg.g_mt_m == 0.0 {
        return Ok(McEstimate {
            signal: 1.0,
            standard_error: 0.0,
            n_walkers: cfg.n_walkers,
        });
    }
    let n = cfg.n_walkers;
    let n_batches = (n as u64 + WALKERS_PER_BATCH - 1) / WALKERS_PER_BATCH;
    let partials: Vec<(f64, f64)> = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let start = (b * WALKERS_PER_BATCH) as usize;
            let count = (n - start).min(WALKERS_PER_BATCH as usize);
            run_batch(cfg, b, count)
        })
        .collect();
    let (sum, sum_sq) = partials
        .iter()
        .fold((0.0, 0.0), |(a, b), &(s, q)| (a + s, b + q));
    let mean = sum / n as f64;
    let var = if n > 1 {
        ((sum_sq - sum * sum / n as f64) / (n as f64 - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        signal: mean,
        standard_error: (var / n as f64).sqrt(),
        n_walkers: n,
    })
}
