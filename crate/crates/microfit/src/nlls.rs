//! Conventional non-linear least-squares fitting via Levenberg-Marquardt
//! with a sigmoid box reparameterization and multi-start restarts.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelKind, ParamBounds};
use crate::protocol::AcquisitionProtocol;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub max_iter: usize,
    /// Initial damping and its ×10 / ÷10 schedule are fixed; this is λ₀.
    pub lambda0: f64,
    /// Relative SSR-decrease and step-norm convergence threshold.
    pub tol: f64,
    /// Multi-start count: the first start is the box midpoint (z = 0),
    /// the rest are uniform draws over the box.
    pub n_starts: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            lambda0: 1e-3,
            tol: 1e-10,
            n_starts: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    /// Free parameters in natural units, inside the box.
    pub params: Vec<f64>,
    pub ssr: f64,
    pub n_iter: usize,
    pub converged: bool,
    pub restarts_used: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// θ = lo + (hi − lo)·σ(z), an unconstrained chart of the open box.
fn theta_from_z(z: &[f64], bounds: &[[f64; 2]]) -> Vec<f64> {
    z.iter()
        .zip(bounds)
        .map(|(&zi, b)| b[0] + (b[1] - b[0]) * sigmoid(zi))
        .collect()
}

/// dθ/dz = (hi − lo)·σ(z)(1 − σ(z)).
fn dtheta_dz(z: &[f64], bounds: &[[f64; 2]]) -> Vec<f64> {
    z.iter()
        .zip(bounds)
        .map(|(&zi, b)| {
            let s = sigmoid(zi);
            (b[1] - b[0]) * s * (1.0 - s)
        })
        .collect()
}

fn residuals_and_jacobian(
    model: ModelKind,
    z: &[f64],
    bounds: &[[f64; 2]],
    measured: &[f64],
    protocol: &AcquisitionProtocol,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let theta = theta_from_z(z, bounds);
    let (sig, jac_theta) = crate::models::model_signal_jacobian(model, &theta, protocol)?;
    let chain = dtheta_dz(z, bounds);
    let n = sig.len();
    let k = z.len();
    let r = DVector::from_iterator(n, sig.iter().zip(measured).map(|(s, m)| s - m));
    let mut j = DMatrix::zeros(n, k);
    for (col, (jc, ch)) in jac_theta.iter().zip(&chain).enumerate() {
        for row in 0..n {
            j[(row, col)] = jc[row] * ch;
        }
    }
    Ok((r, j))
}

fn lm_from_start(
    model: ModelKind,
    z0: Vec<f64>,
    bounds: &[[f64; 2]],
    measured: &[f64],
    protocol: &AcquisitionProtocol,
    cfg: &LmConfig,
) -> Result<(Vec<f64>, f64, usize, bool)> {
    let k = z0.len();
    let mut z = z0;
    let (mut r, mut j) = residuals_and_jacobian(model, &z, bounds, measured, protocol)?;
    let mut ssr = r.norm_squared();
    let mut lambda = cfg.lambda0;
    let mut converged = false;
    let mut iter = 0;
    while iter < cfg.max_iter {
        iter += 1;
        let jt = j.transpose();
        let mut a = &jt * &j;
        let g = &jt * &r;
        for d in 0..k {
            a[(d, d)] += lambda * a[(d, d)].max(1e-12);
        }
        let step = match a.clone().lu().solve(&g) {
            Some(s) if s.iter().all(|v| v.is_finite()) => s,
            _ => {
                lambda *= 10.0;
                continue;
            }
        };
        let z_new: Vec<f64> = z.iter().zip(step.iter()).map(|(zi, s)| zi - s).collect();
        let (r_new, j_new) = residuals_and_jacobian(model, &z_new, bounds, measured, protocol)?;
        let ssr_new = r_new.norm_squared();
        if ssr_new.is_finite() && ssr_new < ssr {
            let rel_decrease = (ssr - ssr_new) / ssr.max(f64::MIN_POSITIVE);
            let step_norm = step.norm();
            z = z_new;
            r = r_new;
            j = j_new;
            ssr = ssr_new;
            lambda /= 10.0;
            if rel_decrease < cfg.tol || step_norm < cfg.tol {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                converged = true; // damping exhausted: at a local minimum
                break;
            }
        }
    }
    Ok((theta_from_z(&z, bounds), ssr, iter, converged))
}

/// Fit one voxel's shell-averaged signal decay.
///
/// Rejects non-finite or all-zero inputs rather than producing NaN output.
pub fn fit_voxel(
    model: ModelKind,
    measured: &[f64],
    protocol: &AcquisitionProtocol,
    bounds: &ParamBounds,
    cfg: &LmConfig,
) -> Result<FitResult> {
    if measured.len() != protocol.n_shells() {
        return Err(Error::FitRejected(format!(
            "signal has {} shells, protocol has {}",
            measured.len(),
            protocol.n_shells()
        )));
    }
    if measured.iter().any(|v| !v.is_finite()) {
        return Err(Error::FitRejected("non-finite signal".into()));
    }
    if measured.iter().all(|&v| v == 0.0) {
        return Err(Error::FitRejected("all-zero signal".into()));
    }
    let free_bounds = bounds.free_bounds(model);
    let k = free_bounds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut best: Option<FitResult> = None;
    for start in 0..cfg.n_starts.max(1) {
        let z0: Vec<f64> = if start == 0 {
            vec![0.0; k] // box midpoint
        } else {
            // uniform draw over the box, mapped back to z
            (0..k)
                .map(|_| {
                    let u: f64 = rng.gen_range(0.02..0.98);
                    (u / (1.0 - u)).ln()
                })
                .collect()
        };
        let (params, ssr, n_iter, converged) =
            lm_from_start(model, z0, &free_bounds, measured, protocol, cfg)?;
        if !ssr.is_finite() || params.iter().any(|p| !p.is_finite()) {
            continue;
        }
        let better = best.as_ref().map_or(true, |b| ssr < b.ssr);
        if better {
            best = Some(FitResult {
                params,
                ssr,
                n_iter,
                converged,
                restarts_used: start + 1,
            });
        }
    }
    best.ok_or_else(|| Error::FitRejected("all restarts diverged".into()))
}

/// Fit every row of a voxels×shells table in parallel.
///
/// The per-voxel restart stream is seeded by `cfg.seed ^ voxel_index`, so
/// results are invariant to row processing order.
pub fn fit_volume(
    model: ModelKind,
    table: &Array2<f64>,
    protocol: &AcquisitionProtocol,
    bounds: &ParamBounds,
    cfg: &LmConfig,
) -> Vec<Result<FitResult>> {
    (0..table.nrows())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = table.row(i).to_vec();
            let voxel_cfg = LmConfig {
                seed: cfg.seed ^ (i as u64),
                ..*cfg
            };
            fit_voxel(model, &row, protocol, bounds, &voxel_cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{model_signal_vector, DkiParams, ModelParams, VerdictParams};
    use crate::protocol::{subprotocol, SubProtocol};
    use approx::assert_abs_diff_eq;
    use ndarray::Axis;

    fn proto() -> AcquisitionProtocol {
        subprotocol(SubProtocol::Sp1)
    }

    #[test]
    fn noise_free_dki_round_trip() {
        let p = proto();
        let bounds = ParamBounds::default();
        let cfg = LmConfig::default();
        for (d, k) in [(1.2, 0.8), (0.6, 2.5), (2.4, 0.3)] {
            let truth = ModelParams::Dki(DkiParams { d_k: d, k });
            let sig = model_signal_vector(&truth, &p).unwrap();
            let fit = fit_voxel(ModelKind::Dki, &sig, &p, &bounds, &cfg).unwrap();
            assert_abs_diff_eq!(fit.params[0], d, epsilon = 1e-6);
            assert_abs_diff_eq!(fit.params[1], k, epsilon = 1e-6);
            assert!(fit.ssr < 1e-16);
        }
    }

    #[test]
    fn noise_free_verdict_round_trip() {
        let p = proto();
        let bounds = ParamBounds::default();
        let cfg = LmConfig::default();
        for (f_ic, f_ees, r, d_ees) in [(0.45, 0.45, 9.0, 2.0), (0.2, 0.65, 7.0, 1.8)] {
            let truth = ModelParams::Verdict(VerdictParams::from_free(f_ic, f_ees, r, d_ees));
            let sig = model_signal_vector(&truth, &p).unwrap();
            let fit = fit_voxel(ModelKind::Verdict, &sig, &p, &bounds, &cfg).unwrap();
            assert!(
                (fit.params[0] - f_ic).abs() < 0.02,
                "f_ic {} vs {}",
                fit.params[0],
                f_ic
            );
            assert!(
                (fit.params[2] - r).abs() / r < 0.05,
                "r {} vs {}",
                fit.params[2],
                r
            );
        }
    }

    #[test]
    fn constant_signal_pushes_diffusivity_to_lower_bound() {
        let p = proto();
        let bounds = ParamBounds::default();
        let cfg = LmConfig::default();
        let sig = vec![1.0; p.n_shells()];
        let fit = fit_voxel(ModelKind::Dki, &sig, &p, &bounds, &cfg).unwrap();
        // ones decay only through d_k; best fit hugs the lower box edge
        assert!(fit.params[0] < 0.02, "d_k = {}", fit.params[0]);
    }

    #[test]
    fn rejects_bad_input() {
        let p = proto();
        let bounds = ParamBounds::default();
        let cfg = LmConfig::default();
        assert!(fit_voxel(ModelKind::Dki, &[1.0, 2.0], &p, &bounds, &cfg).is_err());
        let nan = vec![f64::NAN; p.n_shells()];
        assert!(fit_voxel(ModelKind::Dki, &nan, &p, &bounds, &cfg).is_err());
        let zeros = vec![0.0; p.n_shells()];
        assert!(fit_voxel(ModelKind::Dki, &zeros, &p, &bounds, &cfg).is_err());
    }

    #[test]
    fn deterministic_and_permutation_invariant() {
        let p = proto();
        let bounds = ParamBounds::default();
        let cfg = LmConfig::default();
        let mut table = Array2::zeros((6, p.n_shells()));
        for (i, mut row) in table.rows_mut().into_iter().enumerate() {
            let truth = ModelParams::Verdict(VerdictParams::from_free(
                0.2 + 0.05 * i as f64,
                0.3,
                6.0 + i as f64,
                2.0,
            ));
            let sig = model_signal_vector(&truth, &p).unwrap();
            for (j, s) in sig.iter().enumerate() {
                row[j] = *s;
            }
        }
        let a = fit_volume(ModelKind::Verdict, &table, &p, &bounds, &cfg);
        let b = fit_volume(ModelKind::Verdict, &table, &p, &bounds, &cfg);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.as_ref().unwrap().params, y.as_ref().unwrap().params);
        }
        // reversing row order and re-seeding per original index must agree:
        // fit each row standalone with seed ^ index and compare
        let rev = table.slice_axis(Axis(0), ndarray::Slice::new(0, None, -1)).to_owned();
        for i in 0..6 {
            let orig_idx = 5 - i;
            let row: Vec<f64> = rev.row(i).to_vec();
            let vc = LmConfig {
                seed: cfg.seed ^ (orig_idx as u64),
                ..cfg
            };
            let fit = fit_voxel(ModelKind::Verdict, &row, &p, &bounds, &vc).unwrap();
            assert_eq!(fit.params, a[orig_idx].as_ref().unwrap().params);
        }
    }

    #[test]
    fn more_starts_never_worsen_ssr() {
        let p = proto();
        let bounds = ParamBounds::default();
        let truth = ModelParams::Verdict(VerdictParams::from_free(0.5, 0.3, 10.0, 1.2));
        let sig = model_signal_vector(&truth, &p).unwrap();
        let mut prev = f64::INFINITY;
        for n_starts in [1, 3, 5] {
            let cfg = LmConfig {
                n_starts,
                ..LmConfig::default()
            };
            let fit = fit_voxel(ModelKind::Verdict, &sig, &p, &bounds, &cfg).unwrap();
            assert!(fit.ssr <= prev + 1e-18);
            prev = fit.ssr;
        }
    }
}
