//! Differentiable forward signal models: DKI and the three-compartment
//! VERDICT prostate model (GPD restricted sphere, Gaussian ball,
//! orientation-averaged astrosticks).

use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{gamma_g_rad_per_ms_um, gradient_for_b, AcquisitionProtocol, PulseTiming};

/// Fixed compartment diffusivities, μm²/ms. Never fitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedDiffusivities {
    pub d_ic: f64,
    pub d_vasc: f64,
}

impl Default for FixedDiffusivities {
    fn default() -> Self {
        Self {
            d_ic: 2.0,
            d_vasc: 8.0,
        }
    }
}

/// Kurtosis model parameters: diffusivity D_k (μm²/ms) and excess kurtosis K.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DkiParams {
    pub d_k: f64,
    pub k: f64,
}

/// VERDICT tissue parameters. Fractions live on the unit simplex; radius in
/// μm, EES diffusivity in μm²/ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerdictParams {
    pub f_ic: f64,
    pub f_ees: f64,
    pub f_vasc: f64,
    pub r_um: f64,
    pub d_ees: f64,
}

impl VerdictParams {
    /// Build from the four free parameters, deriving f_vasc = 1 − f_ic − f_ees.
    /// If f_ic + f_ees exceeds 1 both are divided by their sum and f_vasc is 0.
    pub fn from_free(f_ic: f64, f_ees: f64, r_um: f64, d_ees: f64) -> Self {
        let s = f_ic + f_ees;
        let (f_ic, f_ees) = if s > 1.0 { (f_ic / s, f_ees / s) } else { (f_ic, f_ees) };
        let f_vasc = (1.0 - f_ic - f_ees).max(0.0);
        Self {
            f_ic,
            f_ees,
            f_vasc,
            r_um,
            d_ees,
        }
    }

    pub fn validate(&self, bounds: &ParamBounds) -> Result<()> {
        for (name, f) in [
            ("f_ic", self.f_ic),
            ("f_ees", self.f_ees),
            ("f_vasc", self.f_vasc),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidParams(format!("{name} = {f} outside [0,1]")));
            }
        }
        let sum = self.f_ic + self.f_ees + self.f_vasc;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParams(format!(
                "volume fractions sum to {sum}, expected 1"
            )));
        }
        let b = &bounds.verdict;
        if self.r_um < b.r[0] || self.r_um > b.r[1] {
            return Err(Error::InvalidParams(format!("r = {} outside bounds", self.r_um)));
        }
        if self.d_ees < b.d_ees[0] || self.d_ees > b.d_ees[1] {
            return Err(Error::InvalidParams(format!(
                "d_ees = {} outside bounds",
                self.d_ees
            )));
        }
        Ok(())
    }
}

impl DkiParams {
    pub fn validate(&self, bounds: &ParamBounds) -> Result<()> {
        let b = &bounds.dki;
        if self.d_k <= 0.0 || self.d_k > b.d_k[1] {
            return Err(Error::InvalidParams(format!("d_k = {} outside (0, {}]", self.d_k, b.d_k[1])));
        }
        if self.k < b.k[0] || self.k > b.k[1] {
            return Err(Error::InvalidParams(format!("k = {} outside bounds", self.k)));
        }
        Ok(())
    }
}

/// Per-parameter [lower, upper] fit bounds for the VERDICT free parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerdictBounds {
    pub f_ic: [f64; 2],
    pub f_ees: [f64; 2],
    pub r: [f64; 2],
    pub d_ees: [f64; 2],
}

/// Per-parameter [lower, upper] fit bounds for DKI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DkiBounds {
    pub d_k: [f64; 2],
    pub k: [f64; 2],
}

/// Physiologically plausible fit bounds for both models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub dki: DkiBounds,
    pub verdict: VerdictBounds,
}

impl Default for ParamBounds {
    fn default() -> Self {
        Self {
            dki: DkiBounds {
                d_k: [0.01, 3.0],
                k: [0.0, 5.0],
            },
            verdict: VerdictBounds {
                f_ic: [0.0, 1.0],
                f_ees: [0.0, 1.0],
                r: [0.01, 15.0],
                d_ees: [0.5, 3.0],
            },
        }
    }
}

impl ParamBounds {
    /// Bounds as ordered [lower, upper] pairs for a model's free parameters.
    pub fn free_bounds(&self, model: ModelKind) -> Vec<[f64; 2]> {
        match model {
            ModelKind::Dki => vec![self.dki.d_k, self.dki.k],
            ModelKind::Verdict => vec![
                self.verdict.f_ic,
                self.verdict.f_ees,
                self.verdict.r,
                self.verdict.d_ees,
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pairs = [
            self.dki.d_k,
            self.dki.k,
            self.verdict.f_ic,
            self.verdict.f_ees,
            self.verdict.r,
            self.verdict.d_ees,
        ];
        for p in pairs {
            if p[0] >= p[1] {
                return Err(Error::InvalidParams(format!("bound pair {p:?} has lower ≥ upper")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    Dki,
    Verdict,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Dki => "DKI",
            ModelKind::Verdict => "VERDICT",
        }
    }

    /// Number of free parameters estimated during fitting.
    pub fn n_free(&self) -> usize {
        match self {
            ModelKind::Dki => 2,
            ModelKind::Verdict => 4,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dki" => Ok(ModelKind::Dki),
            "verdict" => Ok(ModelKind::Verdict),
            other => Err(Error::InvalidConfig(format!("unknown model '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Dki(DkiParams),
    Verdict(VerdictParams),
}

/// Spherical Bessel function j1(x) = sin x / x² − cos x / x.
pub fn spherical_j1(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        // series: x/3 − x³/30 + x⁵/840
        let x2 = x * x;
        x / 3.0 * (1.0 - x2 / 10.0 + x2 * x2 / 280.0)
    } else {
        x.sin() / (x * x) - x.cos() / x
    }
}

/// Derivative j1′(x) = 2cos x/x² − 2sin x/x³ + sin x/x.
pub fn spherical_j1_prime(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        // series: 1/3 − x²/10 + x⁴/168
        let x2 = x * x;
        1.0 / 3.0 - x2 / 10.0 + x2 * x2 / 168.0
    } else {
        2.0 * x.cos() / (x * x) - 2.0 * x.sin() / (x * x * x) + x.sin() / x
    }
}

/// First `m` positive roots of j1′(λ) = 0 by bracketed bisection to 1e-12.
///
/// The k-th root lies in ((k−1)π, kπ); j1′(kπ) = 2(−1)^k/(kπ)² alternates
/// in sign across consecutive multiples of π.
pub fn j1_prime_roots(m: usize) -> Vec<f64> {
    let mut roots = Vec::with_capacity(m);
    for k in 1..=m {
        let mut lo = (k as f64 - 1.0) * std::f64::consts::PI + 1e-9;
        let mut hi = k as f64 * std::f64::consts::PI - 1e-12;
        let mut f_lo = spherical_j1_prime(lo);
        debug_assert!(f_lo * spherical_j1_prime(hi) < 0.0);
        while hi - lo > 1e-12 {
            let mid = 0.5 * (lo + hi);
            let f_mid = spherical_j1_prime(mid);
            if f_lo * f_mid <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
                f_lo = f_mid;
            }
        }
        roots.push(0.5 * (lo + hi));
    }
    roots
}

/// Default GPD series truncation.
pub const GPD_ROOTS_DEFAULT: usize = 40;
const GPD_ROOTS_MAX: usize = 60;

/// Precomputed j1′ roots shared by the GPD sphere signal and the decoder.
pub static GPD_ROOTS: Lazy<Vec<f64>> = Lazy::new(|| j1_prime_roots(GPD_ROOTS_MAX));

/// Error function (double precision).
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// DKI signal: exp(−b·D_k + (1/6)·b²·D_k²·K).
pub fn dki_signal(p: &DkiParams, b: f64) -> f64 {
    (-b * p.d_k + b * b * p.d_k * p.d_k * p.k / 6.0).exp()
}

/// Partial derivatives of [`dki_signal`] w.r.t. (d_k, k).
pub fn dki_signal_grad(p: &DkiParams, b: f64) -> (f64, f64) {
    let s = dki_signal(p, b);
    let ds_dd = s * (-b + b * b * p.d_k * p.k / 3.0);
    let ds_dk = s * b * b * p.d_k * p.d_k / 6.0;
    (ds_dd, ds_dk)
}

/// Isotropic Gaussian compartment: exp(−b·d).
pub fn ball_signal(d: f64, b: f64) -> f64 {
    (-b * d).exp()
}

/// d/dd of [`ball_signal`].
pub fn ball_signal_dd(d: f64, b: f64) -> f64 {
    -b * (-b * d).exp()
}

/// Orientation-averaged sticks: √(π/(4bd))·erf(√(bd)), continuously
/// extended to 1 at bd = 0.
pub fn astrosticks_signal(d: f64, b: f64) -> f64 {
    let x = b * d;
    if x < 1e-6 {
        // series of √(π/4x)·erf(√x): 1 − x/3 + x²/10 − x³/42
        1.0 - x / 3.0 + x * x / 10.0 - x * x * x / 42.0
    } else {
        let s = x.sqrt();
        (std::f64::consts::PI / (4.0 * x)).sqrt() * erf(s)
    }
}

/// GPD (Murday–Cotts) PGSE signal for diffusion restricted in an
/// impermeable sphere of radius `r_um`.
///
/// Exponent: −2γ²G² Σ_m N(c_m) / (d² a_m⁶ (λ_m²−2)) with a_m = λ_m/R,
/// c_m = d·a_m², and
/// N(c) = 2cδ − 2 + 2e^{−cδ} + 2e^{−cΔ} − e^{−c(Δ−δ)} − e^{−c(Δ+δ)}.
pub fn sphere_gpd_signal_m(
    r_um: f64,
    d_ic: f64,
    g_mt_m: f64,
    timing: &PulseTiming,
    m_roots: usize,
) -> f64 {
    debug_assert!(r_um > 0.0 && d_ic > 0.0 && g_mt_m >= 0.0);
    if g_mt_m == 0.0 {
        return 1.0;
    }
    let gg = gamma_g_rad_per_ms_um(g_mt_m);
    let (delta, big_delta) = (timing.delta_ms, timing.big_delta_ms);
    let mut sum = 0.0;
    for &lam in GPD_ROOTS.iter().take(m_roots.min(GPD_ROOTS_MAX)) {
        let a = lam / r_um;
        let c = d_ic * a * a;
        let num = 2.0 * c * delta - 2.0
            + 2.0 * (-c * delta).exp()
            + 2.0 * (-c * big_delta).exp()
            - (-c * (big_delta - delta)).exp()
            - (-c * (big_delta + delta)).exp();
        let den = d_ic * d_ic * a.powi(6) * (a * a * r_um * r_um - 2.0);
        sum += num / den;
    }
    (-2.0 * gg * gg * sum).exp()
}

/// [`sphere_gpd_signal_m`] at the default truncation of 40 roots.
pub fn sphere_gpd_signal(r_um: f64, d_ic: f64, g_mt_m: f64, timing: &PulseTiming) -> f64 {
    sphere_gpd_signal_m(r_um, d_ic, g_mt_m, timing, GPD_ROOTS_DEFAULT)
}

/// d/dR of [`sphere_gpd_signal`].
///
/// Rewriting each series term as R⁶·N(c)/(d²λ⁶(λ²−2)) with c = dλ²/R²:
/// dT/dR = [6R⁵·N(c) − 2dλ²R³·N′(c)] / (d²λ⁶(λ²−2)).
pub fn sphere_gpd_signal_dr(r_um: f64, d_ic: f64, g_mt_m: f64, timing: &PulseTiming) -> f64 {
    if g_mt_m == 0.0 {
        return 0.0;
    }
    let gg = gamma_g_rad_per_ms_um(g_mt_m);
    let (delta, big_delta) = (timing.delta_ms, timing.big_delta_ms);
    let mut dsum = 0.0;
    for &lam in GPD_ROOTS.iter().take(GPD_ROOTS_DEFAULT) {
        let lam2 = lam * lam;
        let c = d_ic * lam2 / (r_um * r_um);
        let n = 2.0 * c * delta - 2.0
            + 2.0 * (-c * delta).exp()
            + 2.0 * (-c * big_delta).exp()
            - (-c * (big_delta - delta)).exp()
            - (-c * (big_delta + delta)).exp();
        let n_prime = 2.0 * delta - 2.0 * delta * (-c * delta).exp()
            - 2.0 * big_delta * (-c * big_delta).exp()
            + (big_delta - delta) * (-c * (big_delta - delta)).exp()
            + (big_delta + delta) * (-c * (big_delta + delta)).exp();
        let denom = d_ic * d_ic * lam2.powi(3) * (lam2 - 2.0);
        let dc_dr = -2.0 * d_ic * lam2 / r_um.powi(3);
        dsum += (6.0 * r_um.powi(5) * n + r_um.powi(6) * n_prime * dc_dr) / denom;
    }
    let s = sphere_gpd_signal(r_um, d_ic, g_mt_m, timing);
    s * (-2.0 * gg * gg) * dsum
}

/// VERDICT composite signal: f_ic·S_ic + f_ees·S_ees + f_vasc·S_vasc.
pub fn verdict_signal(
    p: &VerdictParams,
    fixed: &FixedDiffusivities,
    b: f64,
    g_mt_m: f64,
    timing: &PulseTiming,
) -> Result<f64> {
    let sum = p.f_ic + p.f_ees + p.f_vasc;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParams(format!(
            "volume fractions sum to {sum}, expected 1"
        )));
    }
    let s_ic = sphere_gpd_signal(p.r_um, fixed.d_ic, g_mt_m, timing);
    let s_ees = ball_signal(p.d_ees, b);
    let s_vasc = astrosticks_signal(fixed.d_vasc, b);
    Ok(p.f_ic * s_ic + p.f_ees * s_ees + p.f_vasc * s_vasc)
}

/// Element-wise forward model over a protocol's b-shells.
pub fn model_signal_vector(
    params: &ModelParams,
    protocol: &AcquisitionProtocol,
) -> Result<Vec<f64>> {
    match params {
        ModelParams::Dki(p) => Ok(protocol.b_values.iter().map(|&b| dki_signal(p, b)).collect()),
        ModelParams::Verdict(p) => {
            let fixed = FixedDiffusivities::default();
            protocol
                .b_values
                .iter()
                .map(|&b| {
                    let g = gradient_for_b(b, &protocol.timing)?;
                    verdict_signal(p, &fixed, b, g, &protocol.timing)
                })
                .collect()
        }
    }
}

/// Forward vector and Jacobian columns w.r.t. the model's free parameters.
///
/// VERDICT free parameters are (f_ic, f_ees, R, d_ees); the dependent
/// f_vasc = 1 − f_ic − f_ees (with the >1 rescale rule) is folded into the
/// fraction derivatives branch-wise.
pub fn model_signal_jacobian(
    model: ModelKind,
    free: &[f64],
    protocol: &AcquisitionProtocol,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = protocol.n_shells();
    match model {
        ModelKind::Dki => {
            let p = DkiParams {
                d_k: free[0],
                k: free[1],
            };
            let mut sig = Vec::with_capacity(n);
            let mut jac = vec![Vec::with_capacity(n), Vec::with_capacity(n)];
            for &b in &protocol.b_values {
                sig.push(dki_signal(&p, b));
                let (dd, dk) = dki_signal_grad(&p, b);
                jac[0].push(dd);
                jac[1].push(dk);
            }
            Ok((sig, jac))
        }
        ModelKind::Verdict => {
            let (f_ic, f_ees, r, d_ees) = (free[0], free[1], free[2], free[3]);
            let fixed = FixedDiffusivities::default();
            let s = f_ic + f_ees;
            let mut sig = Vec::with_capacity(n);
            let mut jac = vec![Vec::with_capacity(n); 4];
            for &b in &protocol.b_values {
                let g = gradient_for_b(b, &protocol.timing)?;
                let s_ic = sphere_gpd_signal(r, fixed.d_ic, g, &protocol.timing);
                let s_ic_dr = sphere_gpd_signal_dr(r, fixed.d_ic, g, &protocol.timing);
                let s_ees = ball_signal(d_ees, b);
                let s_ees_dd = ball_signal_dd(d_ees, b);
                let s_v = astrosticks_signal(fixed.d_vasc, b);
                if s <= 1.0 {
                    sig.push(f_ic * s_ic + f_ees * s_ees + (1.0 - s) * s_v);
                    jac[0].push(s_ic - s_v);
                    jac[1].push(s_ees - s_v);
                    jac[2].push(f_ic * s_ic_dr);
                    jac[3].push(f_ees * s_ees_dd);
                } else {
                    // fractions rescaled by 1/s, f_vasc = 0
                    sig.push((f_ic * s_ic + f_ees * s_ees) / s);
                    let num = f_ic * s_ic + f_ees * s_ees;
                    jac[0].push((s_ic * s - num) / (s * s));
                    jac[1].push((s_ees * s - num) / (s * s));
                    jac[2].push(f_ic * s_ic_dr / s);
                    jac[3].push(f_ees * s_ees_dd / s);
                }
            }
            Ok((sig, jac))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{subprotocol, SubProtocol};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn sp1() -> AcquisitionProtocol {
        subprotocol(SubProtocol::Sp1)
    }

    #[test]
    fn dki_signal_values() {
        let p0 = DkiParams { d_k: 0.7, k: 2.1 };
        assert_eq!(dki_signal(&p0, 0.0), 1.0);
        let mono = DkiParams { d_k: 1.0, k: 0.0 };
        assert_relative_eq!(dki_signal(&mono, 2.0), (-2.0f64).exp(), max_relative = 1e-15);
        let p = DkiParams { d_k: 1.0, k: 1.0 };
        assert_relative_eq!(dki_signal(&p, 2.0), 0.2635971381157267, max_relative = 1e-14);
    }

    #[test]
    fn ball_signal_values() {
        assert_eq!(ball_signal(2.0, 0.0), 1.0);
        assert_relative_eq!(ball_signal(2.0, 3.0), 2.4787521766663585e-3, max_relative = 1e-14);
        let mut prev = 1.0;
        for i in 1..50 {
            let s = ball_signal(2.0, i as f64 * 0.1);
            assert!(s < prev);
            prev = s;
        }
    }

    #[test]
    fn astrosticks_values() {
        // continuous extension at b→0
        assert_abs_diff_eq!(astrosticks_signal(8.0, 1e-12), 1.0, epsilon = 1e-9);
        assert_relative_eq!(
            astrosticks_signal(8.0, 3.0),
            0.18090031363879588,
            max_relative = 1e-10
        );
        // in (0,1] and decreasing in b·d
        let mut prev = 1.0;
        for i in 1..60 {
            let s = astrosticks_signal(8.0, i as f64 * 0.05);
            assert!(s > 0.0 && s < prev);
            prev = s;
        }
        // series and closed form agree at the switch-over point
        let x = 1e-6;
        let series = 1.0 - x / 3.0 + x * x / 10.0 - x * x * x / 42.0;
        let closed = (std::f64::consts::PI / (4.0 * x)).sqrt() * erf(x.sqrt());
        assert_abs_diff_eq!(series, closed, epsilon = 1e-13);
    }

    #[test]
    fn bessel_derivative_roots() {
        let roots = j1_prime_roots(3);
        assert_abs_diff_eq!(roots[0], 2.081576, epsilon = 1e-5);
        assert_abs_diff_eq!(roots[1], 5.940370, epsilon = 1e-5);
        assert_abs_diff_eq!(roots[2], 9.205840, epsilon = 1e-5);
        for &r in &roots {
            assert!(spherical_j1_prime(r).abs() < 1e-10);
        }
    }

    #[test]
    fn sphere_gpd_trivial_limits() {
        let t = sp1().timing;
        assert_eq!(sphere_gpd_signal(8.0, 2.0, 0.0, &t), 1.0);
        // fully restricted limit at the lower radius bound
        let s = sphere_gpd_signal(0.01, 2.0, 300.0, &t);
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn sphere_gpd_reference_values() {
        // frozen from an independent evaluation of the series
        let t = sp1().timing;
        assert_relative_eq!(
            sphere_gpd_signal(4.0, 2.0, 300.0, &t),
            0.7810386542029394,
            max_relative = 1e-10
        );
        assert_relative_eq!(
            sphere_gpd_signal(8.0, 2.0, 300.0, &t),
            0.20571569156392883,
            max_relative = 1e-10
        );
        assert_relative_eq!(
            sphere_gpd_signal(12.0, 2.0, 300.0, &t),
            0.04259475823797254,
            max_relative = 1e-10
        );
    }

    #[test]
    fn sphere_gpd_monotone_decreasing_in_radius() {
        let t = sp1().timing;
        let mut prev = sphere_gpd_signal(1.0, 2.0, 300.0, &t);
        for i in 1..=56 {
            let r = 1.0 + i as f64 * 0.25;
            let s = sphere_gpd_signal(r, 2.0, 300.0, &t);
            assert!(s < prev, "not decreasing at r = {r}");
            prev = s;
        }
    }

    #[test]
    fn sphere_gpd_truncation_converged() {
        let t = sp1().timing;
        for r in [0.5, 4.0, 8.0, 12.0] {
            for g in [50.0, 150.0, 300.0] {
                let m40 = sphere_gpd_signal_m(r, 2.0, g, &t, 40);
                let m20 = sphere_gpd_signal_m(r, 2.0, g, &t, 20);
                let m60 = sphere_gpd_signal_m(r, 2.0, g, &t, 60);
                assert!((m60 - m20).abs() < 1e-8, "r={r} g={g}");
                assert!((m60 - m40).abs() < 1e-8, "r={r} g={g}");
            }
        }
    }

    #[test]
    fn verdict_signal_composition() {
        let t = sp1();
        let fixed = FixedDiffusivities::default();
        // b = 0: all compartments 1, fractions sum to 1
        let p = VerdictParams::from_free(0.4, 0.4, 8.0, 2.0);
        assert_abs_diff_eq!(
            verdict_signal(&p, &fixed, 0.0, 0.0, &t.timing).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        // collapses to ball for f_ees = 1
        let ball_only = VerdictParams::from_free(0.0, 1.0, 8.0, 2.0);
        assert_relative_eq!(
            verdict_signal(&ball_only, &fixed, 3.0, 200.0, &t.timing).unwrap(),
            (-6.0f64).exp(),
            max_relative = 1e-12
        );
        // generic composition at b = 2, SP1 (compartment oracles composed)
        let g2 = gradient_for_b(2.0, &t.timing).unwrap();
        let s = verdict_signal(&p, &fixed, 2.0, g2, &t.timing).unwrap();
        assert_relative_eq!(s, 0.2240294684176057, max_relative = 1e-9);
        // fraction simplex violation rejected
        let bad = VerdictParams {
            f_ic: 0.7,
            f_ees: 0.7,
            f_vasc: 0.0,
            r_um: 8.0,
            d_ees: 2.0,
        };
        assert!(verdict_signal(&bad, &fixed, 2.0, g2, &t.timing).is_err());
    }

    #[test]
    fn model_signal_vector_dki_mono() {
        let p = ModelParams::Dki(DkiParams { d_k: 1.0, k: 0.0 });
        let v = model_signal_vector(&p, &sp1()).unwrap();
        let expect: Vec<f64> = [0.0f64, 0.05, 0.5, 1.5, 2.0, 3.0]
            .iter()
            .map(|b| (-b).exp())
            .collect();
        assert_eq!(v.len(), 6);
        assert_eq!(v[0], 1.0);
        for (a, e) in v.iter().zip(&expect) {
            assert_relative_eq!(a, e, max_relative = 1e-14);
        }
    }

    #[test]
    fn model_signal_vector_verdict_all_ball() {
        let p = ModelParams::Verdict(VerdictParams::from_free(0.0, 1.0, 8.0, 2.0));
        let v = model_signal_vector(&p, &sp1()).unwrap();
        for (s, b) in v.iter().zip(&sp1().b_values) {
            assert_relative_eq!(s, &(-2.0 * b).exp(), max_relative = 1e-12);
        }
    }

    #[test]
    fn signals_in_unit_interval_with_unit_b0() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let proto = sp1();
        for _ in 0..200 {
            let f_ic: f64 = rng.gen_range(0.0..1.0);
            let f_ees = rng.gen_range(0.0..(1.0 - f_ic));
            let p = ModelParams::Verdict(VerdictParams::from_free(
                f_ic,
                f_ees,
                rng.gen_range(0.01..15.0),
                rng.gen_range(0.5..3.0),
            ));
            let v = model_signal_vector(&p, &proto).unwrap();
            assert_eq!(v[0], 1.0);
            assert!(v.iter().all(|&s| s > 0.0 && s <= 1.0));
        }
    }

    /// Central finite differences of every free-parameter partial.
    #[test]
    fn analytic_derivatives_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(19);
        let proto = sp1();

        let check = |model: ModelKind, free: &[f64]| {
            let (_, jac) = model_signal_jacobian(model, free, &proto).unwrap();
            for (i, col) in jac.iter().enumerate() {
                let h = 1e-5 * free[i].abs().max(1e-3);
                let mut plus = free.to_vec();
                plus[i] += h;
                let mut minus = free.to_vec();
                minus[i] -= h;
                let (sp, _) = model_signal_jacobian(model, &plus, &proto).unwrap();
                let (sm, _) = model_signal_jacobian(model, &minus, &proto).unwrap();
                for j in 0..sp.len() {
                    let fd = (sp[j] - sm[j]) / (2.0 * h);
                    let denom = fd.abs().max(col[j].abs()).max(1e-8);
                    assert!(
                        ((col[j] - fd) / denom).abs() < 1e-6,
                        "{model:?} param {i} shell {j}: analytic {} vs fd {fd}",
                        col[j]
                    );
                }
            }
        };

        for _ in 0..50 {
            check(
                ModelKind::Dki,
                &[rng.gen_range(0.1..2.9), rng.gen_range(0.1..4.9)],
            );
        }
        for _ in 0..50 {
            let f_ic: f64 = rng.gen_range(0.05..0.9);
            let f_ees = rng.gen_range(0.05..(0.95 - f_ic));
            check(
                ModelKind::Verdict,
                &[
                    f_ic,
                    f_ees,
                    rng.gen_range(1.0..14.0),
                    rng.gen_range(0.6..2.9),
                ],
            );
        }
    }

    #[test]
    fn from_free_rescales_oversized_fractions() {
        let p = VerdictParams::from_free(0.8, 0.6, 8.0, 2.0);
        assert_abs_diff_eq!(p.f_ic + p.f_ees + p.f_vasc, 1.0, epsilon = 1e-12);
        assert_eq!(p.f_vasc, 0.0);
        assert_relative_eq!(p.f_ic / p.f_ees, 0.8 / 0.6, max_relative = 1e-12);
        p.validate(&ParamBounds::default()).unwrap();
    }
}
