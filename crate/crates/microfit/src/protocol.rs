//! Acquisition protocols and pulsed-gradient spin-echo b-value physics.
//!
//! Unit convention across the toolkit: b in ms/μm², diffusivity in μm²/ms,
//! time in ms, length in μm, gradient amplitude in mT/m. With these units
//! b·D is dimensionless and SI conversion is confined to the gyromagnetic
//! scaling below.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Proton gyromagnetic ratio, rad·s⁻¹·T⁻¹.
pub const GAMMA_RAD_PER_S_PER_T: f64 = 2.6752218744e8;

/// γ·G in rad/(ms·μm) for a gradient amplitude in mT/m.
///
/// γ[rad/s/T] · G[mT/m] = γ·1e-3[rad/ms/T] · G·1e-9[T/μm].
pub fn gamma_g_rad_per_ms_um(g_mt_m: f64) -> f64 {
    GAMMA_RAD_PER_S_PER_T * 1e-12 * g_mt_m
}

/// Rectangular PGSE pulse pair: duration δ, separation Δ, echo time TE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseTiming {
    pub delta_ms: f64,
    #[serde(rename = "Delta_ms")]
    pub big_delta_ms: f64,
    pub te_ms: f64,
}

impl PulseTiming {
    pub fn new(delta_ms: f64, big_delta_ms: f64, te_ms: f64) -> Result<Self> {
        let t = Self {
            delta_ms,
            big_delta_ms,
            te_ms,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_ms > 0.0 && self.delta_ms <= self.big_delta_ms) {
            return Err(Error::InvalidTiming(format!(
                "need 0 < δ ≤ Δ, got δ={} Δ={}",
                self.delta_ms, self.big_delta_ms
            )));
        }
        if self.big_delta_ms + self.delta_ms > self.te_ms {
            return Err(Error::InvalidTiming(format!(
                "need Δ + δ ≤ TE, got Δ+δ={} TE={}",
                self.big_delta_ms + self.delta_ms,
                self.te_ms
            )));
        }
        Ok(())
    }
}

/// b = γ²G²δ²(Δ − δ/3), returned in ms/μm².
pub fn b_from_gradient(g_mt_m: f64, timing: &PulseTiming) -> Result<f64> {
    timing.validate()?;
    if g_mt_m < 0.0 {
        return Err(Error::InvalidProtocol(format!(
            "gradient amplitude must be ≥ 0, got {g_mt_m}"
        )));
    }
    let gg = gamma_g_rad_per_ms_um(g_mt_m);
    Ok(gg * gg * timing.delta_ms * timing.delta_ms * (timing.big_delta_ms - timing.delta_ms / 3.0))
}

/// Inverse of [`b_from_gradient`] at fixed timing.
pub fn gradient_for_b(b_ms_um2: f64, timing: &PulseTiming) -> Result<f64> {
    timing.validate()?;
    if b_ms_um2 < 0.0 {
        return Err(Error::InvalidProtocol(format!(
            "b-value must be ≥ 0, got {b_ms_um2}"
        )));
    }
    let unit = b_from_gradient(1.0, timing)?;
    Ok((b_ms_um2 / unit).sqrt())
}

/// The three gradient sub-protocols emulated from the single acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SubProtocol {
    Sp1,
    Sp2,
    Sp3,
}

impl SubProtocol {
    pub const ALL: [SubProtocol; 3] = [SubProtocol::Sp1, SubProtocol::Sp2, SubProtocol::Sp3];

    pub fn name(&self) -> &'static str {
        match self {
            SubProtocol::Sp1 => "SP1",
            SubProtocol::Sp2 => "SP2",
            SubProtocol::Sp3 => "SP3",
        }
    }
}

impl std::str::FromStr for SubProtocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" | "sp1" => Ok(SubProtocol::Sp1),
            "2" | "sp2" => Ok(SubProtocol::Sp2),
            "3" | "sp3" => Ok(SubProtocol::Sp3),
            other => Err(Error::InvalidConfig(format!(
                "unknown sub-protocol '{other}' (expected 1, 2 or 3)"
            ))),
        }
    }
}

/// Nominal b-shells shared by all sub-protocols, ms/μm².
pub const NOMINAL_B_VALUES: [f64; 6] = [0.0, 0.05, 0.5, 1.5, 2.0, 3.0];

/// Multi-shell PGSE acquisition description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionProtocol {
    pub name: String,
    pub b_values: Vec<f64>,
    pub directions_per_shell: usize,
    #[serde(flatten)]
    pub timing: PulseTiming,
    #[serde(rename = "g_max_mT_m")]
    pub g_max_mt_m: f64,
}

impl AcquisitionProtocol {
    pub fn validate(&self) -> Result<()> {
        self.timing.validate()?;
        if self.b_values.is_empty() || self.b_values[0] != 0.0 {
            return Err(Error::InvalidProtocol(
                "first b-value must be 0".to_string(),
            ));
        }
        if !self.b_values.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidProtocol(
                "b-values must be strictly increasing".to_string(),
            ));
        }
        if self.directions_per_shell < 1 {
            return Err(Error::InvalidProtocol(
                "directions_per_shell must be ≥ 1".to_string(),
            ));
        }
        let b_max = b_from_gradient(self.g_max_mt_m, &self.timing)?;
        for &b in &self.b_values {
            if b > b_max * (1.0 + 1e-12) {
                return Err(Error::InvalidProtocol(format!(
                    "b = {b} not achievable at g_max = {} (max b = {b_max:.4})",
                    self.g_max_mt_m
                )));
            }
        }
        Ok(())
    }

    pub fn n_shells(&self) -> usize {
        self.b_values.len()
    }

    /// Gradient amplitude realizing each shell at this protocol's timing.
    ///
    /// Shells below the maximum are realized by gradient down-scaling at
    /// fixed δ/Δ/TE.
    pub fn shell_gradients(&self) -> Result<Vec<f64>> {
        self.b_values
            .iter()
            .map(|&b| gradient_for_b(b, &self.timing))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(json)?;
        p.validate()?;
        Ok(p)
    }
}

/// Preset for one of the three sub-protocols (TE/δ/Δ in ms, g_max in mT/m):
/// SP1 – 54/5/25 at 300, SP2 – 70/16/32 at 80, SP3 – 95/26/48 at 40.
pub fn subprotocol(which: SubProtocol) -> AcquisitionProtocol {
    let (te, delta, big_delta, g_max) = match which {
        SubProtocol::Sp1 => (54.0, 5.0, 25.0, 300.0),
        SubProtocol::Sp2 => (70.0, 16.0, 32.0, 80.0),
        SubProtocol::Sp3 => (95.0, 26.0, 48.0, 40.0),
    };
    AcquisitionProtocol {
        name: which.name().to_string(),
        b_values: NOMINAL_B_VALUES.to_vec(),
        directions_per_shell: 15,
        timing: PulseTiming {
            delta_ms: delta,
            big_delta_ms: big_delta,
            te_ms: te,
        },
        g_max_mt_m: g_max,
    }
}
