//! Synthetic digital prostate phantom: ground-truth parameter volumes with
//! gland / lesion / contralateral-normal masks, noise-free signal synthesis,
//! and Rician noise whose level follows the echo time of the sub-protocol.

use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{model_signal_vector, ModelParams, VerdictParams};
use crate::protocol::AcquisitionProtocol;

/// Reference echo time at which `snr_ref` is defined (the strongest-gradient
/// sub-protocol's TE).
pub const TE_REF_MS: f64 = 54.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    /// Tissue T2 for the TE-dependent noise level.
    pub t2_ms: f64,
    /// SNR of the unit b0 signal at TE = 54 ms.
    pub snr_ref: f64,
    pub seed: u64,
    /// Healthy-control phantoms carry no lesion.
    pub has_lesion: bool,
    pub tumour_f_ic_mean: f64,
    pub normal_f_ic_mean: f64,
    pub f_ic_sd: f64,
    pub tumour_r_um: f64,
    pub normal_r_um: f64,
    pub r_sd_um: f64,
    pub d_ees_mean: f64,
    pub d_ees_sd: f64,
    pub f_vasc_mean: f64,
    pub f_vasc_sd: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            slices: 3,
            height: 64,
            width: 64,
            t2_ms: 80.0,
            snr_ref: 30.0,
            seed: 0,
            has_lesion: true,
            tumour_f_ic_mean: 0.45,
            normal_f_ic_mean: 0.20,
            f_ic_sd: 0.05,
            tumour_r_um: 9.0,
            normal_r_um: 7.0,
            r_sd_um: 0.5,
            d_ees_mean: 2.0,
            d_ees_sd: 0.2,
            f_vasc_mean: 0.10,
            f_vasc_sd: 0.03,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.slices == 0 || self.height < 16 || self.width < 16 {
            return Err(Error::InvalidConfig(
                "phantom grid must be ≥ 1×16×16".into(),
            ));
        }
        if self.t2_ms <= 0.0 || !self.snr_ref.is_finite() && self.snr_ref != f64::INFINITY {
            return Err(Error::InvalidConfig("t2_ms and snr_ref must be positive".into()));
        }
        if self.snr_ref <= 0.0 {
            return Err(Error::InvalidConfig("snr_ref must be positive".into()));
        }
        Ok(())
    }
}

/// Ground-truth parameter volume plus region masks. Parameter planes are
/// zero outside the gland.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub gland: Array3<bool>,
    pub lesion: Array3<bool>,
    pub normal: Array3<bool>,
    pub f_ic: Array3<f64>,
    pub f_ees: Array3<f64>,
    pub r_um: Array3<f64>,
    pub d_ees: Array3<f64>,
}

impl Phantom {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.gland.dim()
    }

    pub fn truth_at(&self, s: usize, y: usize, x: usize) -> Option<VerdictParams> {
        if !self.gland[(s, y, x)] {
            return None;
        }
        Some(VerdictParams::from_free(
            self.f_ic[(s, y, x)],
            self.f_ees[(s, y, x)],
            self.r_um[(s, y, x)],
            self.d_ees[(s, y, x)],
        ))
    }
}

/// Signal volume in slices × b-values × height × width layout.
#[derive(Debug, Clone)]
pub struct VolumeGrid {
    pub b_values: Vec<f64>,
    pub data: Array4<f64>,
}

impl VolumeGrid {
    pub fn validate(&self) -> Result<()> {
        if self.data.dim().1 != self.b_values.len() {
            return Err(Error::Format("b axis does not match b_values".into()));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite voxel value".into()));
        }
        Ok(())
    }
}

fn inside_ellipse(y: usize, x: usize, cy: f64, cx: f64, ay: f64, ax: f64) -> bool {
    let dy = (y as f64 - cy) / ay;
    let dx = (x as f64 - cx) / ax;
    dy * dy + dx * dx <= 1.0
}

fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    v.clamp(lo, hi)
}

/// Build the ground-truth volume. Deterministic in `spec.seed`; voxel draws
/// use counter-based RNG streams so the result is layout-order independent.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let (ns, h, w) = (spec.slices, spec.height, spec.width);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (gland_ay, gland_ax) = (0.36 * h as f64, 0.42 * w as f64);
    // lesion on one side of the midline, contralateral normal ROI mirrored
    let roi_r = 0.11 * h.min(w) as f64;
    let lesion_c = (cy, cx - 0.22 * w as f64);
    let normal_c = (cy, cx + 0.22 * w as f64);

    let mut gland = Array3::from_elem((ns, h, w), false);
    let mut lesion = Array3::from_elem((ns, h, w), false);
    let mut normal = Array3::from_elem((ns, h, w), false);
    for s in 0..ns {
        for y in 0..h {
            for x in 0..w {
                let in_gland = inside_ellipse(y, x, cy, cx, gland_ay, gland_ax);
                gland[(s, y, x)] = in_gland;
                if in_gland {
                    if spec.has_lesion
                        && inside_ellipse(y, x, lesion_c.0, lesion_c.1, roi_r, roi_r)
                    {
                        lesion[(s, y, x)] = true;
                    } else if inside_ellipse(y, x, normal_c.0, normal_c.1, roi_r, roi_r) {
                        normal[(s, y, x)] = true;
                    }
                }
            }
        }
    }

    let mut f_ic = Array3::zeros((ns, h, w));
    let mut f_ees = Array3::zeros((ns, h, w));
    let mut r_um = Array3::zeros((ns, h, w));
    let mut d_ees = Array3::zeros((ns, h, w));
    let plane = h * w;
    let draws: Vec<(usize, [f64; 4])> = (0..ns * plane)
        .into_par_iter()
        .filter(|&i| gland[(i / plane, (i % plane) / w, i % w)])
        .map(|i| {
            let (s, y, x) = (i / plane, (i % plane) / w, i % w);
            let tumour = lesion[(s, y, x)];
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let n01 = Normal::new(0.0, 1.0).unwrap();
            let mut g = || n01.sample(&mut rng);
            let (fm, rm) = if tumour {
                (spec.tumour_f_ic_mean, spec.tumour_r_um)
            } else {
                (spec.normal_f_ic_mean, spec.normal_r_um)
            };
            let fic = clamp(fm + spec.f_ic_sd * g(), 0.02, 0.95);
            let fv = clamp(spec.f_vasc_mean + spec.f_vasc_sd * g(), 0.0, 0.5);
            let fees = clamp(1.0 - fic - fv, 0.02, 1.0 - fic);
            let r = clamp(rm + spec.r_sd_um * g(), 2.0, 14.0);
            let de = clamp(spec.d_ees_mean + spec.d_ees_sd * g(), 0.6, 2.9);
            (i, [fic, fees, r, de])
        })
        .collect();
    for (i, [a, b, c, d]) in draws {
        let idx = (i / plane, (i % plane) / w, i % w);
        f_ic[idx] = a;
        f_ees[idx] = b;
        r_um[idx] = c;
        d_ees[idx] = d;
    }

    Ok(Phantom {
        spec: spec.clone(),
        gland,
        lesion,
        normal,
        f_ic,
        f_ees,
        r_um,
        d_ees,
    })
}

/// Noise-free signal volume: the forward model applied voxel-wise inside the
/// gland; background voxels are zero.
pub fn synthesize_signals(
    phantom: &Phantom,
    protocol: &AcquisitionProtocol,
) -> Result<VolumeGrid> {
    let (ns, h, w) = phantom.dims();
    let nb = protocol.n_shells();
    let plane = h * w;
    let rows: Vec<(usize, Vec<f64>)> = (0..ns * plane)
        .into_par_iter()
        .filter(|&i| phantom.gland[(i / plane, (i % plane) / w, i % w)])
        .map(|i| {
            let (s, y, x) = (i / plane, (i % plane) / w, i % w);
            let truth = phantom.truth_at(s, y, x).expect("gland voxel");
            let sig = model_signal_vector(&ModelParams::Verdict(truth), protocol)?;
            Ok((i, sig))
        })
        .collect::<Result<_>>()?;
    let mut data = Array4::zeros((ns, nb, h, w));
    for (i, sig) in rows {
        let (s, y, x) = (i / plane, (i % plane) / w, i % w);
        for (bi, v) in sig.iter().enumerate() {
            data[(s, bi, y, x)] = *v;
        }
    }
    Ok(VolumeGrid {
        b_values: protocol.b_values.clone(),
        data,
    })
}

/// Gaussian channel noise level for unit b0: σ = exp(TE/T2 − TE_ref/T2)/snr_ref.
pub fn noise_sigma(te_ms: f64, t2_ms: f64, snr_ref: f64) -> f64 {
    (te_ms / t2_ms - TE_REF_MS / t2_ms).exp() / snr_ref
}

/// Rician magnitude of one noise-free value averaged over independent
/// direction repeats.
fn rician_average(s: f64, sigma: f64, n_dirs: usize, rng: &mut ChaCha8Rng) -> f64 {
    let n01 = Normal::new(0.0, sigma).unwrap();
    let mut acc = 0.0;
    for _ in 0..n_dirs {
        let n1 = n01.sample(rng);
        let n2 = n01.sample(rng);
        acc += ((s + n1).powi(2) + n2 * n2).sqrt();
    }
    acc / n_dirs as f64
}

/// Add Rician noise per direction repeat, then average the repeats — the
/// order in which magnitude data are actually formed.
///
/// Each (voxel, shell) pair draws from its own counter-based RNG stream, so
/// shells are independent and results do not depend on iteration order.
pub fn add_rician(
    volume: &VolumeGrid,
    protocol: &AcquisitionProtocol,
    spec: &PhantomSpec,
    seed: u64,
) -> Result<VolumeGrid> {
    if volume.b_values.len() != protocol.n_shells() {
        return Err(Error::InvalidProtocol(
            "volume shells do not match protocol".into(),
        ));
    }
    let sigma = noise_sigma(protocol.timing.te_ms, spec.t2_ms, spec.snr_ref);
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidConfig(format!("invalid noise σ = {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(volume.clone()); // infinite SNR: noise-free passthrough
    }
    let (ns, nb, h, w) = volume.data.dim();
    let flat: Vec<f64> = (0..ns * nb * h * w)
        .into_par_iter()
        .map(|i| {
            let s = volume.data.as_slice().expect("standard layout")[i];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            rician_average(s, sigma, protocol.directions_per_shell, &mut rng)
        })
        .collect();
    Ok(VolumeGrid {
        b_values: volume.b_values.clone(),
        data: Array4::from_shape_vec((ns, nb, h, w), flat).expect("shape preserved"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{subprotocol, PulseTiming, SubProtocol};
    use approx::assert_relative_eq;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            slices: 1,
            height: 32,
            width: 32,
            seed: 7,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn same_seed_identical_volumes() {
        let spec = small_spec();
        let a = make_phantom(&spec).unwrap();
        let b = make_phantom(&spec).unwrap();
        assert_eq!(a.f_ic, b.f_ic);
        assert_eq!(a.r_um, b.r_um);
        let other = make_phantom(&PhantomSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.f_ic, other.f_ic);
    }

    #[test]
    fn masks_nest_and_are_disjoint() {
        let p = make_phantom(&small_spec()).unwrap();
        let mut n_lesion = 0;
        let mut n_normal = 0;
        for ((s, y, x), &l) in p.lesion.indexed_iter() {
            if l {
                n_lesion += 1;
                assert!(p.gland[(s, y, x)], "lesion voxel outside gland");
                assert!(!p.normal[(s, y, x)], "lesion overlaps normal ROI");
            }
        }
        for ((s, y, x), &m) in p.normal.indexed_iter() {
            if m {
                n_normal += 1;
                assert!(p.gland[(s, y, x)], "normal ROI outside gland");
            }
        }
        assert!(n_lesion > 10 && n_normal > 10);
    }

    #[test]
    fn tumour_f_ic_exceeds_normal_by_construction() {
        let p = make_phantom(&small_spec()).unwrap();
        let mean_in = |mask: &Array3<bool>| {
            let (mut s, mut n) = (0.0, 0);
            for (idx, &m) in mask.indexed_iter() {
                if m {
                    s += p.f_ic[idx];
                    n += 1;
                }
            }
            s / n as f64
        };
        let diff = mean_in(&p.lesion) - mean_in(&p.normal);
        assert!(diff > 0.15, "tumour − normal f_ic gap = {diff}");
    }

    #[test]
    fn healthy_phantom_has_no_lesion() {
        let p = make_phantom(&PhantomSpec {
            has_lesion: false,
            ..small_spec()
        })
        .unwrap();
        assert!(p.lesion.iter().all(|&l| !l));
        assert!(p.normal.iter().any(|&m| m));
    }

    #[test]
    fn b0_plane_is_unity_inside_gland_and_matches_forward_model() {
        let spec = small_spec();
        let p = make_phantom(&spec).unwrap();
        let proto = subprotocol(SubProtocol::Sp1);
        let v = synthesize_signals(&p, &proto).unwrap();
        v.validate().unwrap();
        let mut checked = 0;
        for ((s, y, x), &g) in p.gland.indexed_iter() {
            if !g {
                assert_eq!(v.data[(s, 0, y, x)], 0.0);
                continue;
            }
            // fractions sum to one up to rounding, so b0 = 1 ± 1 ulp-ish
            assert_relative_eq!(v.data[(s, 0, y, x)], 1.0, max_relative = 1e-12);
            let truth = ModelParams::Verdict(p.truth_at(s, y, x).unwrap());
            let sig = model_signal_vector(&truth, &proto).unwrap();
            for (bi, expect) in sig.iter().enumerate() {
                assert_eq!(v.data[(s, bi, y, x)], *expect);
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn sigma_ratio_between_sp3_and_sp1() {
        let s1 = noise_sigma(54.0, 80.0, 30.0);
        let s3 = noise_sigma(95.0, 80.0, 30.0);
        assert_relative_eq!(s3 / s1, (41.0f64 / 80.0).exp(), max_relative = 1e-12);
        assert_relative_eq!(s1, 1.0 / 30.0, max_relative = 1e-12);
    }

    #[test]
    fn infinite_snr_is_identity() {
        let spec = PhantomSpec {
            snr_ref: f64::INFINITY,
            ..small_spec()
        };
        let p = make_phantom(&spec).unwrap();
        let proto = subprotocol(SubProtocol::Sp1);
        let v = synthesize_signals(&p, &proto).unwrap();
        let noisy = add_rician(&v, &proto, &spec, 1).unwrap();
        assert_eq!(v.data, noisy.data);
    }

    #[test]
    fn zero_signal_mean_is_rayleigh() {
        // σ√(π/2) within 2% over ≥ 1e5 magnitude draws
        let proto = AcquisitionProtocol {
            directions_per_shell: 1,
            ..subprotocol(SubProtocol::Sp1)
        };
        let spec = PhantomSpec::default(); // σ = 1/30 at SP1
        let v = VolumeGrid {
            b_values: proto.b_values.clone(),
            data: Array4::zeros((1, 6, 160, 160)),
        };
        let noisy = add_rician(&v, &proto, &spec, 99).unwrap();
        let mean = noisy.data.sum() / noisy.data.len() as f64;
        let sigma = 1.0 / 30.0;
        let expect = sigma * (std::f64::consts::PI / 2.0).sqrt();
        assert!(
            (mean - expect).abs() / expect < 0.02,
            "mean {mean} vs Rayleigh {expect}"
        );
    }

    #[test]
    fn rician_bias_raises_mean_above_clean_signal() {
        let proto = subprotocol(SubProtocol::Sp3); // weakest SNR
        let spec = small_spec();
        let p = make_phantom(&spec).unwrap();
        let v = synthesize_signals(&p, &proto).unwrap();
        let noisy = add_rician(&v, &proto, &spec, 5).unwrap();
        // population check at 3σ over all gland voxels and shells
        let (mut diff_sum, mut n) = (0.0, 0usize);
        let sigma = noise_sigma(proto.timing.te_ms, spec.t2_ms, spec.snr_ref);
        for ((s, y, x), &g) in p.gland.indexed_iter() {
            if g {
                for bi in 0..proto.n_shells() {
                    diff_sum += noisy.data[(s, bi, y, x)] - v.data[(s, bi, y, x)];
                    n += 1;
                }
            }
        }
        let mean_diff = diff_sum / n as f64;
        let se = sigma / ((n * proto.directions_per_shell) as f64).sqrt();
        assert!(
            mean_diff > -3.0 * se,
            "mean noisy − clean = {mean_diff}, SE = {se}"
        );
    }

    #[test]
    fn noise_reproducible_and_shells_independent() {
        let proto = subprotocol(SubProtocol::Sp2);
        let spec = small_spec();
        let p = make_phantom(&spec).unwrap();
        let v = synthesize_signals(&p, &proto).unwrap();
        let a = add_rician(&v, &proto, &spec, 11).unwrap();
        let b = add_rician(&v, &proto, &spec, 11).unwrap();
        assert_eq!(a.data, b.data);
        let c = add_rician(&v, &proto, &spec, 12).unwrap();
        assert_ne!(a.data, c.data);
        // two shells of the same voxel do not share noise
        let mut distinct = false;
        for ((s, y, x), &g) in p.gland.indexed_iter() {
            if g {
                let d1 = a.data[(s, 1, y, x)] - v.data[(s, 1, y, x)];
                let d2 = a.data[(s, 2, y, x)] - v.data[(s, 2, y, x)];
                if (d1 - d2).abs() > 1e-9 {
                    distinct = true;
                    break;
                }
            }
        }
        assert!(distinct);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(make_phantom(&PhantomSpec {
            height: 4,
            ..PhantomSpec::default()
        })
        .is_err());
        assert!(make_phantom(&PhantomSpec {
            snr_ref: -1.0,
            ..PhantomSpec::default()
        })
        .is_err());
        // Δ+δ ≤ TE guard comes from PulseTiming itself
        assert!(PulseTiming::new(5.0, 25.0, 20.0).is_err());
    }
}
