//! Physics decoders: the DKI and VERDICT forward equations expressed on the
//! autodiff tape so reconstruction gradients flow back into the encoder.

use super::autodiff::{Tape, Tid};
use crate::error::Result;
use crate::models::{astrosticks_signal, FixedDiffusivities, ModelKind, GPD_ROOTS, GPD_ROOTS_DEFAULT};
use crate::protocol::{gamma_g_rad_per_ms_um, AcquisitionProtocol};

/// Latent columns after the fraction constraint: VERDICT fractions are
/// jointly rescaled when f_ic + f_ees exceeds 1 so f_vasc stays in [0, 1].
pub struct EffectiveLatent {
    pub cols: Vec<Tid>,
}

/// Apply the shared fraction rule to bounded VERDICT latent columns
/// (f_ic, f_ees, r, d_ees); DKI latents pass through unchanged.
pub fn effective_latent(tape: &mut Tape, model: ModelKind, latent: &[Tid]) -> EffectiveLatent {
    match model {
        ModelKind::Dki => EffectiveLatent {
            cols: latent.to_vec(),
        },
        ModelKind::Verdict => {
            let (f_ic, f_ees) = (latent[0], latent[1]);
            let s = tape.add(f_ic, f_ees);
            let denom = tape.max_scalar(s, 1.0);
            let f_ic = tape.div(f_ic, denom);
            let f_ees = tape.div(f_ees, denom);
            EffectiveLatent {
                cols: vec![f_ic, f_ees, latent[2], latent[3]],
            }
        }
    }
}

/// Reconstruct the noise-free signal batch (n×shells) from latent columns.
///
/// Numerically identical to [`crate::models::model_signal_vector`] applied
/// per row; built from tape primitives so it is differentiable end to end.
pub fn decode(
    tape: &mut Tape,
    model: ModelKind,
    latent: &EffectiveLatent,
    protocol: &AcquisitionProtocol,
) -> Result<Tid> {
    let fixed = FixedDiffusivities::default();
    let gradients = protocol.shell_gradients()?;
    let (delta, big_delta) = (protocol.timing.delta_ms, protocol.timing.big_delta_ms);

    let cols = match model {
        ModelKind::Dki => {
            let (d_k, k) = (latent.cols[0], latent.cols[1]);
            let d_sq = tape.powi(d_k, 2);
            let d_sq_k = tape.mul(d_sq, k);
            protocol
                .b_values
                .iter()
                .map(|&b| {
                    if b == 0.0 {
                        return tape.affine(d_k, 0.0, 1.0);
                    }
                    let lin = tape.scale(d_k, -b);
                    let quad = tape.scale(d_sq_k, b * b / 6.0);
                    let expo = tape.add(lin, quad);
                    tape.exp(expo)
                })
                .collect::<Vec<_>>()
        }
        ModelKind::Verdict => {
            let (f_ic, f_ees, r, d_ees) = (
                latent.cols[0],
                latent.cols[1],
                latent.cols[2],
                latent.cols[3],
            );
            let f_sum = tape.add(f_ic, f_ees);
            let f_vasc = tape.affine(f_sum, -1.0, 1.0);

            // GPD series sum shared by all shells: Σ_m R⁶·N(c_m)/K_m with
            // c_m = d_ic·λ_m²/R² and K_m = d_ic²·λ_m⁶·(λ_m²−2).
            let inv_r2 = tape.powi(r, -2);
            let r6 = tape.powi(r, 6);
            let mut acc: Option<Tid> = None;
            for &lam in GPD_ROOTS.iter().take(GPD_ROOTS_DEFAULT) {
                let lam2 = lam * lam;
                let c = tape.scale(inv_r2, fixed.d_ic * lam2);
                let s_d = tape.scale(c, -delta);
                let e_d = tape.exp(s_d);
                let s_bd = tape.scale(c, -big_delta);
                let e_bd = tape.exp(s_bd);
                let s_minus = tape.scale(c, -(big_delta - delta));
                let e_minus = tape.exp(s_minus);
                let s_plus = tape.scale(c, -(big_delta + delta));
                let e_plus = tape.exp(s_plus);
                // N(c) = 2cδ − 2 + 2e^{−cδ} + 2e^{−cΔ} − e^{−c(Δ−δ)} − e^{−c(Δ+δ)}
                let mut n = tape.affine(c, 2.0 * delta, -2.0);
                let two_ed = tape.scale(e_d, 2.0);
                n = tape.add(n, two_ed);
                let two_ebd = tape.scale(e_bd, 2.0);
                n = tape.add(n, two_ebd);
                n = tape.sub(n, e_minus);
                n = tape.sub(n, e_plus);
                let k_m = fixed.d_ic * fixed.d_ic * lam2.powi(3) * (lam2 - 2.0);
                let term = tape.scale(n, 1.0 / k_m);
                acc = Some(match acc {
                    Some(a) => tape.add(a, term),
                    None => term,
                });
            }
            let gpd_sum = tape.mul(acc.expect("nonzero root count"), r6);

            protocol
                .b_values
                .iter()
                .zip(&gradients)
                .map(|(&b, &g)| {
                    if b == 0.0 {
                        return tape.affine(f_ic, 0.0, 1.0);
                    }
                    let gg = gamma_g_rad_per_ms_um(g);
                    let expo = tape.scale(gpd_sum, -2.0 * gg * gg);
                    let s_ic = tape.exp(expo);
                    let ball_expo = tape.scale(d_ees, -b);
                    let s_ees = tape.exp(ball_expo);
                    let astro = astrosticks_signal(fixed.d_vasc, b);
                    let t_ic = tape.mul(f_ic, s_ic);
                    let t_ees = tape.mul(f_ees, s_ees);
                    let t_vasc = tape.scale(f_vasc, astro);
                    let partial = tape.add(t_ic, t_ees);
                    tape.add(partial, t_vasc)
                })
                .collect::<Vec<_>>()
        }
    };
    Ok(tape.stack_cols(&cols))
}

/// MSE between a reconstruction node and a measured-signal leaf.
pub fn mse_loss(tape: &mut Tape, recon: Tid, measured: Tid) -> Tid {
    let diff = tape.sub(recon, measured);
    let sq = tape.powi(diff, 2);
    tape.mean(sq)
}
