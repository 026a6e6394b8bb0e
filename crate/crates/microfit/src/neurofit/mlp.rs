//! MLP encoder architectures for the self-supervised fitters.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autodiff::{Tape, Tid};
use crate::error::{Error, Result};
use crate::models::{ModelKind, ParamBounds};

/// How encoder pre-activations are mapped onto parameter bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputMap {
    /// Softplus then hard clamp to the bounds (baseline architecture).
    SoftplusClamp,
    /// Sigmoid then affine map lower + (upper−lower)·σ (dense architecture).
    SigmoidScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    Baseline,
    Dense,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Arch::Baseline),
            "dense" => Ok(Arch::Dense),
            other => Err(Error::InvalidConfig(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Encoder description: 6 input nodes (one per b-shell), hidden PReLU
/// layers, dropout before the output layer, and a bound-mapping output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_width: usize,
    pub hidden_widths: Vec<usize>,
    pub latent_width: usize,
    pub dropout_rate: f64,
    pub output_map: OutputMap,
}

impl MlpSpec {
    /// Baseline preset: hidden (10, 10, 10), dropout 0.2, SoftplusClamp.
    pub fn baseline(model: ModelKind) -> Self {
        Self {
            input_width: 6,
            hidden_widths: vec![10, 10, 10],
            latent_width: model.n_free(),
            dropout_rate: 0.2,
            output_map: OutputMap::SoftplusClamp,
        }
    }

    /// Dense preset: hidden (32, 64, 128, 64, 32), dropout 0.2, SigmoidScale.
    pub fn dense(model: ModelKind) -> Self {
        Self {
            input_width: 6,
            hidden_widths: vec![32, 64, 128, 64, 32],
            latent_width: model.n_free(),
            dropout_rate: 0.2,
            output_map: OutputMap::SigmoidScale,
        }
    }

    pub fn preset(arch: Arch, model: ModelKind) -> Self {
        match arch {
            Arch::Baseline => Self::baseline(model),
            Arch::Dense => Self::dense(model),
        }
    }

    /// Layer widths including input and latent output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_widths.len() + 2);
        w.push(self.input_width);
        w.extend_from_slice(&self.hidden_widths);
        w.push(self.latent_width);
        w
    }

    /// Trainable parameter count: weights + biases + one PReLU slope per
    /// hidden layer.
    pub fn param_count(&self) -> usize {
        let w = self.widths();
        let wb: usize = w.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
        wb + self.hidden_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 || self.latent_width == 0 || self.hidden_widths.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("zero-width layer".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Network weights stored as one flat vector.
///
/// Layout: per layer W (row-major, in×out) then bias, all layers in order,
/// then one PReLU slope per hidden layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

/// Tape handles for one forward pass: the bounded latent columns plus the
/// parameter leaves (in flat-vector order) for gradient collection.
pub struct ForwardPass {
    pub latent_cols: Vec<Tid>,
    pub param_leaves: Vec<Tid>,
}

impl Mlp {
    /// He-style uniform fan-in init for weights, zero biases, PReLU slopes
    /// at 0.25. Deterministic per seed.
    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = spec.widths();
        let mut params = Vec::with_capacity(spec.param_count());
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.gen_range(-bound..bound));
            }
            params.extend(std::iter::repeat(0.0).take(fan_out));
        }
        params.extend(std::iter::repeat(0.25).take(spec.hidden_widths.len()));
        Ok(Self { spec, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Split the flat vector into (W, b) arrays per layer plus slopes.
    fn layers(&self) -> (Vec<(Array2<f64>, Array2<f64>)>, Vec<f64>) {
        let widths = self.spec.widths();
        let mut offset = 0;
        let mut layers = Vec::new();
        for pair in widths.windows(2) {
            let (ni, no) = (pair[0], pair[1]);
            let w = Array2::from_shape_vec((ni, no), self.params[offset..offset + ni * no].to_vec())
                .expect("layout");
            offset += ni * no;
            let b = Array2::from_shape_vec((1, no), self.params[offset..offset + no].to_vec())
                .expect("layout");
            offset += no;
            layers.push((w, b));
        }
        let slopes = self.params[offset..].to_vec();
        (layers, slopes)
    }

    /// Gather gradients from a backward sweep back into flat-vector order.
    pub fn collect_grads(&self, tape: &Tape, grads: &super::autodiff::Grads, pass: &ForwardPass) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.params.len());
        for &leaf in &pass.param_leaves {
            let shape = tape.value(leaf).dim();
            let g = grads.get_or_zero(leaf, shape);
            flat.extend(g.iter().copied());
        }
        debug_assert_eq!(flat.len(), self.params.len());
        flat
    }

    /// Build the encoder forward pass on a tape.
    ///
    /// `signals` is an n×6 batch of b0-normalized measurements. Dropout
    /// (inverted scaling) is applied before the output layer only when a
    /// mask is supplied; inference passes `None`.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        signals: Tid,
        bounds: &[[f64; 2]],
        dropout_mask: Option<&Array2<f64>>,
    ) -> ForwardPass {
        assert_eq!(bounds.len(), self.spec.latent_width);
        let (layers, slopes) = self.layers();
        let n_hidden = self.spec.hidden_widths.len();

        let mut param_leaves = Vec::new();
        let mut layer_ids = Vec::new();
        for (w, b) in &layers {
            let w_id = tape.leaf(w.clone());
            let b_id = tape.leaf(b.clone());
            param_leaves.push(w_id);
            param_leaves.push(b_id);
            layer_ids.push((w_id, b_id));
        }
        let slope_ids: Vec<Tid> = slopes.iter().map(|&s| tape.scalar_leaf(s)).collect();
        // flat layout is all (W, b) pairs then slopes; param_leaves mirrors it
        param_leaves.extend(slope_ids.iter().copied());

        let mut h = signals;
        for (i, &(w_id, b_id)) in layer_ids.iter().enumerate() {
            if i == n_hidden {
                // dropout sits immediately before the output layer
                if let Some(mask) = dropout_mask {
                    let m = tape.leaf(mask.clone());
                    h = tape.mul(h, m);
                }
            }
            h = tape.matmul(h, w_id);
            h = tape.add_row(h, b_id);
            if i < n_hidden {
                h = tape.prelu(h, slope_ids[i]);
            }
        }

        let mut latent_cols = Vec::with_capacity(self.spec.latent_width);
        for (j, lim) in bounds.iter().enumerate() {
            let raw = tape.col(h, j);
            let bounded = match self.spec.output_map {
                OutputMap::SoftplusClamp => {
                    let sp = tape.softplus(raw);
                    tape.clamp_const(sp, lim[0], lim[1])
                }
                OutputMap::SigmoidScale => {
                    let sg = tape.sigmoid(raw);
                    tape.affine(sg, lim[1] - lim[0], lim[0])
                }
            };
            latent_cols.push(bounded);
        }
        ForwardPass {
            latent_cols,
            param_leaves,
        }
    }

    /// Inverted-dropout mask for the pre-output activation of a batch.
    pub fn dropout_mask(&self, n_rows: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let p = self.spec.dropout_rate;
        let width = *self.spec.hidden_widths.last().expect("hidden layer");
        let keep = 1.0 - p;
        Array2::from_shape_fn((n_rows, width), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
    }
}

/// Ordered per-latent bounds for a model under the shared fit bounds.
pub fn latent_bounds(model: ModelKind, bounds: &ParamBounds) -> Vec<[f64; 2]> {
    bounds.free_bounds(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn parameter_count_identities() {
        assert_eq!(MlpSpec::baseline(ModelKind::Verdict).param_count(), 337);
        assert_eq!(MlpSpec::baseline(ModelKind::Dki).param_count(), 315);
        assert_eq!(MlpSpec::dense(ModelKind::Verdict).param_count(), 21_129);
        assert_eq!(MlpSpec::dense(ModelKind::Dki).param_count(), 21_063);
    }

    #[test]
    fn built_network_has_exact_count_and_is_seed_deterministic() {
        for spec in [
            MlpSpec::baseline(ModelKind::Dki),
            MlpSpec::dense(ModelKind::Verdict),
        ] {
            let a = Mlp::new(spec.clone(), 9).unwrap();
            let b = Mlp::new(spec.clone(), 9).unwrap();
            let c = Mlp::new(spec.clone(), 10).unwrap();
            assert_eq!(a.param_count(), spec.param_count());
            assert_eq!(a.params, b.params);
            assert_ne!(a.params, c.params);
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut spec = MlpSpec::baseline(ModelKind::Dki);
        spec.hidden_widths[1] = 0;
        assert!(Mlp::new(spec, 0).is_err());
    }

    #[test]
    fn sigmoid_scale_stays_strictly_inside_bounds() {
        use rand::{Rng, SeedableRng};
        let mlp = Mlp::new(MlpSpec::dense(ModelKind::Verdict), 4).unwrap();
        let bounds = latent_bounds(ModelKind::Verdict, &ParamBounds::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((32, 6), |_| rng.gen_range(0.0..1.0));
        let mut tape = Tape::new();
        let sig = tape.leaf(x);
        let pass = mlp.encode_on_tape(&mut tape, sig, &bounds, None);
        for (col, lim) in pass.latent_cols.iter().zip(&bounds) {
            for &v in tape.value(*col) {
                assert!(v > lim[0] && v < lim[1], "{v} outside ({}, {})", lim[0], lim[1]);
            }
        }
    }

    #[test]
    fn softplus_clamp_floors_large_negative_preactivation() {
        // A raw pre-activation of −50 maps to ≈0, the f_ic lower bound.
        let v = (-50.0f64).exp().ln_1p() + 0.0f64.max(-50.0);
        assert_abs_diff_eq!(v.clamp(0.0, 1.0), 0.0, epsilon = 1e-20);
        // and below a lower bound > 0 the clamp floors it exactly
        assert_eq!(v.clamp(0.5, 3.0), 0.5);
    }

    #[test]
    fn inference_is_deterministic_without_dropout() {
        let mlp = Mlp::new(MlpSpec::baseline(ModelKind::Verdict), 2).unwrap();
        let bounds = latent_bounds(ModelKind::Verdict, &ParamBounds::default());
        let x = Array2::from_shape_fn((8, 6), |(i, j)| ((i + j) as f64 * 0.13).sin().abs());
        let run = || {
            let mut tape = Tape::new();
            let sig = tape.leaf(x.clone());
            let pass = mlp.encode_on_tape(&mut tape, sig, &bounds, None);
            pass.latent_cols
                .iter()
                .map(|&c| tape.value(c).clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
