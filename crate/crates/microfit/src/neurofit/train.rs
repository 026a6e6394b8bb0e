//! Self-supervised training: Adam over the encoder weights with the physics
//! decoder fixed, per-epoch full-set loss tracking, and the dense-preset
//! hyperparameter grid search.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autodiff::Tape;
use super::decode::{decode, effective_latent, mse_loss};
use super::mlp::{latent_bounds, Arch, Mlp, MlpSpec};
use crate::error::{Error, Result};
use crate::models::{ModelKind, ParamBounds};
use crate::protocol::{AcquisitionProtocol, SubProtocol};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scheduler {
    Constant,
    Step { factor: f64, every_n_epochs: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub epochs: usize,
    pub scheduler: Scheduler,
    pub seed: u64,
}

impl TrainConfig {
    /// Baseline preset: batch 256, constant 1e-3, 60 epochs for DKI and
    /// 300 for VERDICT.
    pub fn baseline(model: ModelKind, seed: u64) -> Self {
        Self {
            batch_size: 256,
            lr0: 1e-3,
            epochs: match model {
                ModelKind::Dki => 60,
                ModelKind::Verdict => 300,
            },
            scheduler: Scheduler::Constant,
            seed,
        }
    }

    /// Dense preset: per-sub-protocol grid-search optima with the 0.1×/10
    /// step scheduler and 60 epochs.
    pub fn dense(model: ModelKind, sp: SubProtocol, seed: u64) -> Self {
        let (batch_size, lr0) = match (model, sp) {
            (ModelKind::Dki, SubProtocol::Sp1) => (64, 0.01),
            (ModelKind::Dki, SubProtocol::Sp2) => (64, 0.01),
            (ModelKind::Dki, SubProtocol::Sp3) => (128, 0.01),
            (ModelKind::Verdict, SubProtocol::Sp1) => (128, 0.01),
            (ModelKind::Verdict, SubProtocol::Sp2) => (256, 0.01),
            (ModelKind::Verdict, SubProtocol::Sp3) => (128, 0.01),
        };
        Self {
            batch_size,
            lr0,
            epochs: 60,
            scheduler: Scheduler::Step {
                factor: 0.1,
                every_n_epochs: 10,
            },
            seed,
        }
    }

    pub fn preset(arch: Arch, model: ModelKind, sp: SubProtocol, seed: u64) -> Self {
        match arch {
            Arch::Baseline => Self::baseline(model, seed),
            Arch::Dense => Self::dense(model, sp, seed),
        }
    }
}

/// Learning rate in force at a given epoch (0-based).
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.scheduler {
        Scheduler::Constant => cfg.lr0,
        Scheduler::Step {
            factor,
            every_n_epochs,
        } => cfg.lr0 * factor.powi((epoch / every_n_epochs) as i32),
    }
}

/// Bias-corrected Adam state (β1 = 0.9, β2 = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One Adam update in place.
pub fn adam_step(weights: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(weights.len(), grads.len());
    assert_eq!(weights.len(), state.m.len());
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for i in 0..weights.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grads[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        weights[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub val: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub mlp: Mlp,
    /// Weights at the end of the final epoch.
    pub final_mlp: Mlp,
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Full-set reconstruction MSE with dropout off.
pub fn eval_mse(
    mlp: &Mlp,
    model: ModelKind,
    signals: &Array2<f64>,
    protocol: &AcquisitionProtocol,
    bounds: &ParamBounds,
) -> Result<f64> {
    let lat_bounds = latent_bounds(model, bounds);
    let mut tape = Tape::new();
    let x = tape.leaf(signals.clone());
    let pass = mlp.encode_on_tape(&mut tape, x, &lat_bounds, None);
    let eff = effective_latent(&mut tape, model, &pass.latent_cols);
    let recon = decode(&mut tape, model, &eff, protocol)?;
    let loss = mse_loss(&mut tape, recon, x);
    Ok(tape.scalar(loss))
}

/// Loss and flat gradient for one minibatch.
pub fn loss_and_grad(
    mlp: &Mlp,
    model: ModelKind,
    batch: &Array2<f64>,
    protocol: &AcquisitionProtocol,
    bounds: &ParamBounds,
    dropout_mask: Option<&Array2<f64>>,
) -> Result<(f64, Vec<f64>)> {
    let lat_bounds = latent_bounds(model, bounds);
    let mut tape = Tape::new();
    let x = tape.leaf(batch.clone());
    let pass = mlp.encode_on_tape(&mut tape, x, &lat_bounds, dropout_mask);
    let eff = effective_latent(&mut tape, model, &pass.latent_cols);
    let recon = decode(&mut tape, model, &eff, protocol)?;
    let loss = mse_loss(&mut tape, recon, x);
    let grads = tape.backward(loss);
    let flat = mlp.collect_grads(&tape, &grads, &pass);
    Ok((tape.scalar(loss), flat))
}

/// Train a self-supervised fitter.
///
/// Per epoch: a seeded shuffled full pass of minibatches, then full-set
/// train and validation MSE with dropout off. Returns the weights from the
/// epoch of minimum validation loss alongside the final weights.
pub fn train_ssl(
    spec: &MlpSpec,
    model: ModelKind,
    cfg: &TrainConfig,
    train: &Array2<f64>,
    val: &Array2<f64>,
    protocol: &AcquisitionProtocol,
    bounds: &ParamBounds,
) -> Result<TrainOutcome> {
    if train.nrows() == 0 || val.nrows() == 0 {
        return Err(Error::InvalidConfig("empty train or validation table".into()));
    }
    if train.ncols() != protocol.n_shells() {
        return Err(Error::InvalidConfig(format!(
            "table has {} columns, protocol has {} shells",
            train.ncols(),
            protocol.n_shells()
        )));
    }
    let mut mlp = Mlp::new(spec.clone(), cfg.seed)?;
    let mut adam = AdamState::new(mlp.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));

    let n = train.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0usize;
    let mut best_val = f64::INFINITY;
    let mut best_params = mlp.params.clone();

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch = train.select(ndarray::Axis(0), chunk);
            let mask = if spec.dropout_rate > 0.0 {
                Some(mlp.dropout_mask(batch.nrows(), &mut rng))
            } else {
                None
            };
            let (loss, grads) = loss_and_grad(&mlp, model, &batch, protocol, bounds, mask.as_ref())?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    reason: format!("non-finite minibatch loss {loss}"),
                });
            }
            adam_step(&mut mlp.params, &grads, &mut adam, lr);
        }
        let train_loss = eval_mse(&mlp, model, train, protocol, bounds)?;
        let val_loss = eval_mse(&mlp, model, val, protocol, bounds)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                reason: format!("non-finite epoch loss (train {train_loss}, val {val_loss})"),
            });
        }
        history.push(EpochLoss {
            epoch,
            train: train_loss,
            val: val_loss,
            lr,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = mlp.params.clone();
        }
    }

    let final_mlp = mlp.clone();
    let best_mlp = Mlp {
        spec: mlp.spec,
        params: best_params,
    };
    Ok(TrainOutcome {
        mlp: best_mlp,
        final_mlp,
        history,
        best_epoch,
        best_val_loss: best_val,
    })
}

/// Inference: bounded latent parameters for every row, dropout off.
/// VERDICT rows are (f_ic, f_ees, r, d_ees) after the fraction rule.
pub fn predict_params(
    mlp: &Mlp,
    model: ModelKind,
    signals: &Array2<f64>,
    bounds: &ParamBounds,
) -> Array2<f64> {
    let lat_bounds = latent_bounds(model, bounds);
    let mut tape = Tape::new();
    let x = tape.leaf(signals.clone());
    let pass = mlp.encode_on_tape(&mut tape, x, &lat_bounds, None);
    let eff = effective_latent(&mut tape, model, &pass.latent_cols);
    let mut out = Array2::zeros((signals.nrows(), eff.cols.len()));
    for (j, &c) in eff.cols.iter().enumerate() {
        out.column_mut(j).assign(&tape.value(c).column(0));
    }
    out
}

/// Batch-size × learning-rate grid for the dense architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub batch_sizes: Vec<usize>,
    pub lrs: Vec<f64>,
}

impl GridSpec {
    pub fn dense(model: ModelKind) -> Self {
        Self {
            batch_sizes: match model {
                ModelKind::Dki => vec![32, 64, 128, 256],
                ModelKind::Verdict => vec![64, 128, 256, 512],
            },
            lrs: vec![1e-4, 1e-3, 1e-2, 1e-1],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub batch_size: usize,
    pub lr0: f64,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_batch_size: usize,
    pub best_lr0: f64,
    /// Row-major |batch_sizes|×|lrs| matrix of best validation losses.
    pub cells: Vec<GridCell>,
}

/// Full factorial grid search; diverged runs score +∞. Ties break to the
/// smaller batch size, then the smaller learning rate.
pub fn grid_search(
    grid: &GridSpec,
    spec: &MlpSpec,
    model: ModelKind,
    base_cfg: &TrainConfig,
    train: &Array2<f64>,
    val: &Array2<f64>,
    protocol: &AcquisitionProtocol,
    bounds: &ParamBounds,
) -> Result<GridSearchResult> {
    if grid.batch_sizes.is_empty() || grid.lrs.is_empty() {
        return Err(Error::InvalidConfig("empty grid".into()));
    }
    let mut cells = Vec::with_capacity(grid.batch_sizes.len() * grid.lrs.len());
    let mut best: Option<(f64, usize, f64)> = None;
    for &bs in &grid.batch_sizes {
        for &lr in &grid.lrs {
            let cfg = TrainConfig {
                batch_size: bs,
                lr0: lr,
                ..*base_cfg
            };
            let score = match train_ssl(spec, model, &cfg, train, val, protocol, bounds) {
                Ok(out) => {
                    if out.best_val_loss.is_finite() {
                        out.best_val_loss
                    } else {
                        f64::INFINITY
                    }
                }
                Err(Error::Training { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            cells.push(GridCell {
                batch_size: bs,
                lr0: lr,
                best_val_loss: score,
            });
            let better = match best {
                None => true,
                Some((s, b, l)) => {
                    score < s || (score == s && (bs < b || (bs == b && lr < l)))
                }
            };
            if better {
                best = Some((score, bs, lr));
            }
        }
    }
    let (_, bs, lr) = best.expect("non-empty grid");
    Ok(GridSearchResult {
        best_batch_size: bs,
        best_lr0: lr,
        cells,
    })
}
