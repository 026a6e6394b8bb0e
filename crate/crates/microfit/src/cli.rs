//! Command implementations behind the `microfit` binary: each `cmd_*`
//! function is callable as a library so the experiment matrix can also be
//! driven from tests.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalstat::{
    aicc, bic, decide_and_test, mse, rank_models, variability_report, DecidedTest, ModelRanking,
    ModelScore, VariabilityReport,
};
use crate::models::{model_signal_vector, DkiParams, ModelKind, ModelParams, ParamBounds, VerdictParams};
use crate::neurofit::{predict_params, train_ssl, Arch, Mlp, MlpSpec, Scheduler, TrainConfig, TrainOutcome};
use crate::nlls::{fit_volume, LmConfig};
use crate::phantom::{add_rician, make_phantom, noise_sigma, synthesize_signals, PhantomSpec};
use crate::pipeline::{
    make_split, mask_and_flatten, normalize_b0, read_mask, read_table_json, read_volume,
    unflatten_values, write_mask, write_pgm, write_table_json, write_volume, SignalTable,
};
use crate::protocol::{subprotocol, SubProtocol};
use crate::restricted_mc::{mc_sphere_signal, McConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Map an error to the process exit code contract:
/// 2 = configuration, 3 = numeric, 4 = I/O or format.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidTiming(_)
        | Error::InvalidProtocol(_)
        | Error::InvalidParams(_)
        | Error::InvalidConfig(_) => 2,
        Error::FitRejected(_) | Error::Training { .. } | Error::Stats(_) => 3,
        Error::Format(_) | Error::Io(_) | Error::Json(_) => 4,
    }
}

pub fn parse_model(s: &str) -> Result<ModelKind> {
    match s.to_ascii_lowercase().as_str() {
        "dki" => Ok(ModelKind::Dki),
        "verdict" => Ok(ModelKind::Verdict),
        other => Err(Error::InvalidConfig(format!("unknown model '{other}'"))),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

// ---------------------------------------------------------------------------
// simulate

/// Writes the noisy signal volume to `out` and the gland / lesion / normal
/// masks next to it (`<out>.gland`, `<out>.lesion`, `<out>.normal`).
pub fn cmd_simulate(
    sp: SubProtocol,
    spec: &PhantomSpec,
    noise_seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let proto = subprotocol(sp);
    let ph = make_phantom(spec)?;
    let clean = synthesize_signals(&ph, &proto)?;
    let lineage = match noise_seed {
        Some(ns) => format!("phantom:{}/noise:{}", spec.seed, ns),
        None => format!("phantom:{}/noise-free", spec.seed),
    };
    let vol = match noise_seed {
        Some(ns) => add_rician(&clean, &proto, spec, ns)?,
        None => clean,
    };
    write_volume(out, &vol, proto.name.as_str(), &lineage)?;
    let side = |suffix: &str| -> PathBuf {
        let mut p = out.as_os_str().to_owned();
        p.push(suffix);
        PathBuf::from(p)
    };
    write_mask(&side(".gland"), &ph.gland, proto.name.as_str(), &lineage)?;
    write_mask(&side(".lesion"), &ph.lesion, proto.name.as_str(), &lineage)?;
    write_mask(&side(".normal"), &ph.normal, proto.name.as_str(), &lineage)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// preprocess

/// Mask, flatten, and b0-normalize a signal volume into a table. Returns the
/// number of discarded zero-b0 voxels.
pub fn cmd_preprocess(
    volume: &Path,
    mask: &Path,
    subject_id: &str,
    out: &Path,
) -> Result<usize> {
    let (vol, hdr) = read_volume(volume)?;
    let m = read_mask(mask)?;
    let table = mask_and_flatten(&vol, &m, subject_id, &hdr.sub_protocol)?;
    let (norm, discarded) = normalize_b0(&table)?;
    write_table_json(out, &norm)?;
    Ok(discarded)
}

// ---------------------------------------------------------------------------
// parameter tables (shared by fit-nlls and network prediction)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTable {
    pub model: String,
    pub fitter: String,
    pub param_names: Vec<String>,
    pub voxel_indices: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
    pub subject_id: String,
    pub sub_protocol: String,
}

pub fn param_names(model: ModelKind) -> Vec<String> {
    match model {
        ModelKind::Dki => vec!["d_k".into(), "k".into()],
        ModelKind::Verdict => vec!["f_ic".into(), "f_ees".into(), "r_um".into(), "d_ees".into()],
    }
}

/// Noise-free reconstruction of each parameter row over the protocol shells.
pub fn reconstruct(
    model: ModelKind,
    rows: &[Vec<f64>],
    protocol: &crate::protocol::AcquisitionProtocol,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows.len(), protocol.n_shells()));
    for (i, r) in rows.iter().enumerate() {
        let p = match model {
            ModelKind::Dki => ModelParams::Dki(DkiParams { d_k: r[0], k: r[1] }),
            ModelKind::Verdict => {
                ModelParams::Verdict(VerdictParams::from_free(r[0], r[1], r[2], r[3]))
            }
        };
        let sig = model_signal_vector(&p, protocol)?;
        for (j, s) in sig.iter().enumerate() {
            out[(i, j)] = *s;
        }
    }
    Ok(out)
}

pub fn cmd_fit_nlls(table_path: &Path, model: ModelKind, seed: u64, out: &Path) -> Result<ParamTable> {
    let table = read_table_json(table_path)?;
    let pt = fit_nlls_table(&table, model, seed)?;
    fs::write(out, serde_json::to_vec_pretty(&pt)?)?;
    Ok(pt)
}

pub fn fit_nlls_table(table: &SignalTable, model: ModelKind, seed: u64) -> Result<ParamTable> {
    let proto = protocol_for(&table.sub_protocol)?;
    let bounds = ParamBounds::default();
    let cfg = LmConfig {
        seed,
        ..LmConfig::default()
    };
    let fits = fit_volume(model, &table.data, &proto, &bounds, &cfg);
    let mut rows = Vec::with_capacity(fits.len());
    for f in fits {
        rows.push(f?.params);
    }
    Ok(ParamTable {
        model: model.name().to_string(),
        fitter: "nlls".into(),
        param_names: param_names(model),
        voxel_indices: table.voxel_indices.clone(),
        rows,
        subject_id: table.subject_id.clone(),
        sub_protocol: table.sub_protocol.clone(),
    })
}

pub fn protocol_for(sp_name: &str) -> Result<crate::protocol::AcquisitionProtocol> {
    let sp: SubProtocol = sp_name
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("unknown sub-protocol '{sp_name}'")))?;
    Ok(subprotocol(sp))
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub model: String,
    pub arch: String,
    pub spec: MlpSpec,
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<crate::neurofit::EpochLoss>,
    pub weights: Vec<f64>,
}

pub fn cmd_train(
    train_path: &Path,
    val_path: &Path,
    model: ModelKind,
    arch: Arch,
    overrides: &TrainOverrides,
    out: &Path,
) -> Result<Checkpoint> {
    let train = read_table_json(train_path)?;
    let val = read_table_json(val_path)?;
    let (outcome, spec, cfg) = train_tables(&train, &val, model, arch, overrides)?;
    let ck = Checkpoint {
        version: VERSION.into(),
        model: model.name().into(),
        arch: format!("{arch:?}").to_lowercase(),
        spec,
        config: cfg,
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        history: outcome.history.clone(),
        weights: outcome.mlp.params.clone(),
    };
    fs::write(out, serde_json::to_vec(&ck)?)?;
    // loss curve beside the checkpoint for plotting
    let mut csv = String::from("epoch,train_mse,val_mse,lr\n");
    for h in &outcome.history {
        csv.push_str(&format!("{},{},{},{}\n", h.epoch, h.train, h.val, h.lr));
    }
    let mut curve = out.as_os_str().to_owned();
    curve.push(".losses.csv");
    fs::write(PathBuf::from(curve), csv)?;
    Ok(ck)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr0: Option<f64>,
    pub scheduler: Option<Scheduler>,
    pub seed: Option<u64>,
    /// Train this many independently seeded runs and keep the one with the
    /// lowest validation loss (counters init-dependent basins of the
    /// hard-clamped output map).
    pub restarts: Option<usize>,
}

pub fn train_tables(
    train: &SignalTable,
    val: &SignalTable,
    model: ModelKind,
    arch: Arch,
    overrides: &TrainOverrides,
) -> Result<(TrainOutcome, MlpSpec, TrainConfig)> {
    let proto = protocol_for(&train.sub_protocol)?;
    let sp: SubProtocol = train.sub_protocol.parse()?;
    let spec = MlpSpec::preset(arch, model);
    let mut cfg = TrainConfig::preset(arch, model, sp, overrides.seed.unwrap_or(0));
    if let Some(e) = overrides.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = overrides.batch_size {
        cfg.batch_size = b;
    }
    if let Some(l) = overrides.lr0 {
        cfg.lr0 = l;
    }
    if let Some(sched) = overrides.scheduler {
        cfg.scheduler = sched;
    }
    let bounds = ParamBounds::default();
    let restarts = overrides.restarts.unwrap_or(1).max(1);
    let mut best: Option<(TrainOutcome, TrainConfig)> = None;
    for r in 0..restarts {
        let mut cfg_r = cfg.clone();
        cfg_r.seed = cfg.seed.wrapping_add(9973 * r as u64);
        let outcome = train_ssl(&spec, model, &cfg_r, &train.data, &val.data, &proto, &bounds)?;
        if best
            .as_ref()
            .map_or(true, |(b, _)| outcome.best_val_loss < b.best_val_loss)
        {
            best = Some((outcome, cfg_r));
        }
    }
    let (outcome, cfg) = best.expect("restarts ≥ 1");
    Ok((outcome, spec, cfg))
}

pub fn checkpoint_mlp(ck: &Checkpoint) -> Result<Mlp> {
    if ck.weights.len() != ck.spec.param_count() {
        return Err(Error::Format("checkpoint weight count mismatch".into()));
    }
    Ok(Mlp {
        spec: ck.spec.clone(),
        params: ck.weights.clone(),
    })
}

pub fn predict_table(ck: &Checkpoint, table: &SignalTable, fitter: &str) -> Result<ParamTable> {
    let model = parse_model(&ck.model)?;
    let mlp = checkpoint_mlp(ck)?;
    let bounds = ParamBounds::default();
    let params = predict_params(&mlp, model, &table.data, &bounds);
    Ok(ParamTable {
        model: ck.model.clone(),
        fitter: fitter.to_string(),
        param_names: param_names(model),
        voxel_indices: table.voxel_indices.clone(),
        rows: params.rows().into_iter().map(|r| r.to_vec()).collect(),
        subject_id: table.subject_id.clone(),
        sub_protocol: table.sub_protocol.clone(),
    })
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitEvaluation {
    pub model: String,
    pub fitter: String,
    pub sub_protocol: String,
    pub n_voxels: usize,
    pub mse: f64,
    pub aicc: f64,
    pub bic: f64,
}

/// Reconstruction-quality evaluation of a fitted table against measured
/// signals.
pub fn evaluate_fit(table: &SignalTable, params: &ParamTable) -> Result<FitEvaluation> {
    if params.rows.len() != table.n_voxels() {
        return Err(Error::Stats("evaluate: row count mismatch".into()));
    }
    let model = parse_model(&params.model)?;
    let proto = protocol_for(&table.sub_protocol)?;
    let recon = reconstruct(model, &params.rows, &proto)?;
    let m = mse(&table.data, &recon)?;
    let n = table.data.len();
    let ssr = m * n as f64;
    let k = model.n_free();
    Ok(FitEvaluation {
        model: params.model.clone(),
        fitter: params.fitter.clone(),
        sub_protocol: table.sub_protocol.clone(),
        n_voxels: table.n_voxels(),
        mse: m,
        aicc: aicc(ssr, n, k)?,
        bic: bic(ssr, n, k)?,
    })
}

pub fn cmd_evaluate(table_path: &Path, params_path: &Path, out: &Path) -> Result<FitEvaluation> {
    let table = read_table_json(table_path)?;
    let params: ParamTable = serde_json::from_slice(&fs::read(params_path)?)?;
    let ev = evaluate_fit(&table, &params)?;
    fs::write(out, serde_json::to_vec_pretty(&ev)?)?;
    Ok(ev)
}

// ---------------------------------------------------------------------------
// export-maps

/// Render one parameter of a ParamTable as per-slice PGM previews.
pub fn cmd_export_maps(
    params_path: &Path,
    param: &str,
    dims: (usize, usize, usize),
    window: (f64, f64),
    out_prefix: &Path,
) -> Result<Vec<PathBuf>> {
    let pt: ParamTable = serde_json::from_slice(&fs::read(params_path)?)?;
    export_maps(&pt, param, dims, window, out_prefix)
}

pub fn export_maps(
    pt: &ParamTable,
    param: &str,
    dims: (usize, usize, usize),
    window: (f64, f64),
    out_prefix: &Path,
) -> Result<Vec<PathBuf>> {
    let col = pt
        .param_names
        .iter()
        .position(|n| n == param)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter '{param}'")))?;
    let values: Vec<f64> = pt.rows.iter().map(|r| r[col]).collect();
    let vol = unflatten_values(&values, &pt.voxel_indices, dims, window.0)?;
    let mut written = Vec::new();
    for s in 0..dims.0 {
        let plane = vol.index_axis(ndarray::Axis(0), s).to_owned();
        let mut path = out_prefix.as_os_str().to_owned();
        path.push(format!("_{param}_s{s}.pgm"));
        let path = PathBuf::from(path);
        write_pgm(&path, &plane, window)?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// oracle

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SphereOracleReport {
    pub r_um: f64,
    pub d_um2_ms: f64,
    pub g_mt_m: f64,
    pub sub_protocol: String,
    pub n_walkers: usize,
    pub dt_ms: f64,
    pub seed: u64,
    pub mc_signal: f64,
    pub mc_standard_error: f64,
    pub gpd_signal: f64,
    pub relative_difference: f64,
}

pub fn cmd_oracle_sphere(
    sp: SubProtocol,
    r_um: f64,
    d: f64,
    g_mt_m: f64,
    n_walkers: usize,
    dt_ms: f64,
    seed: u64,
) -> Result<SphereOracleReport> {
    let proto = subprotocol(sp);
    let cfg = McConfig {
        n_walkers,
        dt_ms,
        seed,
        r_um,
        d_um2_ms: d,
        g_mt_m,
        timing: proto.timing,
    };
    let est = mc_sphere_signal(&cfg)?;
    let gpd = crate::models::sphere_gpd_signal(r_um, d, g_mt_m, &proto.timing);
    Ok(SphereOracleReport {
        r_um,
        d_um2_ms: d,
        g_mt_m,
        sub_protocol: proto.name,
        n_walkers,
        dt_ms,
        seed,
        mc_signal: est.signal,
        mc_standard_error: est.standard_error,
        gpd_signal: gpd,
        relative_difference: (est.signal - gpd).abs() / gpd.abs().max(1e-300),
    })
}

// ---------------------------------------------------------------------------
// reproduce

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub sub_protocols: Vec<String>,
    /// "dki", "verdict"
    pub models: Vec<String>,
    /// "nlls", "baseline", "dense"
    pub fitters: Vec<String>,
    /// Inline phantom spec; `phantom_spec_path`, when set, is loaded instead.
    pub phantom: Option<PhantomSpec>,
    pub phantom_spec_path: Option<String>,
    pub n_subjects: usize,
    pub seed: u64,
    /// Shortened training for smoke runs; presets apply when absent.
    pub epochs_override: Option<usize>,
    /// Initial learning rate for all network fitters; presets apply when absent.
    #[serde(default)]
    pub lr_override: Option<f64>,
    /// Learning-rate schedule for all network fitters; presets apply when absent.
    #[serde(default)]
    pub scheduler_override: Option<Scheduler>,
    /// Minibatch size for all network fitters; presets apply when absent.
    #[serde(default)]
    pub batch_override: Option<usize>,
    /// Best-of-N multistart for all network fitters; single run when absent.
    #[serde(default)]
    pub restarts_override: Option<usize>,
    pub out_dir: String,
}

impl ExperimentConfig {
    pub fn minimal(out_dir: &str) -> Self {
        Self {
            sub_protocols: vec!["SP1".into()],
            models: vec!["verdict".into()],
            fitters: vec!["dense".into()],
            phantom: Some(PhantomSpec {
                slices: 1,
                height: 32,
                width: 32,
                ..PhantomSpec::default()
            }),
            phantom_spec_path: None,
            n_subjects: 9,
            seed: 0,
            epochs_override: Some(5),
            lr_override: None,
            scheduler_override: None,
            batch_override: None,
            restarts_override: None,
            out_dir: out_dir.into(),
        }
    }

    pub fn resolve_phantom(&self) -> Result<PhantomSpec> {
        if let Some(p) = &self.phantom_spec_path {
            let spec: PhantomSpec = serde_json::from_slice(&fs::read(p)?)?;
            spec.validate()?;
            return Ok(spec);
        }
        let spec = self.phantom.clone().unwrap_or_default();
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sub_protocols.is_empty() || self.models.is_empty() || self.fitters.is_empty() {
            return Err(Error::InvalidConfig(
                "sub_protocols, models, and fitters must be non-empty".into(),
            ));
        }
        for f in &self.fitters {
            if !matches!(f.as_str(), "nlls" | "baseline" | "dense") {
                return Err(Error::InvalidConfig(format!("unknown fitter '{f}'")));
            }
        }
        for m in &self.models {
            parse_model(m)?;
        }
        for sp in &self.sub_protocols {
            protocol_for(sp)?;
        }
        if self.n_subjects == 0 {
            return Err(Error::InvalidConfig("n_subjects must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Healthy/patient pattern giving the 5/2/2 split the 2H+3P / 1H+1P / 1H+1P
/// composition on a nine-subject cohort.
pub fn cohort_pattern(n: usize) -> Vec<(String, bool)> {
    const NINE: [bool; 9] = [false, false, true, true, true, false, true, false, true];
    (0..n)
        .map(|i| {
            let has_lesion = if n == 9 { NINE[i] } else { i % 2 == 1 };
            (format!("subj{:02}", i + 1), has_lesion)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpReport {
    pub sub_protocol: String,
    pub noise_sigma: f64,
    pub evaluations: Vec<FitEvaluation>,
    pub ranking: ModelRanking,
    /// Per VERDICT fitter: tumour-f_ic variability over patient subjects.
    pub variability: Vec<(String, VariabilityReport)>,
    /// Tumour-vs-normal f_ic comparison per VERDICT fitter.
    pub tumour_vs_normal: Vec<(String, DecidedTest)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReproduceReport {
    pub version: String,
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub per_sp: Vec<SpReport>,
    /// (model, fitter) → test MSE per sub-protocol in config order.
    pub mse_matrix: Vec<(String, String, Vec<f64>)>,
    /// (model, fitter) → whether MSE strictly increases SP1 → SP3.
    pub sp_ordering_holds: Vec<(String, String, bool)>,
}

struct SubjectData {
    id: String,
    has_lesion: bool,
    gland: SignalTable,
    lesion: Option<SignalTable>,
    normal: SignalTable,
}

fn concat_tables(tables: &[&SignalTable]) -> Result<SignalTable> {
    let first = tables
        .first()
        .ok_or_else(|| Error::InvalidConfig("no tables to pool".into()))?;
    let ncols = first.b_values.len();
    let total: usize = tables.iter().map(|t| t.n_voxels()).sum();
    let mut data = Array2::zeros((total, ncols));
    let mut row = 0;
    for t in tables {
        if t.b_values != first.b_values {
            return Err(Error::Format("pooled tables disagree on b-values".into()));
        }
        for r in t.data.rows() {
            for (j, v) in r.iter().enumerate() {
                data[(row, j)] = *v;
            }
            row += 1;
        }
    }
    Ok(SignalTable {
        b_values: first.b_values.clone(),
        data,
        voxel_indices: (0..total).collect(),
        subject_id: "pooled".into(),
        sub_protocol: first.sub_protocol.clone(),
    })
}

fn simulate_subject(
    base_spec: &PhantomSpec,
    id: &str,
    idx: usize,
    has_lesion: bool,
    sp: SubProtocol,
    seed: u64,
) -> Result<SubjectData> {
    let proto = subprotocol(sp);
    let spec = PhantomSpec {
        seed: seed.wrapping_add(1000 + idx as u64),
        has_lesion,
        ..base_spec.clone()
    };
    let ph = make_phantom(&spec)?;
    let clean = synthesize_signals(&ph, &proto)?;
    let noisy = add_rician(&clean, &proto, &spec, seed.wrapping_add(5000 + idx as u64))?;
    let flat_norm = |mask: &ndarray::Array3<bool>| -> Result<SignalTable> {
        let t = mask_and_flatten(&noisy, mask, id, &proto.name)?;
        Ok(normalize_b0(&t)?.0)
    };
    Ok(SubjectData {
        id: id.to_string(),
        has_lesion,
        gland: flat_norm(&ph.gland)?,
        lesion: if has_lesion {
            Some(flat_norm(&ph.lesion)?)
        } else {
            None
        },
        normal: flat_norm(&ph.normal)?,
    })
}

/// One fitter's f_ic predictions for a table.
fn fic_predictions(
    fitter: &str,
    model: ModelKind,
    table: &SignalTable,
    trained: Option<&Mlp>,
    seed: u64,
) -> Result<Vec<f64>> {
    let rows = match trained {
        Some(mlp) => {
            let bounds = ParamBounds::default();
            let p = predict_params(mlp, model, &table.data, &bounds);
            p.column(0).to_vec()
        }
        None => {
            debug_assert_eq!(fitter, "nlls");
            fit_nlls_table(table, model, seed)?
                .rows
                .iter()
                .map(|r| r[0])
                .collect()
        }
    };
    Ok(rows)
}

/// Run the full experiment matrix and write the report bundle into
/// `config.out_dir`. Deterministic: same config → byte-identical report.
pub fn cmd_reproduce(config: &ExperimentConfig) -> Result<ReproduceReport> {
    config.validate()?;
    let base_spec = config.resolve_phantom()?;
    let out_dir = Path::new(&config.out_dir);
    fs::create_dir_all(out_dir)?;
    let cfg_bytes = serde_json::to_vec(config)?;
    let cfg_hash = sha256_hex(&cfg_bytes);

    let cohort = cohort_pattern(config.n_subjects);
    let ids: Vec<String> = cohort.iter().map(|(id, _)| id.clone()).collect();
    let split = make_split(&ids)?;

    let mut per_sp = Vec::new();
    let mut mse_matrix: Vec<(String, String, Vec<f64>)> = Vec::new();
    for m in &config.models {
        for f in &config.fitters {
            mse_matrix.push((m.clone(), f.clone(), Vec::new()));
        }
    }

    for sp_name in &config.sub_protocols {
        let sp: SubProtocol = sp_name.parse()?;
        let proto = subprotocol(sp);

        let subjects: Vec<SubjectData> = cohort
            .iter()
            .enumerate()
            .map(|(i, (id, lesion))| {
                simulate_subject(&base_spec, id, i, *lesion, sp, config.seed)
            })
            .collect::<Result<_>>()?;
        let by_id = |ids: &[String]| -> Vec<&SubjectData> {
            ids.iter()
                .map(|id| subjects.iter().find(|s| &s.id == id).expect("cohort id"))
                .collect()
        };
        let train_set = by_id(&split.train);
        let val_set = by_id(&split.validation);
        let test_set = if split.test.is_empty() {
            train_set.clone()
        } else {
            by_id(&split.test)
        };
        let train_table = concat_tables(&train_set.iter().map(|s| &s.gland).collect::<Vec<_>>())?;
        let val_table = if val_set.is_empty() {
            train_table.clone()
        } else {
            concat_tables(&val_set.iter().map(|s| &s.gland).collect::<Vec<_>>())?
        };
        let test_table = concat_tables(&test_set.iter().map(|s| &s.gland).collect::<Vec<_>>())?;

        let patients: Vec<&SubjectData> = subjects.iter().filter(|s| s.has_lesion).collect();

        let mut evaluations = Vec::new();
        let mut variability = Vec::new();
        let mut tumour_vs_normal = Vec::new();

        for model_name in &config.models {
            let model = parse_model(model_name)?;
            for fitter in &config.fitters {
                let overrides = TrainOverrides {
                    epochs: config.epochs_override,
                    batch_size: config.batch_override,
                    lr0: config.lr_override,
                    scheduler: config.scheduler_override,
                    seed: Some(config.seed),
                    restarts: config.restarts_override,
                };
                let (params, trained): (ParamTable, Option<Mlp>) = match fitter.as_str() {
                    "nlls" => (fit_nlls_table(&test_table, model, config.seed)?, None),
                    arch_name => {
                        let arch: Arch = arch_name.parse()?;
                        let (outcome, spec, cfg) =
                            train_tables(&train_table, &val_table, model, arch, &overrides)?;
                        let ck = Checkpoint {
                            version: VERSION.into(),
                            model: model.name().into(),
                            arch: arch_name.into(),
                            spec,
                            config: cfg,
                            best_epoch: outcome.best_epoch,
                            best_val_loss: outcome.best_val_loss,
                            history: outcome.history.clone(),
                            weights: outcome.mlp.params.clone(),
                        };
                        let ck_path = out_dir.join(format!("ck_{sp_name}_{model_name}_{fitter}.json"));
                        fs::write(&ck_path, serde_json::to_vec(&ck)?)?;
                        let mut csv = String::from("epoch,train_mse,val_mse,lr\n");
                        for h in &outcome.history {
                            csv.push_str(&format!("{},{},{},{}\n", h.epoch, h.train, h.val, h.lr));
                        }
                        fs::write(
                            out_dir.join(format!("losses_{sp_name}_{model_name}_{fitter}.csv")),
                            csv,
                        )?;
                        (predict_table(&ck, &test_table, fitter)?, Some(outcome.mlp))
                    }
                };
                let ev = evaluate_fit(&test_table, &params)?;
                for slot in mse_matrix.iter_mut() {
                    if &slot.0 == model_name && &slot.1 == fitter {
                        slot.2.push(ev.mse);
                    }
                }
                evaluations.push(ev);

                if model == ModelKind::Verdict && !patients.is_empty() {
                    let mut per_patient_t = Vec::new();
                    let mut per_patient_n = Vec::new();
                    for p in &patients {
                        let lesion = p.lesion.as_ref().expect("patient has lesion");
                        per_patient_t.push(fic_predictions(
                            fitter, model, lesion, trained.as_ref(), config.seed,
                        )?);
                        per_patient_n.push(fic_predictions(
                            fitter, model, &p.normal, trained.as_ref(), config.seed,
                        )?);
                    }
                    if per_patient_t.len() >= 2 {
                        variability.push((
                            fitter.clone(),
                            variability_report(&per_patient_t, &per_patient_n)?,
                        ));
                    }
                    let all_t: Vec<f64> = per_patient_t.iter().flatten().copied().collect();
                    let all_n: Vec<f64> = per_patient_n.iter().flatten().copied().collect();
                    if all_t.len() >= 3 && all_n.len() >= 3 {
                        tumour_vs_normal
                            .push((fitter.clone(), decide_and_test(&all_t, &all_n, false)?));
                    }
                    // parameter-map previews for the first test patient
                    if let Some(first) = test_set.iter().find(|s| s.has_lesion) {
                        let pt = match trained.as_ref() {
                            Some(mlp) => {
                                let bounds = ParamBounds::default();
                                let p = predict_params(mlp, model, &first.gland.data, &bounds);
                                ParamTable {
                                    model: model.name().into(),
                                    fitter: fitter.clone(),
                                    param_names: param_names(model),
                                    voxel_indices: first.gland.voxel_indices.clone(),
                                    rows: p.rows().into_iter().map(|r| r.to_vec()).collect(),
                                    subject_id: first.id.clone(),
                                    sub_protocol: proto.name.clone(),
                                }
                            }
                            None => fit_nlls_table(&first.gland, model, config.seed)?,
                        };
                        let dims = (base_spec.slices, base_spec.height, base_spec.width);
                        let prefix = out_dir.join(format!("map_{sp_name}_{model_name}_{fitter}"));
                        export_maps(&pt, "f_ic", dims, (0.0, 0.4), &prefix)?;
                    }
                }
            }
        }

        let scores: Vec<ModelScore> = evaluations
            .iter()
            .map(|e| ModelScore {
                name: format!("{}/{}", e.model, e.fitter),
                mse: e.mse,
                aicc: e.aicc,
                bic: e.bic,
            })
            .collect();
        per_sp.push(SpReport {
            sub_protocol: sp_name.clone(),
            noise_sigma: noise_sigma(proto.timing.te_ms, base_spec.t2_ms, base_spec.snr_ref),
            evaluations,
            ranking: rank_models(&scores)?,
            variability,
            tumour_vs_normal,
        });
    }

    let sp_ordering_holds: Vec<(String, String, bool)> = mse_matrix
        .iter()
        .map(|(m, f, mses)| {
            let holds = mses.len() >= 2 && mses.windows(2).all(|w| w[0] < w[1]);
            (m.clone(), f.clone(), holds)
        })
        .collect();

    let report = ReproduceReport {
        version: VERSION.into(),
        config_sha256: cfg_hash,
        config: config.clone(),
        per_sp,
        mse_matrix,
        sp_ordering_holds,
    };
    fs::write(out_dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn exit_codes_follow_contract() {
        assert_eq!(exit_code(&Error::InvalidConfig("x".into())), 2);
        assert_eq!(exit_code(&Error::InvalidTiming("x".into())), 2);
        assert_eq!(exit_code(&Error::FitRejected("x".into())), 3);
        assert_eq!(
            exit_code(&Error::Training {
                epoch: 1,
                reason: "x".into()
            }),
            3
        );
        assert_eq!(exit_code(&Error::Format("x".into())), 4);
        assert_eq!(
            exit_code(&Error::Io(std::io::Error::other("x"))),
            4
        );
    }

    #[test]
    fn cohort_pattern_gives_paper_composition() {
        let c = cohort_pattern(9);
        let ids: Vec<String> = c.iter().map(|(id, _)| id.clone()).collect();
        let split = make_split(&ids).unwrap();
        let lesions = |ids: &[String]| {
            ids.iter()
                .filter(|id| c.iter().find(|(cid, _)| cid == *id).unwrap().1)
                .count()
        };
        assert_eq!(split.train.len(), 5);
        assert_eq!(lesions(&split.train), 3); // 2 healthy + 3 patients
        assert_eq!(lesions(&split.validation), 1); // 1 healthy + 1 patient
        assert_eq!(lesions(&split.test), 1);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ExperimentConfig::minimal("/tmp/x");
        cfg.validate().unwrap();
        cfg.fitters = vec!["unknown".into()];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::minimal("/tmp/x");
        cfg.sub_protocols = vec!["SP9".into()];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::minimal("/tmp/x");
        cfg.models.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn simulate_preprocess_round_trip() {
        let dir = tempdir().unwrap();
        let vol = dir.path().join("v.bin");
        let spec = PhantomSpec {
            slices: 1,
            height: 24,
            width: 24,
            seed: 3,
            ..PhantomSpec::default()
        };
        cmd_simulate(SubProtocol::Sp1, &spec, Some(7), &vol).unwrap();
        let gland = PathBuf::from(format!("{}{}", vol.display(), ".gland"));
        let table_path = dir.path().join("t.json");
        let discarded =
            cmd_preprocess(&vol, &gland, "subj01", &table_path).unwrap();
        assert_eq!(discarded, 0);
        let t = read_table_json(&table_path).unwrap();
        assert!(t.n_voxels() > 100);
        assert!(t.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // column 0 normalized to exactly 1
        assert!(t.data.column(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn oracle_report_contains_both_estimates() {
        let r = cmd_oracle_sphere(SubProtocol::Sp1, 8.0, 2.0, 150.0, 20_000, 0.05, 1).unwrap();
        assert!(r.mc_signal > 0.0 && r.mc_signal < 1.0);
        assert!(r.gpd_signal > 0.0 && r.gpd_signal < 1.0);
        assert!(r.mc_standard_error > 0.0);
    }

    #[test]
    fn minimal_reproduce_is_deterministic() {
        let dir = tempdir().unwrap();
        let mut cfg = ExperimentConfig::minimal(dir.path().to_str().unwrap());
        cfg.phantom = Some(PhantomSpec {
            slices: 1,
            height: 20,
            width: 20,
            ..PhantomSpec::default()
        });
        cfg.epochs_override = Some(2);
        cfg.fitters = vec!["dense".into()];

        let rep = cmd_reproduce(&cfg).unwrap();
        assert_eq!(rep.per_sp.len(), 1);
        assert_eq!(rep.per_sp[0].evaluations.len(), 1);
        let report_path = dir.path().join("report.json");
        let first = std::fs::read(&report_path).unwrap();
        // identical config → byte-identical report on rerun
        cmd_reproduce(&cfg).unwrap();
        let second = std::fs::read(&report_path).unwrap();
        assert_eq!(first, second);
    }
}
