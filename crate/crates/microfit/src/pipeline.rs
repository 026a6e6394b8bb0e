//! Preprocessing and data management: b-value snapping, repeat averaging,
//! b0 normalization, mask flattening, subject splits, and the on-disk
//! volume / table / map formats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::VolumeGrid;
use crate::protocol::NOMINAL_B_VALUES;

/// Voxels × nominal-b table, the shared currency between the phantom, the
/// fitters, and the metrics. Column 0 is b = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTable {
    pub b_values: Vec<f64>,
    #[serde(with = "array2_serde")]
    pub data: Array2<f64>,
    /// Raster indices of the masked voxels, for map reconstruction.
    pub voxel_indices: Vec<usize>,
    pub subject_id: String,
    pub sub_protocol: String,
}

mod array2_serde {
    use ndarray::Array2;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(a: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        Repr {
            rows: a.nrows(),
            cols: a.ncols(),
            values: a.iter().copied().collect(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let r = Repr::deserialize(d)?;
        Array2::from_shape_vec((r.rows, r.cols), r.values)
            .map_err(serde::de::Error::custom)
    }
}

impl SignalTable {
    pub fn n_voxels(&self) -> usize {
        self.data.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.ncols() != self.b_values.len() {
            return Err(Error::Format("column count != b-value count".into()));
        }
        if self.voxel_indices.len() != self.data.nrows() {
            return Err(Error::Format("voxel index count != row count".into()));
        }
        Ok(())
    }
}

/// Nearest nominal b-value; exact midpoints resolve to the lower nominal.
pub fn snap_bvalue(measured: f64) -> f64 {
    let mut best = NOMINAL_B_VALUES[0];
    let mut best_d = f64::INFINITY;
    for &nom in &NOMINAL_B_VALUES {
        let d = (measured - nom).abs();
        // strict improvement keeps the lower nominal on ties
        if d < best_d {
            best_d = d;
            best = nom;
        }
    }
    best
}

pub fn snap_bvalues(measured: &[f64]) -> Vec<f64> {
    measured.iter().map(|&b| snap_bvalue(b)).collect()
}

/// Column-wise mean of repeat volumes sharing a nominal b-value.
pub fn average_repeats(repeats: &[Array3<f64>]) -> Result<Array3<f64>> {
    let first = repeats
        .first()
        .ok_or_else(|| Error::Format("no repeats to average".into()))?;
    let mut acc = first.clone();
    for r in &repeats[1..] {
        if r.dim() != first.dim() {
            return Err(Error::Format("repeat volumes differ in shape".into()));
        }
        acc += r;
    }
    Ok(acc / repeats.len() as f64)
}

/// Divide each row by its b0, cap at 1, and discard rows whose b0 is zero.
/// Returns the normalized table and the number of discarded rows.
pub fn normalize_b0(table: &SignalTable) -> Result<(SignalTable, usize)> {
    table.validate()?;
    if table.b_values.first() != Some(&0.0) {
        return Err(Error::Format("column 0 must be b = 0".into()));
    }
    let mut rows = Vec::new();
    let mut keep_idx = Vec::new();
    let mut discarded = 0usize;
    for (i, row) in table.data.rows().into_iter().enumerate() {
        let b0 = row[0];
        if b0 == 0.0 || !b0.is_finite() {
            discarded += 1;
            continue;
        }
        let norm: Vec<f64> = row.iter().map(|v| (v / b0).min(1.0)).collect();
        rows.push(norm);
        keep_idx.push(table.voxel_indices[i]);
    }
    let nc = table.b_values.len();
    let mut data = Array2::zeros((rows.len(), nc));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            data[(i, j)] = *v;
        }
    }
    Ok((
        SignalTable {
            b_values: table.b_values.clone(),
            data,
            voxel_indices: keep_idx,
            subject_id: table.subject_id.clone(),
            sub_protocol: table.sub_protocol.clone(),
        },
        discarded,
    ))
}

/// Flatten masked voxels of a slices×b×H×W volume into a voxels×b table in
/// raster order (slice-major, then row, then column).
pub fn mask_and_flatten(
    volume: &VolumeGrid,
    mask: &Array3<bool>,
    subject_id: &str,
    sub_protocol: &str,
) -> Result<SignalTable> {
    let (ns, nb, h, w) = volume.data.dim();
    if mask.dim() != (ns, h, w) {
        return Err(Error::Format("mask shape does not match volume".into()));
    }
    let mut rows = Vec::new();
    let mut idx = Vec::new();
    for s in 0..ns {
        for y in 0..h {
            for x in 0..w {
                if mask[(s, y, x)] {
                    idx.push(s * h * w + y * w + x);
                    rows.push((s, y, x));
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Format("empty mask".into()));
    }
    let mut data = Array2::zeros((rows.len(), nb));
    for (i, &(s, y, x)) in rows.iter().enumerate() {
        for b in 0..nb {
            data[(i, b)] = volume.data[(s, b, y, x)];
        }
    }
    Ok(SignalTable {
        b_values: volume.b_values.clone(),
        data,
        voxel_indices: idx,
        subject_id: subject_id.to_string(),
        sub_protocol: sub_protocol.to_string(),
    })
}

/// Scatter one table column back onto the volume grid; unmasked voxels get
/// `fill`.
pub fn unflatten(
    table: &SignalTable,
    column: usize,
    dims: (usize, usize, usize),
    fill: f64,
) -> Result<Array3<f64>> {
    table.validate()?;
    let (ns, h, w) = dims;
    let mut out = Array3::from_elem(dims, fill);
    for (row, &flat) in table.voxel_indices.iter().enumerate() {
        let s = flat / (h * w);
        let y = (flat % (h * w)) / w;
        let x = flat % w;
        if s >= ns {
            return Err(Error::Format("voxel index outside grid".into()));
        }
        out[(s, y, x)] = table.data[(row, column)];
    }
    Ok(out)
}

/// Scatter values (one per table row) onto the grid.
pub fn unflatten_values(
    values: &[f64],
    voxel_indices: &[usize],
    dims: (usize, usize, usize),
    fill: f64,
) -> Result<Array3<f64>> {
    if values.len() != voxel_indices.len() {
        return Err(Error::Format("value count != voxel count".into()));
    }
    let (_, h, w) = dims;
    let mut out = Array3::from_elem(dims, fill);
    for (&v, &flat) in values.iter().zip(voxel_indices) {
        let s = flat / (h * w);
        let y = (flat % (h * w)) / w;
        let x = flat % w;
        out[(s, y, x)] = v;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    /// Set when the cohort was too small for a three-way split.
    pub degenerate: bool,
}

/// Chronological split. A 9-subject cohort lands 5/2/2; smaller cohorts keep
/// at least one training subject and fill validation/test when possible.
/// A singleton cohort goes entirely to train and is flagged.
pub fn make_split(cohort_in_order: &[String]) -> Result<SubjectSplit> {
    let n = cohort_in_order.len();
    if n == 0 {
        return Err(Error::InvalidConfig("empty cohort".into()));
    }
    if n == 1 {
        return Ok(SubjectSplit {
            train: cohort_in_order.to_vec(),
            validation: vec![],
            test: vec![],
            degenerate: true,
        });
    }
    // proportions 5:2:2 of nine, chronological order preserved
    let n_val = (n * 2 / 9).max(1).min(n.saturating_sub(2));
    let n_test = (n * 2 / 9).max(1).min(n.saturating_sub(1 + n_val));
    let n_train = n - n_val - n_test;
    Ok(SubjectSplit {
        train: cohort_in_order[..n_train].to_vec(),
        validation: cohort_in_order[n_train..n_train + n_val].to_vec(),
        test: cohort_in_order[n_train + n_val..].to_vec(),
        degenerate: n_test == 0,
    })
}

// ---------------------------------------------------------------------------
// On-disk container: 16-byte magic, u32 LE header length, JSON header,
// little-endian payload (f32 for signals/params, u8 for masks).

pub const VOLUME_MAGIC: &[u8; 16] = b"MFITVOL1\0\0\0\0\0\0\0\0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    /// slices × b × height × width for signals; b = 1 for masks and maps.
    pub dims: [usize; 4],
    pub dtype: String,
    pub b_values: Vec<f64>,
    pub sub_protocol: String,
    /// Seed lineage string, e.g. "phantom:7/noise:11".
    pub lineage: String,
}

pub fn write_volume(path: &Path, volume: &VolumeGrid, sp: &str, lineage: &str) -> Result<()> {
    let (s, b, h, w) = volume.data.dim();
    let header = VolumeHeader {
        dims: [s, b, h, w],
        dtype: "f32".into(),
        b_values: volume.b_values.clone(),
        sub_protocol: sp.into(),
        lineage: lineage.into(),
    };
    let hdr = serde_json::to_vec(&header)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(VOLUME_MAGIC)?;
    f.write_all(&(hdr.len() as u32).to_le_bytes())?;
    f.write_all(&hdr)?;
    for v in volume.data.iter() {
        f.write_all(&(*v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<(VolumeGrid, VolumeHeader)> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 16];
    f.read_exact(&mut magic)?;
    if &magic != VOLUME_MAGIC {
        return Err(Error::Format("bad volume magic".into()));
    }
    let mut len4 = [0u8; 4];
    f.read_exact(&mut len4)?;
    let hlen = u32::from_le_bytes(len4) as usize;
    let mut hdr = vec![0u8; hlen];
    f.read_exact(&mut hdr)?;
    let header: VolumeHeader = serde_json::from_slice(&hdr)?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!("expected f32 payload, got {}", header.dtype)));
    }
    let [s, b, h, w] = header.dims;
    let n = s * b * h * w;
    let mut payload = vec![0u8; n * 4];
    f.read_exact(&mut payload)?;
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let data = Array4::from_shape_vec((s, b, h, w), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((
        VolumeGrid {
            b_values: header.b_values.clone(),
            data,
        },
        header,
    ))
}

pub fn write_mask(path: &Path, mask: &Array3<bool>, sp: &str, lineage: &str) -> Result<()> {
    let (s, h, w) = mask.dim();
    let header = VolumeHeader {
        dims: [s, 1, h, w],
        dtype: "u8".into(),
        b_values: vec![],
        sub_protocol: sp.into(),
        lineage: lineage.into(),
    };
    let hdr = serde_json::to_vec(&header)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(VOLUME_MAGIC)?;
    f.write_all(&(hdr.len() as u32).to_le_bytes())?;
    f.write_all(&hdr)?;
    let bytes: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<Array3<bool>> {
    let mut f = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 16];
    f.read_exact(&mut magic)?;
    if &magic != VOLUME_MAGIC {
        return Err(Error::Format("bad volume magic".into()));
    }
    let mut len4 = [0u8; 4];
    f.read_exact(&mut len4)?;
    let hlen = u32::from_le_bytes(len4) as usize;
    let mut hdr = vec![0u8; hlen];
    f.read_exact(&mut hdr)?;
    let header: VolumeHeader = serde_json::from_slice(&hdr)?;
    if header.dtype != "u8" {
        return Err(Error::Format("expected u8 payload".into()));
    }
    let [s, _, h, w] = header.dims;
    let mut payload = vec![0u8; s * h * w];
    f.read_exact(&mut payload)?;
    Ok(Array3::from_shape_vec((s, h, w), payload.iter().map(|&b| b != 0).collect())
        .map_err(|e| Error::Format(e.to_string()))?)
}

/// 8-bit PGM preview of one slice with a fixed display window.
pub fn write_pgm(path: &Path, plane: &Array2<f64>, window: (f64, f64)) -> Result<()> {
    let (lo, hi) = window;
    if !(hi > lo) {
        return Err(Error::InvalidConfig("window must satisfy hi > lo".into()));
    }
    let (h, w) = plane.dim();
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    let scale = 255.0 / (hi - lo);
    let bytes: Vec<u8> = plane
        .iter()
        .map(|&v| ((v - lo) * scale).clamp(0.0, 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// CSV export: header row of b-values, one row per voxel.
pub fn write_table_csv(path: &Path, table: &SignalTable) -> Result<()> {
    table.validate()?;
    let mut f = BufWriter::new(File::create(path)?);
    let header: Vec<String> = std::iter::once("voxel".to_string())
        .chain(table.b_values.iter().map(|b| format!("b{b}")))
        .collect();
    writeln!(f, "{}", header.join(","))?;
    for (i, row) in table.data.rows().into_iter().enumerate() {
        let cells: Vec<String> = std::iter::once(table.voxel_indices[i].to_string())
            .chain(row.iter().map(|v| format!("{v}")))
            .collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_table_json(path: &Path, table: &SignalTable) -> Result<()> {
    table.validate()?;
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer(f, table)?;
    Ok(())
}

pub fn read_table_json(path: &Path) -> Result<SignalTable> {
    let f = BufReader::new(File::open(path)?);
    let t: SignalTable = serde_json::from_reader(f)?;
    t.validate()?;
    Ok(t)
}
