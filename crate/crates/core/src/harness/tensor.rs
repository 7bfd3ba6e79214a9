//! Binary tensor files with a JSON sidecar.
//!
//! Layout (little endian): magic `S2SK`, `u32` version, `u32` dtype
//! (0 = f32, 1 = f64), `u32` rank, `rank` x `u64` dims, then the row-major
//! payload. The sidecar lives at `<path>.json`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use ndarray::{Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Result, S2skError};
use crate::grid::{FieldSet, GridSpec};
use crate::harness::inventory::{channels_from_meta, ChannelMeta};

pub const MAGIC: &[u8; 4] = b"S2SK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn size(self) -> u64 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(a) => a.shape(),
            TensorData::F64(a) => a.shape(),
        }
    }

    pub fn to_f64(&self) -> ArrayD<f64> {
        match self {
            TensorData::F32(a) => a.mapv(f64::from),
            TensorData::F64(a) => a.clone(),
        }
    }
}

/// Sidecar metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TensorMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<ChannelMeta>,
    /// Axis of `dims` that indexes `channels`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_axis: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dates: Vec<NaiveDate>,
    #[serde(default)]
    pub conventions: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    crate::verify::sidecar_path(path)
}

/// Bytes a file with these dims occupies, header included.
pub fn file_size(dtype: DType, dims: &[usize]) -> u64 {
    header_len(dims.len()) + dims.iter().map(|&d| d as u64).product::<u64>() * dtype.size()
}

fn header_len(rank: usize) -> u64 {
    16 + 8 * rank as u64
}

fn check_meta(meta: &TensorMeta, dims: &[usize]) -> Result<()> {
    if let Some(ax) = meta.channel_axis {
        let n = *dims
            .get(ax)
            .ok_or_else(|| S2skError::invalid(format!("channel axis {ax} outside rank {}", dims.len())))?;
        if n != meta.channels.len() {
            return Err(S2skError::invalid(format!(
                "sidecar lists {} channels but axis {ax} has length {n}",
                meta.channels.len()
            )));
        }
    }
    Ok(())
}

pub fn write_tensor(path: &Path, data: &TensorData, meta: &TensorMeta) -> Result<()> {
    check_meta(meta, data.shape())?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&data.dtype().code().to_le_bytes())?;
    w.write_all(&(data.shape().len() as u32).to_le_bytes())?;
    for &d in data.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match data {
        TensorData::F32(a) => {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        TensorData::F64(a) => {
            for v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

fn format_err(path: &Path, message: impl Into<String>) -> S2skError {
    S2skError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Header is validated against the file length before any payload is read.
pub fn read_tensor(path: &Path) -> Result<(TensorData, TensorMeta)> {
    let file = File::open(path)?;
    let actual_len = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| format_err(path, "file shorter than the fixed header"))?;
    if &head[..4] != MAGIC {
        return Err(format_err(path, format!("bad magic {:?}", &head[..4])));
    }
    let u32_at = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let dtype = match u32_at(8) {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(format_err(path, format!("unknown dtype code {other}"))),
    };
    let rank = u32_at(12) as usize;
    if header_len(rank) > actual_len {
        return Err(S2skError::Truncated {
            path: path.to_path_buf(),
            expected: header_len(rank),
            actual: actual_len,
        });
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        dims.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| format_err(path, "dimension overflow"))?);
    }
    let expected = file_size(dtype, &dims);
    if actual_len < expected {
        return Err(S2skError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: actual_len,
        });
    }
    if actual_len > expected {
        return Err(format_err(path, format!("{} trailing bytes after payload", actual_len - expected)));
    }
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; n * dtype.size() as usize];
    r.read_exact(&mut bytes)?;
    let data = match dtype {
        DType::F32 => TensorData::F32(
            ArrayD::from_shape_vec(
                IxDyn(&dims),
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect(),
            )
            .expect("length checked"),
        ),
        DType::F64 => TensorData::F64(
            ArrayD::from_shape_vec(
                IxDyn(&dims),
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
            )
            .expect("length checked"),
        ),
    };
    let meta: TensorMeta = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    check_meta(&meta, &dims)?;
    Ok((data, meta))
}

/// Stores a daily series as one `[T, C, H, W]` f64 tensor.
pub fn write_series(path: &Path, series: &[FieldSet], conventions: serde_json::Value) -> Result<()> {
    let first = series.first().ok_or_else(|| S2skError::invalid("empty series"))?;
    if series.iter().any(|s| !s.same_layout(first)) {
        return Err(S2skError::shape("series members differ in layout"));
    }
    let (c, h, w) = first.values.dim();
    let mut data = Array4::<f64>::zeros((series.len(), c, h, w));
    for (t, s) in series.iter().enumerate() {
        data.index_axis_mut(ndarray::Axis(0), t).assign(&s.values);
    }
    let meta = TensorMeta {
        grid: Some(first.grid),
        channels: first.channels.iter().map(ChannelMeta::from).collect(),
        channel_axis: Some(1),
        dates: series.iter().map(|s| s.valid_time).collect(),
        conventions,
    };
    write_tensor(path, &TensorData::F64(data.into_dyn()), &meta)
}

pub fn read_series(path: &Path) -> Result<Vec<FieldSet>> {
    let (data, meta) = read_tensor(path)?;
    let grid = meta.grid.ok_or_else(|| format_err(path, "sidecar has no grid"))?;
    let channels = channels_from_meta(&meta.channels, &grid)?;
    let arr = data
        .to_f64()
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| format_err(path, "series tensor must have rank 4"))?;
    if arr.dim().0 != meta.dates.len() || meta.channel_axis != Some(1) {
        return Err(format_err(path, "sidecar dates or channel axis do not match the tensor"));
    }
    meta.dates
        .iter()
        .enumerate()
        .map(|(t, &d)| FieldSet::new(grid, channels.clone(), arr.index_axis(ndarray::Axis(0), t).to_owned(), d))
        .collect()
}
