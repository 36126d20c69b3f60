//! `VOLB` volume files: magic `VOLB`, `u16` version, `u32` dims `(D, H, W)`,
//! then `D·H·W` `f32` values, all little-endian, row-major.

use std::fs;
use std::path::Path;

use protograph_core::Tensor;

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 4] = b"VOLB";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 12;

/// Encodes a `[D, H, W]` or `[1, D, H, W]` tensor. Values are stored as `f32`.
pub fn encode_volume(volume: &Tensor) -> AppResult<Vec<u8>> {
    let dims = match volume.shape() {
        &[d, h, w] | &[1, d, h, w] => [d, h, w],
        s => return Err(AppError::Data(format!("a volume must be [D, H, W] or [1, D, H, W], got {s:?}"))),
    };
    if !volume.is_finite() {
        return Err(AppError::Data("volume contains non-finite values".into()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * volume.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in dims {
        let d = u32::try_from(d).map_err(|_| AppError::Data(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in volume.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes a volume into a `[1, D, H, W]` tensor.
pub fn decode_volume(bytes: &[u8]) -> AppResult<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(AppError::Data(format!("volume header truncated: {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(AppError::Data(format!("bad magic {:?}, expected \"VOLB\"", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(AppError::Data(format!("unsupported volume version {version}")));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("four bytes")) as usize;
    let dims = [dim(0), dim(1), dim(2)];
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&c| c > 0 && c.checked_mul(4).is_some())
        .ok_or_else(|| AppError::Data(format!("invalid volume dimensions {dims:?}")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * count {
        return Err(AppError::Data(format!(
            "payload holds {} bytes but dimensions {dims:?} need {}",
            payload.len(),
            4 * count
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("four bytes"))))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(AppError::Data("volume contains non-finite values".into()));
    }
    Ok(Tensor::new(vec![1, dims[0], dims[1], dims[2]], data)?)
}

pub fn write_volume(path: &Path, volume: &Tensor) -> AppResult<()> {
    fs::write(path, encode_volume(volume)?).map_err(|e| AppError::io(path, e))
}

pub fn read_volume(path: &Path) -> AppResult<Tensor> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode_volume(&bytes).map_err(|e| match e {
        AppError::Data(msg) => AppError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
