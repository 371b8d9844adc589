//! STGF binary field files.
//!
//! Layout (little-endian throughout):
//!
//! | bytes | content |
//! |-------|---------|
//! | 0..4  | ASCII `STGF` |
//! | 4     | version, always 1 |
//! | 5     | dtype: 1 = f32, 2 = f64 |
//! | 6..8  | rank as u16 |
//! | ...   | rank x u32 dims, slowest-varying first |
//! | ...   | row-major payload, last dim fastest, no padding |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Field, SpaceTimeGrid};
use crate::operator::{ParamFields, ParamKind};

pub const MAGIC: [u8; 4] = *b"STGF";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode_field(field: &Field, dtype: Dtype) -> Vec<u8> {
    let dims = field.dims();
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + dtype.width() * field.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    out.extend_from_slice(&(dims.len() as u16).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => {
            for &v in field.values() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in field.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_field(bytes: &[u8]) -> Result<Field> {
    if bytes.len() < 8 {
        return Err(Error::DimMismatch { expected: 8, got: bytes.len() });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let dtype = Dtype::from_code(bytes[5])?;
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::DimMismatch { expected: header, got: bytes.len() });
    }
    let dims: Vec<usize> =
        bytes[8..header].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize).collect();
    let count: usize = dims.iter().product();
    let expected = header + count * dtype.width();
    if bytes.len() != expected {
        return Err(Error::DimMismatch { expected, got: bytes.len() });
    }
    let payload = &bytes[header..];
    let values: Vec<f64> = match dtype {
        Dtype::F32 => {
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
        }
        Dtype::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
    };
    Field::new(dims, values)
}

pub fn write_field(field: &Field, path: impl AsRef<Path>) -> Result<()> {
    write_field_as(field, path, Dtype::F64)
}

pub fn write_field_as(field: &Field, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_field(field, dtype)).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn read_field(path: impl AsRef<Path>) -> Result<Field> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    decode_field(&bytes)
}

/// File names of the five parameter files inside a directory.
pub const PARAM_FILES: [&str; 5] = ["kappa.stgf", "tau.stgf", "adv_u.stgf", "adv_v.stgf", "diffusion.stgf"];

/// Writes `theta` as five STGF files: `kappa`, `tau`, `adv_u`, `adv_v`, each
/// `(nt, ny, nx)`, and `diffusion` with dims `(nt, ny, nx, 3)` holding
/// `(h11, h12, h22)` per cell. `alpha` is not stored.
pub fn write_params(theta: &ParamFields, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    let scalar = [ParamKind::Kappa, ParamKind::Tau, ParamKind::AdvectionU, ParamKind::AdvectionV];
    for (name, kind) in PARAM_FILES.iter().zip(scalar) {
        write_field(&theta.field(kind), dir.join(name))?;
    }
    let g = theta.grid();
    let (a, b, c) = (theta.get(ParamKind::H11), theta.get(ParamKind::H12), theta.get(ParamKind::H22));
    let values = (0..g.trajectory_dim()).flat_map(|i| [a[i], b[i], c[i]]).collect();
    write_field(&Field::new(vec![g.nt, g.ny, g.nx, 3], values)?, dir.join(PARAM_FILES[4]))
}

pub fn read_params(dir: impl AsRef<Path>, grid: SpaceTimeGrid, alpha: u32) -> Result<ParamFields> {
    let dir = dir.as_ref();
    let n = grid.trajectory_dim();
    let scalar = |name: &str| -> Result<Vec<f64>> {
        let f = read_field(dir.join(name))?;
        if f.dims() != [grid.nt, grid.ny, grid.nx] {
            return Err(Error::ShapeMismatch { expected: n, got: f.len() });
        }
        Ok(f.into_values())
    };
    let kappa = scalar(PARAM_FILES[0])?;
    let tau = scalar(PARAM_FILES[1])?;
    let m_u = scalar(PARAM_FILES[2])?;
    let m_v = scalar(PARAM_FILES[3])?;
    let diff = read_field(dir.join(PARAM_FILES[4]))?;
    if diff.dims() != [grid.nt, grid.ny, grid.nx, 3] {
        return Err(Error::ShapeMismatch { expected: 3 * n, got: diff.len() });
    }
    let d = diff.values();
    let comp = |k: usize| (0..n).map(|i| d[3 * i + k]).collect::<Vec<_>>();
    ParamFields::from_fields(grid, [kappa, m_u, m_v, comp(0), comp(1), comp(2), tau], alpha)
}
