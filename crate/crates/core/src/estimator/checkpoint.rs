//! Binary estimator snapshots.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes  "GCES"
//! version    u32      1
//! kind       u8       0 = full covariance, 1 = low rank, 2 = diagonal
//! dim        u64      d
//! rank       u64      k (d for full and diagonal)
//! steps      u64
//! beta_mean  f64
//! beta_cov   f64      β₂ (full, diagonal) or β₃ (low rank)
//! batch_size f64
//! mean       d × f64
//! full:      cov, d×d row-major
//! low rank:  basis, d×k row-major, then k eigenvalues
//! diagonal:  d variances
//! ```

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{DiagVarState, FullCovState, LowRankState};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GCES";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Snapshot {
    Full(FullCovState),
    LowRank(LowRankState),
    Diagonal(DiagVarState),
}

struct Header {
    kind: u8,
    dim: usize,
    rank: usize,
    steps: u64,
    beta_mean: f64,
    beta_cov: f64,
    batch_size: f64,
}

impl Snapshot {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let (header, mean) = match self {
            Snapshot::Full(s) => (
                Header { kind: 0, dim: s.dim(), rank: s.dim(), steps: s.steps, beta_mean: s.beta1, beta_cov: s.beta2, batch_size: s.batch_size },
                &s.mean,
            ),
            Snapshot::LowRank(s) => (
                Header { kind: 1, dim: s.dim(), rank: s.rank(), steps: s.steps, beta_mean: s.beta1, beta_cov: s.beta3, batch_size: s.batch_size },
                &s.mean,
            ),
            Snapshot::Diagonal(s) => (
                Header { kind: 2, dim: s.dim(), rank: s.dim(), steps: s.steps, beta_mean: s.beta1, beta_cov: s.beta2, batch_size: s.batch_size },
                &s.mean,
            ),
        };
        out.push(header.kind);
        out.extend_from_slice(&(header.dim as u64).to_le_bytes());
        out.extend_from_slice(&(header.rank as u64).to_le_bytes());
        out.extend_from_slice(&header.steps.to_le_bytes());
        for v in [header.beta_mean, header.beta_cov, header.batch_size] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_floats(&mut out, mean.iter().copied());
        match self {
            Snapshot::Full(s) => put_row_major(&mut out, &s.cov),
            Snapshot::LowRank(s) => {
                put_row_major(&mut out, &s.basis);
                put_floats(&mut out, s.eigenvalues.iter().copied());
            }
            Snapshot::Diagonal(s) => put_floats(&mut out, s.var.iter().copied()),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = cur.take(1)?[0];
        let dim = cur.u64()? as usize;
        let rank = cur.u64()? as usize;
        let steps = cur.u64()?;
        let beta_mean = cur.f64()?;
        let beta_cov = cur.f64()?;
        let batch_size = cur.f64()?;
        let mean = DVector::from_vec(cur.floats(dim)?);
        let snapshot = match kind {
            0 => {
                let cov = DMatrix::from_row_slice(dim, dim, &cur.floats(dim * dim)?);
                Snapshot::Full(FullCovState { mean, cov, beta1: beta_mean, beta2: beta_cov, batch_size, steps })
            }
            1 => {
                if rank == 0 || rank > dim {
                    return Err(Error::InvalidRank { rank, dim });
                }
                let basis = DMatrix::from_row_slice(dim, rank, &cur.floats(dim * rank)?);
                let eigenvalues = DVector::from_vec(cur.floats(rank)?);
                let mut state = LowRankState::new(dim, rank, beta_mean, beta_cov, batch_size)?;
                state.mean = mean;
                state.basis = basis;
                state.eigenvalues = eigenvalues;
                state.steps = steps;
                Snapshot::LowRank(state)
            }
            2 => {
                let var = DVector::from_vec(cur.floats(dim)?);
                Snapshot::Diagonal(DiagVarState { mean, var, beta1: beta_mean, beta2: beta_cov, batch_size, steps })
            }
            other => return Err(Error::Checkpoint(format!("unknown estimator kind {other}"))),
        };
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(snapshot)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_floats(out: &mut Vec<u8>, values: impl Iterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_row_major(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        put_floats(out, m.row(r).iter().copied());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
