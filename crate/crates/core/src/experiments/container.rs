//! Binary surrogate container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "RBDLSURR"
//! version  u32
//! count    u32      number of matrices
//! per matrix:
//!   name_len u16, name (UTF-8), rows u64, cols u64, rows*cols f64 column-major
//! meta_len u64, metadata (UTF-8 JSON)
//! ```

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dls::DlsSurrogate;
use crate::polyspace::IndexSet;
use crate::random_field::FourierFieldSpec;
use crate::rb_dls::{RbDlsMetadata, RbDlsSurrogate};
use crate::reduced_basis::ReducedBasis;
use crate::Result;

pub const MAGIC: &[u8; 8] = b"RBDLSURR";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ContainerError {
    #[error("not a surrogate container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("container truncated at byte {offset}: {needed} more bytes expected")]
    Truncated { offset: usize, needed: usize },
    #[error("invalid UTF-8 at byte {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("invalid metadata at byte {offset}: {message}")]
    InvalidMetadata { offset: usize, message: String },
    #[error("{count} unexpected trailing bytes at byte {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("matrix dimensions overflow at byte {offset}")]
    SizeOverflow { offset: usize },
    #[error("container has no matrix named {0:?}")]
    MissingMatrix(String),
    #[error("matrix {name:?} is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    ShapeMismatch {
        name: String,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
}

/// Named matrices plus a JSON metadata document.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub matrices: Vec<(String, DMatrix<f64>)>,
    pub metadata: serde_json::Value,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::with_capacity(self.encoded_matrix_bytes() + meta.len() + 24);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.matrices.len() as u32).to_le_bytes());
        for (name, m) in &self.matrices {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    fn encoded_matrix_bytes(&self) -> usize {
        self.matrices.iter().map(|(n, m)| 18 + n.len() + 8 * m.len()).sum()
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut matrices = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| ContainerError::InvalidUtf8 { offset: at })?
                .to_owned();
            let at = r.pos;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some())
                .ok_or(ContainerError::SizeOverflow { offset: at })?;
            let raw = r.take(n * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            matrices.push((name, DMatrix::from_vec(rows, cols, data)));
        }
        let len = r.u64()? as usize;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| ContainerError::InvalidUtf8 { offset: at })?;
        let metadata = serde_json::from_str(text).map_err(|e| ContainerError::InvalidMetadata {
            offset: at,
            message: e.to_string(),
        })?;
        if r.pos != bytes.len() {
            return Err(ContainerError::TrailingBytes {
                offset: r.pos,
                count: bytes.len() - r.pos,
            });
        }
        Ok(Self { matrices, metadata })
    }

    pub fn matrix(&self, name: &str) -> std::result::Result<&DMatrix<f64>, ContainerError> {
        self.matrices
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| ContainerError::MissingMatrix(name.to_owned()))
    }

    fn shaped(&self, name: &str, rows: usize, cols: usize) -> std::result::Result<&DMatrix<f64>, ContainerError> {
        let m = self.matrix(name)?;
        if m.shape() != (rows, cols) {
            return Err(ContainerError::ShapeMismatch {
                name: name.to_owned(),
                rows: m.nrows(),
                cols: m.ncols(),
                expected_rows: rows,
                expected_cols: cols,
            });
        }
        Ok(m)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ContainerError> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(ContainerError::Truncated {
                offset: self.pos,
                needed: n - left,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Where a stored surrogate came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub field: FourierFieldSpec,
    pub n_per_side: usize,
    pub seed_train: Option<u64>,
    pub seed_sample: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Surrogate {
    FullDls(DlsSurrogate),
    RbDls(RbDlsSurrogate),
    ReducedBasis(ReducedBasis),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredSurrogate {
    pub provenance: Provenance,
    pub surrogate: Surrogate,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Meta {
    FullDls {
        provenance: Provenance,
        index_set: IndexSet,
        condition_estimate: f64,
        n_samples: usize,
    },
    RbDls {
        provenance: Provenance,
        index_set: IndexSet,
        condition_estimate: f64,
        n_samples: usize,
        basis: BasisMeta,
        fit: RbDlsMetadata,
    },
    ReducedBasis {
        provenance: Provenance,
        basis: BasisMeta,
    },
}

#[derive(Serialize, Deserialize)]
struct BasisMeta {
    k: usize,
    n_params: usize,
    offline_fem_solves: usize,
    training_seed: Option<u64>,
}

fn basis_matrices(rb: &ReducedBasis, out: &mut Vec<(String, DMatrix<f64>)>) {
    out.push(("V".into(), rb.basis.clone()));
    for (n, b) in rb.reduced_blocks.iter().enumerate() {
        out.push((format!("A_rb_{n}"), b.clone()));
    }
    out.push(("f_rb".into(), DMatrix::from_column_slice(rb.k(), 1, rb.reduced_load.as_slice())));
    let n = rb.n_params();
    let mut sel = DMatrix::zeros(rb.selected_points.len(), n);
    for (i, y) in rb.selected_points.iter().enumerate() {
        for (d, &v) in y.iter().enumerate() {
            sel[(i, d)] = v;
        }
    }
    out.push(("selected".into(), sel));
    let h = &rb.estimator_history;
    out.push(("history".into(), DMatrix::from_column_slice(h.len(), 1, h)));
}

fn basis_meta(rb: &ReducedBasis) -> BasisMeta {
    BasisMeta {
        k: rb.k(),
        n_params: rb.n_params(),
        offline_fem_solves: rb.offline_fem_solves,
        training_seed: rb.training_seed,
    }
}

fn read_basis(c: &Container, meta: &BasisMeta) -> std::result::Result<ReducedBasis, ContainerError> {
    let v = c.matrix("V")?;
    let k = meta.k;
    let v = c.shaped("V", v.nrows(), k)?.clone();
    let reduced_blocks = (0..=meta.n_params)
        .map(|n| c.shaped(&format!("A_rb_{n}"), k, k).cloned())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let reduced_load = DVector::from_column_slice(c.shaped("f_rb", k, 1)?.as_slice());
    let sel = c.matrix("selected")?;
    let sel = c.shaped("selected", sel.nrows(), meta.n_params)?;
    let selected_points = sel.row_iter().map(|r| r.iter().copied().collect()).collect();
    let h = c.matrix("history")?;
    let estimator_history = c.shaped("history", h.nrows(), 1)?.as_slice().to_vec();
    Ok(ReducedBasis {
        basis: v,
        reduced_blocks,
        reduced_load,
        selected_points,
        estimator_history,
        offline_fem_solves: meta.offline_fem_solves,
        training_seed: meta.training_seed,
    })
}

impl StoredSurrogate {
    pub fn to_container(&self) -> Result<Container> {
        let p = self.provenance.clone();
        let mut matrices = Vec::new();
        let meta = match &self.surrogate {
            Surrogate::FullDls(s) => {
                matrices.push(("C".into(), s.coefficients.clone()));
                Meta::FullDls {
                    provenance: p,
                    index_set: s.index_set.clone(),
                    condition_estimate: s.condition_estimate,
                    n_samples: s.n_samples,
                }
            }
            Surrogate::RbDls(s) => {
                matrices.push(("C_rb".into(), s.coeffs.coefficients.clone()));
                basis_matrices(&s.rb, &mut matrices);
                Meta::RbDls {
                    provenance: p,
                    index_set: s.coeffs.index_set.clone(),
                    condition_estimate: s.coeffs.condition_estimate,
                    n_samples: s.coeffs.n_samples,
                    basis: basis_meta(&s.rb),
                    fit: s.metadata.clone(),
                }
            }
            Surrogate::ReducedBasis(rb) => {
                basis_matrices(rb, &mut matrices);
                Meta::ReducedBasis {
                    provenance: p,
                    basis: basis_meta(rb),
                }
            }
        };
        Ok(Container {
            matrices,
            metadata: serde_json::to_value(meta)?,
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: Meta = serde_json::from_value(c.metadata.clone()).map_err(|e| ContainerError::InvalidMetadata {
            offset: 0,
            message: e.to_string(),
        })?;
        Ok(match meta {
            Meta::FullDls {
                provenance,
                index_set,
                condition_estimate,
                n_samples,
            } => {
                let m = index_set.cardinality();
                let coeffs = c.matrix("C")?;
                let coefficients = c.shaped("C", m, coeffs.ncols())?.clone();
                StoredSurrogate {
                    provenance,
                    surrogate: Surrogate::FullDls(DlsSurrogate {
                        coefficients,
                        index_set,
                        condition_estimate,
                        n_samples,
                    }),
                }
            }
            Meta::RbDls {
                provenance,
                index_set,
                condition_estimate,
                n_samples,
                basis,
                fit,
            } => {
                let rb = read_basis(c, &basis)?;
                let coefficients = c.shaped("C_rb", index_set.cardinality(), basis.k)?.clone();
                let coeffs = DlsSurrogate {
                    coefficients,
                    index_set,
                    condition_estimate,
                    n_samples,
                };
                StoredSurrogate {
                    provenance,
                    surrogate: Surrogate::RbDls(RbDlsSurrogate::new(Arc::new(rb), coeffs, fit)?),
                }
            }
            Meta::ReducedBasis { provenance, basis } => StoredSurrogate {
                provenance,
                surrogate: Surrogate::ReducedBasis(read_basis(c, &basis)?),
            },
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(&Container::from_bytes(bytes)?)
    }
}

pub fn save_surrogate(path: &Path, surrogate: &StoredSurrogate) -> Result<()> {
    std::fs::write(path, surrogate.to_bytes()?)?;
    Ok(())
}

pub fn load_surrogate(path: &Path) -> Result<StoredSurrogate> {
    StoredSurrogate::from_bytes(&std::fs::read(path)?)
}
