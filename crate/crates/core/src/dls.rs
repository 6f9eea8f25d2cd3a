//! Discrete least-squares projection onto the span of an index set.
//!
//! With `Phi[i, m] = l_m(y_i)` and data rows `U[i, :] = u(y_i)`, the coefficient
//! matrix `C` minimizes `||Phi C - U||_F`. It is computed from a Householder QR
//! factorization of `Phi`; the normal equations are never formed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::polyspace::{check_point, IndexSet};
use crate::{Error, Result};

/// Name of the sample generator, recorded alongside seeds in outputs.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng::seed_from_u64/uniform[-1,1]";

/// Relative threshold on the diagonal of `R` below which `Phi` counts as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// `S x N`, one parameter point per row.
    pub points: DMatrix<f64>,
    pub seed: u64,
    pub distribution: String,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn point(&self, i: usize) -> Vec<f64> {
        self.points.row(i).iter().copied().collect()
    }

    /// Wraps explicit points (each entry must lie in `[-1, 1]`).
    pub fn from_points(points: DMatrix<f64>, seed: u64) -> Result<Self> {
        for i in 0..points.nrows() {
            check_point(points.ncols(), &points.row(i).iter().copied().collect::<Vec<_>>())?;
        }
        Ok(Self {
            points,
            seed,
            distribution: "explicit".into(),
        })
    }
}

/// `n` i.i.d. uniform points in `[-1, 1]^dim`, filled row by row.
pub fn draw_samples(n: usize, dim: usize, seed: u64) -> Result<SampleSet> {
    if n == 0 || dim == 0 {
        return Err(Error::InvalidArgument("sample count and dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = DMatrix::zeros(n, dim);
    for i in 0..n {
        for d in 0..dim {
            points[(i, d)] = rng.random_range(-1.0..=1.0);
        }
    }
    Ok(SampleSet {
        points,
        seed,
        distribution: "uniform".into(),
    })
}

#[derive(Debug, Clone)]
pub struct DesignMatrix<'a> {
    /// `S x M`.
    pub phi: DMatrix<f64>,
    pub index_set: &'a IndexSet,
}

pub fn build_design<'a>(samples: &SampleSet, set: &'a IndexSet) -> Result<DesignMatrix<'a>> {
    if samples.dim() != set.dim() {
        return Err(Error::DimensionMismatch {
            expected: set.dim(),
            got: samples.dim(),
        });
    }
    let (s, m) = (samples.len(), set.cardinality());
    let mut phi = DMatrix::zeros(s, m);
    let mut row = vec![0.0; m];
    for i in 0..s {
        let y = samples.point(i);
        check_point(set.dim(), &y)?;
        set.basis_into(&y, &mut row);
        for (c, &v) in row.iter().enumerate() {
            phi[(i, c)] = v;
        }
    }
    Ok(DesignMatrix { phi, index_set: set })
}

/// Fitted least-squares surrogate `y -> C^T l(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DlsSurrogate {
    /// `M x R`.
    pub coefficients: DMatrix<f64>,
    pub index_set: IndexSet,
    /// Spectral condition number of `Phi^T Phi` (scaling by `1/S` does not change it).
    pub condition_estimate: f64,
    pub n_samples: usize,
}

impl DlsSurrogate {
    pub fn n_outputs(&self) -> usize {
        self.coefficients.ncols()
    }

    pub fn evaluate(&self, y: &[f64]) -> Result<DVector<f64>> {
        evaluate_dls(self, y)
    }
}

pub fn fit_dls(design: &DesignMatrix<'_>, data: &DMatrix<f64>) -> Result<DlsSurrogate> {
    let (s, m) = design.phi.shape();
    if data.nrows() != s {
        return Err(Error::DimensionMismatch {
            expected: s,
            got: data.nrows(),
        });
    }
    if s < m {
        return Err(Error::TooFewSamples { samples: s, basis: m });
    }
    let qr = design.phi.clone().qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..m).map(|i| r[(i, i)].abs()).collect();
    let dmax = diag.iter().copied().fold(0.0, f64::max);
    let rank = diag.iter().filter(|&&d| d > RANK_TOLERANCE * dmax).count();
    if rank < m || !(dmax > 0.0) {
        return Err(Error::RankDeficient { rank, basis: m });
    }
    let mut rhs = data.clone();
    qr.q_tr_mul(&mut rhs);
    let top = rhs.rows(0, m).into_owned();
    let coefficients = r
        .solve_upper_triangular(&top)
        .ok_or(Error::RankDeficient { rank, basis: m })?;
    let sv = r.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let condition_estimate = if smin > 0.0 { (smax / smin).powi(2) } else { f64::INFINITY };
    Ok(DlsSurrogate {
        coefficients,
        index_set: design.index_set.clone(),
        condition_estimate,
        n_samples: s,
    })
}

/// `C^T l(y)`.
pub fn evaluate_dls(surrogate: &DlsSurrogate, y: &[f64]) -> Result<DVector<f64>> {
    let ell = surrogate.index_set.basis(y)?;
    Ok(surrogate.coefficients.tr_mul(&ell))
}

/// `C^T l(y)` written into `out`, reusing a basis buffer.
pub fn evaluate_dls_into(surrogate: &DlsSurrogate, y: &[f64], basis: &mut DVector<f64>, out: &mut DVector<f64>) -> Result<()> {
    check_point(surrogate.index_set.dim(), y)?;
    surrogate.index_set.basis_into(y, basis.as_mut_slice());
    surrogate.coefficients.tr_mul_to(basis, out);
    Ok(())
}

/// Whether `S / ln S >= Z / kappa` with `kappa = (1 - ln 2) / (2 + 2r)`.
/// Reported only; sample counts are never adjusted to satisfy it.
pub fn sampling_condition(samples: usize, z: f64, r: f64) -> bool {
    let s = samples as f64;
    let kappa = (1.0 - 2f64.ln()) / (2.0 + 2.0 * r);
    samples > 1 && s / s.ln() >= z / kappa
}
