//! Least-squares fit of the reduced coefficients `w(y)` and the low-rank
//! surrogate `u(y) ~ V (C^rb)^T l(y)`.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dls::{build_design, evaluate_dls, fit_dls, DlsSurrogate, SampleSet};
use crate::mesh_fem::FemSystem;
use crate::polyspace::IndexSet;
use crate::reduced_basis::{error_estimator, rb_reconstruct, rb_solve, ReducedBasis, ResidualData};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbDlsMetadata {
    pub seed_sample: u64,
    pub n_samples: usize,
    pub m: usize,
    pub k: usize,
    pub j: usize,
    pub assemble_seconds: f64,
    pub fit_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbDlsSurrogate {
    pub rb: Arc<ReducedBasis>,
    /// `M x K` matrix `C^rb`.
    pub coeffs: DlsSurrogate,
    pub metadata: RbDlsMetadata,
}

impl RbDlsSurrogate {
    pub fn new(rb: Arc<ReducedBasis>, coeffs: DlsSurrogate, metadata: RbDlsMetadata) -> Result<Self> {
        if coeffs.n_outputs() != rb.k() {
            return Err(Error::DimensionMismatch {
                expected: rb.k(),
                got: coeffs.n_outputs(),
            });
        }
        Ok(Self { rb, coeffs, metadata })
    }

    pub fn evaluate(&self, y: &[f64]) -> Result<DVector<f64>> {
        evaluate_rb_dls(self, y)
    }
}

/// Rows of `W`: reduced coefficients at every sample.
pub fn reduced_coefficients(rb: &ReducedBasis, samples: &SampleSet) -> Result<DMatrix<f64>> {
    let rows: Vec<DVector<f64>> = (0..samples.len())
        .into_par_iter()
        .map(|i| rb_solve(rb, &samples.point(i)))
        .collect::<Result<_>>()?;
    let mut w = DMatrix::zeros(samples.len(), rb.k());
    for (i, r) in rows.iter().enumerate() {
        w.set_row(i, &r.transpose());
    }
    Ok(w)
}

pub fn fit_rb_dls(rb: Arc<ReducedBasis>, samples: &SampleSet, set: &IndexSet) -> Result<RbDlsSurrogate> {
    if samples.len() < set.cardinality() {
        return Err(Error::TooFewSamples {
            samples: samples.len(),
            basis: set.cardinality(),
        });
    }
    let t0 = Instant::now();
    let w = reduced_coefficients(&rb, samples)?;
    let assemble_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let design = build_design(samples, set)?;
    let coeffs = fit_dls(&design, &w)?;
    let fit_seconds = t1.elapsed().as_secs_f64();
    let metadata = RbDlsMetadata {
        seed_sample: samples.seed,
        n_samples: samples.len(),
        m: set.cardinality(),
        k: rb.k(),
        j: rb.n_dofs(),
        assemble_seconds,
        fit_seconds,
    };
    RbDlsSurrogate::new(rb, coeffs, metadata)
}

/// `V ((C^rb)^T l(y))`; the `M x J` product is never formed.
pub fn evaluate_rb_dls(s: &RbDlsSurrogate, y: &[f64]) -> Result<DVector<f64>> {
    let t = evaluate_dls(&s.coeffs, y)?;
    Ok(&s.rb.basis * t)
}

/// Finer-mesh solver for the discretization part of the error split.
pub struct FineReference<'a> {
    pub system: &'a FemSystem,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSplit {
    /// `||u - u_h||_X` approximated on the finer mesh.
    pub e_fem: Option<f64>,
    /// `||u_h - u_{h,K}||_X`.
    pub e_rb: f64,
    /// `||u_{h,K} - P[u_{h,K}]||_X`.
    pub e_fit: f64,
    /// `||u_h - P[u_{h,K}]||_X`.
    pub total: f64,
    pub estimator: f64,
    pub qoi_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSplitReport {
    pub points: Vec<PointSplit>,
    pub mean_e_fem: Option<f64>,
    pub mean_e_rb: f64,
    pub mean_e_fit: f64,
    pub mean_total: f64,
    pub max_total: f64,
    pub mean_qoi_error: f64,
    pub max_qoi_error: f64,
}

pub fn error_split_report(
    system: &FemSystem,
    res: &ResidualData,
    s: &RbDlsSurrogate,
    reference: Option<&FineReference<'_>>,
    test_points: &SampleSet,
) -> Result<ErrorSplitReport> {
    let m = system.mean_weights();
    let points: Vec<PointSplit> = (0..test_points.len())
        .into_par_iter()
        .map(|i| {
            let y = test_points.point(i);
            let u_h = system.solve_fem(&y)?;
            let w = rb_solve(&s.rb, &y)?;
            let u_k = rb_reconstruct(&s.rb, &w)?;
            let u_s = evaluate_rb_dls(s, &y)?;
            let e_fem = match reference {
                Some(r) => {
                    let fine = r.system.solve_fem(&y)?;
                    let p = system.mesh().prolongate(r.system.mesh(), &u_h)?;
                    Some(r.system.x_norm(&(fine - p))?)
                }
                None => None,
            };
            Ok(PointSplit {
                e_fem,
                e_rb: system.x_norm(&(&u_h - &u_k))?,
                e_fit: system.x_norm(&(&u_k - &u_s))?,
                total: system.x_norm(&(&u_h - &u_s))?,
                estimator: error_estimator(&s.rb, res, &y, &w)?,
                qoi_error: (m.dot(&u_h) - m.dot(&u_s)).abs(),
            })
        })
        .collect::<Result<_>>()?;
    let n = points.len().max(1) as f64;
    let mean = |f: &dyn Fn(&PointSplit) -> f64| points.iter().map(f).sum::<f64>() / n;
    let max = |f: &dyn Fn(&PointSplit) -> f64| points.iter().map(f).fold(0.0, f64::max);
    Ok(ErrorSplitReport {
        mean_e_fem: reference.map(|_| mean(&|p| p.e_fem.unwrap_or(0.0))),
        mean_e_rb: mean(&|p| p.e_rb),
        mean_e_fit: mean(&|p| p.e_fit),
        mean_total: mean(&|p| p.total),
        max_total: max(&|p| p.total),
        mean_qoi_error: mean(&|p| p.qoi_error),
        max_qoi_error: max(&|p| p.qoi_error),
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dls::draw_samples;
    use crate::mesh_fem::{assemble_affine, build_mesh};
    use crate::polyspace::{index_set_for_cardinality, MultiIndex};
    use crate::random_field::{build_fourier_field, AffineField, FourierFieldSpec};
    use crate::reduced_basis::greedy_build;

    fn fourier_system(n: usize) -> FemSystem {
        let mesh = build_mesh(n).unwrap();
        let field = build_fourier_field(&FourierFieldSpec::default(), &mesh.quadrature_points()).unwrap();
        assemble_affine(mesh, &field, &|_| 1.0).unwrap()
    }

    const WEIGHTS: [f64; 5] = [0.68, 0.66, 0.98, 1.37, 0.49];

    #[test]
    fn constant_field_has_single_nonzero_row() {
        let mesh = build_mesh(8).unwrap();
        let field = AffineField::constant(0.7, &[0.0, 0.0], &mesh.quadrature_points()).unwrap();
        let system = assemble_affine(mesh, &field, &|_| 1.0).unwrap();
        let (rb, res) = greedy_build(&system, &draw_samples(10, 2, 1).unwrap(), 1e-9, 4).unwrap();
        assert_eq!(rb.k(), 1);
        let rb = Arc::new(rb);
        let set = index_set_for_cardinality(&[0.4, 0.9], 6).unwrap();
        let samples = draw_samples(18, 2, 2).unwrap();
        let w = reduced_coefficients(&rb, &samples).unwrap();
        assert!(w.iter().all(|&v| v == w[(0, 0)]));
        let s = fit_rb_dls(rb.clone(), &samples, &set).unwrap();
        let zero = set.indices().iter().position(|nu| *nu == MultiIndex::zero(2)).unwrap();
        let c = &s.coeffs.coefficients;
        for r in 0..6 {
            if r == zero {
                assert!((c[(r, 0)] - w[(0, 0)]).abs() < 1e-12 * w[(0, 0)].abs());
            } else {
                assert!(c[(r, 0)].abs() < 1e-12 * w[(0, 0)].abs());
            }
        }
        // fresh points are reproduced exactly
        let y = [0.31, -0.77];
        let u = system.solve_fem(&y).unwrap();
        assert!(system.x_norm(&(s.evaluate(&y).unwrap() - u)).unwrap() < 1e-9);

        let test = draw_samples(5, 2, 3).unwrap();
        let report = error_split_report(&system, &res, &s, None, &test).unwrap();
        for p in &report.points {
            assert!(p.e_rb < 1e-9 && p.e_fit < 1e-9, "{p:?}");
        }
        assert!(report.mean_e_fem.is_none());
    }

    #[test]
    fn evaluation_factorization_is_exact() {
        let system = fourier_system(10);
        let (rb, _) = greedy_build(&system, &draw_samples(80, 5, 1).unwrap(), 1e-6, 8).unwrap();
        let rb = Arc::new(rb);
        let set = index_set_for_cardinality(&WEIGHTS, 12).unwrap();
        let s = fit_rb_dls(rb.clone(), &draw_samples(36, 5, 2).unwrap(), &set).unwrap();
        assert_eq!(s.coeffs.n_outputs(), rb.k());
        assert_eq!(s.metadata.m, 12);
        assert_eq!(s.metadata.n_samples, 36);
        let test = draw_samples(10, 5, 3).unwrap();
        for i in 0..test.len() {
            let y = test.point(i);
            let a = evaluate_rb_dls(&s, &y).unwrap();
            let b = rb_reconstruct(&rb, &evaluate_dls(&s.coeffs, &y).unwrap()).unwrap();
            assert_eq!(a, b);
            let full = (&rb.basis * s.coeffs.coefficients.transpose()) * set.basis(&y).unwrap();
            assert!((&a - full).amax() <= 1e-12 * a.amax());
        }
        let mut zero = s.clone();
        zero.coeffs.coefficients.fill(0.0);
        assert!(evaluate_rb_dls(&zero, &test.point(0)).unwrap().iter().all(|&v| v == 0.0));
        assert!(matches!(evaluate_rb_dls(&s, &[0.0, 0.0, 1.5, 0.0, 0.0]), Err(Error::OutOfRange { index: 2, .. })));
    }

    #[test]
    fn low_rank_tracks_full_dls() {
        let system = fourier_system(10);
        let (rb, res) = greedy_build(&system, &draw_samples(150, 5, 1).unwrap(), 1e-7, 15).unwrap();
        let rb = Arc::new(rb);
        let set = index_set_for_cardinality(&WEIGHTS, 15).unwrap();
        let samples = draw_samples(45, 5, 2).unwrap();
        let s = fit_rb_dls(rb.clone(), &samples, &set).unwrap();

        let mut snapshots = DMatrix::zeros(samples.len(), system.n_dofs());
        let mut rb_bound: f64 = 0.0;
        for i in 0..samples.len() {
            let y = samples.point(i);
            snapshots.set_row(i, &system.solve_fem(&y).unwrap().transpose());
            let w = rb_solve(&rb, &y).unwrap();
            rb_bound = rb_bound.max(error_estimator(&rb, &res, &y, &w).unwrap());
        }
        let full = fit_dls(&build_design(&samples, &set).unwrap(), &snapshots).unwrap();
        let test = draw_samples(20, 5, 3).unwrap();
        for i in 0..test.len() {
            let y = test.point(i);
            let diff = evaluate_rb_dls(&s, &y).unwrap() - evaluate_dls(&full, &y).unwrap();
            let d = system.x_norm(&diff).unwrap();
            assert!(d <= 10.0 * rb_bound + 1e-12, "{d} vs {rb_bound}");
        }
    }

    #[test]
    fn split_report_inequalities() {
        let coarse = fourier_system(8);
        let fine = fourier_system(16);
        let (rb, res) = greedy_build(&coarse, &draw_samples(60, 5, 1).unwrap(), 1e-4, 4).unwrap();
        let set = index_set_for_cardinality(&WEIGHTS, 10).unwrap();
        let s = fit_rb_dls(Arc::new(rb), &draw_samples(30, 5, 2).unwrap(), &set).unwrap();
        let test = draw_samples(8, 5, 4).unwrap();
        let reference = FineReference { system: &fine };
        let report = error_split_report(&coarse, &res, &s, Some(&reference), &test).unwrap();
        assert_eq!(report.points.len(), 8);
        for p in &report.points {
            assert!(p.e_rb <= p.estimator * (1.0 + 1e-6));
            assert!(p.total <= (p.e_rb + p.e_fit) * (1.0 + 1e-12) + 1e-15);
            assert!(p.e_fem.unwrap() > 0.0);
        }
        assert!(report.max_qoi_error >= report.mean_qoi_error);
        assert!(report.mean_e_fem.unwrap() > 0.0);
    }

    #[test]
    fn rejects_mismatched_coefficients() {
        let system = fourier_system(6);
        let (rb, _) = greedy_build(&system, &draw_samples(10, 5, 1).unwrap(), 1e-3, 2).unwrap();
        let set = index_set_for_cardinality(&WEIGHTS, 4).unwrap();
        let s = fit_rb_dls(Arc::new(rb.clone()), &draw_samples(8, 5, 1).unwrap(), &set).unwrap();
        let mut coeffs = s.coeffs.clone();
        coeffs.coefficients = DMatrix::zeros(4, rb.k() + 1);
        assert!(RbDlsSurrogate::new(Arc::new(rb.clone()), coeffs, s.metadata.clone()).is_err());
        assert!(matches!(
            fit_rb_dls(Arc::new(rb), &draw_samples(3, 5, 1).unwrap(), &set),
            Err(Error::TooFewSamples { .. })
        ));
    }
}
