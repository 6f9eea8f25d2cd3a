//! Weak-greedy reduced basis with an offline/online residual estimator.
//!
//! Snapshots are X-orthonormalized, the affine blocks are projected to `K x K`
//! matrices, and the Riesz representors `e^f = X^-1 f`, `e_{n,i} = X^-1 A_n xi_i`
//! are precomputed so that the dual residual norm at a new `y` costs no
//! length-`J` work.
//!
//! The online norm is evaluated through an X-orthonormal frame of the
//! representors (`e_q = sum_j Q_j T_jq`), giving `||e(y)||_X = ||T beta(y)||_2`.
//! This keeps full relative accuracy when the residual is many orders below
//! `||e^f||_X`, where the quadratic form `beta^T G beta` would cancel.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;
use rayon::prelude::*;

use crate::dls::SampleSet;
use crate::mesh_fem::{spmv, FemSystem};
use crate::random_field::CoefficientTable;
use crate::{Error, Result};

/// Snapshots whose X-norm drops below this fraction after orthogonalization are rejected.
pub const DEPENDENCE_TOLERANCE: f64 = 1e-10;

/// Remainders below this relative X-norm are treated as exact zeros.
const FRAME_TOLERANCE: f64 = 1e-15;

/// Training points, drawn like any other sample set.
pub type TrainingSet = SampleSet;

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedBasis {
    /// `J x K`, X-orthonormal columns.
    pub basis: DMatrix<f64>,
    /// `V^T A_n V` for `n = 0..=N`.
    pub reduced_blocks: Vec<DMatrix<f64>>,
    pub reduced_load: DVector<f64>,
    pub selected_points: Vec<Vec<f64>>,
    /// Max training estimator before each extension, plus the final one.
    pub estimator_history: Vec<f64>,
    /// FEM solves spent by the greedy loop.
    pub offline_fem_solves: usize,
    pub training_seed: Option<u64>,
}

impl ReducedBasis {
    pub fn k(&self) -> usize {
        self.basis.ncols()
    }

    pub fn n_dofs(&self) -> usize {
        self.basis.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.reduced_blocks.len() - 1
    }

    /// Projects the system onto the span of `columns`, X-orthonormalizing them in order.
    pub fn from_columns(system: &FemSystem, columns: &[DVector<f64>]) -> Result<(ReducedBasis, ResidualData)> {
        let mut builder = Builder::new(system)?;
        for (i, u) in columns.iter().enumerate() {
            let xi = builder
                .orthonormalize(u)?
                .ok_or_else(|| Error::InvalidArgument(format!("column {i} is X-dependent on the previous ones")))?;
            builder.append(xi)?;
        }
        Ok(builder.finish(Vec::new(), Vec::new(), 0, None))
    }
}

/// Offline residual data.
#[derive(Debug, Clone)]
pub struct ResidualData {
    pub riesz_f: DVector<f64>,
    /// `riesz_terms[n][i] = X^-1 A_n xi_i`.
    pub riesz_terms: Vec<Vec<DVector<f64>>>,
    /// X inner products among `[e^f, e_{0,0}..e_{N,0}, e_{0,1}, ...]`.
    pub gram: DMatrix<f64>,
    /// Column `q` holds the frame coordinates of representor `q`.
    pub factor: Vec<Vec<f64>>,
    frame: Vec<DVector<f64>>,
    frame_x: Vec<DVector<f64>>,
    coefficients: Arc<CoefficientTable>,
}

impl ResidualData {
    fn new(coefficients: Arc<CoefficientTable>, riesz_f: DVector<f64>, n_params: usize) -> Self {
        Self {
            riesz_f,
            riesz_terms: vec![Vec::new(); n_params + 1],
            gram: DMatrix::zeros(0, 0),
            factor: Vec::new(),
            frame: Vec::new(),
            frame_x: Vec::new(),
            coefficients,
        }
    }

    pub fn n_params(&self) -> usize {
        self.riesz_terms.len() - 1
    }

    pub fn k(&self) -> usize {
        self.riesz_terms[self.n_params()].len()
    }

    pub fn n_representors(&self) -> usize {
        self.factor.len()
    }

    /// Dimension of the span of all representors.
    pub fn rank(&self) -> usize {
        self.frame.len()
    }

    pub fn coefficients(&self) -> &Arc<CoefficientTable> {
        &self.coefficients
    }

    fn representor(&self, q: usize) -> &DVector<f64> {
        if q == 0 {
            return &self.riesz_f;
        }
        let np = self.n_params() + 1;
        &self.riesz_terms[(q - 1) % np][(q - 1) / np]
    }

    /// Adds representor `e` with `X e = r`.
    ///
    /// The representors obey near-exact linear relations (one per snapshot), so
    /// nearly dependent directions are kept rather than truncated: dropping a
    /// remainder of relative size `d` perturbs the online norm by `d |beta| ||e||`.
    fn push(&mut self, e: DVector<f64>, r: &DVector<f64>, x: &CsrMatrix<f64>) {
        let q = self.factor.len();
        let mut gram = std::mem::replace(&mut self.gram, DMatrix::zeros(0, 0)).resize(q + 1, q + 1, 0.0);
        for p in 0..q {
            let g = self.representor(p).dot(r);
            gram[(p, q)] = g;
            gram[(q, p)] = g;
        }
        gram[(q, q)] = e.dot(r);
        self.gram = gram;

        let norm0 = e.dot(r).max(0.0).sqrt();
        let mut coords = vec![0.0; self.frame.len()];
        if norm0 > 0.0 {
            let mut v = e.clone();
            let mut xv = r.clone();
            let mut norm = norm0;
            // repeated Gram-Schmidt until a pass no longer removes much
            for _ in 0..3 {
                for (j, (qj, xqj)) in self.frame.iter().zip(&self.frame_x).enumerate() {
                    let c = qj.dot(&xv);
                    coords[j] += c;
                    v.axpy(-c, qj, 1.0);
                    xv.axpy(-c, xqj, 1.0);
                }
                xv = spmv(x, &v);
                let next = v.dot(&xv).max(0.0).sqrt();
                let settled = next > 0.5 * norm;
                norm = next;
                if settled {
                    break;
                }
            }
            if norm > FRAME_TOLERANCE * norm0 {
                v /= norm;
                let xq = spmv(x, &v);
                self.frame.push(v);
                self.frame_x.push(xq);
                coords.push(norm);
            }
        }
        self.factor.push(coords);

        if q == 0 {
            self.riesz_f = e;
        } else {
            let np = self.n_params() + 1;
            self.riesz_terms[(q - 1) % np].push(e);
        }
    }

    /// `beta = [1, -theta_n(y) w_i]` in representor order.
    fn beta(&self, y: &[f64], w: &DVector<f64>) -> Result<Vec<f64>> {
        if y.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: y.len(),
            });
        }
        if w.len() != self.k() {
            return Err(Error::DimensionMismatch {
                expected: self.k(),
                got: w.len(),
            });
        }
        let mut beta = Vec::with_capacity(self.n_representors());
        beta.push(1.0);
        for &wi in w.iter() {
            beta.push(-wi);
            beta.extend(y.iter().map(|&yn| -yn * wi));
        }
        Ok(beta)
    }

    /// `||e_{h,K}(y)||_X` for reduced coefficients `w`.
    pub fn residual_norm(&self, y: &[f64], w: &DVector<f64>) -> Result<f64> {
        let beta = self.beta(y, w)?;
        let mut t = vec![0.0; self.rank()];
        for (col, &b) in self.factor.iter().zip(&beta) {
            for (tj, &c) in t.iter_mut().zip(col) {
                *tj += b * c;
            }
        }
        Ok(t.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    /// Same norm from `sqrt(beta^T G beta)`; loses accuracy once the residual
    /// falls near `sqrt(eps) ||e^f||_X`.
    pub fn residual_norm_gram(&self, y: &[f64], w: &DVector<f64>) -> Result<f64> {
        let beta = DVector::from_vec(self.beta(y, w)?);
        Ok((&self.gram * &beta).dot(&beta).max(0.0).sqrt())
    }

    /// Residual functional `r(v; y) = (e_{h,K}(y), v)_X` from stored representors.
    pub fn residual_functional(&self, y: &[f64], w: &DVector<f64>, xv: &DVector<f64>) -> Result<f64> {
        let beta = self.beta(y, w)?;
        Ok(beta.iter().enumerate().map(|(q, &b)| b * self.representor(q).dot(xv)).sum())
    }
}

struct Builder<'a> {
    system: &'a FemSystem,
    columns: Vec<DVector<f64>>,
    blocks: Vec<DMatrix<f64>>,
    load: Vec<f64>,
    res: ResidualData,
}

impl<'a> Builder<'a> {
    fn new(system: &'a FemSystem) -> Result<Self> {
        let n = system.n_params();
        let f = system.load();
        let ef = system.riesz_solve(f)?;
        let mut res = ResidualData::new(system.coefficients().clone(), DVector::zeros(0), n);
        res.push(ef, f, system.x_inner());
        Ok(Self {
            system,
            columns: Vec::new(),
            blocks: vec![DMatrix::zeros(0, 0); n + 1],
            load: Vec::new(),
            res,
        })
    }

    /// X-orthogonalizes `u` against the basis (two MGS passes); `None` when dependent.
    fn orthonormalize(&self, u: &DVector<f64>) -> Result<Option<DVector<f64>>> {
        let x = self.system.x_inner();
        let norm0 = self.system.x_norm(u)?;
        if !(norm0 > 0.0) {
            return Ok(None);
        }
        let mut v = u.clone();
        for _ in 0..2 {
            let mut xv = spmv(x, &v);
            for xi in &self.columns {
                let c = xi.dot(&xv);
                v.axpy(-c, xi, 1.0);
                xv = spmv(x, &v);
            }
        }
        let norm = self.system.x_norm(&v)?;
        if norm < DEPENDENCE_TOLERANCE * norm0 {
            return Ok(None);
        }
        Ok(Some(v / norm))
    }

    fn append(&mut self, xi: DVector<f64>) -> Result<()> {
        let k = self.columns.len();
        let f_dot = xi.dot(self.system.load());
        for (n, block) in self.system.stiffness_blocks().iter().enumerate() {
            let a_xi = spmv(block, &xi);
            let mut b = std::mem::replace(&mut self.blocks[n], DMatrix::zeros(0, 0)).resize(k + 1, k + 1, 0.0);
            for (i, col) in self.columns.iter().enumerate() {
                let v = col.dot(&a_xi);
                b[(i, k)] = v;
                b[(k, i)] = v;
            }
            b[(k, k)] = xi.dot(&a_xi);
            self.blocks[n] = b;
            let e = self.system.riesz_solve(&a_xi)?;
            self.res.push(e, &a_xi, self.system.x_inner());
        }
        self.load.push(f_dot);
        self.columns.push(xi);
        Ok(())
    }

    fn snapshot(&self) -> ReducedBasis {
        let j = self.system.n_dofs();
        let basis = if self.columns.is_empty() {
            DMatrix::zeros(j, 0)
        } else {
            DMatrix::from_columns(&self.columns)
        };
        ReducedBasis {
            basis,
            reduced_blocks: self.blocks.clone(),
            reduced_load: DVector::from_vec(self.load.clone()),
            selected_points: Vec::new(),
            estimator_history: Vec::new(),
            offline_fem_solves: 0,
            training_seed: None,
        }
    }

    fn finish(self, selected: Vec<Vec<f64>>, history: Vec<f64>, solves: usize, seed: Option<u64>) -> (ReducedBasis, ResidualData) {
        let mut rb = self.snapshot();
        rb.selected_points = selected;
        rb.estimator_history = history;
        rb.offline_fem_solves = solves;
        rb.training_seed = seed;
        (rb, self.res)
    }
}

/// Solves `(sum_n theta_n(y) V^T A_n V) w = V^T f` with `theta = [1, y]`.
pub fn rb_solve(rb: &ReducedBasis, y: &[f64]) -> Result<DVector<f64>> {
    if y.len() != rb.n_params() {
        return Err(Error::DimensionMismatch {
            expected: rb.n_params(),
            got: y.len(),
        });
    }
    let k = rb.k();
    if k == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut a = rb.reduced_blocks[0].clone();
    for (block, &yn) in rb.reduced_blocks[1..].iter().zip(y) {
        a += block * yn;
    }
    let chol = a.cholesky().ok_or(Error::SingularReducedSystem)?;
    Ok(chol.solve(&rb.reduced_load))
}

/// `||e_{h,K}(y)||_X / alpha_LB(y)`.
pub fn error_estimator(rb: &ReducedBasis, res: &ResidualData, y: &[f64], w: &DVector<f64>) -> Result<f64> {
    if w.len() != rb.k() {
        return Err(Error::DimensionMismatch {
            expected: rb.k(),
            got: w.len(),
        });
    }
    let alpha_lb = res.coefficients.alpha_lb(y)?;
    if !(alpha_lb > 0.0) {
        return Err(Error::NotCoercive { alpha_lb });
    }
    Ok(res.residual_norm(y, w)? / alpha_lb)
}

/// `V w`.
pub fn rb_reconstruct(rb: &ReducedBasis, w: &DVector<f64>) -> Result<DVector<f64>> {
    if w.len() != rb.k() {
        return Err(Error::DimensionMismatch {
            expected: rb.k(),
            got: w.len(),
        });
    }
    Ok(&rb.basis * w)
}

/// Length-`J` residual norm: assembles `f - A(y) V w`, Riesz-solves and takes the X-norm.
pub fn direct_residual_norm(system: &FemSystem, rb: &ReducedBasis, y: &[f64], w: &DVector<f64>) -> Result<f64> {
    let u = rb_reconstruct(rb, w)?;
    let r = system.load() - system.apply_operator(y, &u)?;
    system.x_norm(&system.riesz_solve(&r)?)
}

/// Weak greedy construction over `train`.
pub fn greedy_build(system: &FemSystem, train: &TrainingSet, eps_tol: f64, k_max: usize) -> Result<(ReducedBasis, ResidualData)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if train.dim() != system.n_params() {
        return Err(Error::DimensionMismatch {
            expected: system.n_params(),
            got: train.dim(),
        });
    }
    if !(eps_tol > 0.0) || k_max == 0 {
        return Err(Error::InvalidArgument(format!(
            "need eps_tol > 0 and k_max >= 1, got {eps_tol} and {k_max}"
        )));
    }
    let points: Vec<Vec<f64>> = (0..train.len()).map(|i| train.point(i)).collect();
    let alphas: Vec<f64> = points.iter().map(|y| system.alpha_lb(y)).collect::<Result<_>>()?;
    if !alphas.iter().any(|&a| a > 0.0) {
        return Err(Error::NoCoercivePoint);
    }

    let mut builder = Builder::new(system)?;
    let mut selected = Vec::new();
    let mut history = Vec::new();
    let mut solves = 0;
    loop {
        let rb = builder.snapshot();
        let res = &builder.res;
        let estimates: Vec<Option<f64>> = points
            .par_iter()
            .zip(&alphas)
            .map(|(y, &alpha)| {
                if !(alpha > 0.0) {
                    return Ok(None);
                }
                let w = rb_solve(&rb, y)?;
                Ok(Some(res.residual_norm(y, &w)? / alpha))
            })
            .collect::<Result<_>>()?;
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in estimates.iter().enumerate() {
            if let Some(e) = *e {
                if best.is_none_or(|(_, b)| e > b) {
                    best = Some((i, e));
                }
            }
        }
        let (arg, max) = best.ok_or(Error::NoCoercivePoint)?;
        history.push(max);
        if max <= eps_tol || rb.k() >= k_max {
            break;
        }
        let u = system.solve_fem(&points[arg])?;
        solves += 1;
        match builder.orthonormalize(&u)? {
            Some(xi) => {
                builder.append(xi)?;
                selected.push(points[arg].clone());
            }
            None if rb.k() == 0 => return Err(Error::DependentFirstSnapshot),
            None => break,
        }
    }
    Ok(builder.finish(selected, history, solves, Some(train.seed)))
}
