//! Legendre polynomial spaces over `[-1, 1]^N` with the uniform measure.
//!
//! Univariate polynomials are normalized so that `int L_i L_j dy/2 = delta_ij`,
//! which gives `L_k(1) = sqrt(2k+1)` and `||L_k||_inf = sqrt(2k+1)`.
//!
//! Anisotropic index sets keep the multi-indices with
//! `sum_n (2 lambda_n nu_n - ln(2 nu_n + 1)) <= j`: the log of the coefficient
//! bound `phi^{-nu} prod sqrt(2 nu_n + 1)` with `lambda_n = ln(phi_n)`.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mesh_fem::FemSystem;
use crate::random_field::AffineField;
use crate::{Error, Result};

/// Default bound on the number of enumerated indices.
pub const DEFAULT_CARDINALITY_CAP: usize = 200_000;

/// Normalized Legendre polynomial `L_degree(y)`.
pub fn legendre_eval(degree: usize, y: f64) -> Result<f64> {
    if !(y.abs() <= 1.0) {
        return Err(Error::OutOfRange { index: 0, value: y });
    }
    let mut out = vec![0.0; degree + 1];
    legendre_values(degree, y, &mut out);
    Ok(out[degree])
}

/// Writes `L_0(y) ..= L_max_degree(y)` into `out`. No range check.
pub fn legendre_values(max_degree: usize, y: f64, out: &mut [f64]) {
    // classical three-term recurrence, normalized afterwards
    let (mut p0, mut p1) = (1.0, y);
    out[0] = 1.0;
    if max_degree >= 1 {
        out[1] = 3f64.sqrt() * y;
    }
    for k in 2..=max_degree {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * y * p1 - (kf - 1.0) * p0) / kf;
        out[k] = (2.0 * kf + 1.0).sqrt() * p2;
        p0 = p1;
        p1 = p2;
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` (weights sum to 2).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let (pn, pn1) = if n == 1 { (x, 1.0) } else { (p1, p0) };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            x = 0.0;
            dp = 1.0;
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// A multi-index `nu` in `N_0^N`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    pub fn zero(dim: usize) -> Self {
        Self(vec![0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn entries(&self) -> &[u32] {
        &self.0
    }
}

/// `prod_n L_{nu_n}(y_n)`.
pub fn tensor_legendre(nu: &MultiIndex, y: &[f64]) -> Result<f64> {
    if nu.dim() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: nu.dim(),
            got: y.len(),
        });
    }
    let mut prod = 1.0;
    for (n, (&k, &yn)) in nu.0.iter().zip(y).enumerate() {
        if !(yn.abs() <= 1.0) {
            return Err(Error::OutOfRange { index: n, value: yn });
        }
        prod *= legendre_eval(k as usize, yn)?;
    }
    Ok(prod)
}

/// `2 lambda nu - ln(2 nu + 1)`, one dimension of the selection criterion.
fn log_bound_term(lambda: f64, nu: u32) -> f64 {
    2.0 * lambda * nu as f64 - (2.0 * nu as f64 + 1.0).ln()
}

/// Left-hand side `sum_n (2 lambda_n nu_n - ln(2 nu_n + 1))`.
pub fn log_bound(weights: &[f64], nu: &MultiIndex) -> f64 {
    weights
        .iter()
        .zip(&nu.0)
        .fold(0.0, |s, (&l, &k)| s + log_bound_term(l, k))
}

/// An anisotropic index set in deterministic order (ascending criterion value,
/// ties broken lexicographically).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSet {
    indices: Vec<MultiIndex>,
    weights: Vec<f64>,
    threshold: f64,
}

impl IndexSet {
    /// Wraps an explicit list of indices; used when reloading a stored set.
    pub fn from_parts(indices: Vec<MultiIndex>, weights: Vec<f64>, threshold: f64) -> Result<Self> {
        let dim = weights.len();
        if indices.is_empty() {
            return Err(Error::InvalidArgument("index set is empty".into()));
        }
        for nu in &indices {
            if nu.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: nu.dim(),
                });
            }
        }
        let mut seen: Vec<&MultiIndex> = indices.iter().collect();
        seen.sort();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("index set contains duplicates".into()));
        }
        Ok(Self {
            indices,
            weights,
            threshold,
        })
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn cardinality(&self) -> usize {
        self.indices.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn contains(&self, nu: &MultiIndex) -> bool {
        self.indices.contains(nu)
    }

    /// Largest degree used in each dimension.
    pub fn max_degrees(&self) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for nu in &self.indices {
            for (o, &k) in out.iter_mut().zip(&nu.0) {
                *o = (*o).max(k as usize);
            }
        }
        out
    }

    /// Writes `l(y) = (L_nu(y))_{nu in set}` into `out`; `y` is not range checked.
    pub fn basis_into(&self, y: &[f64], out: &mut [f64]) {
        let maxd = self.max_degrees();
        let tables: Vec<Vec<f64>> = maxd
            .iter()
            .zip(y)
            .map(|(&d, &yn)| {
                let mut t = vec![0.0; d + 1];
                legendre_values(d, yn, &mut t);
                t
            })
            .collect();
        for (o, nu) in out.iter_mut().zip(&self.indices) {
            *o = nu.0.iter().zip(&tables).map(|(&k, t)| t[k as usize]).product();
        }
    }

    /// Basis vector `l(y)` with range and dimension checks.
    pub fn basis(&self, y: &[f64]) -> Result<DVector<f64>> {
        check_point(self.dim(), y)?;
        let mut out = DVector::zeros(self.cardinality());
        self.basis_into(y, out.as_mut_slice());
        Ok(out)
    }
}

pub(crate) fn check_point(dim: usize, y: &[f64]) -> Result<()> {
    if y.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: y.len(),
        });
    }
    for (index, &value) in y.iter().enumerate() {
        if !(value.abs() <= 1.0) {
            return Err(Error::OutOfRange { index, value });
        }
    }
    Ok(())
}

fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("at least one weight is required".into()));
    }
    for (index, &value) in weights.iter().enumerate() {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::NonPositiveWeight { index, value });
        }
    }
    Ok(())
}

/// Minimum over nu of `2 lambda nu - ln(2 nu + 1)`; the function is convex in nu.
fn min_log_bound_term(lambda: f64) -> f64 {
    let mut best = 0.0;
    let mut nu = 1;
    loop {
        let v = log_bound_term(lambda, nu);
        if v >= best {
            return best;
        }
        best = v;
        nu += 1;
    }
}

pub fn build_index_set(weights: &[f64], threshold: f64) -> Result<IndexSet> {
    build_index_set_with_cap(weights, threshold, DEFAULT_CARDINALITY_CAP)
}

/// Exhaustive enumeration of the threshold set, pruned with the per-dimension
/// minima of the criterion.
pub fn build_index_set_with_cap(weights: &[f64], threshold: f64, cap: usize) -> Result<IndexSet> {
    validate_weights(weights)?;
    let dim = weights.len();
    let mins: Vec<f64> = weights.iter().map(|&l| min_log_bound_term(l)).collect();
    // rest[d] = sum_{m >= d} mins[m]
    let mut rest = vec![0.0; dim + 1];
    for d in (0..dim).rev() {
        rest[d] = rest[d + 1] + mins[d];
    }
    let mut found: Vec<(f64, MultiIndex)> = Vec::new();
    let mut current = vec![0u32; dim];
    enumerate(weights, threshold, &rest, 0, 0.0, &mut current, &mut found, cap)?;
    found.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    Ok(IndexSet {
        indices: found.into_iter().map(|(_, nu)| nu).collect(),
        weights: weights.to_vec(),
        threshold,
    })
}

#[allow(clippy::too_many_arguments)]
fn enumerate(
    weights: &[f64],
    threshold: f64,
    rest: &[f64],
    d: usize,
    partial: f64,
    current: &mut Vec<u32>,
    found: &mut Vec<(f64, MultiIndex)>,
    cap: usize,
) -> Result<()> {
    if d == weights.len() {
        if partial <= threshold {
            if found.len() >= cap {
                return Err(Error::CardinalityCap { cap });
            }
            found.push((partial, MultiIndex(current.clone())));
        }
        return Ok(());
    }
    let mut nu = 0u32;
    loop {
        let g = log_bound_term(weights[d], nu);
        let s = partial + g;
        if s + rest[d + 1] > threshold {
            // past the minimum of a convex sequence nothing can come back under
            if log_bound_term(weights[d], nu + 1) >= g {
                break;
            }
        } else {
            current[d] = nu;
            enumerate(weights, threshold, rest, d + 1, s, current, found, cap)?;
        }
        nu += 1;
    }
    current[d] = 0;
    Ok(())
}

pub fn index_set_for_cardinality(weights: &[f64], target: usize) -> Result<IndexSet> {
    index_set_for_cardinality_with_cap(weights, target, DEFAULT_CARDINALITY_CAP)
}

/// Bisects the threshold `j >= 0` to the smallest set with at least `target`
/// indices, then keeps the zero index followed by the first `target - 1` others
/// in the deterministic order.
///
/// The zero index leads even when some `2 lambda_n - ln 3 < 0` gives a neighbour
/// a smaller criterion value, so every truncated set contains the constants.
pub fn index_set_for_cardinality_with_cap(weights: &[f64], target: usize, cap: usize) -> Result<IndexSet> {
    validate_weights(weights)?;
    if target == 0 {
        return Err(Error::InvalidArgument("target cardinality must be positive".into()));
    }
    if target > cap {
        return Err(Error::CardinalityCap { cap });
    }
    let mut set = build_index_set_with_cap(weights, 0.0, cap)?;
    if set.cardinality() < target {
        let mut lo = 0.0;
        let mut hi = 1.0;
        while build_index_set_with_cap(weights, hi, cap)?.cardinality() < target {
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..200 {
            if hi - lo <= 1e-12 * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if build_index_set_with_cap(weights, mid, cap)?.cardinality() >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        set = build_index_set_with_cap(weights, hi, cap)?;
    }
    let zero = MultiIndex::zero(weights.len());
    let p = set.indices.iter().position(|nu| *nu == zero).expect("j >= 0 keeps the zero index");
    set.indices[..=p].rotate_right(1);
    set.indices.truncate(target);
    Ok(set)
}

/// `Z(Lambda) = sum_nu ||L_nu||_inf^2 = sum_nu prod_n (2 nu_n + 1)`.
pub fn z_lambda(set: &IndexSet) -> f64 {
    set.indices
        .iter()
        .map(|nu| nu.0.iter().map(|&k| 2.0 * k as f64 + 1.0).product::<f64>())
        .sum()
}

/// Regressed decay rates and their rescaled version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEstimate {
    /// Negated slopes of `ln ||c_k||_X` against `k`, one per dimension.
    pub raw_slopes: Vec<f64>,
    pub rescale_factor: f64,
    /// `rescale_factor * raw_slopes`.
    pub weights: Vec<f64>,
    pub regression_degree: usize,
    pub coercivity_fraction: f64,
    /// `||c_k||_X` for `k = 0..=p`, per dimension.
    pub coefficient_norms: Vec<Vec<f64>>,
    /// FEM solves spent on the regression.
    pub fem_solves: usize,
}

/// Conservative real-part bound on the polyellipse `phi_n = exp(weights_n)`:
/// `a0_min - sum_n ||a_n||_inf (phi_n + 1/phi_n)/2 >= fraction * a0_min`.
pub fn polyellipse_feasible(field: &AffineField, weights: &[f64], fraction: f64) -> bool {
    let a0 = field.a0_min();
    let spread: f64 = field
        .sup_norms()
        .iter()
        .zip(weights)
        .map(|(&s, &l)| s * l.cosh())
        .sum();
    a0 - spread >= fraction * a0
}

/// Estimates anisotropic weights by one-dimensional Legendre analyses.
///
/// Along each axis (other parameters at 0) the FEM solution is sampled at a
/// `(p+1)`-point Gauss-Legendre rule, projected on `L_0..L_p`, and a least
/// squares line is fitted to `ln ||c_k||_X`. The slopes are then scaled by the
/// largest `t` in `(0, 1]` keeping [`polyellipse_feasible`].
pub fn estimate_weights(
    system: &FemSystem,
    field: &AffineField,
    regression_degree: usize,
    coercivity_fraction: f64,
) -> Result<WeightEstimate> {
    let p = regression_degree;
    if p < 2 {
        return Err(Error::InvalidArgument(format!("regression degree must be at least 2, got {p}")));
    }
    if !(coercivity_fraction > 0.0 && coercivity_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "coercivity fraction must lie in (0, 1), got {coercivity_fraction}"
        )));
    }
    let dim = field.n_params();
    if system.n_params() != dim {
        return Err(Error::DimensionMismatch {
            expected: system.n_params(),
            got: dim,
        });
    }
    let (nodes, gw) = gauss_legendre(p + 1);
    let jobs: Vec<(usize, usize)> = (0..dim).flat_map(|n| (0..=p).map(move |q| (n, q))).collect();
    let solutions: Vec<DVector<f64>> = jobs
        .par_iter()
        .map(|&(n, q)| {
            let mut y = vec![0.0; dim];
            y[n] = nodes[q];
            system.solve_fem(&y)
        })
        .collect::<Result<_>>()?;

    let mut raw_slopes = Vec::with_capacity(dim);
    let mut coefficient_norms = Vec::with_capacity(dim);
    let mut leg = vec![0.0; p + 1];
    for n in 0..dim {
        let sols = &solutions[n * (p + 1)..(n + 1) * (p + 1)];
        let mut coeffs = vec![DVector::zeros(system.n_dofs()); p + 1];
        for (q, u) in sols.iter().enumerate() {
            legendre_values(p, nodes[q], &mut leg);
            for (k, c) in coeffs.iter_mut().enumerate() {
                c.axpy(0.5 * gw[q] * leg[k], u, 1.0);
            }
        }
        let norms = coeffs.iter().map(|c| system.x_norm(c)).collect::<Result<Vec<_>>>()?;
        let pts: Vec<(f64, f64)> = norms
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(k, &v)| (k as f64, v.ln()))
            .collect();
        let slope = regression_slope(&pts);
        if !(slope < 0.0) {
            return Err(Error::NoCoefficientDecay { dimension: n, slope });
        }
        raw_slopes.push(-slope);
        coefficient_norms.push(norms);
    }

    let t = rescale_factor(field, &raw_slopes, coercivity_fraction)?;
    Ok(WeightEstimate {
        weights: raw_slopes.iter().map(|s| t * s).collect(),
        raw_slopes,
        rescale_factor: t,
        regression_degree: p,
        coercivity_fraction,
        coefficient_norms,
        fem_solves: jobs.len(),
    })
}

fn regression_slope(pts: &[(f64, f64)]) -> f64 {
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Largest `t` in `(0, 1]` with `t * slopes` feasible, by bisection.
pub fn rescale_factor(field: &AffineField, slopes: &[f64], fraction: f64) -> Result<f64> {
    let scaled = |t: f64| slopes.iter().map(|s| t * s).collect::<Vec<_>>();
    if !polyellipse_feasible(field, &scaled(0.0), fraction) {
        return Err(Error::RescaleInfeasible(format!(
            "a0_min - sum ||a_n|| = {:.4e} is below {fraction} * a0_min = {:.4e} even for a degenerate ellipse",
            field.analytic_lb(),
            fraction * field.a0_min()
        )));
    }
    if polyellipse_feasible(field, &scaled(1.0), fraction) {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if polyellipse_feasible(field, &scaled(mid), fraction) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo == 0.0 {
        return Err(Error::RescaleInfeasible("no positive scaling is feasible".into()));
    }
    Ok(lo)
}
