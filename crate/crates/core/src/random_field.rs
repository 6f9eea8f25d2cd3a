//! Affine parameterized diffusion coefficients.
//!
//! A field is `a(x, y) = a_0(x) + sum_{n=1}^{N} a_n(x) y_n` with `y` in `[-1, 1]^N`.
//! Sup norms of the `a_n` and the minimum of `a_0` are estimated once on a probe
//! point set (normally the finite element quadrature points), and the coercivity
//! lower bound `alpha_lb(y) = min_x a(x, y)` is evaluated by direct minimization
//! over the same set.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A point of the unit square.
pub type Point = [f64; 2];

/// One spatial function of the affine expansion.
pub type Term = Arc<dyn Fn(Point) -> f64 + Send + Sync>;

/// Parameters of the Fourier-type expansion of a Gaussian-correlated field
/// with constant mean `c` and correlation length `correlation_length`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierFieldSpec {
    pub c: f64,
    pub correlation_length: f64,
    /// Number of retained random variables `N`.
    pub n_terms: usize,
    /// Global factor multiplying the whole expansion.
    pub scale: f64,
}

impl Default for FourierFieldSpec {
    fn default() -> Self {
        Self {
            c: 4.0,
            correlation_length: 0.125,
            n_terms: 5,
            scale: 0.01,
        }
    }
}

impl FourierFieldSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::InvalidField(format!("mean level c must be positive, got {}", self.c)));
        }
        if !(self.correlation_length > 0.0) {
            return Err(Error::InvalidField(format!(
                "correlation length must be positive, got {}",
                self.correlation_length
            )));
        }
        if self.n_terms == 0 {
            return Err(Error::InvalidField("at least one random variable is required".into()));
        }
        if !self.scale.is_finite() || self.scale == 0.0 {
            return Err(Error::InvalidField(format!("scale must be finite and nonzero, got {}", self.scale)));
        }
        Ok(())
    }
}

/// `sqrt(xi_n) = (sqrt(pi) L)^{1/2} exp(-(n pi L)^2 / 8)` for `n >= 1`.
pub fn sqrt_eigenvalue(n: usize, correlation_length: f64) -> f64 {
    let l = correlation_length;
    (PI.sqrt() * l).sqrt() * (-(n as f64 * PI * l).powi(2) / 8.0).exp()
}

/// An affine coefficient field with cached sup-norm data.
#[derive(Clone)]
pub struct AffineField {
    terms: Vec<Term>,
    sup_norms: Vec<f64>,
    a0_min: f64,
    spec: Option<FourierFieldSpec>,
}

impl fmt::Debug for AffineField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AffineField")
            .field("n_params", &self.n_params())
            .field("sup_norms", &self.sup_norms)
            .field("a0_min", &self.a0_min)
            .field("spec", &self.spec)
            .finish()
    }
}

impl AffineField {
    /// Builds a field from `N + 1` terms; `terms[0]` is the mean `a_0`.
    ///
    /// Sup norms and `a0_min` are estimated on `probes`.
    pub fn new(terms: Vec<Term>, probes: &[Point]) -> Result<Self> {
        if terms.len() < 2 {
            return Err(Error::InvalidField(format!(
                "need a mean term and at least one parameter term, got {} terms",
                terms.len()
            )));
        }
        if probes.is_empty() {
            return Err(Error::EmptyProbes);
        }
        let a0_min = probes.iter().map(|&x| terms[0](x)).fold(f64::INFINITY, f64::min);
        if !(a0_min > 0.0) {
            return Err(Error::InvalidField(format!("mean term must be positive, min is {a0_min}")));
        }
        let sup_norms = terms[1..]
            .iter()
            .map(|t| probes.iter().map(|&x| t(x).abs()).fold(0.0, f64::max))
            .collect();
        Ok(Self {
            terms,
            sup_norms,
            a0_min,
            spec: None,
        })
    }

    /// Field whose terms are all constant in space.
    pub fn constant(a0: f64, params: &[f64], probes: &[Point]) -> Result<Self> {
        let mut terms: Vec<Term> = vec![Arc::new(move |_| a0)];
        for &v in params {
            terms.push(Arc::new(move |_| v));
        }
        Self::new(terms, probes)
    }

    pub fn n_params(&self) -> usize {
        self.terms.len() - 1
    }

    /// The expansion this field was built from, if any.
    pub fn spec(&self) -> Option<&FourierFieldSpec> {
        self.spec.as_ref()
    }

    /// `a_n(x)` for `n` in `0..=N`.
    pub fn term(&self, n: usize, x: Point) -> f64 {
        self.terms[n](x)
    }

    pub fn eval(&self, x: Point, y: &[f64]) -> Result<f64> {
        check_dim(self.n_params(), y.len())?;
        Ok(self.terms[1..].iter().zip(y).fold(self.terms[0](x), |acc, (t, &yn)| acc + t(x) * yn))
    }

    /// `||a_n||_inf` for `n = 1..=N`, estimated on the construction probes.
    pub fn sup_norms(&self) -> &[f64] {
        &self.sup_norms
    }

    pub fn a0_min(&self) -> f64 {
        self.a0_min
    }

    /// Conservative bound `a0_min - sum_n ||a_n||_inf`, valid for every `y` in the cube.
    pub fn analytic_lb(&self) -> f64 {
        self.a0_min - self.sup_norms.iter().sum::<f64>()
    }

    /// `min` over `probes` of `a(x, y)`. A nonpositive value means `y` is not coercive.
    pub fn alpha_lb(&self, y: &[f64], probes: &[Point]) -> Result<f64> {
        check_dim(self.n_params(), y.len())?;
        if probes.is_empty() {
            return Err(Error::EmptyProbes);
        }
        let mut min = f64::INFINITY;
        for &x in probes {
            min = min.min(self.eval(x, y)?);
        }
        Ok(min)
    }

    /// Tabulates every term at `probes`.
    pub fn tabulate(&self, probes: &[Point]) -> Result<CoefficientTable> {
        if probes.is_empty() {
            return Err(Error::EmptyProbes);
        }
        let values = self
            .terms
            .iter()
            .map(|t| probes.iter().map(|&x| t(x)).collect())
            .collect();
        Ok(CoefficientTable { values })
    }
}

/// Values `a_n(x_q)` of each term at a fixed probe set, laid out term-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    values: Vec<Vec<f64>>,
}

impl CoefficientTable {
    pub fn n_params(&self) -> usize {
        self.values.len() - 1
    }

    pub fn n_probes(&self) -> usize {
        self.values[0].len()
    }

    pub fn term_values(&self, n: usize) -> &[f64] {
        &self.values[n]
    }

    /// `a(x_q, y)` at every probe.
    pub fn field_values(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.n_params(), y.len())?;
        let mut out = self.values[0].clone();
        for (vals, &yn) in self.values[1..].iter().zip(y) {
            for (o, &v) in out.iter_mut().zip(vals) {
                *o += v * yn;
            }
        }
        Ok(out)
    }

    pub fn alpha_lb(&self, y: &[f64]) -> Result<f64> {
        Ok(self.field_values(y)?.into_iter().fold(f64::INFINITY, f64::min))
    }
}

/// Builds the truncated Fourier-type expansion
///
/// ```text
/// a(x, y) = scale * { c + (sqrt(pi) L / 2)^{1/2} y_1
///                       + sum_{n>=1} sqrt(xi_n) (sin(n pi x_1) y_{2n} + cos(n pi x_1) y_{2n+1}) }
/// ```
///
/// keeping exactly `spec.n_terms` random variables.
pub fn build_fourier_field(spec: &FourierFieldSpec, probes: &[Point]) -> Result<AffineField> {
    spec.validate()?;
    let FourierFieldSpec {
        c,
        correlation_length: l,
        n_terms,
        scale,
    } = *spec;
    let mut terms: Vec<Term> = Vec::with_capacity(n_terms + 1);
    terms.push(Arc::new(move |_| scale * c));
    let first = scale * (PI.sqrt() * l / 2.0).sqrt();
    terms.push(Arc::new(move |_| first));
    for p in 2..=n_terms {
        let n = p / 2;
        let amp = scale * sqrt_eigenvalue(n, l);
        let freq = n as f64 * PI;
        if p % 2 == 0 {
            terms.push(Arc::new(move |x: Point| amp * (freq * x[0]).sin()));
        } else {
            terms.push(Arc::new(move |x: Point| amp * (freq * x[0]).cos()));
        }
    }
    let mut field = AffineField::new(terms, probes)?;
    field.spec = Some(*spec);
    Ok(field)
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n: usize) -> Vec<Point> {
        let mut pts = Vec::with_capacity((n + 1) * (n + 1));
        for j in 0..=n {
            for i in 0..=n {
                pts.push([i as f64 / n as f64, j as f64 / n as f64]);
            }
        }
        pts
    }

    fn fourier_field(probes: &[Point]) -> AffineField {
        build_fourier_field(&FourierFieldSpec::default(), probes).unwrap()
    }

    #[test]
    fn fourier_field_shape_and_mean() {
        let probes = grid(16);
        let field = fourier_field(&probes);
        assert_eq!(field.n_params(), 5);
        for &x in &probes {
            assert!((field.term(0, x) - 0.04).abs() < 1e-15);
        }
        assert!((field.alpha_lb(&[0.0; 5], &probes).unwrap() - 0.04).abs() < 1e-15);
    }

    #[test]
    fn first_eigenvalue_matches_formula() {
        // (sqrt(pi)/8)^{1/2} exp(-(pi/8)^2/8), evaluated independently
        let expected = (std::f64::consts::PI.sqrt() / 8.0).sqrt() * (-(std::f64::consts::PI / 8.0).powi(2) / 8.0).exp();
        assert!((sqrt_eigenvalue(1, 0.125) - expected).abs() < 1e-15);
        assert!((expected - 0.461_711_579_117_532_7).abs() < 1e-14);
    }

    #[test]
    fn single_term_field_is_constant_in_space() {
        let probes = grid(8);
        let spec = FourierFieldSpec {
            n_terms: 1,
            ..Default::default()
        };
        let field = build_fourier_field(&spec, &probes).unwrap();
        assert_eq!(field.n_params(), 1);
        let a1 = field.term(1, [0.1, 0.2]);
        assert!((a1 - 0.01 * 0.332_833_840_950_097_4).abs() < 1e-15);
        assert_eq!(a1, field.term(1, [0.9, 0.7]));
    }

    #[test]
    fn fourier_term_layout() {
        let probes = grid(8);
        let field = fourier_field(&probes);
        let x = [0.3, 0.6];
        let s1 = 0.01 * sqrt_eigenvalue(1, 0.125);
        let s2 = 0.01 * sqrt_eigenvalue(2, 0.125);
        assert!((field.term(2, x) - s1 * (PI * 0.3).sin()).abs() < 1e-15);
        assert!((field.term(3, x) - s1 * (PI * 0.3).cos()).abs() < 1e-15);
        assert!((field.term(4, x) - s2 * (2.0 * PI * 0.3).sin()).abs() < 1e-15);
        assert!((field.term(5, x) - s2 * (2.0 * PI * 0.3).cos()).abs() < 1e-15);
    }

    #[test]
    fn constant_field_bounds() {
        let probes = grid(4);
        let f = AffineField::constant(1.0, &[0.3], &probes).unwrap();
        assert!((f.analytic_lb() - 0.7).abs() < 1e-15);
        let f = AffineField::constant(1.0, &[0.0, 0.0], &probes).unwrap();
        assert_eq!(f.alpha_lb(&[0.4, -0.9], &probes).unwrap(), 1.0);
    }

    #[test]
    fn alpha_lb_at_lower_corner_matches_dense_grid() {
        let probes = grid(512);
        let field = fourier_field(&probes);
        let y = [-1.0; 5];
        // brute force straight from the expansion formula
        let s0 = 0.01 * (PI.sqrt() * 0.125 / 2.0).sqrt();
        let s1 = 0.01 * sqrt_eigenvalue(1, 0.125);
        let s2 = 0.01 * sqrt_eigenvalue(2, 0.125);
        let brute = probes
            .iter()
            .map(|x| {
                let t = x[0];
                0.04 - s0 - s1 * (PI * t).sin() - s1 * (PI * t).cos() - s2 * (2.0 * PI * t).sin()
                    - s2 * (2.0 * PI * t).cos()
            })
            .fold(f64::INFINITY, f64::min);
        let got = field.alpha_lb(&y, &probes).unwrap();
        assert!((got - brute).abs() < 1e-15, "{got} vs {brute}");
        assert!(got > 0.0);
    }

    #[test]
    fn fourier_field_is_uniformly_coercive() {
        let probes = grid(512);
        let field = fourier_field(&probes);
        let lb = field.analytic_lb();
        // sup norms from the formula: the constant term, the two first-mode terms
        // reach their amplitude (x = 1/2 and x = 0), the second-mode terms too.
        let s0 = 0.01 * (PI.sqrt() * 0.125 / 2.0).sqrt();
        let s1 = 0.01 * sqrt_eigenvalue(1, 0.125);
        let s2 = 0.01 * sqrt_eigenvalue(2, 0.125);
        let expected = 0.04 - s0 - 2.0 * s1 - 2.0 * s2;
        assert!((lb - expected).abs() < 1e-12, "{lb} vs {expected}");
        assert!(lb > 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        let probes = grid(2);
        assert!(AffineField::constant(1.0, &[], &probes).is_err());
        assert!(AffineField::constant(-1.0, &[0.1], &probes).is_err());
        let f = AffineField::constant(1.0, &[0.1], &probes).unwrap();
        assert!(matches!(f.alpha_lb(&[0.0], &[]), Err(Error::EmptyProbes)));
        assert!(matches!(f.alpha_lb(&[0.0, 0.0], &probes), Err(Error::DimensionMismatch { .. })));
        let bad = FourierFieldSpec {
            correlation_length: 0.0,
            ..Default::default()
        };
        assert!(build_fourier_field(&bad, &probes).is_err());
    }

    #[test]
    fn table_matches_field() {
        let probes = grid(8);
        let field = fourier_field(&probes);
        let table = field.tabulate(&probes).unwrap();
        let y = [0.2, -0.5, 0.9, -0.1, 0.3];
        let vals = table.field_values(&y).unwrap();
        for (q, &x) in probes.iter().enumerate() {
            assert_eq!(vals[q], field.eval(x, &y).unwrap());
        }
        assert_eq!(table.alpha_lb(&y).unwrap(), field.alpha_lb(&y, &probes).unwrap());
    }

    proptest! {
        #[test]
        fn affine_in_parameters(
            x0 in 0.0f64..1.0, x1 in 0.0f64..1.0,
            y in proptest::collection::vec(-1.0f64..1.0, 5),
            z in proptest::collection::vec(-1.0f64..1.0, 5),
        ) {
            let probes = grid(4);
            let field = fourier_field(&probes);
            let x = [x0, x1];
            let yz: Vec<f64> = y.iter().zip(&z).map(|(a, b)| a + b).collect();
            let lhs = field.eval(x, &yz).unwrap();
            let rhs = field.eval(x, &y).unwrap()
                + (1..=5).map(|n| field.term(n, x) * z[n - 1]).sum::<f64>();
            prop_assert!((lhs - rhs).abs() < 1e-15);
        }

        #[test]
        fn bound_ordering(y in proptest::collection::vec(-1.0f64..=1.0, 5)) {
            let probes = grid(32);
            let field = fourier_field(&probes);
            let alpha = field.alpha_lb(&y, &probes).unwrap();
            prop_assert!(field.analytic_lb() <= alpha + 1e-15);
            prop_assert!(alpha > 0.0);
            for &x in probes.iter().step_by(7) {
                prop_assert!(alpha <= field.eval(x, &y).unwrap());
            }
        }
    }
}
