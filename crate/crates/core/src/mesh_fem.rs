//! P1 finite elements on a structured triangulation of the unit square.
//!
//! Every square cell is split along its `(0,0)-(1,1)` diagonal. Boundary
//! vertices are eliminated (homogeneous Dirichlet), so all matrices live on
//! the `J = (n-1)^2` interior degrees of freedom. Coefficients and loads are
//! integrated with the three-point mid-edge rule; the unique edge midpoints of
//! the mesh double as the probe set for coercivity bounds.
//!
//! All stiffness blocks share one sparsity pattern, so `A(y) = A_0 + sum y_n A_n`
//! is a plain combination of value arrays and the symbolic Cholesky
//! factorization is computed once per mesh.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::DVector;
use nalgebra_sparse::factorization::{CscCholesky, CscSymbolicCholesky};
use nalgebra_sparse::pattern::SparsityPattern;
use nalgebra_sparse::{CscMatrix, CsrMatrix};

use crate::random_field::{AffineField, CoefficientTable, Point};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    n_per_side: usize,
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    /// Edges as sorted vertex pairs.
    edges: Vec<[usize; 2]>,
    /// For triangle `[a, b, c]`: edges `ab`, `bc`, `ca`.
    triangle_edges: Vec<[usize; 3]>,
    interior_dof: Vec<Option<usize>>,
    dof_vertex: Vec<usize>,
}

pub fn build_mesh(n_per_side: usize) -> Result<Mesh> {
    Mesh::new(n_per_side)
}

impl Mesh {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::MeshTooCoarse(n));
        }
        let vid = |i: usize, j: usize| j * (n + 1) + i;
        let h = 1.0 / n as f64;
        let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
        let mut interior_dof = Vec::with_capacity((n + 1) * (n + 1));
        let mut dof_vertex = Vec::with_capacity((n - 1) * (n - 1));
        for j in 0..=n {
            for i in 0..=n {
                vertices.push([i as f64 * h, j as f64 * h]);
                if i > 0 && i < n && j > 0 && j < n {
                    interior_dof.push(Some(dof_vertex.len()));
                    dof_vertex.push(vid(i, j));
                } else {
                    interior_dof.push(None);
                }
            }
        }
        let mut triangles = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let (v00, v10, v11, v01) = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1));
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
        let mut edge_ids: HashMap<[usize; 2], usize> = HashMap::with_capacity(3 * n * n + 2 * n);
        let mut edges = Vec::with_capacity(3 * n * n + 2 * n);
        let mut triangle_edges = Vec::with_capacity(triangles.len());
        for t in &triangles {
            let mut te = [0; 3];
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let key = [a.min(b), a.max(b)];
                te[k] = *edge_ids.entry(key).or_insert_with(|| {
                    edges.push(key);
                    edges.len() - 1
                });
            }
            triangle_edges.push(te);
        }
        Ok(Self {
            n_per_side: n,
            vertices,
            triangles,
            edges,
            triangle_edges,
            interior_dof,
            dof_vertex,
        })
    }

    pub fn n_per_side(&self) -> usize {
        self.n_per_side
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n_per_side as f64
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Interior dof index of a vertex, `None` on the boundary.
    pub fn interior_dof(&self, vertex: usize) -> Option<usize> {
        self.interior_dof[vertex]
    }

    pub fn dof_vertex(&self, dof: usize) -> usize {
        self.dof_vertex[dof]
    }

    pub fn n_dofs(&self) -> usize {
        self.dof_vertex.len()
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|v| self.vertices[v]);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }

    /// Unique edge midpoints: the mid-edge quadrature nodes.
    pub fn quadrature_points(&self) -> Vec<Point> {
        self.edges
            .iter()
            .map(|&[a, b]| {
                let (p, q) = (self.vertices[a], self.vertices[b]);
                [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]
            })
            .collect()
    }

    /// Nodal interpolant of `f` on the interior dofs.
    pub fn interpolate(&self, f: impl Fn(Point) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.n_dofs(), self.dof_vertex.iter().map(|&v| f(self.vertices[v])))
    }

    /// Values at all vertices, zero on the boundary.
    pub fn vertex_values(&self, u: &DVector<f64>) -> Vec<f64> {
        self.interior_dof
            .iter()
            .map(|d| d.map_or(0.0, |d| u[d]))
            .collect()
    }

    /// Exact P1 prolongation onto the uniformly refined mesh (`2n` cells per side).
    pub fn prolongate(&self, fine: &Mesh, u: &DVector<f64>) -> Result<DVector<f64>> {
        if fine.n_per_side != 2 * self.n_per_side {
            return Err(Error::InvalidArgument(format!(
                "fine mesh must have {} cells per side, got {}",
                2 * self.n_per_side,
                fine.n_per_side
            )));
        }
        if u.len() != self.n_dofs() {
            return Err(Error::DimensionMismatch {
                expected: self.n_dofs(),
                got: u.len(),
            });
        }
        let n = self.n_per_side;
        let coarse = self.vertex_values(u);
        let cv = |i: usize, j: usize| coarse[j * (n + 1) + i];
        let values = fine.dof_vertex.iter().map(|&v| {
            let (fi, fj) = (v % (2 * n + 1), v / (2 * n + 1));
            match (fi % 2, fj % 2) {
                (0, 0) => cv(fi / 2, fj / 2),
                (1, 0) => 0.5 * (cv(fi / 2, fj / 2) + cv(fi / 2 + 1, fj / 2)),
                (0, 1) => 0.5 * (cv(fi / 2, fj / 2) + cv(fi / 2, fj / 2 + 1)),
                // midpoint of the cell diagonal
                _ => 0.5 * (cv(fi / 2, fj / 2) + cv(fi / 2 + 1, fj / 2 + 1)),
            }
        });
        Ok(DVector::from_iterator(fine.n_dofs(), values))
    }

    fn gradients(&self, t: usize) -> [[f64; 2]; 3] {
        let [p0, p1, p2] = self.triangles[t].map(|v| self.vertices[v]);
        let d = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
        [
            [(p1[1] - p2[1]) / d, (p2[0] - p1[0]) / d],
            [(p2[1] - p0[1]) / d, (p0[0] - p2[0]) / d],
            [(p0[1] - p1[1]) / d, (p1[0] - p0[0]) / d],
        ]
    }

    fn sparsity(&self) -> SparsityPattern {
        let j = self.n_dofs();
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); j];
        for t in &self.triangles {
            for &a in t {
                let Some(da) = self.interior_dof[a] else { continue };
                for &b in t {
                    if let Some(db) = self.interior_dof[b] {
                        rows[da].push(db);
                    }
                }
            }
        }
        let mut offsets = Vec::with_capacity(j + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
            indices.extend_from_slice(row);
            offsets.push(indices.len());
        }
        SparsityPattern::try_from_offsets_and_indices(j, j, offsets, indices).expect("valid pattern")
    }
}

/// Nodes and weights of a degree-5 seven-point triangle rule, in barycentric
/// coordinates; weights sum to one.
fn seven_point_rule() -> [([f64; 3], f64); 7] {
    let s = 15f64.sqrt();
    let (a1, b1, w1) = ((9.0 - 2.0 * s) / 21.0, (6.0 + s) / 21.0, (155.0 + s) / 1200.0);
    let (a2, b2, w2) = ((9.0 + 2.0 * s) / 21.0, (6.0 - s) / 21.0, (155.0 - s) / 1200.0);
    [
        ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0.225),
        ([a1, b1, b1], w1),
        ([b1, a1, b1], w1),
        ([b1, b1, a1], w1),
        ([a2, b2, b2], w2),
        ([b2, a2, b2], w2),
        ([b2, b2, a2], w2),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverMethod {
    /// Sparse Cholesky, falling back to conjugate gradients if the factorization fails.
    Direct,
    ConjugateGradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub method: SolverMethod,
    /// Relative residual tolerance `||A u - b|| <= rel_tol ||b||`.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: SolverMethod::Direct,
            rel_tol: 1e-12,
            max_iter: 20_000,
        }
    }
}

/// Assembled affine finite element system.
pub struct FemSystem {
    mesh: Mesh,
    stiffness_blocks: Vec<CsrMatrix<f64>>,
    load: DVector<f64>,
    x_inner: CsrMatrix<f64>,
    mean_weights: DVector<f64>,
    coefficients: Arc<CoefficientTable>,
    symbolic: CscSymbolicCholesky,
    x_factor: CscCholesky<f64>,
    solver: SolverOptions,
    fem_solves: AtomicUsize,
}

impl std::fmt::Debug for FemSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FemSystem")
            .field("n_per_side", &self.mesh.n_per_side)
            .field("n_dofs", &self.n_dofs())
            .field("n_params", &self.n_params())
            .field("solver", &self.solver)
            .finish()
    }
}

/// Assembles `A_n = int a_n grad(phi_i) . grad(phi_j)`, the load `int f phi_i`
/// and the unit-coefficient `X` inner product.
pub fn assemble_affine(mesh: Mesh, field: &AffineField, source: &dyn Fn(Point) -> f64) -> Result<FemSystem> {
    let qpts = mesh.quadrature_points();
    let table = field.tabulate(&qpts)?;
    let pattern = mesh.sparsity();
    let n_tri = mesh.triangles.len();

    let mut blocks = Vec::with_capacity(table.n_params() + 1);
    for n in 0..=table.n_params() {
        let vals = table.term_values(n);
        let coef: Vec<f64> = mesh
            .triangle_edges
            .iter()
            .map(|e| (vals[e[0]] + vals[e[1]] + vals[e[2]]) / 3.0)
            .collect();
        blocks.push(assemble_stiffness(&mesh, &pattern, &coef));
    }
    let x_inner = assemble_stiffness(&mesh, &pattern, &vec![1.0; n_tri]);

    let fq: Vec<f64> = qpts.iter().map(|&x| source(x)).collect();
    let load = assemble_load(&mesh, &fq);
    let mean_weights = assemble_load(&mesh, &vec![1.0; qpts.len()]);

    let symbolic = CscSymbolicCholesky::factor(pattern);
    let x_factor = CscCholesky::factor_numerical(symbolic.clone(), x_inner.values())
        .map_err(|_| Error::InvalidArgument("X inner product is not positive definite".into()))?;

    Ok(FemSystem {
        mesh,
        stiffness_blocks: blocks,
        load,
        x_inner,
        mean_weights,
        coefficients: Arc::new(table),
        symbolic,
        x_factor,
        solver: SolverOptions::default(),
        fem_solves: AtomicUsize::new(0),
    })
}

fn assemble_stiffness(mesh: &Mesh, pattern: &SparsityPattern, coef: &[f64]) -> CsrMatrix<f64> {
    let mut values = vec![0.0; pattern.nnz()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let g = mesh.gradients(t);
        let scale = mesh.signed_area(t) * coef[t];
        for a in 0..3 {
            let Some(da) = mesh.interior_dof[tri[a]] else { continue };
            let lane = pattern.lane(da);
            let start = pattern.major_offsets()[da];
            for b in 0..3 {
                let Some(db) = mesh.interior_dof[tri[b]] else { continue };
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let k = scale * (g[lo][0] * g[hi][0] + g[lo][1] * g[hi][1]);
                let pos = lane.binary_search(&db).expect("entry in pattern");
                values[start + pos] += k;
            }
        }
    }
    CsrMatrix::try_from_pattern_and_values(pattern.clone(), values).expect("consistent values")
}

/// `int f phi_i` with the mid-edge rule; `fq` holds `f` at the edge midpoints.
fn assemble_load(mesh: &Mesh, fq: &[f64]) -> DVector<f64> {
    let mut load = DVector::zeros(mesh.n_dofs());
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let w = mesh.signed_area(t) / 3.0;
        let e = mesh.triangle_edges[t];
        // phi_a is 1/2 on the two edges touching vertex a and 0 on the opposite one
        let touching = [(e[2], e[0]), (e[0], e[1]), (e[1], e[2])];
        for (a, &(e1, e2)) in touching.iter().enumerate() {
            if let Some(d) = mesh.interior_dof[tri[a]] {
                load[d] += w * 0.5 * (fq[e1] + fq[e2]);
            }
        }
    }
    load
}

/// `y = A x` for a CSR matrix.
pub fn spmv(a: &CsrMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.nrows());
    spmv_values(a.pattern(), a.values(), x.as_slice(), out.as_mut_slice());
    out
}

fn spmv_values(pattern: &SparsityPattern, values: &[f64], x: &[f64], out: &mut [f64]) {
    let offsets = pattern.major_offsets();
    let cols = pattern.minor_indices();
    for (i, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for p in offsets[i]..offsets[i + 1] {
            s += values[p] * x[cols[p]];
        }
        *o = s;
    }
}

impl FemSystem {
    pub fn with_solver(mut self, solver: SolverOptions) -> Self {
        self.solver = solver;
        self
    }

    pub fn solver(&self) -> SolverOptions {
        self.solver
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn n_dofs(&self) -> usize {
        self.mesh.n_dofs()
    }

    pub fn n_params(&self) -> usize {
        self.stiffness_blocks.len() - 1
    }

    pub fn stiffness_blocks(&self) -> &[CsrMatrix<f64>] {
        &self.stiffness_blocks
    }

    pub fn load(&self) -> &DVector<f64> {
        &self.load
    }

    pub fn x_inner(&self) -> &CsrMatrix<f64> {
        &self.x_inner
    }

    /// `int phi_i dx`, the weights of the spatial mean functional.
    pub fn mean_weights(&self) -> &DVector<f64> {
        &self.mean_weights
    }

    /// Coefficient terms tabulated at the quadrature points.
    pub fn coefficients(&self) -> &Arc<CoefficientTable> {
        &self.coefficients
    }

    pub fn alpha_lb(&self, y: &[f64]) -> Result<f64> {
        self.coefficients.alpha_lb(y)
    }

    /// Number of full FEM solves performed so far.
    pub fn fem_solves(&self) -> usize {
        self.fem_solves.load(Ordering::Relaxed)
    }

    fn check_params(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: y.len(),
            });
        }
        Ok(())
    }

    fn check_len(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.n_dofs() {
            return Err(Error::DimensionMismatch {
                expected: self.n_dofs(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Nonzero values of `A(y)` on the shared pattern.
    fn operator_values(&self, y: &[f64]) -> Vec<f64> {
        let mut values = self.stiffness_blocks[0].values().to_vec();
        for (block, &yn) in self.stiffness_blocks[1..].iter().zip(y) {
            for (v, &b) in values.iter_mut().zip(block.values()) {
                *v += yn * b;
            }
        }
        values
    }

    /// `A(y) v`.
    pub fn apply_operator(&self, y: &[f64], v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_params(y)?;
        self.check_len(v)?;
        let values = self.operator_values(y);
        let mut out = DVector::zeros(self.n_dofs());
        spmv_values(self.x_inner.pattern(), &values, v.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// Solves `A(y) u = load`.
    pub fn solve_fem(&self, y: &[f64]) -> Result<DVector<f64>> {
        self.solve_with_rhs(y, &self.load)
    }

    /// Solves `A(y) u = rhs`; counts as one FEM solve.
    pub fn solve_with_rhs(&self, y: &[f64], rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_params(y)?;
        self.check_len(rhs)?;
        let alpha_lb = self.alpha_lb(y)?;
        if !(alpha_lb > 0.0) {
            return Err(Error::NotCoercive { alpha_lb });
        }
        self.fem_solves.fetch_add(1, Ordering::Relaxed);
        let values = self.operator_values(y);
        let pattern = self.x_inner.pattern();
        match self.solver.method {
            SolverMethod::Direct => match CscCholesky::factor_numerical(self.symbolic.clone(), &values) {
                Ok(factor) => self.direct_solve(&factor, pattern, &values, rhs),
                Err(_) => self.cg(pattern, &values, rhs).map(|(u, _)| u),
            },
            SolverMethod::ConjugateGradient => self.cg(pattern, &values, rhs).map(|(u, _)| u),
        }
    }

    fn direct_solve(
        &self,
        factor: &CscCholesky<f64>,
        pattern: &SparsityPattern,
        values: &[f64],
        rhs: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let bnorm = rhs.norm();
        let mut u = DVector::from_column_slice(factor.solve(rhs).as_slice());
        let mut au = DVector::zeros(u.len());
        let mut rel = 0.0;
        // iterative refinement when the factorization alone misses the tolerance
        for _ in 0..3 {
            spmv_values(pattern, values, u.as_slice(), au.as_mut_slice());
            let r = rhs - &au;
            let rnorm = r.norm();
            rel = if bnorm > 0.0 { rnorm / bnorm } else { rnorm };
            if rnorm <= self.solver.rel_tol * bnorm {
                return Ok(u);
            }
            u += DVector::from_column_slice(factor.solve(&r).as_slice());
        }
        Err(Error::SolverNotConverged {
            residual: rel,
            iterations: 3,
        })
    }

    /// Jacobi-preconditioned conjugate gradients.
    fn cg(&self, pattern: &SparsityPattern, values: &[f64], rhs: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
        let j = rhs.len();
        let bnorm = rhs.norm();
        let mut x = DVector::zeros(j);
        if bnorm == 0.0 {
            return Ok((x, 0));
        }
        let mut diag = vec![0.0; j];
        for (i, d) in diag.iter_mut().enumerate() {
            let lane = pattern.lane(i);
            let start = pattern.major_offsets()[i];
            *d = values[start + lane.binary_search(&i).expect("diagonal in pattern")];
        }
        let mut r = rhs.clone();
        let mut z = DVector::from_iterator(j, r.iter().zip(&diag).map(|(ri, di)| ri / di));
        let mut p = z.clone();
        let mut ap = DVector::zeros(j);
        let mut rz = r.dot(&z);
        for it in 0..self.solver.max_iter {
            spmv_values(pattern, values, p.as_slice(), ap.as_mut_slice());
            let pap = p.dot(&ap);
            if !(pap > 0.0) {
                break;
            }
            let alpha = rz / pap;
            x.axpy(alpha, &p, 1.0);
            r.axpy(-alpha, &ap, 1.0);
            if r.norm() <= self.solver.rel_tol * bnorm {
                return Ok((x, it + 1));
            }
            for ((zi, ri), di) in z.iter_mut().zip(r.iter()).zip(&diag) {
                *zi = ri / di;
            }
            let rz_new = r.dot(&z);
            let beta = rz_new / rz;
            rz = rz_new;
            p.axpy(1.0, &z, beta);
        }
        Err(Error::SolverNotConverged {
            residual: r.norm() / bnorm,
            iterations: self.solver.max_iter,
        })
    }

    /// `sqrt(v^T X v)`.
    pub fn x_norm(&self, v: &DVector<f64>) -> Result<f64> {
        Ok(self.x_inner_product(v, v)?.max(0.0).sqrt())
    }

    /// `u^T X v`.
    pub fn x_inner_product(&self, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        self.check_len(u)?;
        self.check_len(v)?;
        Ok(u.dot(&spmv(&self.x_inner, v)))
    }

    /// Riesz representor: solves `X e = rhs`.
    pub fn riesz_solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(rhs)?;
        Ok(DVector::from_column_slice(self.x_factor.solve(rhs).as_slice()))
    }

    /// `||u - u_h||_{L^2}` with a degree-5 rule per triangle.
    pub fn l2_error(&self, u_h: &DVector<f64>, exact: impl Fn(Point) -> f64) -> Result<f64> {
        self.check_len(u_h)?;
        let nodal = self.mesh.vertex_values(u_h);
        let rule = seven_point_rule();
        let mut sum = 0.0;
        for (t, tri) in self.mesh.triangles.iter().enumerate() {
            let p = tri.map(|v| self.mesh.vertices[v]);
            let uv = tri.map(|v| nodal[v]);
            let area = self.mesh.signed_area(t);
            for (bary, w) in &rule {
                let x = [
                    bary[0] * p[0][0] + bary[1] * p[1][0] + bary[2] * p[2][0],
                    bary[0] * p[0][1] + bary[1] * p[1][1] + bary[2] * p[2][1],
                ];
                let uh = bary[0] * uv[0] + bary[1] * uv[1] + bary[2] * uv[2];
                sum += area * w * (exact(x) - uh).powi(2);
            }
        }
        Ok(sum.sqrt())
    }

    /// `||grad(u - u_h)||_{L^2}`, the `X`-norm error against an exact gradient.
    pub fn x_error(&self, u_h: &DVector<f64>, grad_exact: impl Fn(Point) -> [f64; 2]) -> Result<f64> {
        self.check_len(u_h)?;
        let nodal = self.mesh.vertex_values(u_h);
        let rule = seven_point_rule();
        let mut sum = 0.0;
        for (t, tri) in self.mesh.triangles.iter().enumerate() {
            let p = tri.map(|v| self.mesh.vertices[v]);
            let g = self.mesh.gradients(t);
            let mut gh = [0.0; 2];
            for a in 0..3 {
                gh[0] += nodal[tri[a]] * g[a][0];
                gh[1] += nodal[tri[a]] * g[a][1];
            }
            let area = self.mesh.signed_area(t);
            for (bary, w) in &rule {
                let x = [
                    bary[0] * p[0][0] + bary[1] * p[1][0] + bary[2] * p[2][0],
                    bary[0] * p[0][1] + bary[1] * p[1][1] + bary[2] * p[2][1],
                ];
                let ge = grad_exact(x);
                sum += area * w * ((ge[0] - gh[0]).powi(2) + (ge[1] - gh[1]).powi(2));
            }
        }
        Ok(sum.sqrt())
    }

    /// CSC view of `A(y)` (symmetric, so the CSR arrays are reused).
    pub fn operator_matrix(&self, y: &[f64]) -> Result<CscMatrix<f64>> {
        self.check_params(y)?;
        let values = self.operator_values(y);
        Ok(CscMatrix::try_from_pattern_and_values(self.x_inner.pattern().clone(), values).expect("consistent values"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn unit_field(mesh: &Mesh, params: &[f64]) -> AffineField {
        AffineField::constant(1.0, params, &mesh.quadrature_points()).unwrap()
    }

    fn system(n: usize, params: &[f64], f: &dyn Fn(Point) -> f64) -> FemSystem {
        let mesh = build_mesh(n).unwrap();
        let field = unit_field(&mesh, params);
        assemble_affine(mesh, &field, f).unwrap()
    }

    fn dense(a: &CsrMatrix<f64>) -> nalgebra::DMatrix<f64> {
        let mut d = nalgebra::DMatrix::zeros(a.nrows(), a.ncols());
        for (i, j, v) in a.triplet_iter() {
            d[(i, j)] = *v;
        }
        d
    }

    #[test]
    fn mesh_counts() {
        for (n, nv, nt, nd) in [(2, 9, 8, 1), (4, 25, 32, 9), (256, 66049, 131072, 65025)] {
            let m = build_mesh(n).unwrap();
            assert_eq!(m.vertices().len(), nv);
            assert_eq!(m.triangles().len(), nt);
            assert_eq!(m.n_dofs(), nd);
        }
        assert!(matches!(build_mesh(1), Err(Error::MeshTooCoarse(1))));
    }

    #[test]
    fn mesh_orientation_and_boundary() {
        let m = build_mesh(5).unwrap();
        for t in 0..m.triangles().len() {
            assert!(m.signed_area(t) > 0.0);
        }
        let total: f64 = (0..m.triangles().len()).map(|t| m.signed_area(t)).sum();
        assert!((total - 1.0).abs() < 1e-14);
        for (v, p) in m.vertices().iter().enumerate() {
            let on_boundary = p[0] == 0.0 || p[0] == 1.0 || p[1] == 0.0 || p[1] == 1.0;
            assert_eq!(m.interior_dof(v).is_none(), on_boundary);
        }
    }

    #[test]
    fn unit_block_equals_x_inner() {
        let s = system(6, &[0.0], &|_| 1.0);
        assert_eq!(s.stiffness_blocks()[0].values(), s.x_inner().values());
        assert_eq!(s.stiffness_blocks().len(), 2);
    }

    #[test]
    fn matrices_are_exactly_symmetric() {
        let mesh = build_mesh(7).unwrap();
        let field = crate::random_field::build_fourier_field(&Default::default(), &mesh.quadrature_points()).unwrap();
        let s = assemble_affine(mesh, &field, &|_| 1.0).unwrap();
        assert_eq!(s.stiffness_blocks().len(), 6);
        for a in s.stiffness_blocks().iter().chain(std::iter::once(s.x_inner())) {
            let d = dense(a);
            assert_eq!(d, d.transpose());
        }
    }

    #[test]
    fn zero_source_gives_zero_solution() {
        let s = system(5, &[0.2], &|_| 0.0);
        assert!(s.load().iter().all(|&v| v == 0.0));
        let u = s.solve_fem(&[0.3]).unwrap();
        assert!(u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_coercive_parameter_rejected() {
        let s = system(4, &[2.0], &|_| 1.0);
        assert!(matches!(s.solve_fem(&[-0.6]), Err(Error::NotCoercive { .. })));
        assert!(s.solve_fem(&[0.3]).is_ok());
        assert!(matches!(s.solve_fem(&[0.3, 0.1]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn cg_matches_direct() {
        let s = system(12, &[0.4], &|x| 1.0 + x[0]);
        let direct = s.solve_fem(&[0.5]).unwrap();
        let s = s.with_solver(SolverOptions {
            method: SolverMethod::ConjugateGradient,
            ..Default::default()
        });
        let iter = s.solve_fem(&[0.5]).unwrap();
        assert!((&direct - &iter).norm() <= 1e-10 * direct.norm());
    }

    #[test]
    fn galerkin_residual_is_small() {
        let mesh = build_mesh(9).unwrap();
        let field = crate::random_field::build_fourier_field(&Default::default(), &mesh.quadrature_points()).unwrap();
        let s = assemble_affine(mesh, &field, &|_| 1.0).unwrap();
        let y = [0.7, -0.4, 0.1, 0.9, -1.0];
        let u = s.solve_fem(&y).unwrap();
        let r = s.load() - s.apply_operator(&y, &u).unwrap();
        let scale = s.load().norm();
        assert!(r.amax() <= 1e-12 * scale, "{}", r.amax());
    }

    #[test]
    fn x_norm_definition_and_riesz_identity() {
        let s = system(8, &[0.0], &|_| 1.0);
        assert_eq!(s.x_norm(&DVector::zeros(s.n_dofs())).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rhs = DVector::from_fn(s.n_dofs(), |_, _| rng.random_range(-1.0..1.0));
        let e = s.riesz_solve(&rhs).unwrap();
        let lhs = s.x_norm(&e).unwrap().powi(2);
        let rhs_dot = rhs.dot(&e);
        assert!((lhs - rhs_dot).abs() <= 1e-12 * rhs_dot.abs());
        assert!(s.riesz_solve(&DVector::zeros(s.n_dofs())).unwrap().iter().all(|&v| v == 0.0));
        // same system as the a = 1 FEM problem
        let fem = s.solve_fem(&[0.0]).unwrap();
        let riesz = s.riesz_solve(s.load()).unwrap();
        assert!((&fem - &riesz).norm() <= 1e-13 * fem.norm());
        assert!(s.x_norm(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn interpolant_x_norm_approaches_seminorm() {
        let u = |x: Point| (PI * x[0]).sin() * (PI * x[1]).sin();
        let exact = PI / 2f64.sqrt();
        let mut prev = f64::INFINITY;
        for n in [8, 16, 32, 64] {
            let s = system(n, &[0.0], &|_| 1.0);
            let err = (s.x_norm(&s.mesh().interpolate(u)).unwrap() - exact).abs();
            assert!(err < prev);
            prev = err;
        }
        assert!(prev < 2e-3, "{prev}");
    }

    #[test]
    fn prolongation_is_exact_for_linear_pieces() {
        let coarse = build_mesh(4).unwrap();
        let fine = build_mesh(8).unwrap();
        let f = |x: Point| x[0] * (1.0 - x[0]) * x[1] * (1.0 - x[1]);
        let uc = coarse.interpolate(f);
        let uf = coarse.prolongate(&fine, &uc).unwrap();
        // coarse nodes are kept
        for d in 0..coarse.n_dofs() {
            let p = coarse.vertices()[coarse.dof_vertex(d)];
            let fv = (0..fine.n_dofs()).find(|&k| fine.vertices()[fine.dof_vertex(k)] == p).unwrap();
            assert_eq!(uf[fv], uc[d]);
        }
        // the fine X-norm of the prolongation equals the coarse X-norm
        let field_c = unit_field(&coarse, &[0.0]);
        let field_f = unit_field(&fine, &[0.0]);
        let sc = assemble_affine(coarse.clone(), &field_c, &|_| 1.0).unwrap();
        let sf = assemble_affine(fine.clone(), &field_f, &|_| 1.0).unwrap();
        let (nc, nf) = (sc.x_norm(&uc).unwrap(), sf.x_norm(&uf).unwrap());
        assert!((nc - nf).abs() < 1e-14, "{nc} vs {nf}");
        assert!(coarse.prolongate(&coarse, &uc).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn coercivity_quadratic_form(
            y in proptest::collection::vec(-1.0f64..=1.0, 5),
            seed in 0u64..1000,
        ) {
            let mesh = build_mesh(6).unwrap();
            let field = crate::random_field::build_fourier_field(&Default::default(), &mesh.quadrature_points()).unwrap();
            let s = assemble_affine(mesh, &field, &|_| 1.0).unwrap();
            let alpha = s.alpha_lb(&y).unwrap();
            prop_assert!(alpha > 0.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..100 {
                let u = DVector::from_fn(s.n_dofs(), |_, _| rng.random_range(-1.0..1.0));
                let q = u.dot(&s.apply_operator(&y, &u).unwrap());
                let x2 = s.x_norm(&u).unwrap().powi(2);
                prop_assert!(q >= alpha * x2 * (1.0 - 1e-12));
            }
        }
    }
}
