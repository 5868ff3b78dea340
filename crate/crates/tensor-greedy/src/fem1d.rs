//! P1 finite elements on a uniform mesh of the unit interval.
//!
//! Everything the separated solver needs in one dimension: the mesh, hat
//! function evaluation, and the five weighted tridiagonal matrices that appear
//! in the matricial Euler equations (mass, weighted stiffness, local drift,
//! center, weighted convection). All integrands are polynomials of degree at
//! most six on each element, so a fixed 4-point Gauss-Legendre rule per
//! element assembles every matrix exactly (up to rounding).

use crate::error::{Error, Result};

/// Uniform P1 mesh on [0, 1] with `N` intervals and `N + 1` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh1D {
    n_intervals: usize,
    h: f64,
    nodes: Vec<f64>,
}

impl Mesh1D {
    /// Builds the uniform mesh with `n` intervals (`n >= 2`).
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidMesh(format!(
                "need at least 2 intervals, got {n}"
            )));
        }
        let h = 1.0 / n as f64;
        let mut nodes: Vec<f64> = (0..=n).map(|j| j as f64 * h).collect();
        // Pin the right endpoint so x_N = 1 exactly.
        nodes[n] = 1.0;
        Ok(Self {
            n_intervals: n,
            h,
            nodes,
        })
    }

    pub fn n_intervals(&self) -> usize {
        self.n_intervals
    }

    /// Number of nodes, `N + 1`.
    pub fn n_nodes(&self) -> usize {
        self.n_intervals + 1
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Index of the element containing `x`, clamped to the last element at
    /// `x = 1`.
    pub fn element_of(&self, x: f64) -> usize {
        let e = (x / self.h) as usize;
        e.min(self.n_intervals - 1)
    }
}

/// Builds the uniform mesh with `n` intervals.
pub fn build_mesh(n: usize) -> Result<Mesh1D> {
    Mesh1D::new(n)
}

/// Evaluates `sum_j coeffs[j] * phi_j(x)` for the nodal hat basis.
///
/// Exact at nodes: `hat_eval(m, c, x_j) = c[j]`.
pub fn hat_eval(mesh: &Mesh1D, coeffs: &[f64], x: f64) -> Result<f64> {
    if coeffs.len() != mesh.n_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} coefficients, got {}",
            mesh.n_nodes(),
            coeffs.len()
        )));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::OutOfDomain(format!("x = {x} not in [0, 1]")));
    }
    let e = mesh.element_of(x);
    let t = (x - mesh.nodes[e]) / mesh.h;
    Ok(coeffs[e] * (1.0 - t) + coeffs[e + 1] * t)
}

/// Derivative of the P1 interpolant at `x`.
///
/// The derivative is piecewise constant; at a node the slope of the cell to
/// the left is used (deterministic convention for the control-variate
/// integrand, which almost surely evaluates off-node).
pub fn hat_deriv_eval(mesh: &Mesh1D, coeffs: &[f64], x: f64) -> Result<f64> {
    if coeffs.len() != mesh.n_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "expected {} coefficients, got {}",
            mesh.n_nodes(),
            coeffs.len()
        )));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::OutOfDomain(format!("x = {x} not in [0, 1]")));
    }
    let mut e = mesh.element_of(x);
    if e > 0 && x <= mesh.nodes[e] {
        e -= 1;
    }
    Ok((coeffs[e + 1] - coeffs[e]) / mesh.h)
}

/// The five matrix families of the separated Black-Scholes operator.
///
/// With `phi_i` the hat functions (prime = derivative, always on the column
/// index, i.e. the trial function):
///
/// * `Mass`:               `M_ij = int phi_i phi_j`
/// * `WeightedStiffness`:  `L_ij = int x^2 (1-x)^2 phi'_i phi'_j`
/// * `WeightedConvection`: `D_ij = int x (1-x) phi'_j phi_i`
/// * `Center`:             `C_ij = int (2x - 1) phi_i phi_j`
/// * `DriftLocal`:         `B_ij = int x (1-x) (r + sigma^2 x - sigma^2) phi'_j phi_i`
///
/// Scalar prefactors such as `sigma^2 / 2` or `rho sigma sigma / 2` are applied
/// where the matrices are combined, not here.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatrixKind {
    Mass,
    WeightedStiffness,
    WeightedConvection,
    Center,
    DriftLocal { sigma: f64, r: f64 },
}

/// Tridiagonal matrix of size `n x n` stored by bands.
///
/// `sub[i]` is the entry at row `i + 1`, column `i`; `sup[i]` at row `i`,
/// column `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    diag: Vec<f64>,
    sub: Vec<f64>,
    sup: Vec<f64>,
}

impl Tridiagonal {
    pub fn new(diag: Vec<f64>, sub: Vec<f64>, sup: Vec<f64>) -> Result<Self> {
        if diag.is_empty() || sub.len() + 1 != diag.len() || sup.len() + 1 != diag.len() {
            return Err(Error::ShapeMismatch(format!(
                "band lengths ({}, {}, {}) do not form a tridiagonal matrix",
                diag.len(),
                sub.len(),
                sup.len()
            )));
        }
        Ok(Self { diag, sub, sup })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            diag: vec![0.0; n],
            sub: vec![0.0; n.saturating_sub(1)],
            sup: vec![0.0; n.saturating_sub(1)],
        }
    }

    pub fn size(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn sub(&self) -> &[f64] {
        &self.sub
    }

    pub fn sup(&self) -> &[f64] {
        &self.sup
    }

    pub fn transpose(&self) -> Self {
        Self {
            diag: self.diag.clone(),
            sub: self.sup.clone(),
            sup: self.sub.clone(),
        }
    }

    /// Adds `c * other` in place.
    pub fn add_scaled(&mut self, other: &Tridiagonal, c: f64) {
        assert_eq!(self.size(), other.size(), "tridiagonal size mismatch");
        for (a, b) in self.diag.iter_mut().zip(&other.diag) {
            *a += c * b;
        }
        for (a, b) in self.sub.iter_mut().zip(&other.sub) {
            *a += c * b;
        }
        for (a, b) in self.sup.iter_mut().zip(&other.sup) {
            *a += c * b;
        }
    }

    /// Adds `c * (other + other^T)` in place.
    pub fn add_scaled_symmetrized(&mut self, other: &Tridiagonal, c: f64) {
        assert_eq!(self.size(), other.size(), "tridiagonal size mismatch");
        for (a, b) in self.diag.iter_mut().zip(&other.diag) {
            *a += 2.0 * c * b;
        }
        for i in 0..self.sub.len() {
            let s = other.sub[i] + other.sup[i];
            self.sub[i] += c * s;
            self.sup[i] += c * s;
        }
    }

    /// Matrix-vector product `T v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.size();
        if v.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "matrix of size {n} applied to vector of length {}",
                v.len()
            )));
        }
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = self.diag[i] * v[i];
            if i > 0 {
                acc += self.sub[i - 1] * v[i - 1];
            }
            if i + 1 < n {
                acc += self.sup[i] * v[i + 1];
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// Product `T^T v` without materializing the transpose.
    pub fn apply_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.size();
        if v.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "matrix of size {n} applied to vector of length {}",
                v.len()
            )));
        }
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = self.diag[i] * v[i];
            if i > 0 {
                acc += self.sup[i - 1] * v[i - 1];
            }
            if i + 1 < n {
                acc += self.sub[i] * v[i + 1];
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// Solves `T x = rhs` by the Thomas algorithm.
    ///
    /// Fails with the pivot index on a (near-)zero pivot. No pivoting is
    /// performed; the matrices arising here are strictly diagonally dominant
    /// or close to it.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.size();
        if rhs.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "matrix of size {n} solved against vector of length {}",
                rhs.len()
            )));
        }
        let scale = self
            .diag
            .iter()
            .chain(&self.sub)
            .chain(&self.sup)
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        let tiny = (scale * 1e-14).max(f64::MIN_POSITIVE);
        let mut c = vec![0.0; n]; // modified superdiagonal
        let mut d = vec![0.0; n]; // modified rhs
        let mut pivot = self.diag[0];
        if pivot.abs() <= tiny {
            return Err(Error::SingularSystem {
                index: 0,
                magnitude: pivot.abs(),
            });
        }
        c[0] = if n > 1 { self.sup[0] / pivot } else { 0.0 };
        d[0] = rhs[0] / pivot;
        for i in 1..n {
            pivot = self.diag[i] - self.sub[i - 1] * c[i - 1];
            if pivot.abs() <= tiny {
                return Err(Error::SingularSystem {
                    index: i,
                    magnitude: pivot.abs(),
                });
            }
            if i + 1 < n {
                c[i] = self.sup[i] / pivot;
            }
            d[i] = (rhs[i] - self.sub[i - 1] * d[i - 1]) / pivot;
        }
        let mut x = d;
        for i in (0..n - 1).rev() {
            x[i] -= c[i] * x[i + 1];
        }
        Ok(x)
    }

    /// Bilinear form `u^T T v`.
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        let n = self.size();
        if u.len() != n || v.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "bilinear form of size {n} on vectors of length {} and {}",
                u.len(),
                v.len()
            )));
        }
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = self.diag[i] * v[i];
            if i > 0 {
                row += self.sub[i - 1] * v[i - 1];
            }
            if i + 1 < n {
                row += self.sup[i] * v[i + 1];
            }
            acc += u[i] * row;
        }
        Ok(acc)
    }
}

/// Matrix-vector product (free-function form of [`Tridiagonal::apply`]).
pub fn tridiag_apply(t: &Tridiagonal, v: &[f64]) -> Result<Vec<f64>> {
    t.apply(v)
}

/// Thomas solve (free-function form of [`Tridiagonal::solve`]).
pub fn tridiag_solve(t: &Tridiagonal, rhs: &[f64]) -> Result<Vec<f64>> {
    t.solve(rhs)
}

/// `u^T T v` (free-function form of [`Tridiagonal::bilinear`]).
pub fn bilinear(t: &Tridiagonal, u: &[f64], v: &[f64]) -> Result<f64> {
    t.bilinear(u, v)
}

// 4-point Gauss-Legendre rule on [-1, 1]; exact through degree 7.
const GAUSS4_X: [f64; 4] = [
    -0.8611363115940526,
    -0.3399810435848563,
    0.3399810435848563,
    0.8611363115940526,
];
const GAUSS4_W: [f64; 4] = [
    0.34785484513745385,
    0.6521451548625461,
    0.6521451548625461,
    0.34785484513745385,
];

fn kind_weight(kind: MatrixKind, x: f64) -> f64 {
    match kind {
        MatrixKind::Mass => 1.0,
        MatrixKind::WeightedStiffness => {
            let w = x * (1.0 - x);
            w * w
        }
        MatrixKind::WeightedConvection => x * (1.0 - x),
        MatrixKind::Center => 2.0 * x - 1.0,
        MatrixKind::DriftLocal { sigma, r } => {
            x * (1.0 - x) * (r + sigma * sigma * (x - 1.0))
        }
    }
}

fn kind_derivative_flags(kind: MatrixKind) -> (bool, bool) {
    // (trial differentiated, test differentiated)
    match kind {
        MatrixKind::Mass | MatrixKind::Center => (false, false),
        MatrixKind::WeightedStiffness => (true, true),
        MatrixKind::WeightedConvection | MatrixKind::DriftLocal { .. } => (true, false),
    }
}

/// Assembles one of the five matrix kinds on `mesh`, exactly.
pub fn assemble(kind: MatrixKind, mesh: &Mesh1D) -> Tridiagonal {
    let n = mesh.n_intervals();
    let h = mesh.h();
    let (dtrial, dtest) = kind_derivative_flags(kind);
    let mut t = Tridiagonal::zeros(n + 1);
    for e in 0..n {
        let a = mesh.nodes()[e];
        let mid = a + 0.5 * h;
        let half = 0.5 * h;
        let mut local = [[0.0f64; 2]; 2];
        for (gx, gw) in GAUSS4_X.iter().zip(GAUSS4_W) {
            let x = mid + half * gx;
            let w = kind_weight(kind, x) * gw * half;
            let t_loc = (x - a) / h;
            // Local basis values and slopes: index 0 is the left node.
            let val = [1.0 - t_loc, t_loc];
            let der = [-1.0 / h, 1.0 / h];
            for (row, lrow) in local.iter_mut().enumerate() {
                let test = if dtest { der[row] } else { val[row] };
                for (col, entry) in lrow.iter_mut().enumerate() {
                    let trial = if dtrial { der[col] } else { val[col] };
                    // Associate as w * (trial * test) so symmetric kinds come
                    // out bitwise symmetric.
                    *entry += w * (trial * test);
                }
            }
        }
        t.diag[e] += local[0][0];
        t.diag[e + 1] += local[1][1];
        t.sup[e] += local[0][1]; // row e, col e+1
        t.sub[e] += local[1][0]; // row e+1, col e
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mesh(n: usize) -> Mesh1D {
        Mesh1D::new(n).unwrap()
    }

    // Reference assembly by brute-force high-order quadrature over global hat
    // functions, independent of the per-element path above.
    fn dense_oracle(kind: MatrixKind, m: &Mesh1D) -> Vec<Vec<f64>> {
        let n = m.n_nodes();
        let (dtrial, dtest) = kind_derivative_flags(kind);
        let hat = |j: usize, x: f64| -> f64 {
            let xj = m.nodes()[j];
            let t = 1.0 - (x - xj).abs() / m.h();
            t.max(0.0)
        };
        let hat_d = |j: usize, x: f64| -> f64 {
            let xj = m.nodes()[j];
            if x < xj - m.h() || x > xj + m.h() {
                0.0
            } else if x < xj {
                1.0 / m.h()
            } else {
                -1.0 / m.h()
            }
        };
        let mut out = vec![vec![0.0; n]; n];
        let panels = 40 * m.n_intervals();
        for (i, row) in out.iter_mut().enumerate() {
            for (j, entry) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for p in 0..panels {
                    let a = p as f64 / panels as f64;
                    let b = (p + 1) as f64 / panels as f64;
                    for (gx, gw) in GAUSS4_X.iter().zip(GAUSS4_W) {
                        let x = 0.5 * (a + b) + 0.5 * (b - a) * gx;
                        let trial = if dtrial { hat_d(j, x) } else { hat(j, x) };
                        let test = if dtest { hat_d(i, x) } else { hat(i, x) };
                        acc += kind_weight(kind, x) * trial * test * gw * 0.5 * (b - a);
                    }
                }
                *entry = acc;
            }
        }
        out
    }

    fn to_dense(t: &Tridiagonal) -> Vec<Vec<f64>> {
        let n = t.size();
        let mut out = vec![vec![0.0; n]; n];
        for i in 0..n {
            out[i][i] = t.diag()[i];
            if i + 1 < n {
                out[i][i + 1] = t.sup()[i];
                out[i + 1][i] = t.sub()[i];
            }
        }
        out
    }

    #[test]
    fn rejects_tiny_mesh() {
        assert!(Mesh1D::new(1).is_err());
        assert!(Mesh1D::new(0).is_err());
    }

    #[test]
    fn mesh_nodes_cover_unit_interval() {
        let m = mesh(10);
        assert_eq!(m.n_nodes(), 11);
        assert_eq!(m.nodes()[0], 0.0);
        assert_eq!(m.nodes()[10], 1.0);
        assert!((m.h() - 0.1).abs() < 1e-15);
        let m30 = mesh(30);
        assert_eq!(m30.n_nodes(), 31);
        assert!((m30.h() - 1.0 / 30.0).abs() < 1e-16);
    }

    #[test]
    fn hat_eval_partition_of_unity_and_nodal_basis() {
        let m = mesh(7);
        let ones = vec![1.0; 8];
        for k in 0..=100 {
            let x = k as f64 / 100.0;
            assert!((hat_eval(&m, &ones, x).unwrap() - 1.0).abs() < 1e-14);
        }
        let mut e3 = vec![0.0; 8];
        e3[3] = 1.0;
        assert!((hat_eval(&m, &e3, m.nodes()[3]).unwrap() - 1.0).abs() < 1e-14);
        assert!(hat_eval(&m, &e3, m.nodes()[2]).unwrap().abs() < 1e-14);
        assert!(hat_eval(&m, &e3, m.nodes()[4]).unwrap().abs() < 1e-14);
    }

    #[test]
    fn hat_eval_linear_interpolation() {
        let m = mesh(2);
        let c = vec![0.0, 1.0, 0.0];
        assert!((hat_eval(&m, &c, 0.25).unwrap() - 0.5).abs() < 1e-15);
        assert!(hat_eval(&m, &c, 1.2).is_err());
        assert!(hat_eval(&m, &c, -0.1).is_err());
    }

    #[test]
    fn hat_deriv_uses_left_cell_at_nodes() {
        let m = mesh(4);
        let c = vec![0.0, 1.0, 1.0, 0.5, 0.5];
        // At node 1 the left cell has slope 4, the right cell slope 0.
        assert!((hat_deriv_eval(&m, &c, 0.25).unwrap() - 4.0).abs() < 1e-12);
        assert!((hat_deriv_eval(&m, &c, 0.3).unwrap() - 0.0).abs() < 1e-12);
        assert!((hat_deriv_eval(&m, &c, 0.0).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn mass_matrix_closed_form() {
        let m = mesh(10);
        let t = assemble(MatrixKind::Mass, &m);
        let h = m.h();
        for i in 1..10 {
            assert!((t.diag()[i] - 2.0 * h / 3.0).abs() < 1e-15);
        }
        assert!((t.diag()[0] - h / 3.0).abs() < 1e-15);
        assert!((t.diag()[10] - h / 3.0).abs() < 1e-15);
        for i in 0..10 {
            assert!((t.sub()[i] - h / 6.0).abs() < 1e-15);
            assert!((t.sup()[i] - h / 6.0).abs() < 1e-15);
        }
        // Row sums are the integrals of the hats.
        let ones = vec![1.0; 11];
        let rows = t.apply(&ones).unwrap();
        assert!((rows[0] - h / 2.0).abs() < 1e-15);
        assert!((rows[5] - h).abs() < 1e-15);
        assert!((rows[10] - h / 2.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_stiffness_hand_value() {
        // For N = 2: L_00 = int_0^{1/2} x^2 (1-x)^2 * 4 dx = 1/15.
        let t = assemble(MatrixKind::WeightedStiffness, &mesh(2));
        assert!((t.diag()[0] - 1.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn all_kinds_match_dense_quadrature_oracle() {
        for n in [2usize, 3, 5, 8, 11, 16] {
            let m = mesh(n);
            for kind in [
                MatrixKind::Mass,
                MatrixKind::WeightedStiffness,
                MatrixKind::WeightedConvection,
                MatrixKind::Center,
                MatrixKind::DriftLocal { sigma: 0.3, r: 0.05 },
            ] {
                let t = to_dense(&assemble(kind, &m));
                let o = dense_oracle(kind, &m);
                for i in 0..m.n_nodes() {
                    for j in 0..m.n_nodes() {
                        assert!(
                            (t[i][j] - o[i][j]).abs() < 1e-12,
                            "{kind:?} N={n} entry ({i},{j}): {} vs {}",
                            t[i][j],
                            o[i][j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn symmetric_kinds_are_exactly_symmetric() {
        let m = mesh(9);
        for kind in [
            MatrixKind::Mass,
            MatrixKind::WeightedStiffness,
            MatrixKind::Center,
        ] {
            let t = assemble(kind, &m);
            for i in 0..t.sub().len() {
                assert_eq!(t.sub()[i], t.sup()[i], "{kind:?} off-band {i}");
            }
        }
    }

    #[test]
    fn apply_matches_dense_multiply() {
        let t = Tridiagonal::new(
            vec![2.0, -1.5, 3.0, 0.5, 1.0, 2.5],
            vec![0.3, -0.2, 0.7, 0.1, -0.4],
            vec![-0.5, 0.8, 0.2, -0.9, 0.6],
        )
        .unwrap();
        let v = [1.0, -2.0, 0.5, 3.0, -1.0, 0.25];
        let dense = to_dense(&t);
        let got = t.apply(&v).unwrap();
        for i in 0..6 {
            let want: f64 = (0..6).map(|j| dense[i][j] * v[j]).sum();
            assert!((got[i] - want).abs() < 1e-14);
        }
        let got_t = t.apply_transpose(&v).unwrap();
        for j in 0..6 {
            let want: f64 = (0..6).map(|i| dense[i][j] * v[i]).sum();
            assert!((got_t[j] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn solve_round_trips_apply() {
        let m = mesh(12);
        let t = assemble(MatrixKind::Mass, &m);
        let w: Vec<f64> = (0..13).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let rhs = t.apply(&w).unwrap();
        let back = t.solve(&rhs).unwrap();
        for (a, b) in back.iter().zip(&w) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn solve_symmetric_rhs_gives_symmetric_solution() {
        let t = Tridiagonal::new(vec![2.0, 2.0, 2.0], vec![-1.0, -1.0], vec![-1.0, -1.0])
            .unwrap();
        let x = t.solve(&[1.0, 0.0, 1.0]).unwrap();
        assert!((x[0] - x[2]).abs() < 1e-14);
    }

    #[test]
    fn zero_pivot_is_reported() {
        let t = Tridiagonal::new(vec![0.0, 1.0], vec![0.0], vec![0.0]).unwrap();
        match t.solve(&[1.0, 1.0]) {
            Err(Error::SingularSystem { index: 0, .. }) => {}
            other => panic!("expected singular system, got {other:?}"),
        }
    }

    #[test]
    fn bilinear_is_dot_with_apply() {
        let m = mesh(6);
        let t = assemble(MatrixKind::WeightedConvection, &m);
        let u: Vec<f64> = (0..7).map(|i| (i as f64 * 0.77).sin()).collect();
        let v: Vec<f64> = (0..7).map(|i| (i as f64 * 1.3).cos()).collect();
        let tv = t.apply(&v).unwrap();
        let dot: f64 = u.iter().zip(&tv).map(|(a, b)| a * b).sum();
        assert!((t.bilinear(&u, &v).unwrap() - dot).abs() < 1e-14);
    }

    #[test]
    fn mass_bilinear_integrates_constants_and_linears() {
        let m = mesh(20);
        let t = assemble(MatrixKind::Mass, &m);
        let ones = vec![1.0; 21];
        assert!((t.bilinear(&ones, &ones).unwrap() - 1.0).abs() < 1e-13);
        // P1 reproduces linears, so the interpolant of x integrates exactly:
        // x^T M x = int x^2 = 1/3 (within the O(h^2) band a lumped scheme
        // would need).
        let xs: Vec<f64> = m.nodes().to_vec();
        let got = t.bilinear(&xs, &xs).unwrap();
        assert!((got - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn symmetrized_add_matches_explicit_transpose() {
        let m = mesh(5);
        let d = assemble(MatrixKind::WeightedConvection, &m);
        let mut s = Tridiagonal::zeros(6);
        s.add_scaled_symmetrized(&d, 0.5);
        let mut expl = Tridiagonal::zeros(6);
        expl.add_scaled(&d, 0.5);
        expl.add_scaled(&d.transpose(), 0.5);
        assert_eq!(s, expl);
    }
}
