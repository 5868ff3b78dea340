//! Separated (sum-of-rank-one) functions on the unit cube.
//!
//! A separated function is `u(x) = sum_k prod_i r^i_k(x_i)` where each factor
//! `r^i_k` is a P1 finite element function on its own one-dimensional mesh.
//! This module provides the data structure plus all the algebra the solver
//! needs: pointwise evaluation, gradients, L2 inner products by Fubini, the
//! discrete relative-error metric on the full grid, and a two-dimensional
//! SVD-based recompression used as a test oracle.

use crate::error::{Error, Result};
use crate::fem1d::{self, assemble, MatrixKind, Mesh1D, Tridiagonal};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// One rank-one term: `d` coefficient vectors, factor `i` over mesh `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOneTerm {
    pub factors: Vec<Vec<f64>>,
}

impl RankOneTerm {
    pub fn new(factors: Vec<Vec<f64>>) -> Self {
        Self { factors }
    }

    pub fn dim(&self) -> usize {
        self.factors.len()
    }

    /// Constant rank-one term with every factor equal to `c^(1/d)`-free form:
    /// factor 0 carries `c`, the rest are ones.
    pub fn constant(meshes: &[Mesh1D], c: f64) -> Self {
        let factors = meshes
            .iter()
            .enumerate()
            .map(|(i, m)| vec![if i == 0 { c } else { 1.0 }; m.n_nodes()])
            .collect();
        Self { factors }
    }
}

/// Sum of rank-one terms over a shared list of per-dimension meshes.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparatedFunction {
    meshes: Vec<Mesh1D>,
    terms: Vec<RankOneTerm>,
}

impl SeparatedFunction {
    /// Empty (zero) function on the given meshes.
    pub fn zero(meshes: Vec<Mesh1D>) -> Self {
        Self {
            meshes,
            terms: Vec::new(),
        }
    }

    pub fn from_terms(meshes: Vec<Mesh1D>, terms: Vec<RankOneTerm>) -> Result<Self> {
        let mut f = Self::zero(meshes);
        for t in terms {
            f.push_term(t)?;
        }
        Ok(f)
    }

    pub fn dim(&self) -> usize {
        self.meshes.len()
    }

    pub fn meshes(&self) -> &[Mesh1D] {
        &self.meshes
    }

    pub fn terms(&self) -> &[RankOneTerm] {
        &self.terms
    }

    /// Current rank (number of retained terms).
    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    pub fn push_term(&mut self, term: RankOneTerm) -> Result<()> {
        if term.dim() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "term has {} factors, function has dimension {}",
                term.dim(),
                self.dim()
            )));
        }
        for (i, (f, m)) in term.factors.iter().zip(&self.meshes).enumerate() {
            if f.len() != m.n_nodes() {
                return Err(Error::ShapeMismatch(format!(
                    "factor {i} has length {}, mesh has {} nodes",
                    f.len(),
                    m.n_nodes()
                )));
            }
        }
        self.terms.push(term);
        Ok(())
    }

    /// Truncates to the first `n` terms (greedy prefix).
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            meshes: self.meshes.clone(),
            terms: self.terms[..n.min(self.terms.len())].to_vec(),
        }
    }

    /// Concatenation `self + other` (no recompression).
    pub fn add(&self, other: &SeparatedFunction) -> Result<Self> {
        if self.meshes != other.meshes {
            return Err(Error::ShapeMismatch(
                "cannot add separated functions on different meshes".into(),
            ));
        }
        let mut out = self.clone();
        out.terms.extend(other.terms.iter().cloned());
        Ok(out)
    }

    /// Nodal value at a grid multi-index (P1 interpolants are exact at nodes,
    /// so this is a pure table lookup over the factors).
    pub fn node_value(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.dim());
        let mut acc = 0.0;
        for t in &self.terms {
            let mut p = 1.0;
            for (f, &j) in t.factors.iter().zip(idx) {
                p *= f[j];
            }
            acc += p;
        }
        acc
    }
}

/// Serialized layout: `{dim, n: intervals per dim, terms: [[factor vectors]]}`.
#[derive(Serialize, Deserialize)]
struct SeparatedFunctionRepr {
    dim: usize,
    n: Vec<usize>,
    terms: Vec<Vec<Vec<f64>>>,
}

impl Serialize for SeparatedFunction {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SeparatedFunctionRepr {
            dim: self.dim(),
            n: self.meshes.iter().map(|m| m.n_intervals()).collect(),
            terms: self.terms.iter().map(|t| t.factors.clone()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SeparatedFunction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = SeparatedFunctionRepr::deserialize(d)?;
        if repr.n.len() != repr.dim {
            return Err(D::Error::custom(format!(
                "dim {} does not match {} mesh sizes",
                repr.dim,
                repr.n.len()
            )));
        }
        let meshes = repr
            .n
            .iter()
            .map(|&n| Mesh1D::new(n))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| D::Error::custom(e.to_string()))?;
        let terms = repr.terms.into_iter().map(RankOneTerm::new).collect();
        SeparatedFunction::from_terms(meshes, terms).map_err(|e| D::Error::custom(e.to_string()))
    }
}

/// Visits every multi-index with `idx[i] < dims[i]`, last index fastest.
pub(crate) fn for_each_multi_index(dims: &[usize], mut f: impl FnMut(&[usize])) {
    if dims.iter().any(|&n| n == 0) {
        return;
    }
    let mut idx = vec![0usize; dims.len()];
    loop {
        f(&idx);
        let mut k = dims.len();
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < dims[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Dense nodal values over the full tensor grid; guarded to `d <= 4`.
#[derive(Debug, Clone)]
pub struct GridFunction {
    meshes: Vec<Mesh1D>,
    values: Vec<f64>,
}

impl GridFunction {
    const MAX_DIM: usize = 4;

    fn strides(meshes: &[Mesh1D]) -> Vec<usize> {
        let mut strides = vec![1usize; meshes.len()];
        for i in (0..meshes.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * meshes[i + 1].n_nodes();
        }
        strides
    }

    fn guard(meshes: &[Mesh1D], context: &'static str) -> Result<()> {
        if meshes.len() > Self::MAX_DIM {
            return Err(Error::UnsupportedDimension {
                dim: meshes.len(),
                max: Self::MAX_DIM,
                context,
            });
        }
        Ok(())
    }

    /// Tabulates `f` at every grid node.
    pub fn from_fn(meshes: Vec<Mesh1D>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        Self::guard(&meshes, "dense grid tabulation")?;
        let dims: Vec<usize> = meshes.iter().map(|m| m.n_nodes()).collect();
        let total: usize = dims.iter().product();
        let mut values = Vec::with_capacity(total);
        let mut point = vec![0.0; meshes.len()];
        for_each_multi_index(&dims, |idx| {
            for (i, &j) in idx.iter().enumerate() {
                point[i] = meshes[i].nodes()[j];
            }
            values.push(f(&point));
        });
        Ok(Self { meshes, values })
    }

    /// Wraps existing nodal values (row-major, last dimension fastest).
    pub(crate) fn from_values(meshes: Vec<Mesh1D>, values: Vec<f64>) -> Result<Self> {
        Self::guard(&meshes, "dense grid tabulation")?;
        let total: usize = meshes.iter().map(|m| m.n_nodes()).product();
        if values.len() != total {
            return Err(Error::ShapeMismatch(format!(
                "grid of {total} nodes given {} values",
                values.len()
            )));
        }
        Ok(Self { meshes, values })
    }

    /// Tabulates a separated function (exact: nodal values are products of
    /// factor coefficients).
    pub fn from_separated(u: &SeparatedFunction) -> Result<Self> {
        Self::guard(u.meshes(), "dense grid tabulation")?;
        let dims: Vec<usize> = u.meshes().iter().map(|m| m.n_nodes()).collect();
        let total: usize = dims.iter().product();
        let mut values = vec![0.0; total];
        let strides = Self::strides(u.meshes());
        for t in u.terms() {
            for_each_multi_index(&dims, |multi| {
                let mut p = 1.0;
                let mut off = 0usize;
                for (i, &j) in multi.iter().enumerate() {
                    p *= t.factors[i][j];
                    off += strides[i] * j;
                }
                values[off] += p;
            });
        }
        Ok(Self {
            meshes: u.meshes().to_vec(),
            values,
        })
    }

    pub fn meshes(&self) -> &[Mesh1D] {
        &self.meshes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_at(&self, idx: &[usize]) -> f64 {
        let strides = Self::strides(&self.meshes);
        let off: usize = idx.iter().zip(&strides).map(|(&j, &s)| j * s).sum();
        self.values[off]
    }

    /// Subtracts the outer product of `term` in place.
    pub fn subtract_rank_one(&mut self, term: &RankOneTerm) {
        let dims: Vec<usize> = self.meshes.iter().map(|m| m.n_nodes()).collect();
        let strides = Self::strides(&self.meshes);
        for_each_multi_index(&dims, |multi| {
            let mut p = 1.0;
            let mut off = 0usize;
            for (i, &j) in multi.iter().enumerate() {
                p *= term.factors[i][j];
                off += strides[i] * j;
            }
            self.values[off] -= p;
        });
    }

    /// Discrete sum of squares over grid nodes with all indices in `1..=N`
    /// (the index-zero face is excluded).
    pub fn sum_sq_interior(&self) -> f64 {
        let dims: Vec<usize> = self.meshes.iter().map(|m| m.n_nodes()).collect();
        let strides = Self::strides(&self.meshes);
        let mut acc = 0.0;
        let shifted: Vec<usize> = dims.iter().map(|&n| n - 1).collect();
        for_each_multi_index(&shifted, |multi| {
            let mut off = 0usize;
            for (i, &j) in multi.iter().enumerate() {
                off += strides[i] * (j + 1);
            }
            let v = self.values[off];
            acc += v * v;
        });
        acc
    }
}

fn check_point(f: &SeparatedFunction, x: &[f64]) -> Result<()> {
    if x.len() != f.dim() {
        return Err(Error::ShapeMismatch(format!(
            "point has {} coordinates, function has dimension {}",
            x.len(),
            f.dim()
        )));
    }
    for (i, &xi) in x.iter().enumerate() {
        if !(0.0..=1.0).contains(&xi) {
            return Err(Error::OutOfDomain(format!(
                "coordinate {i} = {xi} not in [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Evaluates `f` at a point of the unit cube.
pub fn eval(f: &SeparatedFunction, x: &[f64]) -> Result<f64> {
    check_point(f, x)?;
    let mut acc = 0.0;
    for t in f.terms() {
        let mut p = 1.0;
        for (i, fac) in t.factors.iter().enumerate() {
            p *= fem1d::hat_eval(&f.meshes()[i], fac, x[i])?;
            if p == 0.0 {
                break;
            }
        }
        acc += p;
    }
    Ok(acc)
}

/// Gradient of `f` at a point; at mesh nodes the left-cell slope is used.
pub fn gradient_eval(f: &SeparatedFunction, x: &[f64]) -> Result<Vec<f64>> {
    check_point(f, x)?;
    let d = f.dim();
    let mut grad = vec![0.0; d];
    // Cache the factor values and slopes once per term.
    let mut vals = vec![0.0; d];
    let mut ders = vec![0.0; d];
    for t in f.terms() {
        for i in 0..d {
            vals[i] = fem1d::hat_eval(&f.meshes()[i], &t.factors[i], x[i])?;
            ders[i] = fem1d::hat_deriv_eval(&f.meshes()[i], &t.factors[i], x[i])?;
        }
        for (i, g) in grad.iter_mut().enumerate() {
            let mut p = ders[i];
            for (j, &v) in vals.iter().enumerate() {
                if j != i {
                    p *= v;
                }
            }
            *g += p;
        }
    }
    Ok(grad)
}

pub(crate) fn mass_matrices(meshes: &[Mesh1D]) -> Vec<Tridiagonal> {
    meshes.iter().map(|m| assemble(MatrixKind::Mass, m)).collect()
}

/// L2 inner product on the cube by Fubini:
/// `sum_{k,l} prod_i (f_{k,i}^T M_i g_{l,i})`.
pub fn inner_l2(f: &SeparatedFunction, g: &SeparatedFunction) -> Result<f64> {
    if f.meshes() != g.meshes() {
        return Err(Error::ShapeMismatch(
            "inner product requires shared meshes".into(),
        ));
    }
    let mass = mass_matrices(f.meshes());
    let mut acc = 0.0;
    for tf in f.terms() {
        // Precompute M g factors? rank(g) applications per tf; do bilinear directly.
        for tg in g.terms() {
            let mut p = 1.0;
            for (i, m) in mass.iter().enumerate() {
                p *= m.bilinear(&tf.factors[i], &tg.factors[i])?;
                if p == 0.0 {
                    break;
                }
            }
            acc += p;
        }
    }
    Ok(acc)
}

/// L2 norm, `sqrt(inner_l2(f, f))` with the tiny negative rounding clamped.
pub fn norm_l2(f: &SeparatedFunction) -> Result<f64> {
    Ok(inner_l2(f, f)?.max(0.0).sqrt())
}

/// Discrete relative error on the grid nodes with indices in `{1..N}^d`:
/// `sqrt(sum (f(x) - u(x))^2) / sqrt(sum f(x)^2)`.
pub fn relative_error_grid(
    f_exact: impl Fn(&[f64]) -> f64,
    u: &SeparatedFunction,
) -> Result<f64> {
    if u.dim() > GridFunction::MAX_DIM {
        return Err(Error::UnsupportedDimension {
            dim: u.dim(),
            max: GridFunction::MAX_DIM,
            context: "relative_error_grid",
        });
    }
    let dims: Vec<usize> = u.meshes().iter().map(|m| m.n_intervals()).collect();
    let mut num = 0.0;
    let mut den = 0.0;
    let d = u.dim();
    let mut point = vec![0.0; d];
    let mut idx1 = vec![0usize; d];
    for_each_multi_index(&dims, |multi| {
        for i in 0..d {
            idx1[i] = multi[i] + 1;
            point[i] = u.meshes()[i].nodes()[idx1[i]];
        }
        let fe = f_exact(&point);
        let ue = u.node_value(&idx1);
        num += (fe - ue) * (fe - ue);
        den += fe * fe;
    });
    if den <= f64::MIN_POSITIVE {
        return Err(Error::DegenerateReference);
    }
    Ok((num / den).sqrt())
}

/// Mass-weighted singular values of a two-dimensional separated function.
///
/// These are the singular values of `L1^T G L2` where `G = sum_k f_k g_k^T`
/// is the dense coefficient matrix and `M_i = L_i L_i^T` the mass Cholesky
/// factors, so that `sum sigma_l^2 = |f|_{L2}^2` exactly.
pub fn singular_values_2d(f: &SeparatedFunction) -> Result<Vec<f64>> {
    let (_, _, svd) = weighted_svd_2d(f)?;
    Ok(svd.singular_values.iter().copied().collect())
}

type WeightedSvd = (
    nalgebra::DMatrix<f64>,
    nalgebra::DMatrix<f64>,
    nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
);

fn weighted_svd_2d(f: &SeparatedFunction) -> Result<WeightedSvd> {
    use nalgebra::DMatrix;
    if f.dim() != 2 {
        return Err(Error::UnsupportedDimension {
            dim: f.dim(),
            max: 2,
            context: "two-dimensional SVD recompression",
        });
    }
    let n1 = f.meshes()[0].n_nodes();
    let n2 = f.meshes()[1].n_nodes();
    let mut g = DMatrix::<f64>::zeros(n1, n2);
    for t in f.terms() {
        for i in 0..n1 {
            for j in 0..n2 {
                g[(i, j)] += t.factors[0][i] * t.factors[1][j];
            }
        }
    }
    let mass = mass_matrices(f.meshes());
    let dense = |t: &Tridiagonal| -> DMatrix<f64> {
        let n = t.size();
        let mut m = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = t.diag()[i];
            if i + 1 < n {
                m[(i, i + 1)] = t.sup()[i];
                m[(i + 1, i)] = t.sub()[i];
            }
        }
        m
    };
    let l1 = nalgebra::Cholesky::new(dense(&mass[0]))
        .ok_or_else(|| Error::ModelRejection("mass matrix not positive definite".into()))?
        .l();
    let l2 = nalgebra::Cholesky::new(dense(&mass[1]))
        .ok_or_else(|| Error::ModelRejection("mass matrix not positive definite".into()))?
        .l();
    let b = l1.transpose() * g * &l2;
    let svd = b.svd(true, true);
    Ok((l1, l2, svd))
}

/// Rewrites a two-dimensional separated function as its Mass-weighted SVD:
/// terms ordered by decreasing singular value, numerically zero values
/// dropped. The result represents the same grid function up to rounding.
pub fn compress_svd_2d(f: &SeparatedFunction) -> Result<SeparatedFunction> {
    let (l1, l2, svd) = weighted_svd_2d(f)?;
    let u = svd.u.as_ref().expect("svd with u requested");
    let vt = svd.v_t.as_ref().expect("svd with v_t requested");
    let smax = svd.singular_values.iter().fold(0.0f64, |m, &s| m.max(s));
    let cutoff = smax * 1e-14;
    let mut out = SeparatedFunction::zero(f.meshes().to_vec());
    for (l, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        // a_l = L1^{-T} u_l * sigma_l ; b_l = L2^{-T} v_l.
        let ucol = u.column(l).into_owned();
        let vcol = vt.row(l).transpose().into_owned();
        let a = l1
            .transpose()
            .solve_upper_triangular(&ucol)
            .ok_or_else(|| Error::SingularSystem {
                index: 0,
                magnitude: 0.0,
            })?;
        let b = l2
            .transpose()
            .solve_upper_triangular(&vcol)
            .ok_or_else(|| Error::SingularSystem {
                index: 0,
                magnitude: 0.0,
            })?;
        let afac: Vec<f64> = a.iter().map(|&v| v * s).collect();
        let bfac: Vec<f64> = b.iter().copied().collect();
        out.push_term(RankOneTerm::new(vec![afac, bfac]))?;
    }
    Ok(out)
}
