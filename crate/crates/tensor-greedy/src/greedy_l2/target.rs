//! Target functions the greedy decomposition can approximate.
//!
//! Each variant knows how to project itself onto a rank-one test direction
//! (one free dimension, the others frozen), which is all the alternating
//! fixed point needs:
//!
//! * `Separated`: an existing sum of rank-one terms (Fubini products),
//! * `BasketPut`: the cube payoff `(K - mean(x))_+` with support-aware exact
//!   per-cell integration,
//! * `WeightedAffine`: `(c0 + sum_i c1_i psi_i(x_i)) * prod_l w_l(x_l)` given
//!   per-dimension moment blocks (used for payoff-times-density pricing),
//! * `DenseGrid`: the P1 interpolant of tabulated nodal values (used for
//!   mapped payoffs as solver initial conditions).

use crate::error::{Error, Result};
use crate::fem1d::{Mesh1D, Tridiagonal};
use crate::greedy_l2::slice::{product_integral, sliced_product_integral};
use crate::tensor::SeparatedFunction;

/// Maximum dense-grid size a target may carry (memory guard).
const MAX_GRID_VALUES: usize = 30_000_000;

/// Affine-times-product-weight target:
/// `h(x) = (c0 + sum_i c1[i] * psi_i(x_i)) * prod_l w_l(x_l)`.
///
/// Stored as exact per-dimension moments rather than callables:
/// `a0[l][m] = int phi_m w_l`, `a1[l][m] = int phi_m w_l psi_l`,
/// `b0[l] = int w_l^2`, `b1[l] = int w_l^2 psi_l`, `b2[l] = int w_l^2 psi_l^2`.
#[derive(Debug, Clone)]
pub struct WeightedAffineTarget {
    pub c0: f64,
    pub c1: Vec<f64>,
    pub a0: Vec<Vec<f64>>,
    pub a1: Vec<Vec<f64>>,
    pub b0: Vec<f64>,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

impl WeightedAffineTarget {
    pub fn dim(&self) -> usize {
        self.c1.len()
    }

    fn check(&self, meshes: &[Mesh1D]) -> Result<()> {
        let d = meshes.len();
        if self.c1.len() != d
            || self.a0.len() != d
            || self.a1.len() != d
            || self.b0.len() != d
            || self.b1.len() != d
            || self.b2.len() != d
        {
            return Err(Error::ShapeMismatch(
                "weighted-affine target blocks do not match dimension".into(),
            ));
        }
        for (l, m) in meshes.iter().enumerate() {
            if self.a0[l].len() != m.n_nodes() || self.a1[l].len() != m.n_nodes() {
                return Err(Error::ShapeMismatch(format!(
                    "weighted-affine moment vectors of dim {l} do not match the mesh"
                )));
            }
        }
        Ok(())
    }

    /// `<h, h>` by expanding the affine part (all cross products of moments).
    pub fn norm_sq(&self) -> f64 {
        let d = self.dim();
        let prod_except = |skip: &[usize]| -> f64 {
            (0..d)
                .filter(|l| !skip.contains(l))
                .map(|l| self.b0[l])
                .product()
        };
        let mut acc = self.c0 * self.c0 * prod_except(&[]);
        for i in 0..d {
            let skip_i = prod_except(&[i]);
            acc += 2.0 * self.c0 * self.c1[i] * self.b1[i] * skip_i;
            acc += self.c1[i] * self.c1[i] * self.b2[i] * skip_i;
            for j in 0..d {
                if j != i {
                    acc += self.c1[i] * self.c1[j] * self.b1[i] * self.b1[j]
                        * prod_except(&[i, j]);
                }
            }
        }
        acc
    }

    /// `<h, u>` for a separated `u` (factor-moment dot products).
    pub fn inner_with(&self, u: &SeparatedFunction) -> f64 {
        let d = self.dim();
        let mut acc = 0.0;
        for t in u.terms() {
            let dots0: Vec<f64> = (0..d)
                .map(|l| dot(&t.factors[l], &self.a0[l]))
                .collect();
            let prod0: f64 = dots0.iter().product();
            acc += self.c0 * prod0;
            for i in 0..d {
                let mut p = self.c1[i] * dot(&t.factors[i], &self.a1[i]);
                for (l, &d0) in dots0.iter().enumerate() {
                    if l != i {
                        p *= d0;
                    }
                }
                acc += p;
            }
        }
        acc
    }

    /// Integral of `h` over the cube (moment products; exact).
    pub fn integral(&self) -> f64 {
        let d = self.dim();
        let s0: Vec<f64> = self.a0.iter().map(|v| v.iter().sum()).collect();
        let s1: Vec<f64> = self.a1.iter().map(|v| v.iter().sum()).collect();
        let prod0: f64 = s0.iter().product();
        let mut acc = self.c0 * prod0;
        for i in 0..d {
            let mut p = self.c1[i] * s1[i];
            for (l, &v) in s0.iter().enumerate() {
                if l != i {
                    p *= v;
                }
            }
            acc += p;
        }
        acc
    }

    fn rhs(&self, i: usize, factors: &[Vec<f64>]) -> Vec<f64> {
        let d = self.dim();
        let dots0: Vec<f64> = (0..d)
            .map(|l| {
                if l == i {
                    1.0
                } else {
                    dot(&factors[l], &self.a0[l])
                }
            })
            .collect();
        let mut prod_others = 1.0;
        for (l, &v) in dots0.iter().enumerate() {
            if l != i {
                prod_others *= v;
            }
        }
        let n = self.a0[i].len();
        let mut out = vec![0.0; n];
        for m in 0..n {
            let mut v = self.c0 * self.a0[i][m] * prod_others
                + self.c1[i] * self.a1[i][m] * prod_others;
            for j in 0..d {
                if j == i {
                    continue;
                }
                let mut p = self.c1[j] * dot(&factors[j], &self.a1[j]) * self.a0[i][m];
                for (l, &d0) in dots0.iter().enumerate() {
                    if l != i && l != j {
                        p *= d0;
                    }
                }
                v += p;
            }
            out[m] = v;
        }
        out
    }
}

/// Dense nodal values over the full tensor grid (any dimension, memory
/// permitting); the target is the P1 interpolant of these values.
#[derive(Debug, Clone)]
pub struct DenseGridTarget {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl DenseGridTarget {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let total: usize = dims.iter().product();
        if total > MAX_GRID_VALUES {
            return Err(Error::Config(format!(
                "dense grid of {total} values exceeds the {MAX_GRID_VALUES} cap"
            )));
        }
        if values.len() != total {
            return Err(Error::ShapeMismatch(format!(
                "grid of {total} nodes given {} values",
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    /// Tabulates `f` at every node of the meshes.
    pub fn from_fn(meshes: &[Mesh1D], f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let dims: Vec<usize> = meshes.iter().map(|m| m.n_nodes()).collect();
        let total: usize = dims.iter().product();
        if total > MAX_GRID_VALUES {
            return Err(Error::Config(format!(
                "dense grid of {total} values exceeds the {MAX_GRID_VALUES} cap"
            )));
        }
        let mut values = Vec::with_capacity(total);
        let mut point = vec![0.0; meshes.len()];
        crate::tensor::for_each_multi_index(&dims, |idx| {
            for (l, &j) in idx.iter().enumerate() {
                point[l] = meshes[l].nodes()[j];
            }
            values.push(f(&point));
        });
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn node_value(&self, idx: &[usize]) -> f64 {
        let mut off = 0usize;
        let mut stride = 1usize;
        for l in (0..self.dims.len()).rev() {
            off += idx[l] * stride;
            stride *= self.dims[l];
        }
        self.values[off]
    }

    /// Contracts every dimension except `i` with the vectors `g_l`,
    /// returning the length-`dims[i]` vector
    /// `t[m] = sum_J values[J] * prod_{l != i} g_l[J_l]` for `J_i = m`.
    ///
    /// Cost is about `1.2 * prod(dims)` multiply-adds (one pass per axis).
    fn contract_except(&self, i: usize, g: &[Vec<f64>]) -> Vec<f64> {
        let d = self.dims.len();
        let mut buf = self.values.clone();
        let mut shape = self.dims.clone();
        // Contract trailing axes d-1, d-2, ..., i+1 (contiguous dot products).
        for l in (i + 1..d).rev() {
            let n = shape[l];
            let rows = buf.len() / n;
            let mut out = vec![0.0; rows];
            for (r, o) in out.iter_mut().enumerate() {
                let base = r * n;
                let mut acc = 0.0;
                for j in 0..n {
                    acc += buf[base + j] * g[l][j];
                }
                *o = acc;
            }
            buf = out;
            shape.truncate(l);
        }
        // Contract leading axes 0, 1, ..., i-1 (strided); after each pass the
        // former axis 0 is gone, so the current leading size is shape[0].
        for l in 0..i {
            let n = shape[0];
            let rest = buf.len() / n;
            let mut out = vec![0.0; rest];
            for j in 0..n {
                let base = j * rest;
                let gj = g[l][j];
                for (r, o) in out.iter_mut().enumerate() {
                    *o += buf[base + r] * gj;
                }
            }
            buf = out;
            shape.remove(0);
        }
        buf
    }
}

/// A function the greedy algorithm can decompose.
#[derive(Debug, Clone)]
pub enum TargetFunction {
    /// An already separated function on the same meshes.
    Separated(SeparatedFunction),
    /// The cube basket put `(strike - mean(x))_+`.
    BasketPut { strike: f64 },
    /// Affine-in-coordinates function times a product weight.
    WeightedAffine(WeightedAffineTarget),
    /// P1 interpolant of dense nodal values.
    DenseGrid(DenseGridTarget),
}

impl TargetFunction {
    pub(crate) fn check(&self, meshes: &[Mesh1D]) -> Result<()> {
        match self {
            TargetFunction::Separated(f) => {
                if f.meshes() != meshes {
                    return Err(Error::ShapeMismatch(
                        "separated target lives on different meshes".into(),
                    ));
                }
                Ok(())
            }
            TargetFunction::BasketPut { strike } => {
                if !strike.is_finite() {
                    return Err(Error::Config("strike must be finite".into()));
                }
                Ok(())
            }
            TargetFunction::WeightedAffine(w) => w.check(meshes),
            TargetFunction::DenseGrid(g) => {
                let dims: Vec<usize> = meshes.iter().map(|m| m.n_nodes()).collect();
                if g.dims != dims {
                    return Err(Error::ShapeMismatch(
                        "dense grid target does not match the meshes".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Nodal value of the target where that is meaningful (used by the
    /// full-grid error metric); `None` for moment-only targets.
    pub(crate) fn node_value(&self, meshes: &[Mesh1D], idx: &[usize]) -> Option<f64> {
        match self {
            TargetFunction::Separated(f) => Some(f.node_value(idx)),
            TargetFunction::BasketPut { strike } => {
                let d = meshes.len();
                let mean: f64 = idx
                    .iter()
                    .enumerate()
                    .map(|(l, &j)| meshes[l].nodes()[j])
                    .sum::<f64>()
                    / d as f64;
                Some((strike - mean).max(0.0))
            }
            TargetFunction::WeightedAffine(_) => None,
            TargetFunction::DenseGrid(g) => Some(g.node_value(idx)),
        }
    }

    /// Projection of the raw target onto the rank-one test direction:
    /// component `m` is `int phi_m(x_i) prod_{l != i} q_l(x_l) * target dx`.
    pub(crate) fn rhs(
        &self,
        meshes: &[Mesh1D],
        mass: &[Tridiagonal],
        i: usize,
        factors: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        match self {
            TargetFunction::Separated(f) => {
                let d = meshes.len();
                let n = meshes[i].n_nodes();
                let mut out = vec![0.0; n];
                for t in f.terms() {
                    let mut coef = 1.0;
                    for l in 0..d {
                        if l != i {
                            coef *= mass[l].bilinear(&factors[l], &t.factors[l])?;
                        }
                    }
                    if coef == 0.0 {
                        continue;
                    }
                    let mi = mass[i].apply(&t.factors[i])?;
                    for (o, v) in out.iter_mut().zip(&mi) {
                        *o += coef * v;
                    }
                }
                Ok(out)
            }
            TargetFunction::BasketPut { strike } => {
                basket_put_rhs(*strike, meshes, mass, i, factors, true)
            }
            TargetFunction::WeightedAffine(w) => Ok(w.rhs(i, factors)),
            TargetFunction::DenseGrid(g) => {
                let d = meshes.len();
                let mut gv: Vec<Vec<f64>> = Vec::with_capacity(d);
                for l in 0..d {
                    if l == i {
                        gv.push(Vec::new());
                    } else {
                        gv.push(mass[l].apply(&factors[l])?);
                    }
                }
                let t = g.contract_except(i, &gv);
                mass[i].apply(&t)
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lazy iterator over the multi-indices of grid cells on which the basket
/// put `(strike - mean(x))_+` is not identically zero, i.e. cells whose lower
/// corner satisfies `sum_l x_l < d * strike`. Subtrees whose index prefix
/// already exceeds the budget are pruned without materialization.
pub struct SupportCells<'a> {
    meshes: &'a [Mesh1D],
    threshold: f64,
    idx: Option<Vec<usize>>,
}

impl<'a> SupportCells<'a> {
    fn new(strike: f64, meshes: &'a [Mesh1D]) -> Self {
        let d = meshes.len();
        let threshold = strike * d as f64;
        let idx = if d > 0 && threshold > 0.0 {
            Some(vec![0usize; d])
        } else {
            None
        };
        Self {
            meshes,
            threshold,
            idx,
        }
    }

}

impl Iterator for SupportCells<'_> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Self::Item> {
        let current = self.idx.clone()?;
        // Advance to the next valid cell.
        let d = self.meshes.len();
        let idx = self.idx.as_mut().expect("checked above");
        let mut l = d;
        loop {
            if l == 0 {
                self.idx = None;
                break;
            }
            l -= 1;
            idx[l] += 1;
            let within = idx[l] < self.meshes[l].n_intervals();
            if within {
                let p: f64 = (0..=l).map(|j| self.meshes[j].nodes()[idx[j]]).sum();
                if p < self.threshold {
                    for v in idx.iter_mut().skip(l + 1) {
                        *v = 0;
                    }
                    break;
                }
                // Larger idx[l] only increases the prefix: carry.
            }
            idx[l] = 0;
        }
        Some(current)
    }
}

/// Iterates the cells intersecting the support of the cube basket put.
pub fn payoff_support_cells(strike: f64, meshes: &[Mesh1D]) -> SupportCells<'_> {
    SupportCells::new(strike, meshes)
}

/// Exact projection of the basket put onto a rank-one test direction.
///
/// `restricted = true` walks only the payoff support; `false` walks every
/// cell (used to validate that the restriction is exact). Cells fully inside
/// the support integrate the affine payoff in closed form; cells straddling
/// the kink `sum x_l = d K` are integrated exactly over the sliced region.
pub(crate) fn basket_put_rhs(
    strike: f64,
    meshes: &[Mesh1D],
    mass: &[Tridiagonal],
    i: usize,
    factors: &[Vec<f64>],
    restricted: bool,
) -> Result<Vec<f64>> {
    let d = meshes.len();
    let n_i = meshes[i].n_nodes();
    let inv_d = 1.0 / d as f64;
    if strike >= 1.0 {
        // The payoff is affine on the whole cube: global moment formulas.
        let ones: Vec<Vec<f64>> = meshes.iter().map(|m| vec![1.0; m.n_nodes()]).collect();
        let xs: Vec<Vec<f64>> = meshes.iter().map(|m| m.nodes().to_vec()).collect();
        let mut s0 = vec![1.0; d]; // int q_l
        let mut s1 = vec![0.0; d]; // int q_l x_l
        for l in 0..d {
            if l != i {
                s0[l] = mass[l].bilinear(&factors[l], &ones[l])?;
                s1[l] = mass[l].bilinear(&factors[l], &xs[l])?;
            }
        }
        let prod_except = |skip: &[usize]| -> f64 {
            (0..d)
                .filter(|l| *l != i && !skip.contains(l))
                .map(|l| s0[l])
                .product()
        };
        let prod0 = prod_except(&[]);
        let m_one = mass[i].apply(&ones[i])?;
        let m_x = mass[i].apply(&xs[i])?;
        let mut cross = 0.0;
        for j in 0..d {
            if j != i {
                cross += s1[j] * prod_except(&[j]);
            }
        }
        let mut out = vec![0.0; n_i];
        for m in 0..n_i {
            out[m] = (strike * prod0 - inv_d * cross) * m_one[m] - inv_d * prod0 * m_x[m];
        }
        return Ok(out);
    }
    if d > 3 {
        return Err(Error::UnsupportedDimension {
            dim: d,
            max: 3,
            context: "exact cut-cell basket-put integration below strike 1",
        });
    }

    let budget = strike * d as f64;
    let mut out = vec![0.0; n_i];

    let mut handle_cell = |cell: &[usize]| -> Result<()> {
        let lo: Vec<f64> = (0..d).map(|l| meshes[l].nodes()[cell[l]]).collect();
        let hi: Vec<f64> = (0..d).map(|l| meshes[l].nodes()[cell[l] + 1]).collect();
        let lo_sum: f64 = lo.iter().sum();
        if lo_sum >= budget {
            return Ok(()); // payoff identically zero here
        }
        let hi_sum: f64 = hi.iter().sum();
        let full = hi_sum <= budget;
        // Per-dimension affine restrictions of the frozen factors; the test
        // dimension gets each of its two local hats in turn.
        for (local, &m_idx) in [cell[i], cell[i] + 1].iter().enumerate() {
            let mut polys: Vec<Vec<f64>> = Vec::with_capacity(d);
            for l in 0..d {
                let (a, b) = (lo[l], hi[l]);
                let h = b - a;
                let poly = if l == i {
                    if local == 0 {
                        vec![b / h, -1.0 / h] // (b - x)/h
                    } else {
                        vec![-a / h, 1.0 / h] // (x - a)/h
                    }
                } else {
                    let (qa, qb) = (factors[l][cell[l]], factors[l][cell[l] + 1]);
                    // P1 on the cell: qa (b-x)/h + qb (x-a)/h.
                    vec![(qa * b - qb * a) / h, (qb - qa) / h]
                };
                polys.push(poly);
            }
            // (strike - mean x) * prod = strike * prod - (1/d) sum_j x_j prod.
            let base = if full {
                product_integral(&polys, &lo, &hi)
            } else {
                sliced_product_integral(&polys, &lo, &hi, budget)
            };
            let mut v = strike * base;
            for j in 0..d {
                let mut pj = polys.clone();
                // Multiply factor j by x (shift coefficients up one degree).
                let mut lifted = vec![0.0; pj[j].len() + 1];
                for (k, &c) in pj[j].iter().enumerate() {
                    lifted[k + 1] = c;
                }
                pj[j] = lifted;
                let with_x = if full {
                    product_integral(&pj, &lo, &hi)
                } else {
                    sliced_product_integral(&pj, &lo, &hi, budget)
                };
                v -= inv_d * with_x;
            }
            out[m_idx] += v;
        }
        Ok(())
    };

    if restricted {
        for cell in payoff_support_cells(strike, meshes) {
            handle_cell(&cell)?;
        }
    } else {
        let dims: Vec<usize> = meshes.iter().map(|m| m.n_intervals()).collect();
        let mut cells = Vec::new();
        crate::tensor::for_each_multi_index(&dims, |c| cells.push(c.to_vec()));
        for cell in cells {
            handle_cell(&cell)?;
        }
    }
    Ok(out)
}
