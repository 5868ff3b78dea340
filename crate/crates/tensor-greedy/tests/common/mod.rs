//! Dense reference machinery for the integration tests: the mapped
//! Black-Scholes forms assembled by full tensor-grid Gauss quadrature of the
//! continuous coefficient fields. Nothing here reuses the library's
//! separated assembly or its closed-form element integrals, so agreement is
//! meaningful.
//!
//! Each test binary includes this module and uses its own subset.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use tensor_greedy::bs_model::{validate, ModelParams, Rho, ValidatedModel};
use tensor_greedy::fem1d::Mesh1D;
use tensor_greedy::tensor::{RankOneTerm, SeparatedFunction};

/// 5-point Gauss-Legendre rule mapped to [0, 1]; exact through degree 9,
/// which covers every polynomial integrand of the P1 forms with margin.
pub const GL_X: [f64; 5] = [
    0.04691007703066800,
    0.23076534494715845,
    0.5,
    0.7692346550528415,
    0.9530899229693320,
];
pub const GL_W: [f64; 5] = [
    0.11846344252809454,
    0.23931433524968324,
    0.28444444444444444,
    0.23931433524968324,
    0.11846344252809454,
];

/// Every multi-index with `idx[i] < dims[i]`, last coordinate fastest.
pub fn all_multi_indices(dims: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for &m in dims {
        let mut next = Vec::with_capacity(out.len() * m);
        for base in &out {
            for k in 0..m {
                let mut row = base.clone();
                row.push(k);
                next.push(row);
            }
        }
        out = next;
    }
    out
}

/// Dense matrices of the three building-block forms on the unit cube with a
/// uniform P1 tensor grid: mass, the diffusion form with the mapped matrix
/// `A`, and the convection form with the mapped drift field `a`. Rows index
/// the test function, columns the trial function.
pub struct DenseForms {
    pub d: usize,
    pub n_nodes: usize,
    pub size: usize,
    pub mass: Vec<f64>,
    pub diff: Vec<f64>,
    pub conv: Vec<f64>,
}

pub fn build_dense_forms(model: &ValidatedModel, n: usize) -> DenseForms {
    let d = model.dim();
    let p = model.params();
    let nn = n + 1;
    let size = nn.pow(d as u32);
    let h = 1.0 / n as f64;
    let mut strides = vec![0usize; d];
    let mut s = 1;
    for i in (0..d).rev() {
        strides[i] = s;
        s *= nn;
    }
    let mut mass = vec![0.0; size * size];
    let mut diff = vec![0.0; size * size];
    let mut conv = vec![0.0; size * size];
    let cells = all_multi_indices(&vec![n; d]);
    let qpts = all_multi_indices(&vec![GL_X.len(); d]);
    let corners = all_multi_indices(&vec![2usize; d]);
    let mut x = vec![0.0; d];
    let mut a_mat = vec![0.0; d * d];
    let mut a_vec = vec![0.0; d];
    let mut vals = vec![0.0; corners.len()];
    let mut grads = vec![0.0; corners.len() * d];
    let mut flats = vec![0usize; corners.len()];
    for cell in &cells {
        for (ci, corner) in corners.iter().enumerate() {
            flats[ci] = corner
                .iter()
                .zip(cell)
                .zip(&strides)
                .map(|((&b, &c), &st)| (c + b) * st)
                .sum();
        }
        for g in &qpts {
            let mut wt = 1.0;
            for i in 0..d {
                x[i] = (cell[i] as f64 + GL_X[g[i]]) * h;
                wt *= GL_W[g[i]] * h;
            }
            // Coefficient fields of the mapped operator.
            for i in 0..d {
                for j in 0..d {
                    a_mat[i * d + j] = 0.5
                        * model.rho_entry(i, j)
                        * p.sigma[i]
                        * p.sigma[j]
                        * x[i]
                        * (1.0 - x[i])
                        * x[j]
                        * (1.0 - x[j]);
                }
                let mut cross = 0.0;
                for j in 0..d {
                    if j != i {
                        cross += model.rho_entry(i, j) * p.sigma[j] * (2.0 * x[j] - 1.0);
                    }
                }
                let tilde = p.r + p.sigma[i] * p.sigma[i] * x[i] - p.sigma[i] * p.sigma[i]
                    + 0.5 * p.sigma[i] * cross;
                a_vec[i] = x[i] * (1.0 - x[i]) * tilde;
            }
            // Local P1 basis data at this quadrature point.
            for (ci, corner) in corners.iter().enumerate() {
                let mut v = 1.0;
                for i in 0..d {
                    let t = GL_X[g[i]];
                    v *= if corner[i] == 0 { 1.0 - t } else { t };
                }
                vals[ci] = v;
                for i in 0..d {
                    let mut gprod = if corner[i] == 0 { -1.0 / h } else { 1.0 / h };
                    for j in 0..d {
                        if j != i {
                            let t = GL_X[g[j]];
                            gprod *= if corner[j] == 0 { 1.0 - t } else { t };
                        }
                    }
                    grads[ci * d + i] = gprod;
                }
            }
            for (cu, &col) in flats.iter().enumerate() {
                for (cv, &row) in flats.iter().enumerate() {
                    let at = row * size + col;
                    mass[at] += wt * vals[cu] * vals[cv];
                    let mut dsum = 0.0;
                    let mut csum = 0.0;
                    for i in 0..d {
                        let mut flux = 0.0;
                        for j in 0..d {
                            flux += a_mat[i * d + j] * grads[cu * d + j];
                        }
                        dsum += flux * grads[cv * d + i];
                        csum += a_vec[i] * grads[cu * d + i];
                    }
                    diff[at] += wt * dsum;
                    conv[at] += wt * csum * vals[cv];
                }
            }
        }
    }
    DenseForms {
        d,
        n_nodes: nn,
        size,
        mass,
        diff,
        conv,
    }
}

impl DenseForms {
    /// Dense matrix of one implicit IMEX step's bilinear form.
    pub fn ahat(&self, dt: f64, r: f64) -> Vec<f64> {
        let dt1 = dt / (1.0 + r * dt);
        let dt2 = 0.5 * dt / (1.0 + r * dt);
        let size = self.size;
        let mut out = vec![0.0; size * size];
        for row in 0..size {
            for col in 0..size {
                let at = row * size + col;
                out[at] = self.mass[at] + dt1 * self.diff[at]
                    - dt2 * (self.conv[at] + self.conv[col * size + row]);
            }
        }
        out
    }

    /// Dense right-hand side of one IMEX step given the previous slice.
    pub fn load(&self, dt: f64, r: f64, u_prev: &[f64]) -> Vec<f64> {
        let dt2 = 0.5 * dt / (1.0 + r * dt);
        let inv1pr = 1.0 / (1.0 + r * dt);
        let size = self.size;
        let mut out = vec![0.0; size];
        for row in 0..size {
            let mut acc = 0.0;
            for col in 0..size {
                acc += (inv1pr * self.mass[row * size + col]
                    + dt2 * (self.conv[row * size + col] - self.conv[col * size + row]))
                    * u_prev[col];
            }
            out[row] = acc;
        }
        out
    }
}

/// `test^T · mat · trial` for a dense row-major square matrix.
pub fn bilinear(mat: &[f64], size: usize, trial: &[f64], test: &[f64]) -> f64 {
    let mut acc = 0.0;
    for row in 0..size {
        let mut inner = 0.0;
        for col in 0..size {
            inner += mat[row * size + col] * trial[col];
        }
        acc += test[row] * inner;
    }
    acc
}

/// Node values of a separated function flattened with the last dimension
/// fastest (matching `all_multi_indices` order).
pub fn flatten(f: &SeparatedFunction) -> Vec<f64> {
    let dims: Vec<usize> = f.meshes().iter().map(|m| m.n_nodes()).collect();
    all_multi_indices(&dims)
        .iter()
        .map(|idx| f.node_value(idx))
        .collect()
}

/// Same flattening for a single rank-one term.
pub fn flatten_term(t: &RankOneTerm) -> Vec<f64> {
    let dims: Vec<usize> = t.factors.iter().map(|f| f.len()).collect();
    all_multi_indices(&dims)
        .iter()
        .map(|idx| {
            t.factors
                .iter()
                .zip(idx)
                .map(|(f, &j)| f[j])
                .product::<f64>()
        })
        .collect()
}

/// Dense LU solve of `a x = b` for a row-major square matrix.
pub fn solve_dense(a: &[f64], size: usize, b: &[f64]) -> Vec<f64> {
    let m = DMatrix::from_row_slice(size, size, a);
    let rhs = DVector::from_column_slice(b);
    let sol = m.lu().solve(&rhs).expect("dense reference system is regular");
    sol.iter().copied().collect()
}

/// Relative l2 distance between two flat grids.
pub fn rel_l2(u: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = u
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let den: f64 = reference.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

/// Random valid market model with a constant correlation, kept away from the
/// positive-definiteness boundary.
pub fn random_model(rng: &mut ChaCha8Rng, d: usize) -> ValidatedModel {
    let sigma: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..0.5)).collect();
    let lo = if d > 1 { -0.8 / (d as f64 - 1.0) } else { -0.5 };
    let rho = rng.random_range(lo..0.9);
    let params = ModelParams {
        d,
        r: rng.random_range(0.0..0.1),
        sigma,
        rho: Rho::Constant { constant: rho },
        strike: 1.0,
        maturity: 1.0,
    };
    validate(&params).expect("sampled parameters stay inside the valid region")
}

pub fn random_rank_one(rng: &mut ChaCha8Rng, meshes: &[Mesh1D]) -> RankOneTerm {
    RankOneTerm::new(
        meshes
            .iter()
            .map(|m| (0..m.n_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
    )
}

pub fn random_separated(
    rng: &mut ChaCha8Rng,
    meshes: &[Mesh1D],
    rank: usize,
) -> SeparatedFunction {
    let terms = (0..rank).map(|_| random_rank_one(rng, meshes)).collect();
    SeparatedFunction::from_terms(meshes.to_vec(), terms)
        .expect("random factors match the meshes")
}
