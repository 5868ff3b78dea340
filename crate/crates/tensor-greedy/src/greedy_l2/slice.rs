//! Exact integration of products of low-degree polynomials over an axis
//! box intersected with the half-space `sum_l x_l <= c`.
//!
//! This is the kernel behind support-aware payoff integration: on a grid
//! cell cut by the payoff kink, the integrand restricted to one coordinate is
//! piecewise polynomial with breakpoints where the deeper-dimension region
//! changes type, i.e. at budgets equal to partial vertex sums. Splitting at
//! those breakpoints and applying Gauss quadrature per segment is exact.

/// Evaluates a polynomial with ascending coefficients.
pub(crate) fn poly_eval(coeffs: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    for &c in coeffs.iter().rev() {
        acc = acc * x + c;
    }
    acc
}

// 8-point Gauss-Legendre on [-1, 1]; exact through degree 15, which covers
// the worst case here (factor degree 2 plus budget degree 3 per deeper
// dimension, up to five dimensions).
pub(crate) const GAUSS8_X: [f64; 8] = [
    -0.9602898564975363,
    -0.7966664774136267,
    -0.525532409916329,
    -0.18343464249564978,
    0.18343464249564978,
    0.525532409916329,
    0.7966664774136267,
    0.9602898564975363,
];
pub(crate) const GAUSS8_W: [f64; 8] = [
    0.10122853629037626,
    0.22238103445337448,
    0.31370664587788727,
    0.362683783378362,
    0.362683783378362,
    0.31370664587788727,
    0.22238103445337448,
    0.10122853629037626,
];

fn gauss_segment(poly: &[f64], a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for (gx, gw) in GAUSS8_X.iter().zip(GAUSS8_W) {
        let x = mid + half * gx;
        acc += gw * poly_eval(poly, x) * f(x);
    }
    acc * half
}

/// Integral of `prod_l polys[l](x_l)` over the full box `prod [lo_l, hi_l]`.
pub(crate) fn product_integral(polys: &[Vec<f64>], lo: &[f64], hi: &[f64]) -> f64 {
    let mut acc = 1.0;
    for (p, (&a, &b)) in polys.iter().zip(lo.iter().zip(hi)) {
        acc *= gauss_segment(p, a, b, |_| 1.0);
    }
    acc
}

/// All partial vertex sums of dimensions `l..d`, one sorted vector per level.
fn vertex_sums(lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
    let d = lo.len();
    let mut sums = vec![Vec::new(); d + 1];
    sums[d] = vec![0.0];
    for l in (0..d).rev() {
        let mut v: Vec<f64> = sums[l + 1]
            .iter()
            .flat_map(|&s| [s + lo[l], s + hi[l]])
            .collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup();
        sums[l] = v;
    }
    sums
}

struct Slicer<'a> {
    polys: &'a [Vec<f64>],
    lo: &'a [f64],
    hi: &'a [f64],
    // suffix_lo[l] = sum of lo[l..], likewise suffix_hi.
    suffix_lo: Vec<f64>,
    suffix_hi: Vec<f64>,
    sums: Vec<Vec<f64>>,
}

impl Slicer<'_> {
    fn integrate(&self, level: usize, budget: f64) -> f64 {
        if budget <= self.suffix_lo[level] {
            return 0.0;
        }
        if budget >= self.suffix_hi[level] {
            // Full box from here on.
            let mut acc = 1.0;
            for l in level..self.lo.len() {
                acc *= gauss_segment(&self.polys[l], self.lo[l], self.hi[l], |_| 1.0);
            }
            return acc;
        }
        let (a, b) = (self.lo[level], self.hi[level]);
        // x_level may run while the deeper region stays nonempty.
        let upper = b.min(budget - self.suffix_lo[level + 1]);
        if level + 1 == self.lo.len() {
            return gauss_segment(&self.polys[level], a, upper, |_| 1.0);
        }
        // Breakpoints: budget - x crossing a deeper partial vertex sum.
        let mut cuts: Vec<f64> = vec![a];
        for &s in &self.sums[level + 1] {
            let x = budget - s;
            if x > a && x < upper {
                cuts.push(x);
            }
        }
        cuts.push(upper);
        cuts.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let mut acc = 0.0;
        for w in cuts.windows(2) {
            acc += gauss_segment(&self.polys[level], w[0], w[1], |x| {
                self.integrate(level + 1, budget - x)
            });
        }
        acc
    }
}

/// Integral of `prod_l polys[l](x_l)` over `{x in box : sum_l x_l <= c}`.
///
/// Exact (up to rounding) for polynomial factors of degree at most 2 in up to
/// five dimensions; callers keep `d <= 4`.
pub(crate) fn sliced_product_integral(
    polys: &[Vec<f64>],
    lo: &[f64],
    hi: &[f64],
    c: f64,
) -> f64 {
    let d = lo.len();
    assert!(d >= 1 && polys.len() == d && hi.len() == d, "shape mismatch");
    let mut suffix_lo = vec![0.0; d + 1];
    let mut suffix_hi = vec![0.0; d + 1];
    for l in (0..d).rev() {
        suffix_lo[l] = suffix_lo[l + 1] + lo[l];
        suffix_hi[l] = suffix_hi[l + 1] + hi[l];
    }
    let slicer = Slicer {
        polys,
        lo,
        hi,
        suffix_lo,
        suffix_hi,
        sums: vertex_sums(lo, hi),
    };
    slicer.integrate(0, c)
}
