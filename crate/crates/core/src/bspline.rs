//! Cubic B-spline basis on a clamped, uniformly spaced knot vector over [0, 1].

use nalgebra::DMatrix;

const DEGREE: usize = 3;

#[derive(Clone, Debug)]
pub struct CubicBasis {
    knots: Vec<f64>,
    size: usize,
}

impl CubicBasis {
    /// `size` basis functions (size >= 4), interior knots evenly spaced on [0, 1].
    pub fn new(size: usize) -> Self {
        assert!(size > DEGREE, "cubic basis needs at least 4 functions");
        let n_interior = size - DEGREE - 1;
        let mut knots = vec![0.0; DEGREE + 1];
        let segments = (n_interior + 1) as f64;
        knots.extend((1..=n_interior).map(|j| j as f64 / segments));
        knots.extend(std::iter::repeat_n(1.0, DEGREE + 1));
        Self { knots, size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Index of the knot span containing `x`; the right end maps to the last non-empty span.
    fn span(&self, x: f64) -> usize {
        let last = self.knots.len() - DEGREE - 2;
        if x >= self.knots[last + 1] {
            return last;
        }
        let mut lo = DEGREE;
        let mut hi = last + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x >= self.knots[mid] {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Values of the `deriv`-th derivative of every basis function at `x`.
    pub fn eval(&self, x: f64, deriv: usize) -> Vec<f64> {
        let t = &self.knots;
        let span = self.span(x.clamp(0.0, 1.0));
        let x = x.clamp(0.0, 1.0);
        // Degree-0 indicators over the full knot vector.
        let n0 = t.len() - 1;
        let mut vals = vec![0.0; n0];
        vals[span] = 1.0;
        let base_degree = DEGREE.saturating_sub(deriv);
        for p in 1..=base_degree {
            let mut next = vec![0.0; t.len() - p - 1];
            for (i, slot) in next.iter_mut().enumerate() {
                let mut v = 0.0;
                let d1 = t[i + p] - t[i];
                if d1 > 0.0 {
                    v += (x - t[i]) / d1 * vals[i];
                }
                let d2 = t[i + p + 1] - t[i + 1];
                if d2 > 0.0 {
                    v += (t[i + p + 1] - x) / d2 * vals[i + 1];
                }
                *slot = v;
            }
            vals = next;
        }
        for p in (base_degree + 1)..=DEGREE {
            let mut next = vec![0.0; t.len() - p - 1];
            for (i, slot) in next.iter_mut().enumerate() {
                let mut v = 0.0;
                let d1 = t[i + p] - t[i];
                if d1 > 0.0 {
                    v += vals[i] / d1;
                }
                let d2 = t[i + p + 1] - t[i + 1];
                if d2 > 0.0 {
                    v -= vals[i + 1] / d2;
                }
                *slot = p as f64 * v;
            }
            vals = next;
        }
        vals
    }

    /// T x size design matrix at the given points in [0, 1].
    pub fn design(&self, points: &[f64]) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(points.len(), self.size);
        for (r, &x) in points.iter().enumerate() {
            for (c, v) in self.eval(x, 0).into_iter().enumerate() {
                b[(r, c)] = v;
            }
        }
        b
    }

    /// Roughness penalty matrix: integral over [0, 1] of B_i'' B_j''.
    ///
    /// Second derivatives are piecewise linear, so two-point Gauss-Legendre per
    /// knot span is exact.
    pub fn second_derivative_penalty(&self) -> DMatrix<f64> {
        let g = 1.0 / 3.0_f64.sqrt();
        let mut pen = DMatrix::zeros(self.size, self.size);
        for w in self.knots.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for node in [mid - half * g, mid + half * g] {
                let d2 = self.eval(node, 2);
                for i in 0..self.size {
                    if d2[i] == 0.0 {
                        continue;
                    }
                    for j in 0..self.size {
                        pen[(i, j)] += half * d2[i] * d2[j];
                    }
                }
            }
        }
        pen
    }
}
