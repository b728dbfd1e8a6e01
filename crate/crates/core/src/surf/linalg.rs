//! Small dense solvers for kriging systems and field simulation.

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    n: usize,
    data: Vec<f64>,
}

impl Dense {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] += v;
    }

    fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Relative pivot size below which a system is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-13;

/// Solves `a x = b` by Gaussian elimination with partial pivoting. Returns
/// `None` when a pivot falls below `SINGULAR_TOL` times the largest entry.
pub fn lu_solve(a: &Dense, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.n;
    assert_eq!(b.len(), n, "rhs length must match matrix order");
    let scale = a.max_abs();
    if scale == 0.0 {
        return None;
    }
    let mut m = a.data.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .expect("non-empty range");
        let pivot = m[pivot_row * n + col];
        if pivot.abs() <= SINGULAR_TOL * scale || !pivot.is_finite() {
            return None;
        }
        if pivot_row != col {
            for k in 0..n {
                m.swap(col * n + k, pivot_row * n + k);
            }
            x.swap(col, pivot_row);
        }
        for row in col + 1..n {
            let f = m[row * n + col] / pivot;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[row * n + k] -= f * m[col * n + k];
            }
            x[row] -= f * x[col];
        }
    }
    for row in (0..n).rev() {
        let mut acc = x[row];
        for k in row + 1..n {
            acc -= m[row * n + k] * x[k];
        }
        x[row] = acc / m[row * n + row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Dense) -> Option<Dense> {
    let n = a.n;
    let mut l = Dense::zeros(n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Some(l)
}
