//! Row-streaming Householder QR for tall least-squares systems.
//!
//! Rows are buffered in blocks and folded into an n×n triangular factor, so
//! memory stays O(n²) regardless of how many equations are fed in.

const BLOCK_ROWS: usize = 512;

/// Relative size of a diagonal entry of R, against the norm of its column,
/// below which the column is treated as linearly dependent.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct StreamingQr {
    n: usize,
    // upper-triangular factor, row-major n×n
    r: Vec<f64>,
    qtb: Vec<f64>,
    rss: f64,
    block: Vec<f64>,
    block_rhs: Vec<f64>,
    rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresSolution {
    pub x: Vec<f64>,
    pub residual_sum_squares: f64,
    pub rows: usize,
}

impl StreamingQr {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            r: vec![0.0; n * n],
            qtb: vec![0.0; n],
            rss: 0.0,
            block: Vec::with_capacity(BLOCK_ROWS * n),
            block_rhs: Vec::with_capacity(BLOCK_ROWS),
            rows: 0,
        }
    }

    pub fn push_row(&mut self, row: &[f64], rhs: f64) {
        debug_assert_eq!(row.len(), self.n);
        self.block.extend_from_slice(row);
        self.block_rhs.push(rhs);
        self.rows += 1;
        if self.block_rhs.len() == BLOCK_ROWS {
            self.flush();
        }
    }

    fn flush(&mut self) {
        let n = self.n;
        let m = self.block_rhs.len();
        if m == 0 {
            return;
        }
        let total = n + m;
        let mut a = Vec::with_capacity(total * n);
        a.extend_from_slice(&self.r);
        a.extend_from_slice(&self.block);
        let mut b = Vec::with_capacity(total);
        b.extend_from_slice(&self.qtb);
        b.extend_from_slice(&self.block_rhs);
        householder_in_place(&mut a, &mut b, total, n);
        for i in 0..n {
            for j in 0..n {
                self.r[i * n + j] = if j >= i { a[i * n + j] } else { 0.0 };
            }
        }
        self.qtb.copy_from_slice(&b[..n]);
        self.rss += b[n..].iter().map(|v| v * v).sum::<f64>();
        self.block.clear();
        self.block_rhs.clear();
    }

    /// Solve the accumulated system. On rank deficiency, returns the indices
    /// of the columns found to depend on earlier ones.
    pub fn solve(mut self) -> Result<LeastSquaresSolution, Vec<usize>> {
        self.flush();
        let n = self.n;
        let dependent: Vec<usize> = (0..n)
            .filter(|&j| {
                let col_norm = (0..=j)
                    .map(|i| self.r[i * n + j].powi(2))
                    .sum::<f64>()
                    .sqrt();
                col_norm == 0.0 || self.r[j * n + j].abs() <= RANK_TOLERANCE * col_norm
            })
            .collect();
        if !dependent.is_empty() || self.rows < n {
            return Err(if dependent.is_empty() {
                (self.rows..n).collect()
            } else {
                dependent
            });
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = self.qtb[i];
            for j in i + 1..n {
                s -= self.r[i * n + j] * x[j];
            }
            x[i] = s / self.r[i * n + i];
        }
        Ok(LeastSquaresSolution {
            x,
            residual_sum_squares: self.rss,
            rows: self.rows,
        })
    }
}

/// In-place Householder triangularisation of a row-major `rows×cols` matrix,
/// applying the same reflections to `b`.
fn householder_in_place(a: &mut [f64], b: &mut [f64], rows: usize, cols: usize) {
    let mut v = vec![0.0; rows];
    for k in 0..cols.min(rows) {
        let norm = (k..rows).map(|i| a[i * cols + k].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = a[k * cols + k];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        for i in k..rows {
            v[i] = a[i * cols + k];
        }
        v[k] -= alpha;
        let vnorm2: f64 = (k..rows).map(|i| v[i] * v[i]).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..cols {
            let s: f64 = (k..rows).map(|i| v[i] * a[i * cols + j]).sum();
            let f = 2.0 * s / vnorm2;
            for i in k..rows {
                a[i * cols + j] -= f * v[i];
            }
        }
        let s: f64 = (k..rows).map(|i| v[i] * b[i]).sum();
        let f = 2.0 * s / vnorm2;
        for i in k..rows {
            b[i] -= f * v[i];
        }
        a[k * cols + k] = alpha;
        for i in k + 1..rows {
            a[i * cols + k] = 0.0;
        }
    }
}


/// Inverse lower Cholesky factor of a covariance matrix. Directions whose
/// pivot falls below `floor` times the largest diagonal are left unscaled.
pub fn whitening(cov: &ndarray::Array2<f64>, floor: f64) -> ndarray::Array2<f64> {
    let n = cov.nrows();
    let top = cov.diag().iter().cloned().fold(0.0, f64::max);
    let tiny = (floor * top).max(f64::MIN_POSITIVE);
    let mut l = ndarray::Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = cov[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        let pivot = if d > tiny { d.sqrt() } else { 0.0 };
        l[[j, j]] = pivot;
        for i in j + 1..n {
            let mut v = cov[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = if pivot > 0.0 { v / pivot } else { 0.0 };
        }
    }
    // forward substitution for L⁻¹; a dropped pivot keeps that coordinate as is
    let mut inv = ndarray::Array2::<f64>::zeros((n, n));
    for c in 0..n {
        for i in c..n {
            let mut v = if i == c { 1.0 } else { 0.0 };
            for k in c..i {
                v -= l[[i, k]] * inv[[k, c]];
            }
            inv[[i, c]] = if l[[i, i]] > 0.0 { v / l[[i, i]] } else if i == c { 1.0 } else { 0.0 };
        }
    }
    inv
}
