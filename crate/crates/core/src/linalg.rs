//! Small dense least-squares kernel used by the feature regression.

/// Householder QR factorization of a tall column-major matrix.
#[derive(Debug, Clone)]
pub(crate) struct HouseholderQr {
    rows: usize,
    cols: usize,
    /// Householder vectors below the diagonal, R on and above it (column-major).
    qr: Vec<f64>,
    /// Diagonal of R.
    r_diag: Vec<f64>,
    /// Scale of each Householder reflector (`beta` in `I - beta v vᵀ`).
    betas: Vec<f64>,
}

impl HouseholderQr {
    /// Factorizes `a` (column-major, `rows × cols`, rows ≥ cols).
    pub(crate) fn new(a: &[f64], rows: usize, cols: usize) -> Self {
        assert!(rows >= cols && a.len() == rows * cols);
        let mut qr = a.to_vec();
        let mut r_diag = vec![0.0; cols];
        let mut betas = vec![0.0; cols];
        for k in 0..cols {
            let col = &mut qr[k * rows..(k + 1) * rows];
            let norm = col[k..].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                r_diag[k] = 0.0;
                continue;
            }
            let alpha = if col[k] > 0.0 { -norm } else { norm };
            // v = x - alpha e_k, stored in place; beta = 1 / (norm² - alpha x_k)
            col[k] -= alpha;
            let vtv = col[k..].iter().map(|x| x * x).sum::<f64>();
            let beta = 2.0 / vtv;
            betas[k] = beta;
            r_diag[k] = alpha;
            let (head, tail) = qr.split_at_mut((k + 1) * rows);
            let v = &head[k * rows + k..(k + 1) * rows];
            for j in 0..cols - k - 1 {
                let c = &mut tail[j * rows + k..(j + 1) * rows];
                let dot: f64 = v.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
                let s = beta * dot;
                for (ci, vi) in c.iter_mut().zip(v) {
                    *ci -= s * vi;
                }
            }
        }
        Self {
            rows,
            cols,
            qr,
            r_diag,
            betas,
        }
    }

    /// Indices of columns whose `|R_kk|` is negligible relative to the largest.
    pub(crate) fn dependent_columns(&self, rel_tol: f64) -> Vec<usize> {
        let max = self.r_diag.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        self.r_diag
            .iter()
            .enumerate()
            .filter(|(_, r)| r.abs() <= rel_tol * max)
            .map(|(k, _)| k)
            .collect()
    }

    /// Least-squares solution of `A x ≈ b`; assumes full column rank.
    pub(crate) fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.rows);
        let rows = self.rows;
        let mut y = b.to_vec();
        for k in 0..self.cols {
            if self.betas[k] == 0.0 {
                continue;
            }
            let v = &self.qr[k * rows + k..(k + 1) * rows];
            let dot: f64 = v.iter().zip(&y[k..]).map(|(a, b)| a * b).sum();
            let s = self.betas[k] * dot;
            for (yi, vi) in y[k..].iter_mut().zip(v) {
                *yi -= s * vi;
            }
        }
        let mut x = vec![0.0; self.cols];
        for k in (0..self.cols).rev() {
            let mut acc = y[k];
            for (j, xj) in x.iter().enumerate().skip(k + 1) {
                acc -= self.qr[j * rows + k] * xj;
            }
            x[k] = acc / self.r_diag[k];
        }
        x
    }
}
