use serde::{Deserialize, Serialize};

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    pub ncols: usize,
    pub row_start: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Default for CsrMatrix {
    fn default() -> Self {
        CsrMatrix::new(0)
    }
}

impl CsrMatrix {
    pub fn new(ncols: usize) -> Self {
        CsrMatrix {
            ncols,
            row_start: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn from_rows<I, R>(ncols: usize, rows: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = (usize, f64)>,
    {
        let mut m = CsrMatrix::new(ncols);
        for r in rows {
            m.push_row(r);
        }
        m
    }

    /// Append a row; entries are summed per column and zeros dropped.
    pub fn push_row<R: IntoIterator<Item = (usize, f64)>>(&mut self, entries: R) {
        let start = self.cols.len();
        for (c, v) in entries {
            assert!(c < self.ncols, "column {c} out of range");
            if let Some(k) = self.cols[start..].iter().position(|&x| x == c) {
                self.vals[start + k] += v;
            } else {
                self.cols.push(c);
                self.vals.push(v);
            }
        }
        let mut k = start;
        while k < self.cols.len() {
            if self.vals[k] == 0.0 {
                self.cols.swap_remove(k);
                self.vals.swap_remove(k);
            } else {
                k += 1;
            }
        }
        self.row_start.push(self.cols.len());
    }

    pub fn nrows(&self) -> usize {
        self.row_start.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_start[i], self.row_start[i + 1]);
        (&self.cols[a..b], &self.vals[a..b])
    }

    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (c, v) = self.row(i);
        c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows()).map(|i| self.row_dot(i, x)).collect()
    }

    /// `Aᵀ y`.
    pub fn mul_transpose_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                let (c, v) = self.row(i);
                for (&j, &a) in c.iter().zip(v) {
                    out[j] += a * yi;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut count = vec![0usize; self.ncols + 1];
        for &c in &self.cols {
            count[c + 1] += 1;
        }
        for j in 0..self.ncols {
            count[j + 1] += count[j];
        }
        let mut next = count.clone();
        let mut cols = vec![0; self.nnz()];
        let mut vals = vec![0.0; self.nnz()];
        for i in 0..self.nrows() {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                cols[next[j]] = i;
                vals[next[j]] = a;
                next[j] += 1;
            }
        }
        CsrMatrix {
            ncols: self.nrows(),
            row_start: count,
            cols,
            vals,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_and_transpose() {
        let a = CsrMatrix::from_rows(3, vec![vec![(0, 1.0), (2, 2.0)], vec![(1, -1.0), (1, 4.0)], vec![]]);
        assert_eq!(a.nrows(), 3);
        assert_eq!(a.row(1), (&[1usize][..], &[3.0][..]));
        assert_eq!(a.mul_vec(&[1.0, 1.0, 1.0]), vec![3.0, 3.0, 0.0]);
        assert_eq!(a.mul_transpose_vec(&[1.0, 2.0, 5.0]), vec![1.0, 6.0, 2.0]);
        let t = a.transpose();
        assert_eq!(t.mul_vec(&[1.0, 2.0, 5.0]), vec![1.0, 6.0, 2.0]);
        assert_eq!(t.transpose(), a);
    }

    #[test]
    fn cancelling_entries_are_dropped() {
        let a = CsrMatrix::from_rows(2, vec![vec![(0, 1.0), (0, -1.0), (1, 2.0)]]);
        assert_eq!(a.nnz(), 1);
    }
}
