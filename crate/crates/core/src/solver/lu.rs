//! Sparse LU factorization of simplex bases with product-form updates.
//!
//! The factorization is left-looking: columns are processed in order of
//! increasing nonzero count and each is reduced by a sparse triangular solve
//! against the columns of `L` computed so far. Pivots are chosen by threshold
//! partial pivoting, preferring sparse rows among acceptable candidates.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

const PIVOT_THRESHOLD: f64 = 0.1;
const SINGULAR_TOL: f64 = 1e-11;
const DROP_TOL: f64 = 1e-14;

/// Basis positions without an acceptable pivot and the rows left unpivoted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Singular {
    pub positions: Vec<usize>,
    pub rows: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Eta {
    pos: usize,
    pivot: f64,
    idx: Vec<usize>,
    val: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LuFactor {
    m: usize,
    l_start: Vec<usize>,
    l_row: Vec<usize>,
    l_val: Vec<f64>,
    u_start: Vec<usize>,
    u_idx: Vec<usize>,
    u_val: Vec<f64>,
    diag: Vec<f64>,
    piv_row: Vec<usize>,
    col_order: Vec<usize>,
    etas: Vec<Eta>,
    eta_nnz: usize,
}

impl LuFactor {
    /// Factor the square matrix whose column at basis position `p` is
    /// `cols[p]` given as parallel (row, value) slices.
    pub fn factor(m: usize, cols: &[(&[usize], &[f64])]) -> Result<LuFactor, Singular> {
        assert_eq!(cols.len(), m);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by_key(|&p| (cols[p].0.len(), p));
        let mut row_count = vec![0usize; m];
        for (rows, _) in cols {
            for &r in *rows {
                row_count[r] += 1;
            }
        }

        const NONE: usize = usize::MAX;
        let mut row_piv = vec![NONE; m];
        let mut f = LuFactor {
            m,
            l_start: vec![0],
            l_row: Vec::new(),
            l_val: Vec::new(),
            u_start: vec![0],
            u_idx: Vec::new(),
            u_val: Vec::new(),
            diag: Vec::with_capacity(m),
            piv_row: Vec::with_capacity(m),
            col_order: Vec::with_capacity(m),
            etas: Vec::new(),
            eta_nnz: 0,
        };
        let mut x = vec![0.0; m];
        let mut in_x = vec![false; m];
        let mut nz: Vec<usize> = Vec::new();
        let mut queued = vec![false; m];
        let mut heap: BinaryHeap<Reverse<usize>> = BinaryHeap::new();
        let mut deficient = Vec::new();

        for &pos in &order {
            let k = f.diag.len();
            let (rows, vals) = cols[pos];
            for (&r, &v) in rows.iter().zip(vals) {
                if !in_x[r] {
                    in_x[r] = true;
                    nz.push(r);
                }
                x[r] += v;
                let j = row_piv[r];
                if j != NONE && !queued[j] {
                    queued[j] = true;
                    heap.push(Reverse(j));
                }
            }
            while let Some(Reverse(j)) = heap.pop() {
                queued[j] = false;
                let v = x[f.piv_row[j]];
                if v == 0.0 {
                    continue;
                }
                for t in f.l_start[j]..f.l_start[j + 1] {
                    let r = f.l_row[t];
                    if !in_x[r] {
                        in_x[r] = true;
                        nz.push(r);
                    }
                    x[r] -= f.l_val[t] * v;
                    let j2 = row_piv[r];
                    if j2 != NONE && !queued[j2] {
                        queued[j2] = true;
                        heap.push(Reverse(j2));
                    }
                }
            }

            let mut max = 0.0f64;
            for &r in &nz {
                if row_piv[r] == NONE {
                    max = max.max(x[r].abs());
                }
            }
            let mut pivot = NONE;
            if max > SINGULAR_TOL {
                let mut best = (usize::MAX, 0.0f64);
                for &r in &nz {
                    if row_piv[r] == NONE && x[r].abs() >= PIVOT_THRESHOLD * max {
                        let key = (row_count[r], x[r].abs());
                        if key.0 < best.0 || (key.0 == best.0 && key.1 > best.1) {
                            best = key;
                            pivot = r;
                        }
                    }
                }
            }
            if pivot == NONE {
                deficient.push(pos);
            } else {
                let d = x[pivot];
                for &r in &nz {
                    let v = x[r];
                    if r == pivot || v.abs() <= DROP_TOL {
                        continue;
                    }
                    if row_piv[r] == NONE {
                        f.l_row.push(r);
                        f.l_val.push(v / d);
                    } else {
                        f.u_idx.push(row_piv[r]);
                        f.u_val.push(v);
                    }
                }
                f.l_start.push(f.l_row.len());
                f.u_start.push(f.u_idx.len());
                f.diag.push(d);
                f.piv_row.push(pivot);
                f.col_order.push(pos);
                row_piv[pivot] = k;
            }
            for &r in &nz {
                x[r] = 0.0;
                in_x[r] = false;
            }
            nz.clear();
        }
        if !deficient.is_empty() {
            let rows = (0..m).filter(|&r| row_piv[r] == NONE).collect();
            return Err(Singular {
                positions: deficient,
                rows,
            });
        }
        Ok(f)
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn num_updates(&self) -> usize {
        self.etas.len()
    }

    /// Nonzeros in the factors plus the eta file.
    pub fn nnz(&self) -> usize {
        self.l_row.len() + self.u_idx.len() + self.m + self.eta_nnz
    }

    pub fn factor_nnz(&self) -> usize {
        self.l_row.len() + self.u_idx.len() + self.m
    }

    /// Solve `B z = b`; `b` is indexed by row, `z` by basis position.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut w = b.to_vec();
        for j in 0..m {
            let v = w[self.piv_row[j]];
            if v != 0.0 {
                for t in self.l_start[j]..self.l_start[j + 1] {
                    w[self.l_row[t]] -= self.l_val[t] * v;
                }
            }
        }
        let mut y: Vec<f64> = self.piv_row.iter().map(|&r| w[r]).collect();
        for k in (0..m).rev() {
            let z = y[k] / self.diag[k];
            y[k] = z;
            if z != 0.0 {
                for t in self.u_start[k]..self.u_start[k + 1] {
                    y[self.u_idx[t]] -= self.u_val[t] * z;
                }
            }
        }
        let mut out = vec![0.0; m];
        for k in 0..m {
            out[self.col_order[k]] = y[k];
        }
        for e in &self.etas {
            let zp = out[e.pos] / e.pivot;
            out[e.pos] = zp;
            if zp != 0.0 {
                for (&i, &a) in e.idx.iter().zip(&e.val) {
                    out[i] -= a * zp;
                }
            }
        }
        out
    }

    /// Solve `Bᵀ y = c`; `c` is indexed by basis position, `y` by row.
    pub fn solve_transpose(&self, c: &[f64]) -> Vec<f64> {
        let m = self.m;
        let mut c = c.to_vec();
        for e in self.etas.iter().rev() {
            let mut s = c[e.pos];
            for (&i, &a) in e.idx.iter().zip(&e.val) {
                s -= a * c[i];
            }
            c[e.pos] = s / e.pivot;
        }
        let mut w: Vec<f64> = self.col_order.iter().map(|&p| c[p]).collect();
        for k in 0..m {
            let mut s = w[k];
            for t in self.u_start[k]..self.u_start[k + 1] {
                s -= self.u_val[t] * w[self.u_idx[t]];
            }
            w[k] = s / self.diag[k];
        }
        let mut y = vec![0.0; m];
        for j in (0..m).rev() {
            let mut s = w[j];
            for t in self.l_start[j]..self.l_start[j + 1] {
                s -= self.l_val[t] * y[self.l_row[t]];
            }
            y[self.piv_row[j]] = s;
        }
        y
    }

    /// Replace the column at basis position `pos`; `alpha` is the new column
    /// already transformed by [`solve`](Self::solve).
    pub fn update(&mut self, pos: usize, alpha: &[f64]) {
        let mut idx = Vec::new();
        let mut val = Vec::new();
        for (i, &a) in alpha.iter().enumerate() {
            if i != pos && a.abs() > DROP_TOL {
                idx.push(i);
                val.push(a);
            }
        }
        self.eta_nnz += idx.len() + 1;
        self.etas.push(Eta {
            pos,
            pivot: alpha[pos],
            idx,
            val,
        });
    }
}
