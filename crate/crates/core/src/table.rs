//! Dense rectangular tables indexed by zone/mode positions.

use crate::scalar::Real;

/// Dense `(i, j)` table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table2<R> {
    n_rows: usize,
    n_cols: usize,
    data: Vec<R>,
}

impl<R: Real> Table2<R> {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            data: vec![R::zero(); n_rows * n_cols],
        }
    }

    pub fn from_fn(n_rows: usize, n_cols: usize, mut f: impl FnMut(usize, usize) -> R) -> Self {
        let mut t = Self::zeros(n_rows, n_cols);
        for i in 0..n_rows {
            for j in 0..n_cols {
                t.data[i * n_cols + j] = f(i, j);
            }
        }
        t
    }

    pub fn from_rows(rows: Vec<Vec<R>>) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == n_cols), "ragged rows");
        Self {
            n_rows,
            n_cols,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> R {
        self.data[i * self.n_cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: R) {
        self.data[i * self.n_cols + j] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: R) {
        self.data[i * self.n_cols + j] = self.data[i * self.n_cols + j] + v;
    }

    pub fn row(&self, i: usize) -> &[R] {
        &self.data[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn row_sum(&self, i: usize) -> R {
        self.row(i).iter().copied().sum()
    }

    pub fn col_sum(&self, j: usize) -> R {
        (0..self.n_rows).map(|i| self.get(i, j)).sum()
    }

    pub fn total(&self) -> R {
        self.data.iter().copied().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, R)> + '_ {
        let n_cols = self.n_cols;
        self.data
            .iter()
            .enumerate()
            .map(move |(k, &v)| (k / n_cols, k % n_cols, v))
    }
}

/// Dense `(i, j, m)` table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table3<R> {
    n_i: usize,
    n_j: usize,
    n_m: usize,
    data: Vec<R>,
}

impl<R: Real> Table3<R> {
    pub fn zeros(n_i: usize, n_j: usize, n_m: usize) -> Self {
        Self {
            n_i,
            n_j,
            n_m,
            data: vec![R::zero(); n_i * n_j * n_m],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_i, self.n_j, self.n_m)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, m: usize) -> R {
        self.data[(i * self.n_j + j) * self.n_m + m]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, m: usize, v: R) {
        self.data[(i * self.n_j + j) * self.n_m + m] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, m: usize, v: R) {
        let idx = (i * self.n_j + j) * self.n_m + m;
        self.data[idx] = self.data[idx] + v;
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize, R)> + '_ {
        let (n_j, n_m) = (self.n_j, self.n_m);
        self.data.iter().enumerate().map(move |(k, &v)| {
            let m = k % n_m;
            let ij = k / n_m;
            (ij / n_j, ij % n_j, m, v)
        })
    }
}
