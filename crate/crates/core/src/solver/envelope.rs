//! Symmetric matrices in envelope (profile) storage and their Cholesky
//! factorization. Row `i` stores columns `first[i]..=i`; the factor has the
//! same envelope, so no fill-in bookkeeping is needed.

use nalgebra::DMatrix;

#[derive(Clone, Debug)]
pub struct EnvelopeMatrix {
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

/// Factorization failure at a non-positive pivot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NotPositiveDefinite {
    pub row: usize,
}

impl EnvelopeMatrix {
    /// `first[i] <= i` is the leftmost structurally non-zero column of row `i`.
    pub fn new(first: Vec<usize>) -> Self {
        let mut start = Vec::with_capacity(first.len() + 1);
        let mut acc = 0;
        for (i, &f) in first.iter().enumerate() {
            debug_assert!(f <= i);
            start.push(acc);
            acc += i - f + 1;
        }
        start.push(acc);
        Self { first, start, data: vec![0.0; acc] }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    pub fn first(&self) -> &[usize] {
        &self.first
    }

    pub fn stored_entries(&self) -> usize {
        self.data.len()
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    #[inline]
    fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && j >= self.first[i], "({i},{j}) outside envelope");
        self.start[i] + (j - self.first[i])
    }

    /// Lower-triangle entry; zero outside the envelope.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if j < self.first[i] {
            0.0
        } else {
            self.data[self.index(i, j)]
        }
    }

    /// Adds to the lower-triangle entry `(i, j)` with `j <= i`.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.index(i, j);
        self.data[k] += v;
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.data[self.index(i, i)]).collect()
    }

    pub fn add_diagonal(&mut self, d: &[f64]) {
        for (i, v) in d.iter().enumerate() {
            self.add(i, i, *v);
        }
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let row = &self.data[self.start[i]..self.start[i + 1]];
            let f = self.first[i];
            for (k, a) in row.iter().enumerate() {
                let j = f + k;
                y[i] += a * x[j];
                if j != i {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.get(i, j))
    }

    /// In-place Cholesky `A = L Lᵀ`. A pivot below `tol * original diagonal`
    /// (or non-positive) aborts with the offending row.
    pub fn cholesky_in_place(&mut self, tol: f64) -> Result<(), NotPositiveDefinite> {
        let n = self.dim();
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            for j in fi..i {
                let fj = self.first[j];
                let sj = self.start[j];
                let k0 = fi.max(fj);
                let mut s = self.data[si + (j - fi)];
                let ri = &self.data[si + (k0 - fi)..si + (j - fi)];
                let rj = &self.data[sj + (k0 - fj)..sj + (j - fj)];
                s -= dot(ri, rj);
                let ljj = self.data[sj + (j - fj)];
                self.data[si + (j - fi)] = s / ljj;
            }
            let row = &self.data[si..si + (i - fi)];
            let orig = self.data[si + (i - fi)];
            let d = orig - dot(row, row);
            if !(d > tol * orig.abs()) || !d.is_finite() {
                return Err(NotPositiveDefinite { row: i });
            }
            self.data[si + (i - fi)] = d.sqrt();
        }
        Ok(())
    }

    /// Solves `L Lᵀ x = b` with a factor produced by [`cholesky_in_place`].
    pub fn cholesky_solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = b.to_vec();
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            let row = &self.data[si..si + (i - fi)];
            let s = y[i] - dot(row, &y[fi..i]);
            y[i] = s / self.data[si + (i - fi)];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let si = self.start[i];
            y[i] /= self.data[si + (i - fi)];
            let yi = y[i];
            for (k, l) in self.data[si..si + (i - fi)].iter().enumerate() {
                y[fi + k] -= l * yi;
            }
        }
        y
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
