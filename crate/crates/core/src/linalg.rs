//! Small dense row-major matrices and an LU solve with partial pivoting.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        DenseMatrix { rows: r, cols: c, data: rows.iter().flatten().copied().collect() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| crate::scalar::dot(self.row(i), x)).collect()
    }

    pub fn col_sum(&self, j: usize) -> T {
        (0..self.rows).fold(T::zero(), |acc, i| acc + self[(i, j)])
    }

    pub fn row_sum(&self, i: usize) -> T {
        self.row(i).iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        DenseMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }
}

impl<T> std::ops::Index<(usize, usize)> for DenseMatrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for DenseMatrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Pivot smaller than `pivot_tol` times the largest entry of the matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SingularMatrix {
    /// Original row indices whose elimination step had no usable pivot.
    pub rows: Vec<usize>,
}

/// Solve `A x = b` by Gaussian elimination with partial pivoting.
pub fn lu_solve<T: Scalar>(a: &DenseMatrix<T>, b: &[T], pivot_tol: T) -> Result<Vec<T>, SingularMatrix> {
    let n = a.rows;
    assert_eq!(a.cols, n, "square system required");
    assert_eq!(b.len(), n);
    let scale = a.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    let tol = pivot_tol * scale.max(T::min_positive_value());
    let mut m = a.clone();
    let mut x = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut bad = Vec::new();
    for k in 0..n {
        let (p, best) = (k..n).map(|i| (i, m[(i, k)].abs())).fold((k, -T::one()), |acc, c| if c.1 > acc.1 { c } else { acc });
        if !(best > tol) {
            bad.push(perm[k]);
            continue;
        }
        if p != k {
            for j in 0..n {
                m.data.swap(k * n + j, p * n + j);
            }
            x.swap(k, p);
            perm.swap(k, p);
        }
        let piv = m[(k, k)];
        for i in k + 1..n {
            let f = m[(i, k)] / piv;
            if f == T::zero() {
                continue;
            }
            m[(i, k)] = T::zero();
            for j in k + 1..n {
                let mkj = m[(k, j)];
                m[(i, j)] -= f * mkj;
            }
            let xk = x[k];
            x[i] -= f * xk;
        }
    }
    if !bad.is_empty() {
        bad.sort_unstable();
        return Err(SingularMatrix { rows: bad });
    }
    for k in (0..n).rev() {
        let mut s = x[k];
        for j in k + 1..n {
            s -= m[(k, j)] * x[j];
        }
        x[k] = s / m[(k, k)];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn needs_pivoting() {
        let a = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]]);
        let x: Vec<f64> = lu_solve(&a, &[1.0, 8.0], 1e-14).unwrap();
        assert!((x[0] - 2.5).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn singular_rows_reported() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(lu_solve(&a, &[1.0, 2.0], 1e-12).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let a = DenseMatrix::<f32>::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        let x = lu_solve(&a, &[1.0, 2.0], 1e-6).unwrap();
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-6 && (x[1] - 7.0 / 11.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn agrees_with_nalgebra(seed in prop::collection::vec(-1.0f64..1.0, 36), rhs in prop::collection::vec(-5.0f64..5.0, 6)) {
            let mut rows: Vec<Vec<f64>> = seed.chunks(6).map(|c| c.to_vec()).collect();
            for (i, r) in rows.iter_mut().enumerate() {
                r[i] += 4.0;
            }
            let ours = lu_solve(&DenseMatrix::from_rows(&rows), &rhs, 1e-14).unwrap();
            let na = nalgebra::DMatrix::from_fn(6, 6, |i, j| rows[i][j]);
            let theirs = na.lu().solve(&nalgebra::DVector::from_vec(rhs.clone())).unwrap();
            for i in 0..6 {
                prop_assert!((ours[i] - theirs[i]).abs() < 1e-10);
            }
        }
    }
}
