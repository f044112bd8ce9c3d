use crate::scalar::Real;

/// Dense row-major matrix. Every value flowing through the tape is 2-D;
/// feature maps are flattened to `(cells, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, v: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length does not match shape");
        Self { rows, cols, data }
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    /// Only meaningful for 1x1 tensors.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|v| *v * *v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.f64()).unwrap()).collect(),
        }
    }
}

/// `c += a * b` for a (n x k), b (k x m).
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let ci = &mut c[i * m..(i + 1) * m];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == T::zero() {
                continue;
            }
            let bk = &b[kk * m..(kk + 1) * m];
            for (cv, bv) in ci.iter_mut().zip(bk) {
                *cv += aik * *bv;
            }
        }
    }
}

/// `c += a^T * b` for a (k x n), b (k x m).
pub(crate) fn matmul_at_b_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize, m: usize) {
    for kk in 0..k {
        let ak = &a[kk * n..(kk + 1) * n];
        let bk = &b[kk * m..(kk + 1) * m];
        for (i, aik) in ak.iter().enumerate() {
            if *aik == T::zero() {
                continue;
            }
            let ci = &mut c[i * m..(i + 1) * m];
            for (cv, bv) in ci.iter_mut().zip(bk) {
                *cv += *aik * *bv;
            }
        }
    }
}

/// `c += a * b^T` for a (n x k), b (m x k).
pub(crate) fn matmul_a_bt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let bj = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (x, y) in ai.iter().zip(bj) {
                s += *x * *y;
            }
            c[i * m + j] += s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [1.0 * 1.0 - 2.0 + 1.5, 0.0 + 4.0 + 3.0, 4.0 - 5.0 + 3.0, 0.0 + 10.0 + 6.0]);

        // a^T (3x2) * a (2x3) via at_b with k = 2
        let mut d = [0.0; 9];
        matmul_at_b_acc(&a, &a, &mut d, 2, 3, 3);
        assert_eq!(d[0], 1.0 + 16.0);
        assert_eq!(d[5], 2.0 * 3.0 + 5.0 * 6.0);

        let mut e = [0.0; 4];
        matmul_a_bt_acc(&a, &a, &mut e, 2, 3, 2);
        assert_eq!(e, [14.0, 32.0, 32.0, 77.0]);
    }
}
