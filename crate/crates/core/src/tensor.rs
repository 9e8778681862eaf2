//! Dense row-major tensors and the small amount of linear algebra the crate
//! needs: matrix products, LU determinant/inverse, QR orthogonalization and
//! the matrix exponential by scaling-and-squaring.

use crate::scalar::Scalar;

/// Dense row-major array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub data: Vec<S>,
    pub shape: Vec<usize>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(data: Vec<S>, shape: Vec<usize>) -> Self {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "shape/data mismatch");
        Tensor { data, shape }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![S::zero(); shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Tensor {
            data: vec![v; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { data: vec![v], shape: vec![] }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let ncols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for r in rows {
            assert_eq!(r.len(), ncols);
            data.extend_from_slice(r);
        }
        Tensor::new(data, vec![rows.len(), ncols])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> S {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Number of rows when interpreted as a 2-d array (trailing axes folded).
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[0]
        }
    }

    /// Row width when interpreted as a 2-d array.
    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            if self.shape.is_empty() {
                1
            } else {
                self.shape[0]
            }
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let w = self.cols();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let w = self.cols();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(self.len(), shape.iter().product::<usize>(), "reshape size mismatch");
        self.shape = shape.to_vec();
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            shape: self.shape.clone(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v.to_f64()).collect()
    }
}

/// c += a @ b with a: m x k, b: k x n (row-major slices).
pub fn matmul_acc<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    S::gemm(m, k, n, S::one(), a, b, S::one(), c);
}

/// Returns a @ b with a: m x k, b: k x n.
pub fn matmul<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S]) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    S::gemm(m, k, n, S::one(), a, b, S::zero(), &mut c);
    c
}

/// Transpose of a row-major r x c matrix.
pub fn transpose<S: Scalar>(r: usize, c: usize, a: &[S]) -> Vec<S> {
    let mut t = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

/// LU decomposition with partial pivoting, in place. Returns the permutation
/// sign and the pivot rows, or None if the matrix is singular to working
/// precision.
fn lu_decompose<S: Scalar>(n: usize, a: &mut [S]) -> Option<(S, Vec<usize>)> {
    let mut piv: Vec<usize> = (0..n).collect();
    let mut sign = S::one();
    for col in 0..n {
        let mut p = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                p = r;
            }
        }
        if best == S::zero() {
            return None;
        }
        if p != col {
            for j in 0..n {
                a.swap(col * n + j, p * n + j);
            }
            piv.swap(col, p);
            sign = -sign;
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            a[r * n + col] = f;
            for j in col + 1..n {
                let upper = a[col * n + j];
                a[r * n + j] = a[r * n + j] - f * upper;
            }
        }
    }
    Some((sign, piv))
}

/// log|det A| and the determinant sign for a square matrix.
pub fn log_abs_det<S: Scalar>(n: usize, a: &[S]) -> Option<(S, S)> {
    let mut lu = a.to_vec();
    let (mut sign, _) = lu_decompose(n, &mut lu)?;
    let mut logdet = S::zero();
    for i in 0..n {
        let d = lu[i * n + i];
        if d < S::zero() {
            sign = -sign;
        }
        logdet += d.abs().ln();
    }
    Some((logdet, sign))
}

/// Matrix inverse via LU with partial pivoting.
pub fn inverse<S: Scalar>(n: usize, a: &[S]) -> Option<Vec<S>> {
    let mut lu = a.to_vec();
    let (_, piv) = lu_decompose(n, &mut lu)?;
    let mut inv = vec![S::zero(); n * n];
    for col in 0..n {
        // Solve A x = e_col using the pivoted LU factors.
        let mut x = vec![S::zero(); n];
        for (i, &pi) in piv.iter().enumerate() {
            x[i] = if pi == col { S::one() } else { S::zero() };
        }
        for i in 0..n {
            for j in 0..i {
                let f = lu[i * n + j];
                let xj = x[j];
                x[i] = x[i] - f * xj;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let f = lu[i * n + j];
                let xj = x[j];
                x[i] = x[i] - f * xj;
            }
            x[i] = x[i] / lu[i * n + i];
        }
        for i in 0..n {
            inv[i * n + col] = x[i];
        }
    }
    Some(inv)
}

/// Solves the linear least-squares system X beta = y via normal equations
/// with a small ridge term for numerical safety. X: n x p, y: n x q.
pub fn least_squares<S: Scalar>(n: usize, p: usize, q: usize, x: &[S], y: &[S], ridge: S) -> Vec<S> {
    let xt = transpose(n, p, x);
    let mut xtx = matmul(p, n, p, &xt, x);
    for i in 0..p {
        xtx[i * p + i] += ridge;
    }
    let xty = matmul(p, n, q, &xt, y);
    match inverse(p, &xtx) {
        Some(inv) => matmul(p, p, q, &inv, &xty),
        None => vec![S::zero(); p * q],
    }
}

/// Matrix exponential by scaling-and-squaring with a Taylor core.
///
/// The inputs here are small (graph-sized, entries in [0, 1] after a
/// sigmoid), so a order-16 Taylor series after scaling is ample.
pub fn expm<S: Scalar>(n: usize, a: &[S]) -> Vec<S> {
    // Infinity norm decides the scaling exponent.
    let mut norm = S::zero();
    for i in 0..n {
        let s: S = (0..n).map(|j| a[i * n + j].abs()).sum();
        if s > norm {
            norm = s;
        }
    }
    let mut squarings = 0u32;
    let mut scale = S::one();
    while norm.to_f64() / scale.to_f64() > 0.5 {
        scale = scale + scale;
        squarings += 1;
    }
    let inv_scale = S::one() / scale;
    let scaled: Vec<S> = a.iter().map(|&v| v * inv_scale).collect();

    let mut result = vec![S::zero(); n * n];
    for i in 0..n {
        result[i * n + i] = S::one();
    }
    let mut term = result.clone();
    for k in 1..=16usize {
        let next = matmul(n, n, n, &term, &scaled);
        let inv_k = S::one() / S::from_usize(k);
        term = next.iter().map(|&v| v * inv_k).collect();
        for (r, t) in result.iter_mut().zip(term.iter()) {
            *r += *t;
        }
    }
    for _ in 0..squarings {
        result = matmul(n, n, n, &result, &result);
    }
    result
}

/// Trace of a square matrix.
pub fn trace<S: Scalar>(n: usize, a: &[S]) -> S {
    (0..n).map(|i| a[i * n + i]).sum()
}

/// Orthogonal matrix from the QR factorization of a square matrix
/// (modified Gram-Schmidt), with the sign convention R_ii > 0 so the result
/// is deterministic in the input.
pub fn orthogonalize<S: Scalar>(n: usize, a: &[S]) -> Vec<S> {
    // Work column-by-column on the transposed copy for contiguous access.
    let mut cols: Vec<Vec<S>> = (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j]).collect())
        .collect();
    for j in 0..n {
        for k in 0..j {
            let dot: S = (0..n).map(|i| cols[j][i] * cols[k][i]).sum();
            for i in 0..n {
                let v = cols[k][i];
                cols[j][i] = cols[j][i] - dot * v;
            }
        }
        let norm: S = (0..n).map(|i| cols[j][i] * cols[j][i]).sum::<S>().sqrt();
        let norm = if norm == S::zero() { S::one() } else { norm };
        for i in 0..n {
            cols[j][i] = cols[j][i] / norm;
        }
    }
    let mut q = vec![S::zero(); n * n];
    for j in 0..n {
        for i in 0..n {
            q[i * n + j] = cols[j][i];
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn matmul_small() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![5.0f64, 6.0, 7.0, 8.0];
        let c = matmul(2, 2, 2, &a, &b);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn lu_logabsdet_matches_cofactor_2x2() {
        let a = vec![3.0f64, 1.0, 2.0, 4.0];
        let (ld, sign) = log_abs_det(2, &a).unwrap();
        assert!((ld - 10.0f64.ln()).abs() < 1e-12);
        assert_eq!(sign, 1.0);
    }

    #[test]
    fn inverse_roundtrip() {
        let mut rng = Rng::new(7, 0);
        let n = 6;
        let a: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        let inv = inverse(n, &a).unwrap();
        let prod = matmul(n, n, n, &a, &inv);
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod[i * n + j] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let a = vec![0.0f64; 9];
        let e = expm(3, &a);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((e[i * 3 + j] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn expm_two_cycle_trace_is_two_cosh_one() {
        // tr(exp([[0,1],[1,0]])) = e + 1/e
        let a = vec![0.0f64, 1.0, 1.0, 0.0];
        let e = expm(2, &a);
        let tr = trace(2, &e);
        assert!((tr - 2.0 * 1.0f64.cosh()).abs() < 1e-12);
    }

    #[test]
    fn orthogonalize_produces_orthogonal_matrix() {
        let mut rng = Rng::new(3, 0);
        let n = 5;
        let a: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        let q = orthogonalize(n, &a);
        let qt = transpose(n, n, &q);
        let prod = matmul(n, n, n, &qt, &q);
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod[i * n + j] - expect).abs() < 1e-10);
            }
        }
        let (ld, _) = log_abs_det(n, &q).unwrap();
        assert!(ld.abs() < 1e-10);
    }
}
