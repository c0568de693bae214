//! Matrix product, log-determinant and inverse.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// `c (+)= op(a) * op(b)` with `op(a)` of size `m x k` and `op(b)` of size
/// `k x n`, all row-major. A transposed operand is stored as its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assert above guarantees every addressed element lies within
    // the slices; strides describe dense row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Product of `a [m, k]` and `b [k, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })
        }
    };
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data(), false, &b.data(), false, &mut out, false);
    let (pa, pb) = (a.clone(), b.clone());
    Tensor::from_op(
        "matmul",
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, &pb.data(), true, &mut ga, false);
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, &pa.data(), true, g, false, &mut gb, false);
                gb
            });
            vec![ga, gb]
        }),
    )
}

/// LU factorisation with partial pivoting, computed in f64.
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn factor(a: &[f32], n: usize) -> Self {
        let mut lu: Vec<f64> = a.iter().map(|&v| v as f64).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| lu[i * n + col].abs().total_cmp(&lu[j * n + col].abs()))
                .expect("non-empty range");
            if pivot != col {
                for j in 0..n {
                    lu.swap(pivot * n + j, col * n + j);
                }
                perm.swap(pivot, col);
                sign = -sign;
            }
            let d = lu[col * n + col];
            if d == 0.0 {
                continue;
            }
            for i in col + 1..n {
                let f = lu[i * n + col] / d;
                lu[i * n + col] = f;
                for j in col + 1..n {
                    lu[i * n + j] -= f * lu[col * n + j];
                }
            }
        }
        Lu { n, lu, perm, sign }
    }

    pub fn det(&self) -> f64 {
        self.sign * (0..self.n).map(|i| self.lu[i * self.n + i]).product::<f64>()
    }

    pub fn log_abs_det(&self) -> f64 {
        (0..self.n).map(|i| self.lu[i * self.n + i].abs().ln()).sum()
    }

    /// Inverse of the factored matrix, row-major.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        for col in 0..n {
            let mut x: Vec<f64> = (0..n).map(|i| if self.perm[i] == col { 1.0 } else { 0.0 }).collect();
            for i in 0..n {
                for j in 0..i {
                    x[i] -= self.lu[i * n + j] * x[j];
                }
            }
            for i in (0..n).rev() {
                for j in i + 1..n {
                    x[i] -= self.lu[i * n + j] * x[j];
                }
                x[i] /= self.lu[i * n + i];
            }
            for i in 0..n {
                inv[i * n + col] = x[i];
            }
        }
        inv
    }
}

/// Matrices with |det| below this are treated as singular.
pub const SINGULAR_DET: f64 = 1e-8;

fn square_dim(op: &'static str, a: &Tensor) -> Result<usize> {
    match a.shape() {
        &[n, m] if n == m => Ok(n),
        s => Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected a square matrix, got {s:?}"),
        }),
    }
}

fn checked_lu(op: &'static str, a: &Tensor) -> Result<(usize, Lu)> {
    let n = square_dim(op, a)?;
    let lu = Lu::factor(&a.data(), n);
    let det = lu.det();
    if det.abs() < SINGULAR_DET || !det.is_finite() {
        return Err(TensorError::Singular(det.abs()));
    }
    Ok((n, lu))
}

/// `log |det a|` for a square matrix; gradient `a^{-T}`.
pub fn log_abs_det(a: &Tensor) -> Result<Tensor> {
    let (n, lu) = checked_lu("log_abs_det", a)?;
    let value = lu.log_abs_det() as f32;
    let inv = lu.inverse();
    Tensor::from_op(
        "log_abs_det",
        vec![],
        vec![value],
        vec![a.clone()],
        Box::new(move |g, _| {
            let mut ga = vec![0.0f32; n * n];
            for i in 0..n {
                for j in 0..n {
                    ga[i * n + j] = (g[0] as f64 * inv[j * n + i]) as f32;
                }
            }
            vec![Some(ga)]
        }),
    )
}

/// Matrix inverse; gradient `-a^{-T} g a^{-T}`.
pub fn inverse(a: &Tensor) -> Result<Tensor> {
    let (n, lu) = checked_lu("inverse", a)?;
    let inv = lu.inverse();
    let out: Vec<f32> = inv.iter().map(|&v| v as f32).collect();
    Tensor::from_op(
        "inverse",
        vec![n, n],
        out,
        vec![a.clone()],
        Box::new(move |g, _| {
            // ga = -inv^T g inv^T
            let mut tmp = vec![0.0f64; n * n];
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for k in 0..n {
                        s += inv[k * n + i] * g[k * n + j] as f64;
                    }
                    tmp[i * n + j] = s;
                }
            }
            let mut ga = vec![0.0f32; n * n];
            for i in 0..n {
                for j in 0..n {
                    let mut s = 0.0;
                    for k in 0..n {
                        s += tmp[i * n + k] * inv[j * n + k];
                    }
                    ga[i * n + j] = -s as f32;
                }
            }
            vec![Some(ga)]
        }),
    )
}
