//! Forward kernels on plain tensors. The tape in [`super::graph`] records
//! calls to these and supplies the matching vector-Jacobian products.

use super::Tensor;
use crate::error::{Error, Result};

/// `c = op(a) · op(b)` through the blocked GEMM in `matrixmultiply`.
///
/// `ta`/`tb` select the transposed operand; strides do the transposition so
/// no copy is made.
fn gemm(a: &Tensor, ta: bool, b: &Tensor, tb: bool, op: &'static str) -> Result<Tensor> {
    let (ar, ac) = a.require_matrix(op)?;
    let (br, bc) = b.require_matrix(op)?;
    let (m, k, rsa, csa) = if ta { (ac, ar, 1, ac) } else { (ar, ac, ac, 1) };
    let (k2, n, rsb, csb) = if tb { (bc, br, 1, bc) } else { (br, bc, bc, 1) };
    if k != k2 {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
        // strides describe row-major layouts within those bounds.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data().as_ptr(),
                rsa as isize,
                csa as isize,
                b.data().as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Ok(Tensor::from_raw(vec![m, n], out))
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, false, b, false, "matmul")
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, false, b, true, "matmul_nt")
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, true, b, false, "matmul_tn")
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.require_matrix("transpose")?;
    let src = x.data();
    let mut out = vec![0.0; r * c];
    const TILE: usize = 32;
    for i0 in (0..r).step_by(TILE) {
        for j0 in (0..c).step_by(TILE) {
            for i in i0..(i0 + TILE).min(r) {
                for j in j0..(j0 + TILE).min(c) {
                    out[j * r + i] = src[i * c + j];
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![c, r], out))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.require_matrix("softmax_rows")?;
    let mut out = x.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(Tensor::from_raw(vec![r, c], out))
}

/// Row-wise `log softmax`, computed as `x - max - ln Σ exp(x - max)`.
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.require_matrix("log_softmax_rows")?;
    let mut out = x.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(Tensor::from_raw(vec![r, c], out))
}

/// Divides each row by `max(‖row‖, eps)`. Returns the output and the
/// per-row Euclidean norms of the input.
pub fn l2_normalize_rows(x: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Contract(format!("l2_normalize_rows eps must be > 0, got {eps}")));
    }
    let (r, c) = x.require_matrix("l2_normalize_rows")?;
    let mut out = x.data().to_vec();
    let mut norms = Vec::with_capacity(r);
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(eps);
        for v in row.iter_mut() {
            *v /= denom;
        }
        norms.push(norm);
    }
    Ok((Tensor::from_raw(vec![r, c], out), norms))
}

/// Adds a length-`n` bias to every row of an `m×n` matrix.
pub fn add_row(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (r, c) = x.require_matrix("add_row")?;
    if bias.numel() != c {
        return Err(Error::shape("add_row", x.shape(), bias.shape()));
    }
    let b = bias.data();
    let mut out = x.data().to_vec();
    for i in 0..r {
        for (v, bv) in out[i * c..(i + 1) * c].iter_mut().zip(b) {
            *v += bv;
        }
    }
    Ok(Tensor::from_raw(vec![r, c], out))
}

fn zip_with(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_raw(a.shape().to_vec(), data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with(a, b, "mul", |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v * s)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| v.max(0.0))
}

pub fn tanh(a: &Tensor) -> Tensor {
    a.map(f64::tanh)
}

/// Row sums of a matrix.
pub fn row_sums(x: &Tensor) -> Vec<f64> {
    (0..x.rows()).map(|i| x.row(i).iter().sum()).collect()
}
