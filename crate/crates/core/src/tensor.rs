//! Small shared tensor utilities used across the crate.

use ndarray::{ArrayView2, ArrayViewD, ArrayViewMut2, ArrayViewMutD, Ix2, IxDyn};

/// All tensors in this crate are dense dynamic-rank f64 arrays.
pub type Tensor = ndarray::ArrayD<f64>;

pub fn dims2(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected rank-2 tensor, got shape {s:?}");
    (s[0], s[1])
}

pub fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected rank-3 tensor, got shape {s:?}");
    (s[0], s[1], s[2])
}

pub fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected rank-4 tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// out = alpha * op(a) @ op(b) + beta * out, where op is optional transpose.
/// Views must be rank 2.
pub fn gemm_into(
    a: ArrayViewD<f64>,
    ta: bool,
    b: ArrayViewD<f64>,
    tb: bool,
    alpha: f64,
    beta: f64,
    out: &mut ArrayViewMutD<f64>,
) {
    let a2 = a.into_dimensionality::<Ix2>().expect("gemm: lhs rank 2");
    let b2 = b.into_dimensionality::<Ix2>().expect("gemm: rhs rank 2");
    let a2 = if ta { a2.reversed_axes() } else { a2 };
    let b2 = if tb { b2.reversed_axes() } else { b2 };
    let mut o2 = out
        .view_mut()
        .into_dimensionality::<Ix2>()
        .expect("gemm: out rank 2");
    mat_mul_into(alpha, &a2, &b2, beta, &mut o2);
}

/// out = alpha * a @ b + beta * out for rank-2 views.
///
/// Tiny products (attention heads, per-matrix spectral-norm steps) lose more
/// to the packed kernel's setup and repacking than to the multiply itself,
/// so they go through direct axpy/dot loops; everything else takes the
/// cache-blocked `general_mat_mul`.
pub fn mat_mul_into(
    alpha: f64,
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    beta: f64,
    c: &mut ArrayViewMut2<f64>,
) {
    let (m, k) = a.dim();
    let n = b.dim().1;
    if m * k * n < (1 << 16) {
        if b.strides()[1] == 1 && c.strides()[1] == 1 {
            return gemm_axpy(alpha, a, b, beta, c);
        }
        if a.strides()[1] == 1 && b.strides()[0] == 1 {
            return gemm_dot(alpha, a, b, beta, c);
        }
    }
    ndarray::linalg::general_mat_mul(alpha, a, b, beta, c);
}

/// Row-streaming kernel: each output row is a sum of scaled rows of `b`.
/// Requires `b` and `c` rows to be contiguous.
fn gemm_axpy(
    alpha: f64,
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    beta: f64,
    c: &mut ArrayViewMut2<f64>,
) {
    let (m, k) = a.dim();
    for i in 0..m {
        let mut crow = c.row_mut(i);
        let crow = crow.as_slice_mut().expect("gemm_axpy: c row");
        if beta == 0.0 {
            crow.fill(0.0);
        } else if beta != 1.0 {
            for v in crow.iter_mut() {
                *v *= beta;
            }
        }
        for p in 0..k {
            let av = alpha * a[[i, p]];
            let brow = b.row(p);
            let brow = brow.as_slice().expect("gemm_axpy: b row");
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot-product kernel for `a @ b` where `b` is a transposed view (columns
/// contiguous). Requires `a` rows contiguous.
fn gemm_dot(
    alpha: f64,
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    beta: f64,
    c: &mut ArrayViewMut2<f64>,
) {
    let (m, _) = a.dim();
    let n = b.dim().1;
    for i in 0..m {
        let arow = a.row(i);
        let arow = arow.as_slice().expect("gemm_dot: a row");
        for j in 0..n {
            let bcol = b.column(j);
            let bcol = bcol.as_slice().expect("gemm_dot: b column");
            let d = alpha * dot(arow, bcol);
            let cv = &mut c[[i, j]];
            *cv = if beta == 0.0 { d } else { beta * *cv + d };
        }
    }
}

/// Four-lane unrolled dot product; the fixed tree reduction keeps results
/// bit-identical from run to run.
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut s = [0.0f64; 4];
    let chunks = x.len() / 4;
    for ch in 0..chunks {
        let xo = &x[4 * ch..][..4];
        let yo = &y[4 * ch..][..4];
        s[0] += xo[0] * yo[0];
        s[1] += xo[1] * yo[1];
        s[2] += xo[2] * yo[2];
        s[3] += xo[3] * yo[3];
    }
    let mut t = (s[0] + s[1]) + (s[2] + s[3]);
    for i in 4 * chunks..x.len() {
        t += x[i] * y[i];
    }
    t
}

/// Flattens to a contiguous vector in row-major order.
pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.iter().cloned().collect()
}

/// Builds a tensor from a row-major vector and shape.
pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
    ndarray::Array::from_shape_vec(IxDyn(shape), data).expect("from_vec: length mismatch")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transpose_paths() {
        let a = from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = from_vec(&[2, 3], vec![1., 0., 0., 0., 1., 0.]);
        // a^T (3x2) @ b (2x3) -> 3x3
        let mut out = Tensor::zeros(IxDyn(&[3, 3]));
        gemm_into(a.view(), true, b.view(), false, 1.0, 0.0, &mut out.view_mut());
        assert_eq!(out[[0, 0]], 1.0);
        assert_eq!(out[[0, 1]], 4.0);
        assert_eq!(out[[2, 1]], 6.0);
    }
}
