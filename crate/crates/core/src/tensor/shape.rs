//! Shape arithmetic, strided iteration and the GEMM kernel shared by the tape ops.

use super::{Result, TensorError};

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast output `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
pub(crate) fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if a == out && b == out {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    let (la, lb) = (numel(a), numel(b));
    // Trailing-suffix broadcasting (bias adds) reduces to modular indexing.
    let is_suffix = |s: &[usize]| out.ends_with(s) || s.iter().all(|&d| d == 1);
    if a == out && is_suffix(b) {
        (0..n).for_each(|i| f(i, i, i % lb));
        return;
    }
    if b == out && is_suffix(a) {
        (0..n).for_each(|i| f(i, i % la, i));
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let mut idx = vec![0usize; out.len()];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..n {
        f(i, ia, ib);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Copies `data` with axes `a` and `b` exchanged.
pub(crate) fn swap_axes(data: &[f64], shape: &[usize], a: usize, b: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let mut out_strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    // Stride, in the output buffer, of each input axis.
    let mut in_to_out = out_strides.clone();
    in_to_out.swap(a, b);
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; shape.len()];
    let mut o = 0usize;
    for &v in data {
        out[o] = v;
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            o += in_to_out[d];
            if idx[d] < shape[d] {
                break;
            }
            o -= in_to_out[d] * shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// `c (m×n) = op(a) · op(b)`, optionally accumulating into `c`.
///
/// With `a_t` the buffer holds `a` as k×m; with `b_t` the buffer holds `b` as n×k.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the bounds asserted above cover every index reachable through these strides.
    unsafe {
        matrixmultiply::dgemm(
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
