//! Forward kernels. Each one is a pure function of its inputs; the autodiff
//! tape and the eager executor both call into this module, which is what
//! makes cached, uncached and untaped forwards agree bit for bit.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Default threshold below which a row norm counts as degenerate.
pub const EPS_NORM: f64 = 1e-12;

/// Default layernorm epsilon.
pub const LN_EPS: f64 = 1e-6;

/// Plain matrix product `a @ b`. See [`matmul_ex`] for batching rules.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_ex(a, b, false, false)
}

/// Batched matrix product with optional transposition of either operand's
/// trailing two axes.
///
/// `a` has shape `[..batch, m, k]` (or `[..batch, k, m]` when `trans_a`), `b`
/// has `[..batch, k, n]` (or `[..batch, n, k]`). `b` may instead be rank 2,
/// in which case it is shared across every batch entry of `a`.
pub fn matmul_ex<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_a: bool, trans_b: bool) -> Result<Tensor<T>> {
    let (ar, br) = (a.rank(), b.rank());
    if ar < 2 || br < 2 {
        return Err(Error::shape(
            "matmul",
            format!("operands must be rank >= 2, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let a_batch = &a.shape()[..ar - 2];
    let b_batch = &b.shape()[..br - 2];
    let shared_b = br == 2;
    if !shared_b && a_batch != b_batch {
        return Err(Error::shape("matmul", format!("batch dims differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (a0, a1) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (b0, b1) = (b.shape()[br - 2], b.shape()[br - 1]);
    let (m, k) = if trans_a { (a1, a0) } else { (a0, a1) };
    let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
    if k != kb {
        return Err(Error::shape(
            "matmul",
            format!(
                "inner dimensions disagree: {:?}{} x {:?}{}",
                a.shape(),
                if trans_a { "^T" } else { "" },
                b.shape(),
                if trans_b { "^T" } else { "" }
            ),
        ));
    }
    let batch: usize = a_batch.iter().product();
    let mut out = vec![T::ZERO; batch * m * n];
    let (sa, sb, so) = (m * k, if shared_b { 0 } else { k * n }, m * n);
    for bi in 0..batch {
        let ab = &a.data()[bi * sa..(bi + 1) * sa];
        let bb = &b.data()[bi * sb..bi * sb + k * n];
        let ob = &mut out[bi * so..(bi + 1) * so];
        match (trans_a, trans_b) {
            (false, false) => gemm_nn(ab, bb, ob, m, k, n),
            (false, true) => gemm_nt(ab, bb, ob, m, k, n),
            (true, false) => gemm_tn(ab, bb, ob, m, k, n),
            (true, true) => {
                let at = transpose_block(ab, k, m);
                gemm_nt(&at, bb, ob, m, k, n)
            }
        }
    }
    let mut shape = a_batch.to_vec();
    shape.extend_from_slice(&[m, n]);
    Tensor::from_parts_unchecked(shape, out).ensure_finite("matmul")
}

fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
}

// a is stored [k x m]
fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

fn transpose_block<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Transpose of a rank-2 tensor.
pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::shape("transpose", format!("expected rank 2, got {:?}", x.shape())));
    }
    let (r, c) = (x.shape()[0], x.shape()[1]);
    Ok(Tensor::from_parts_unchecked(vec![c, r], transpose_block(x.data(), r, c)))
}

fn broadcast_binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_parts_unchecked(a.shape().to_vec(), data).ensure_finite(op);
    }
    if !is_suffix(b.shape(), a.shape()) {
        return Err(Error::shape(op, format!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape())));
    }
    let inner = b.numel();
    let data =
        a.data().chunks_exact(inner).flat_map(|chunk| chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y))).collect();
    Tensor::from_parts_unchecked(a.shape().to_vec(), data).ensure_finite(op)
}

pub(crate) fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// Elementwise sum. `b` may be broadcast over leading axes of `a` when its
/// shape is a suffix of `a`'s (bias vectors, positional embeddings).
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary("add", a, b, |x, y| x + y)
}

/// Elementwise product with the same broadcasting rule as [`add`].
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    broadcast_binary("mul", a, b, |x, y| x * y)
}

/// `scale * x + shift` with scalar coefficients.
pub fn affine<T: Scalar>(x: &Tensor<T>, scale: f64, shift: f64) -> Result<Tensor<T>> {
    let (s, c) = (T::from_f64(scale), T::from_f64(shift));
    x.map(|v| s * v + c).ensure_finite("affine")
}

/// Concatenation along `axis`; every other extent must agree.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", "no tensors to concatenate"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::shape("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    for p in parts {
        let ok =
            p.rank() == rank && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(
                "concat",
                format!("{:?} incompatible with {:?} along axis {axis}", p.shape(), first.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk: usize = p.shape()[axis..].iter().product();
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts_unchecked(shape, data))
}

/// `len` consecutive entries of `axis` starting at `start`.
pub fn slice<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::shape("slice", format!("[{start}..{}) on axis {axis} of {:?}", start + len, x.shape())));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let full = x.shape()[axis] * inner;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full + start * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts_unchecked(shape, data))
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape("permute", format!("{perm:?} is not a permutation of rank {rank}")));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        data.push(x.data()[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts_unchecked(out_shape, data))
}

/// Inverse of a permutation, for undoing [`permute`].
pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Per-row statistics shared by the forward and adjoint of layernorm.
pub(crate) fn layernorm_stats<T: Scalar>(row: &[T], eps: f64) -> (T, T) {
    let d = T::from_f64(row.len() as f64);
    let mut sum = T::ZERO;
    for &v in row {
        sum += v;
    }
    let mean = sum / d;
    let mut sq = T::ZERO;
    for &v in row {
        let c = v - mean;
        sq += c * c;
    }
    let var = sq / d;
    let inv_std = T::ONE / (var + T::from_f64(eps)).sqrt();
    (mean, inv_std)
}

/// Layer normalization over the last axis: `gain * (x - mean) / sqrt(var + eps) + bias`
/// with the biased (1/e) variance.
pub fn layernorm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("layernorm eps must be > 0, got {eps}")));
    }
    let e = x.last_dim();
    if gain.shape() != [e] || bias.shape() != [e] {
        return Err(Error::shape(
            "layernorm",
            format!("gain {:?} / bias {:?} vs feature dim {e}", gain.shape(), bias.shape()),
        ));
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(e) {
        let (mean, inv_std) = layernorm_stats(row, eps);
        for ((&v, &g), &b) in row.iter().zip(gain.data()).zip(bias.data()) {
            out.push((v - mean) * inv_std * g + b);
        }
    }
    Tensor::from_parts_unchecked(x.shape().to_vec(), out).ensure_finite("layernorm")
}

/// Softmax over the last axis with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.last_dim();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(n) {
        let m = row.iter().copied().fold(row[0], T::max);
        let start = out.len();
        let mut sum = T::ZERO;
        for &v in row {
            let e = (v - m).exp();
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / sum;
        }
    }
    Tensor::from_parts_unchecked(x.shape().to_vec(), out).ensure_finite("softmax")
}

/// `log(softmax(x))` over the last axis, computed without forming the softmax.
pub fn log_softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.last_dim();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(n) {
        let m = row.iter().copied().fold(row[0], T::max);
        let mut sum = T::ZERO;
        for &v in row {
            sum += (v - m).exp();
        }
        let lse = m + sum.ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::from_parts_unchecked(x.shape().to_vec(), out).ensure_finite("log_softmax")
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Exact (erf-based) GELU, evaluated in f64.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.map(|v| T::from_f64(gelu_scalar(v.to_f64()))).ensure_finite("gelu")
}

/// Row-wise L2 normalization over the last axis. Rows with norm `<= eps_norm`
/// are rejected rather than blown up.
pub fn l2_normalize<T: Scalar>(x: &Tensor<T>, eps_norm: f64) -> Result<Tensor<T>> {
    let d = x.last_dim();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(d) {
        let norm = dot(row, row).sqrt();
        if !(norm.to_f64() > eps_norm) {
            return Err(Error::Degenerate { op: "l2_normalize", norm: norm.to_f64(), eps: eps_norm });
        }
        out.extend(row.iter().map(|&v| v / norm));
    }
    Tensor::from_parts_unchecked(x.shape().to_vec(), out).ensure_finite("l2_normalize")
}

/// `gamma * x + beta` along the last axis, broadcast over every leading axis.
pub fn scale_shift<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "scale_shift",
            format!("gamma {:?} / beta {:?} vs feature dim {d}", gamma.shape(), beta.shape()),
        ));
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(d) {
        for ((&v, &g), &b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            out.push(g * v + b);
        }
    }
    Tensor::from_parts_unchecked(x.shape().to_vec(), out).ensure_finite("scale_shift")
}

fn clamp_unit<T: Scalar>(v: T) -> T {
    v.max(-T::ONE).min(T::ONE)
}

/// Cosine similarity of two vectors, clamped to `[-1, 1]`.
pub fn cosine<T: Scalar>(x: &[T], a: &[T], eps_norm: f64) -> Result<T> {
    if x.len() != a.len() || x.is_empty() {
        return Err(Error::shape("cosine_sim", format!("lengths {} and {}", x.len(), a.len())));
    }
    let nx = dot(x, x).sqrt();
    let na = dot(a, a).sqrt();
    for n in [nx, na] {
        if !(n.to_f64() > eps_norm) {
            return Err(Error::Degenerate { op: "cosine_sim", norm: n.to_f64(), eps: eps_norm });
        }
    }
    let mut acc = T::ZERO;
    for (&u, &v) in x.iter().zip(a) {
        acc += (u / nx) * (v / na);
    }
    Ok(clamp_unit(acc))
}

/// Pairwise cosine similarity between rows: `out[i, j] = s(x_i, a_j)`.
pub fn cosine_matrix<T: Scalar>(x: &Tensor<T>, a: &Tensor<T>, eps_norm: f64) -> Result<Tensor<T>> {
    if x.rank() != 2 || a.rank() != 2 || x.shape()[1] != a.shape()[1] {
        return Err(Error::shape(
            "cosine_sim",
            format!("expected [M x D] and [N x D], got {:?} and {:?}", x.shape(), a.shape()),
        ));
    }
    let xn = l2_normalize(x, eps_norm).map_err(|e| rename_degenerate(e, "cosine_sim"))?;
    let an = l2_normalize(a, eps_norm).map_err(|e| rename_degenerate(e, "cosine_sim"))?;
    let s = matmul_ex(&xn, &an, false, true)?;
    Ok(s.map(clamp_unit))
}

fn rename_degenerate(e: Error, op: &'static str) -> Error {
    match e {
        Error::Degenerate { norm, eps, .. } => Error::Degenerate { op, norm, eps },
        other => other,
    }
}

/// Sum of all elements as a one-element tensor.
pub fn sum<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut acc = T::ZERO;
    for &v in x.data() {
        acc += v;
    }
    Tensor::scalar(acc).ensure_finite("sum")
}

/// Mean of all elements as a one-element tensor.
pub fn mean<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = sum(x)?.item();
    Tensor::scalar(s / T::from_f64(x.numel() as f64)).ensure_finite("mean")
}

/// Column-wise `log(1 + sum_{i: mask[i,j]} exp(z[i,j]))` for `z: [M x N]`,
/// stabilized by shifting with `max(0, max_i z[i,j])`. Columns with no
/// selected entries evaluate to `log 1 = 0`.
pub fn log1p_sum_exp<T: Scalar>(z: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    if z.rank() != 2 || mask.len() != z.numel() {
        return Err(Error::shape("log1p_sum_exp", format!("z {:?} with mask of length {}", z.shape(), mask.len())));
    }
    let (m, n) = (z.shape()[0], z.shape()[1]);
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let mut shift = T::ZERO;
        for i in 0..m {
            if mask[i * n + j] {
                shift = shift.max(z.data()[i * n + j]);
            }
        }
        let mut acc = (-shift).exp();
        for i in 0..m {
            if mask[i * n + j] {
                acc += (z.data()[i * n + j] - shift).exp();
            }
        }
        out.push(shift + acc.ln());
    }
    Tensor::new(vec![n], out)?.ensure_finite("log1p_sum_exp")
}

/// Selects rows of a `[R x D]`-viewed tensor (not a differentiable op; used
/// to assemble batches).
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let d: usize = x.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        if r >= x.shape()[0] {
            return Err(Error::shape("gather_rows", format!("row {r} of {:?}", x.shape())));
        }
        data.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data)
}

/// Stacks equally-shaped tensors along a new leading axis.
pub fn stack<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::shape("stack", "nothing to stack"))?;
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for p in parts {
        if p.shape() != first.shape() {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", p.shape(), first.shape())));
        }
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}
