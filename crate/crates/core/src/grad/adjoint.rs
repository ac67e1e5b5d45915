//! Vector-Jacobian products for every differentiable op.

use super::{Op, Tape, Var};
use crate::error::Result;
use crate::tensor::ops::{self, dot, gelu_grad_scalar, layernorm_stats};
use crate::tensor::{Scalar, Tensor};

type Grads<T> = Vec<(Var, Tensor<T>)>;

pub(super) fn input_grads<T: Scalar>(tape: &Tape<'_, T>, op: &Op, out: &Tensor<T>, dy: &Tensor<T>) -> Result<Grads<T>> {
    let need = |v: Var| tape.requires_grad(v);
    let mut g = Vec::new();
    match op {
        Op::Leaf | Op::Constant => {}
        Op::Matmul { a, b, ta, tb } => {
            let (av, bv) = (tape.val(*a), tape.val(*b));
            if need(*a) {
                g.push((*a, matmul_grad_a(av, bv, dy, *ta, *tb)?));
            }
            if need(*b) {
                g.push((*b, matmul_grad_b(av, bv, dy, *ta, *tb)?));
            }
        }
        Op::Add { a, b } => {
            if need(*a) {
                g.push((*a, dy.clone()));
            }
            if need(*b) {
                g.push((*b, reduce_to(dy, tape.val(*b).shape())));
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (tape.val(*a), tape.val(*b));
            if need(*a) {
                g.push((*a, ops::mul(dy, bv)?));
            }
            if need(*b) {
                g.push((*b, reduce_to(&ops::mul(dy, av)?, bv.shape())));
            }
        }
        Op::Affine { x, scale } => {
            if need(*x) {
                g.push((*x, ops::affine(dy, *scale, 0.0)?));
            }
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            for p in parts {
                let len = tape.val(*p).shape()[*axis];
                if need(*p) {
                    g.push((*p, ops::slice(dy, *axis, start, len)?));
                }
                start += len;
            }
        }
        Op::Slice { x, axis, start } => {
            if need(*x) {
                g.push((*x, scatter_slice(tape.val(*x).shape(), dy, *axis, *start)));
            }
        }
        Op::Reshape { x } => {
            if need(*x) {
                g.push((*x, dy.clone().reshape(tape.val(*x).shape().to_vec())?));
            }
        }
        Op::Permute { x, perm } => {
            if need(*x) {
                g.push((*x, ops::permute(dy, &ops::inverse_permutation(perm))?));
            }
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            g.extend(layernorm_grads(tape, *x, *gain, *bias, *eps, dy));
        }
        Op::Softmax { x } => {
            if need(*x) {
                g.push((*x, softmax_grad(out, dy)));
            }
        }
        Op::LogSoftmax { x } => {
            if need(*x) {
                let n = out.last_dim();
                let mut dx = Vec::with_capacity(out.numel());
                for (yr, gr) in out.data().chunks_exact(n).zip(dy.data().chunks_exact(n)) {
                    let s = gr.iter().fold(T::ZERO, |a, &b| a + b);
                    dx.extend(yr.iter().zip(gr).map(|(&y, &d)| d - y.exp() * s));
                }
                g.push((*x, Tensor::from_parts_unchecked(out.shape().to_vec(), dx)));
            }
        }
        Op::Gelu { x } => {
            if need(*x) {
                let xv = tape.val(*x);
                let dx = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &d)| d * T::from_f64(gelu_grad_scalar(v.to_f64())))
                    .collect();
                g.push((*x, Tensor::from_parts_unchecked(xv.shape().to_vec(), dx)));
            }
        }
        Op::L2Normalize { x } => {
            if need(*x) {
                g.push((*x, l2n_grad(tape.val(*x), out, dy)));
            }
        }
        Op::ScaleShift { x, gamma, beta } => {
            let (xv, gv) = (tape.val(*x), tape.val(*gamma));
            let d = xv.last_dim();
            if need(*x) {
                g.push((*x, ops::mul(dy, gv)?));
            }
            if need(*gamma) {
                let mut acc = vec![T::ZERO; d];
                for (xr, gr) in xv.data().chunks_exact(d).zip(dy.data().chunks_exact(d)) {
                    for ((a, &u), &v) in acc.iter_mut().zip(xr).zip(gr) {
                        *a += u * v;
                    }
                }
                g.push((*gamma, Tensor::from_parts_unchecked(vec![d], acc)));
            }
            if need(*beta) {
                g.push((*beta, reduce_to(dy, &[d])));
            }
        }
        Op::CosineSim { x, a, eps } => {
            let (xv, av) = (tape.val(*x), tape.val(*a));
            let xn = ops::l2_normalize(xv, *eps)?;
            let an = ops::l2_normalize(av, *eps)?;
            if need(*x) {
                let dxn = ops::matmul_ex(dy, &an, false, false)?;
                g.push((*x, l2n_grad(xv, &xn, &dxn)));
            }
            if need(*a) {
                let dan = ops::matmul_ex(dy, &xn, true, false)?;
                g.push((*a, l2n_grad(av, &an, &dan)));
            }
        }
        Op::Sum { x } => {
            if need(*x) {
                g.push((*x, Tensor::full(tape.val(*x).shape().to_vec(), dy.item())));
            }
        }
        Op::Mean { x } => {
            if need(*x) {
                let xv = tape.val(*x);
                let v = dy.item() / T::from_f64(xv.numel() as f64);
                g.push((*x, Tensor::full(xv.shape().to_vec(), v)));
            }
        }
        Op::Log1pSumExp { z, mask } => {
            if need(*z) {
                let zv = tape.val(*z);
                let n = zv.shape()[1];
                let dz = zv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(idx, &v)| {
                        let j = idx % n;
                        if mask[idx] {
                            dy.data()[j] * (v - out.data()[j]).exp()
                        } else {
                            T::ZERO
                        }
                    })
                    .collect();
                g.push((*z, Tensor::from_parts_unchecked(zv.shape().to_vec(), dz)));
            }
        }
    }
    Ok(g)
}

/// Sums `g` over leading axes so it matches the suffix shape `target`.
fn reduce_to<T: Scalar>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let inner: usize = target.iter().product();
    let mut acc = vec![T::ZERO; inner];
    for chunk in g.data().chunks_exact(inner) {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a += v;
        }
    }
    Tensor::from_parts_unchecked(target.to_vec(), acc)
}

/// Copies a rank-2 `b` across the batch axes of `like`.
fn tile_batch<T: Scalar>(b: &Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    let batch: usize = like.shape()[..like.rank() - 2].iter().product();
    let mut shape = like.shape()[..like.rank() - 2].to_vec();
    shape.extend_from_slice(b.shape());
    let mut data = Vec::with_capacity(batch * b.numel());
    for _ in 0..batch {
        data.extend_from_slice(b.data());
    }
    Tensor::from_parts_unchecked(shape, data)
}

fn matmul_grad_a<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, dc: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let shared = b.rank() == 2 && a.rank() > 2;
    match (ta, tb) {
        (false, false) => ops::matmul_ex(dc, b, false, true),
        (false, true) => ops::matmul_ex(dc, b, false, false),
        (true, false) | (true, true) => {
            let b_full;
            let b = if shared {
                b_full = tile_batch(b, a);
                &b_full
            } else {
                b
            };
            if tb {
                ops::matmul_ex(b, dc, true, true)
            } else {
                ops::matmul_ex(b, dc, false, true)
            }
        }
    }
}

fn matmul_grad_b<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, dc: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let full = match (ta, tb) {
        (false, false) => ops::matmul_ex(a, dc, true, false)?,
        (false, true) => ops::matmul_ex(dc, a, true, false)?,
        (true, false) => ops::matmul_ex(a, dc, false, false)?,
        (true, true) => ops::matmul_ex(dc, a, true, true)?,
    };
    Ok(reduce_to(&full, b.shape()))
}

fn scatter_slice<T: Scalar>(shape: &[usize], dy: &Tensor<T>, axis: usize, start: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(shape.to_vec());
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = dy.shape()[axis];
    let full = shape[axis] * inner;
    let part = len * inner;
    let data = out.data_mut();
    for o in 0..outer {
        let dst = o * full + start * inner;
        data[dst..dst + part].copy_from_slice(&dy.data()[o * part..(o + 1) * part]);
    }
    out
}

fn softmax_grad<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let n = y.last_dim();
    let mut dx = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks_exact(n).zip(dy.data().chunks_exact(n)) {
        let s = dot(yr, gr);
        dx.extend(yr.iter().zip(gr).map(|(&yv, &d)| yv * (d - s)));
    }
    Tensor::from_parts_unchecked(y.shape().to_vec(), dx)
}

/// `dx = (dy - y (y . dy)) / |x|` row-wise.
fn l2n_grad<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let d = x.last_dim();
    let mut dx = Vec::with_capacity(x.numel());
    for ((xr, yr), gr) in x.data().chunks_exact(d).zip(y.data().chunks_exact(d)).zip(dy.data().chunks_exact(d)) {
        let norm = dot(xr, xr).sqrt();
        let proj = dot(yr, gr);
        dx.extend(yr.iter().zip(gr).map(|(&yv, &g)| (g - yv * proj) / norm));
    }
    Tensor::from_parts_unchecked(x.shape().to_vec(), dx)
}

fn layernorm_grads<T: Scalar>(tape: &Tape<'_, T>, x: Var, gain: Var, bias: Var, eps: f64, dy: &Tensor<T>) -> Grads<T> {
    let xv = tape.val(x);
    let gv = tape.val(gain);
    let e = xv.last_dim();
    let ef = T::from_f64(e as f64);
    let mut dx = Vec::with_capacity(if tape.requires_grad(x) { xv.numel() } else { 0 });
    let mut dgain = vec![T::ZERO; e];
    let mut xhat = vec![T::ZERO; e];
    let mut dxhat = vec![T::ZERO; e];
    for (xr, gr) in xv.data().chunks_exact(e).zip(dy.data().chunks_exact(e)) {
        let (mean, inv_std) = layernorm_stats(xr, eps);
        for i in 0..e {
            xhat[i] = (xr[i] - mean) * inv_std;
            dxhat[i] = gr[i] * gv.data()[i];
            dgain[i] += gr[i] * xhat[i];
        }
        if tape.requires_grad(x) {
            let m1 = dxhat.iter().fold(T::ZERO, |a, &b| a + b) / ef;
            let m2 = dot(&dxhat, &xhat) / ef;
            for i in 0..e {
                dx.push(inv_std * (dxhat[i] - m1 - xhat[i] * m2));
            }
        }
    }
    let mut g = Vec::new();
    if tape.requires_grad(x) {
        g.push((x, Tensor::from_parts_unchecked(xv.shape().to_vec(), dx)));
    }
    if tape.requires_grad(gain) {
        g.push((gain, Tensor::from_parts_unchecked(vec![e], dgain)));
    }
    if tape.requires_grad(bias) {
        g.push((bias, reduce_to(dy, &[e])));
    }
    g
}
