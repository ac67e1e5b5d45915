//! Finite-difference verification of tape gradients.
//!
//! A [`LossProbe`] describes a scalar function of a few named leaves. The
//! checker differentiates it on a [`Tape`] and compares each gradient entry
//! against a central difference evaluated eagerly in f64.

use rayon::prelude::*;
use serde::Serialize;

use super::{Eager, Graph, OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ops, Rng, Scalar, Tensor};

/// A scalar-valued function of named leaves, written against [`Graph`] so it
/// can be both taped and evaluated eagerly.
pub trait LossProbe<T: Scalar>: Sync {
    fn leaves(&self) -> Vec<(String, Tensor<T>)>;
    fn loss<'w, G: Graph<'w, T>>(&'w self, g: &mut G, leaves: &[G::Value]) -> Result<G::Value>;
}

/// Acceptance rule for one gradient entry: it passes when the absolute error
/// is within `abs_floor` or the relative error is below `rel`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Tolerance {
    pub step: f64,
    pub abs_floor: f64,
    pub rel: f64,
}

impl Tolerance {
    /// f64 tape against f64 central differences.
    pub const F64: Tolerance = Tolerance { step: 1e-5, abs_floor: 1e-8, rel: 1e-4 };
    /// f32 tape against the same f64 oracle.
    pub const F32: Tolerance = Tolerance { step: 1e-5, abs_floor: 1e-5, rel: 1e-2 };

    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let abs = (analytic - numeric).abs();
        abs <= self.abs_floor || abs / analytic.abs().max(numeric.abs()) < self.rel
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LeafCheck {
    pub name: String,
    pub numel: usize,
    pub max_abs_err: f64,
    /// Over entries whose gradient magnitude exceeds the tolerance floor.
    pub max_rel_err: f64,
    pub failures: usize,
    /// Flat index of the entry with the largest absolute error.
    pub worst_index: usize,
}

impl LeafCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub label: String,
    pub leaves: Vec<LeafCheck>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(LeafCheck::passed)
    }

    pub fn entries_checked(&self) -> usize {
        self.leaves.iter().map(|l| l.numel).sum()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_err).fold(0.0, f64::max)
    }

    /// Leading identifier of the label, e.g. `matmul` for `matmul(ta=..)`.
    pub fn op_name(&self) -> &str {
        self.label.split('(').next().unwrap_or(&self.label).trim()
    }
}

/// Tape gradients of `probe` in precision `T`, cast to f64.
pub fn analytic_gradients<T: Scalar, P: LossProbe<T>>(
    probe: &P,
    fault: Option<OpKind>,
) -> Result<Vec<(String, Tensor<f64>)>> {
    let mut tape = Tape::<T>::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let leaves = probe.leaves();
    let vars: Vec<Var> = leaves.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = probe.loss(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(leaves.into_iter().zip(vars).map(|((name, _), v)| (name, grads.of(v).cast())).collect())
}

/// Central-difference gradients of an f64 probe.
pub fn numeric_gradients<P: LossProbe<f64>>(probe: &P, step: f64) -> Result<Vec<(String, Tensor<f64>)>> {
    let leaves = probe.leaves();
    let eval = |values: Vec<Tensor<f64>>| -> Result<f64> {
        let mut g = Eager;
        let vals: Vec<_> = values.into_iter().map(|t| Graph::<f64>::constant(&mut g, t)).collect();
        let out = probe.loss(&mut g, &vals)?;
        Ok(Graph::<f64>::value(&g, &out).item())
    };
    let coords: Vec<(usize, usize)> =
        leaves.iter().enumerate().flat_map(|(li, (_, t))| (0..t.numel()).map(move |j| (li, j))).collect();
    let diffs: Vec<f64> = coords
        .par_iter()
        .map(|&(li, j)| {
            let shifted = |delta: f64| {
                let mut vals: Vec<Tensor<f64>> = leaves.iter().map(|(_, t)| t.clone()).collect();
                vals[li].data_mut()[j] += delta;
                eval(vals)
            };
            Ok((shifted(step)? - shifted(-step)?) / (2.0 * step))
        })
        .collect::<Result<_>>()?;
    let mut offset = 0;
    Ok(leaves
        .into_iter()
        .map(|(name, t)| {
            let n = t.numel();
            let g = Tensor::new(t.shape().to_vec(), diffs[offset..offset + n].to_vec()).expect("shape preserved");
            offset += n;
            (name, g)
        })
        .collect())
}

pub fn compare(
    label: impl Into<String>,
    analytic: &[(String, Tensor<f64>)],
    numeric: &[(String, Tensor<f64>)],
    tol: &Tolerance,
) -> Result<CheckReport> {
    if analytic.len() != numeric.len() {
        return Err(Error::Grad("analytic and numeric leaf sets differ".into()));
    }
    let leaves = analytic
        .iter()
        .zip(numeric)
        .map(|((name, a), (_, n))| {
            let mut check = LeafCheck {
                name: name.clone(),
                numel: a.numel(),
                max_abs_err: 0.0,
                max_rel_err: 0.0,
                failures: 0,
                worst_index: 0,
            };
            for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
                let abs = (av - nv).abs();
                let scale = av.abs().max(nv.abs());
                let rel = if scale > 0.0 { abs / scale } else { 0.0 };
                if abs > check.max_abs_err {
                    check.max_abs_err = abs;
                    check.worst_index = i;
                }
                if scale > tol.abs_floor {
                    check.max_rel_err = check.max_rel_err.max(rel);
                }
                if !tol.accepts(av, nv) {
                    check.failures += 1;
                }
            }
            check
        })
        .collect();
    Ok(CheckReport { label: label.into(), leaves })
}

/// f64 tape against f64 central differences.
pub fn check_f64<P: LossProbe<f64>>(
    label: &str,
    probe: &P,
    tol: &Tolerance,
    fault: Option<OpKind>,
) -> Result<CheckReport> {
    let a = analytic_gradients::<f64, P>(probe, fault)?;
    let n = numeric_gradients(probe, tol.step)?;
    compare(label, &a, &n, tol)
}

/// f32 tape from `analytic` against f64 central differences of `oracle`,
/// which must describe the same function at the same point.
pub fn check_f32<A: LossProbe<f32>, O: LossProbe<f64>>(
    label: &str,
    analytic: &A,
    oracle: &O,
    tol: &Tolerance,
    fault: Option<OpKind>,
) -> Result<CheckReport> {
    let a = analytic_gradients::<f32, A>(analytic, fault)?;
    let n = numeric_gradients(oracle, tol.step)?;
    compare(label, &a, &n, tol)
}

/// `sum(w * op(inputs))` for a single op with random inputs and a random
/// fixed weighting `w`.
#[derive(Debug, Clone)]
pub struct OpProbe {
    pub kind: OpKind,
    variant: Variant,
    inputs: Vec<(String, Tensor<f64>)>,
    weight: Tensor<f64>,
}

#[derive(Debug, Clone)]
enum Variant {
    Plain,
    Matmul { ta: bool, tb: bool },
    Axis(usize),
    Slice { axis: usize, start: usize, len: usize },
    Shape(Vec<usize>),
    Mask(Vec<bool>),
}

fn randn(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).expect("valid shape")
}

impl OpProbe {
    /// Every test case for `kind`; matmul gets all transpose and batching
    /// combinations.
    pub fn cases(kind: OpKind, seed: u64) -> Vec<OpProbe> {
        let mut rng = Rng::new(seed);
        let mut out = Vec::new();
        let mut push = |rng: &mut Rng, variant: Variant, inputs: Vec<(&str, Tensor<f64>)>| {
            let inputs: Vec<(String, Tensor<f64>)> = inputs.into_iter().map(|(n, t)| (n.to_string(), t)).collect();
            out.push(OpProbe { kind, variant, inputs, weight: Tensor::scalar(0.0) });
            let last = out.last_mut().expect("pushed");
            let shape = last.forward_shape();
            last.weight = randn(rng, &shape, 1.0);
        };
        match kind {
            OpKind::Leaf | OpKind::Constant => {}
            OpKind::Matmul => {
                for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
                    let sa: [usize; 2] = if ta { [4, 3] } else { [3, 4] };
                    let sb: [usize; 2] = if tb { [5, 4] } else { [4, 5] };
                    let a = randn(&mut rng, &[2, sa[0], sa[1]], 1.0);
                    let b = randn(&mut rng, &[2, sb[0], sb[1]], 1.0);
                    push(&mut rng, Variant::Matmul { ta, tb }, vec![("a", a), ("b", b)]);
                    let a = randn(&mut rng, &[2, sa[0], sa[1]], 1.0);
                    let b = randn(&mut rng, &sb, 1.0);
                    push(&mut rng, Variant::Matmul { ta, tb }, vec![("a", a), ("b_shared", b)]);
                }
            }
            OpKind::Add | OpKind::Mul => {
                let a = randn(&mut rng, &[2, 3, 4], 1.0);
                let b = randn(&mut rng, &[2, 3, 4], 1.0);
                push(&mut rng, Variant::Plain, vec![("a", a), ("b", b)]);
                let a = randn(&mut rng, &[2, 3, 4], 1.0);
                let b = randn(&mut rng, &[4], 1.0);
                push(&mut rng, Variant::Plain, vec![("a", a), ("b_bcast", b)]);
            }
            OpKind::Affine | OpKind::Softmax | OpKind::LogSoftmax | OpKind::Gelu | OpKind::Sum | OpKind::Mean => {
                let x = randn(&mut rng, &[3, 5], 1.5);
                push(&mut rng, Variant::Plain, vec![("x", x)]);
            }
            OpKind::L2Normalize => {
                let x = randn(&mut rng, &[3, 5], 1.0);
                push(&mut rng, Variant::Plain, vec![("x", x)]);
            }
            OpKind::Concat => {
                for axis in [0, 1] {
                    let (s1, s2): ([usize; 2], [usize; 2]) =
                        if axis == 0 { ([2, 3], [1, 3]) } else { ([2, 3], [2, 2]) };
                    let a = randn(&mut rng, &s1, 1.0);
                    let b = randn(&mut rng, &s2, 1.0);
                    push(&mut rng, Variant::Axis(axis), vec![("a", a), ("b", b)]);
                }
            }
            OpKind::Slice => {
                let x = randn(&mut rng, &[3, 5, 2], 1.0);
                push(&mut rng, Variant::Slice { axis: 1, start: 1, len: 3 }, vec![("x", x)]);
            }
            OpKind::Reshape => {
                let x = randn(&mut rng, &[2, 6], 1.0);
                push(&mut rng, Variant::Shape(vec![3, 4]), vec![("x", x)]);
            }
            OpKind::Permute => {
                let x = randn(&mut rng, &[2, 3, 4], 1.0);
                push(&mut rng, Variant::Shape(vec![2, 0, 1]), vec![("x", x)]);
            }
            OpKind::LayerNorm => {
                let x = randn(&mut rng, &[3, 6], 2.0);
                let g = randn(&mut rng, &[6], 1.0);
                let b = randn(&mut rng, &[6], 1.0);
                push(&mut rng, Variant::Plain, vec![("x", x), ("gain", g), ("bias", b)]);
            }
            OpKind::ScaleShift => {
                let x = randn(&mut rng, &[2, 3, 4], 1.0);
                let g = randn(&mut rng, &[4], 1.0);
                let b = randn(&mut rng, &[4], 1.0);
                push(&mut rng, Variant::Plain, vec![("x", x), ("gamma", g), ("beta", b)]);
            }
            OpKind::CosineSim => {
                let x = randn(&mut rng, &[3, 4], 1.0);
                let a = randn(&mut rng, &[5, 4], 1.0);
                push(&mut rng, Variant::Plain, vec![("x", x), ("a", a)]);
            }
            OpKind::Log1pSumExp => {
                let z = randn(&mut rng, &[4, 3], 2.0);
                // last column fully masked out
                let mask = (0..12).map(|i| i % 3 != 2 && i != 4).collect();
                push(&mut rng, Variant::Mask(mask), vec![("z", z)]);
            }
        }
        out
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = self.inputs.iter().map(|(n, _)| n.as_str()).collect();
        match &self.variant {
            Variant::Matmul { ta, tb } => format!("matmul(ta={ta}, tb={tb}, {})", names.join(", ")),
            _ => format!("{}({})", self.kind, names.join(", ")),
        }
    }

    fn forward_shape(&self) -> Vec<usize> {
        let mut g = Eager;
        let vals: Vec<_> = self.inputs.iter().map(|(_, t)| Graph::<f64>::constant(&mut g, t.clone())).collect();
        let y = self.apply(&mut g, &vals).expect("probe inputs are valid");
        y.shape().to_vec()
    }

    fn apply<'w, T: Scalar, G: Graph<'w, T>>(&self, g: &mut G, v: &[G::Value]) -> Result<G::Value> {
        match (self.kind, &self.variant) {
            (OpKind::Matmul, Variant::Matmul { ta, tb }) => g.matmul(&v[0], &v[1], *ta, *tb),
            (OpKind::Add, _) => g.add(&v[0], &v[1]),
            (OpKind::Mul, _) => g.mul(&v[0], &v[1]),
            (OpKind::Affine, _) => g.affine(&v[0], -1.7, 0.3),
            (OpKind::Concat, Variant::Axis(axis)) => g.concat(&[&v[0], &v[1]], *axis),
            (OpKind::Slice, Variant::Slice { axis, start, len }) => g.slice(&v[0], *axis, *start, *len),
            (OpKind::Reshape, Variant::Shape(s)) => g.reshape(&v[0], s.clone()),
            (OpKind::Permute, Variant::Shape(p)) => g.permute(&v[0], p),
            (OpKind::LayerNorm, _) => g.layernorm(&v[0], &v[1], &v[2], ops::LN_EPS),
            (OpKind::Softmax, _) => g.softmax(&v[0]),
            (OpKind::LogSoftmax, _) => g.log_softmax(&v[0]),
            (OpKind::Gelu, _) => g.gelu(&v[0]),
            (OpKind::L2Normalize, _) => g.l2_normalize(&v[0], ops::EPS_NORM),
            (OpKind::ScaleShift, _) => g.scale_shift(&v[0], &v[1], &v[2]),
            (OpKind::CosineSim, _) => g.cosine_sim(&v[0], &v[1], ops::EPS_NORM),
            (OpKind::Sum, _) => g.sum(&v[0]),
            (OpKind::Mean, _) => g.mean(&v[0]),
            (OpKind::Log1pSumExp, Variant::Mask(m)) => g.log1p_sum_exp(&v[0], m.clone()),
            (kind, variant) => Err(Error::Grad(format!("no probe for {kind} / {variant:?}"))),
        }
    }
}

impl<T: Scalar> LossProbe<T> for OpProbe {
    fn leaves(&self) -> Vec<(String, Tensor<T>)> {
        self.inputs.iter().map(|(n, t)| (n.clone(), t.cast())).collect()
    }

    fn loss<'w, G: Graph<'w, T>>(&'w self, g: &mut G, leaves: &[G::Value]) -> Result<G::Value> {
        let y = self.apply(g, leaves)?;
        let w = g.constant(self.weight.cast());
        let p = g.mul(&y, &w)?;
        g.sum(&p)
    }
}

/// Runs every op probe; returns one report per case.
pub fn check_all_ops(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for kind in OpKind::DIFFERENTIABLE {
        for probe in OpProbe::cases(kind, seed) {
            reports.push(check_f64(&probe.label(), &probe, &Tolerance::F64, fault)?);
        }
    }
    Ok(reports)
}

/// Same as [`check_all_ops`] with f32 analytic gradients.
pub fn check_all_ops_f32(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for kind in OpKind::DIFFERENTIABLE {
        for probe in OpProbe::cases(kind, seed) {
            reports.push(check_f32(&probe.label(), &probe, &probe, &Tolerance::F32, fault)?);
        }
    }
    Ok(reports)
}
