//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Values are
//! computed eagerly; [`Graph::gradients`] replays the tape backwards. The tape
//! is never mutated by a backward pass, so repeated calls return identical
//! gradients.
//!
//! Broadcasting exists only where an operation says so (`add_row`, `mul_row`
//! and the index-driven [`Var::gather`]).

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{Gradient, ParamStore};
use crate::tensor::{lit, Real, Tensor};

/// Index sentinel for [`Var::gather`]: the output element is zero.
pub const GATHER_ZERO: u32 = u32::MAX;

// sqrt(2/pi) and the cubic coefficient of the tanh-form GELU.
const GELU_K: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    Gelu(usize),
    ClampMin(usize, T),
    MatMul(MatMulSpec),
    Gather(usize, Rc<[u32]>),
    Softmax(usize),
    LogSoftmax(usize, Option<Rc<[bool]>>),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, rstd: Vec<T> },
    SumAll(usize),
    SumLast(usize),
    Reshape(usize),
    ConcatLast(usize, usize),
    ConcatRows(usize, usize),
    PairwiseSqDist(usize, usize),
    NnDist(usize, Vec<usize>),
}

#[derive(Clone, Copy)]
struct MatMulSpec {
    a: usize,
    b: usize,
    ta: bool,
    tb: bool,
    batch: usize,
    b_shared: bool,
    m: usize,
    k: usize,
    n: usize,
}

impl MatMulSpec {
    /// Strides of op(A) as an `[m,k]` view.
    fn a_strides(&self) -> (isize, isize) {
        if self.ta {
            (1, self.m as isize)
        } else {
            (self.k as isize, 1)
        }
    }

    /// Strides of op(B) as a `[k,n]` view.
    fn b_strides(&self) -> (isize, isize) {
        if self.tb {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }

    fn b_offset(&self, i: usize) -> usize {
        if self.b_shared {
            0
        } else {
            i * self.k * self.n
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
}

/// Recording of a forward computation.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<String, usize>>,
    check_finite: Cell<bool>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    id: usize,
    graph: &'g Graph<T>,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Per-node gradients produced by [`Graph::gradients`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when `v` does not influence the loss.
    pub fn wrt_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()), check_finite: Cell::new(false) }
    }

    /// Verification mode: every forward result is checked for NaN/Inf.
    pub fn with_finite_checks(self) -> Self {
        self.check_finite.set(true);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Result<Var<'_, T>> {
        if self.check_finite.get() && !value.is_finite() {
            return Err(Error::NonFinite { term: format!("output of {}", op_name(&op)) });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op });
        Ok(Var { id: nodes.len() - 1, graph: self })
    }

    /// Records a leaf (input or constant). Leaves receive gradients too.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf).expect("leaf values are caller-checked")
    }

    /// Leaf bound to a named parameter. Repeated lookups of the same name
    /// return the same node, so gradients accumulate over every use.
    pub fn param(&self, store: &ParamStore<T>, name: &str) -> Result<Var<'_, T>> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Ok(Var { id, graph: self });
        }
        let t = store.get(name).ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        let v = self.leaf(t.clone());
        self.params.borrow_mut().insert(name.to_string(), v.id);
        Ok(v)
    }

    /// Names of all parameters touched by this graph.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.params.borrow().keys().cloned().collect();
        names.sort();
        names
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass from a scalar `loss`.
    pub fn gradients(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let lv = self.value(loss.id);
        if lv.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(lv.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient of `loss` with respect to every parameter in `params`.
    /// Parameters the graph never touched get all-zero gradients.
    pub fn backward(&self, loss: Var<'_, T>, params: &ParamStore<T>) -> Result<Gradient<T>> {
        let grads = self.gradients(loss)?;
        let index = self.params.borrow();
        let mut out = Gradient::new();
        for (name, t) in params.iter() {
            let g = index.get(name).and_then(|&id| grads.grads[id].clone()).unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Sqrt(..) => "sqrt",
        Op::Abs(..) => "abs",
        Op::Gelu(..) => "gelu",
        Op::ClampMin(..) => "clamp_min",
        Op::MatMul(..) => "matmul",
        Op::Gather(..) => "gather",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SumAll(..) => "sum",
        Op::SumLast(..) => "sum_last",
        Op::Reshape(..) => "reshape",
        Op::ConcatLast(..) => "concat_last",
        Op::ConcatRows(..) => "concat_rows",
        Op::PairwiseSqDist(..) => "pairwise_sq_dist",
        Op::NnDist(..) => "nn_dist",
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: usize, shape: &[usize], f: impl FnOnce(&mut [T])) {
    let slot = grads[id].get_or_insert_with(|| Tensor::zeros(shape));
    f(slot.data_mut());
}

pub fn gelu_scalar<T: Real>(x: T) -> T {
    let k: T = lit(GELU_K);
    let c: T = lit(GELU_C);
    let half: T = lit(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let k: T = lit(GELU_K);
    let c: T = lit(GELU_C);
    let half: T = lit(0.5);
    let three: T = lit(3.0);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
}

/// Applies softmax (or log-softmax) to each row of length `n`. Masked-out
/// entries produce exactly zero.
fn softmax_rows<T: Real>(x: &[T], n: usize, mask: Option<&[bool]>, log: bool) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (r, (row, o)) in x.chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let rmask = mask.map(|m| &m[r * n..(r + 1) * n]);
        let mut max = T::neg_infinity();
        match rmask {
            None => row.iter().for_each(|&v| max = max.max(v)),
            Some(m) => row.iter().zip(m).filter(|(_, &a)| a).for_each(|(&v, _)| max = max.max(v)),
        }
        match rmask {
            None => o.iter_mut().zip(row).for_each(|(o, &v)| *o = v - max),
            Some(m) => {
                for ((o, &v), &a) in o.iter_mut().zip(row).zip(m) {
                    *o = if a { v - max } else { T::neg_infinity() };
                }
            }
        }
        T::exp_in_place(o);
        let sum: T = o.iter().copied().sum();
        if log {
            let lse = sum.ln();
            for (j, (o, &v)) in o.iter_mut().zip(row).enumerate() {
                *o = if rmask.is_none_or(|m| m[j]) { v - max - lse } else { T::zero() };
            }
        } else {
            let inv = T::one() / sum;
            o.iter_mut().for_each(|v| *v *= inv);
        }
    }
    out
}

fn backprop<T: Real>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let node = &nodes[id];
    let gd = g.data();
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &i in [a, b] {
                accumulate(grads, i, val(i).shape(), |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
            }
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, val(*a).shape(), |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
            accumulate(grads, *b, val(*b).shape(), |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            accumulate(grads, *a, av.shape(), |d| {
                for ((x, &y), &w) in d.iter_mut().zip(gd).zip(bv.data()) {
                    *x += y * w;
                }
            });
            accumulate(grads, *b, bv.shape(), |d| {
                for ((x, &y), &w) in d.iter_mut().zip(gd).zip(av.data()) {
                    *x += y * w;
                }
            });
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            accumulate(grads, *a, av.shape(), |d| {
                for ((x, &y), &w) in d.iter_mut().zip(gd).zip(bv.data()) {
                    *x += y / w;
                }
            });
            accumulate(grads, *b, bv.shape(), |d| {
                for (((x, &y), &u), &w) in d.iter_mut().zip(gd).zip(av.data()).zip(bv.data()) {
                    *x -= y * u / (w * w);
                }
            });
        }
        Op::AddRow(a, b) => {
            let n = val(*b).len();
            accumulate(grads, *a, val(*a).shape(), |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
            accumulate(grads, *b, val(*b).shape(), |d| {
                for row in gd.chunks(n) {
                    d.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                }
            });
        }
        Op::MulRow(a, b) => {
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            let n = bv.len();
            accumulate(grads, *a, av.shape(), |d| {
                for (drow, grow) in d.chunks_mut(n).zip(gd.chunks(n)) {
                    for ((x, &y), &w) in drow.iter_mut().zip(grow).zip(bv.data()) {
                        *x += y * w;
                    }
                }
            });
            accumulate(grads, *b, bv.shape(), |d| {
                for (grow, arow) in gd.chunks(n).zip(av.data().chunks(n)) {
                    for ((x, &y), &u) in d.iter_mut().zip(grow).zip(arow) {
                        *x += y * u;
                    }
                }
            });
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(grads, *a, val(*a).shape(), |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += c * y));
        }
        Op::AddScalar(a) => {
            accumulate(grads, *a, val(*a).shape(), |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
        }
        Op::Exp(a) => {
            let out = node.value.clone();
            accumulate(grads, *a, val(*a).shape(), |d| {
                for ((x, &y), &o) in d.iter_mut().zip(gd).zip(out.data()) {
                    *x += y * o;
                }
            });
        }
        Op::Ln(a) => {
            let av = val(*a).clone();
            accumulate(grads, *a, av.shape(), |d| {
                for ((x, &y), &u) in d.iter_mut().zip(gd).zip(av.data()) {
                    *x += y / u;
                }
            });
        }
        Op::Sqrt(a) => {
            let out = node.value.clone();
            let half: T = lit(0.5);
            accumulate(grads, *a, val(*a).shape(), |d| {
                for ((x, &y), &o) in d.iter_mut().zip(gd).zip(out.data()) {
                    if o > T::zero() {
                        *x += half * y / o;
                    }
                }
            });
        }
        Op::Abs(a) => {
            let av = val(*a).clone();
            accumulate(grads, *a, av.shape(), |d| {
                for ((x, &y), &u) in d.iter_mut().zip(gd).zip(av.data()) {
                    if u > T::zero() {
                        *x += y;
                    } else if u < T::zero() {
                        *x -= y;
                    }
                }
            });
        }
        Op::Gelu(a) => {
            let av = val(*a).clone();
            accumulate(grads, *a, av.shape(), |d| {
                for ((x, &y), &u) in d.iter_mut().zip(gd).zip(av.data()) {
                    *x += y * gelu_grad(u);
                }
            });
        }
        Op::ClampMin(a, lo) => {
            let av = val(*a).clone();
            let lo = *lo;
            accumulate(grads, *a, av.shape(), |d| {
                for ((x, &y), &u) in d.iter_mut().zip(gd).zip(av.data()) {
                    if u > lo {
                        *x += y;
                    }
                }
            });
        }
        Op::MatMul(s) => {
            let (av, bv) = (val(s.a).clone(), val(s.b).clone());
            let (ars, acs) = s.a_strides();
            let (brs, bcs) = s.b_strides();
            let (m, k, n) = (s.m, s.k, s.n);
            accumulate(grads, s.a, av.shape(), |da| {
                for i in 0..s.batch {
                    // dOpA[m,k] = dC[m,n] . OpB^T[n,k]
                    unsafe {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            gd.as_ptr().add(i * m * n),
                            n as isize,
                            1,
                            bv.data().as_ptr().add(s.b_offset(i)),
                            bcs,
                            brs,
                            T::one(),
                            da.as_mut_ptr().add(i * m * k),
                            ars,
                            acs,
                        );
                    }
                }
            });
            accumulate(grads, s.b, bv.shape(), |db| {
                for i in 0..s.batch {
                    // dOpB[k,n] = OpA^T[k,m] . dC[m,n]
                    unsafe {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            av.data().as_ptr().add(i * m * k),
                            acs,
                            ars,
                            gd.as_ptr().add(i * m * n),
                            n as isize,
                            1,
                            T::one(),
                            db.as_mut_ptr().add(s.b_offset(i)),
                            brs,
                            bcs,
                        );
                    }
                }
            });
        }
        Op::Gather(a, idx) => {
            accumulate(grads, *a, val(*a).shape(), |d| {
                for (&i, &y) in idx.iter().zip(gd) {
                    if i != GATHER_ZERO {
                        d[i as usize] += y;
                    }
                }
            });
        }
        Op::Softmax(a) => {
            let out = node.value.clone();
            let n = out.last_dim();
            accumulate(grads, *a, out.shape(), |d| {
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(gd.chunks(n)).zip(out.data().chunks(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    for ((x, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *x += y * (g - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a, mask) => {
            let out = node.value.clone();
            let n = out.last_dim();
            accumulate(grads, *a, out.shape(), |d| {
                for (r, ((drow, grow), yrow)) in d.chunks_mut(n).zip(gd.chunks(n)).zip(out.data().chunks(n)).enumerate()
                {
                    let allowed = |j: usize| mask.as_ref().is_none_or(|m| m[r * n + j]);
                    let gsum: T = (0..n).filter(|&j| allowed(j)).map(|j| grow[j]).sum();
                    for j in 0..n {
                        if allowed(j) {
                            drow[j] += grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let gv = val(*gain).clone();
            let n = gv.len();
            let inv_n: T = T::one() / lit(n as f64);
            accumulate(grads, *x, val(*x).shape(), |d| {
                for (r, (drow, grow)) in d.chunks_mut(n).zip(gd.chunks(n)).enumerate() {
                    let xh = &xhat[r * n..(r + 1) * n];
                    let mut mean_g = T::zero();
                    let mut mean_gx = T::zero();
                    for j in 0..n {
                        let dxh = grow[j] * gv.data()[j];
                        mean_g += dxh;
                        mean_gx += dxh * xh[j];
                    }
                    mean_g *= inv_n;
                    mean_gx *= inv_n;
                    for j in 0..n {
                        let dxh = grow[j] * gv.data()[j];
                        drow[j] += rstd[r] * (dxh - mean_g - xh[j] * mean_gx);
                    }
                }
            });
            accumulate(grads, *gain, gv.shape(), |d| {
                for (grow, xh) in gd.chunks(n).zip(xhat.chunks(n)) {
                    for ((x, &g), &h) in d.iter_mut().zip(grow).zip(xh) {
                        *x += g * h;
                    }
                }
            });
            accumulate(grads, *bias, val(*bias).shape(), |d| {
                for grow in gd.chunks(n) {
                    d.iter_mut().zip(grow).for_each(|(x, &g)| *x += g);
                }
            });
        }
        Op::SumAll(a) => {
            let g0 = gd[0];
            accumulate(grads, *a, val(*a).shape(), |d| d.iter_mut().for_each(|x| *x += g0));
        }
        Op::SumLast(a) => {
            let av = val(*a).clone();
            let n = av.last_dim();
            accumulate(grads, *a, av.shape(), |d| {
                for (drow, &g) in d.chunks_mut(n).zip(gd) {
                    drow.iter_mut().for_each(|x| *x += g);
                }
            });
        }
        Op::Reshape(a) => {
            accumulate(grads, *a, val(*a).shape(), |d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
        }
        Op::ConcatLast(a, b) => {
            let (na, nb) = (val(*a).last_dim(), val(*b).last_dim());
            accumulate(grads, *a, val(*a).shape(), |d| {
                for (drow, grow) in d.chunks_mut(na).zip(gd.chunks(na + nb)) {
                    drow.iter_mut().zip(&grow[..na]).for_each(|(x, &y)| *x += y);
                }
            });
            accumulate(grads, *b, val(*b).shape(), |d| {
                for (drow, grow) in d.chunks_mut(nb).zip(gd.chunks(na + nb)) {
                    drow.iter_mut().zip(&grow[na..]).for_each(|(x, &y)| *x += y);
                }
            });
        }
        Op::ConcatRows(a, b) => {
            let la = val(*a).len();
            accumulate(grads, *a, val(*a).shape(), |d| d.iter_mut().zip(&gd[..la]).for_each(|(x, &y)| *x += y));
            accumulate(grads, *b, val(*b).shape(), |d| d.iter_mut().zip(&gd[la..]).for_each(|(x, &y)| *x += y));
        }
        Op::PairwiseSqDist(a, b) => {
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            let dim = av.last_dim();
            let (m, n) = (av.shape()[0], bv.shape()[0]);
            let two: T = lit(2.0);
            let mut ga = vec![T::zero(); av.len()];
            let mut gb = vec![T::zero(); bv.len()];
            for i in 0..m {
                let ai = &av.data()[i * dim..(i + 1) * dim];
                for j in 0..n {
                    let g = two * gd[i * n + j];
                    if g == T::zero() {
                        continue;
                    }
                    let bj = &bv.data()[j * dim..(j + 1) * dim];
                    for t in 0..dim {
                        let diff = g * (ai[t] - bj[t]);
                        ga[i * dim + t] += diff;
                        gb[j * dim + t] -= diff;
                    }
                }
            }
            accumulate(grads, *a, av.shape(), |d| d.iter_mut().zip(&ga).for_each(|(x, &y)| *x += y));
            accumulate(grads, *b, bv.shape(), |d| d.iter_mut().zip(&gb).for_each(|(x, &y)| *x += y));
        }
        Op::NnDist(a, argmin) => {
            let av = val(*a).clone();
            let out = node.value.clone();
            let dim = av.last_dim();
            accumulate(grads, *a, av.shape(), |d| {
                for (i, &j) in argmin.iter().enumerate() {
                    let dist = out.data()[i];
                    if dist <= T::zero() {
                        continue;
                    }
                    let s = gd[i] / dist;
                    for t in 0..dim {
                        let diff = s * (av.data()[i * dim + t] - av.data()[j * dim + t]);
                        d[i * dim + t] += diff;
                        d[j * dim + t] -= diff;
                    }
                }
            });
        }
    }
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{op} of {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

// fallible graph ops, so the std operator traits do not fit
#[allow(clippy::should_implement_trait)]
impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a one-element var.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn check_graph(&self, other: &Var<'g, T>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars belong to different graphs");
    }

    fn zip_map(self, other: Var<'g, T>, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Self> {
        self.check_graph(&other);
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.graph.push(Tensor::new(a.shape().to_vec(), data)?, op)
    }

    fn unary(self, f: impl Fn(T) -> T, op: Op<T>) -> Result<Self> {
        let v = self.value().map(f);
        self.graph.push(v, op)
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Self> {
        self.zip_map(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Self> {
        self.zip_map(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Self> {
        self.zip_map(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Self> {
        self.zip_map(other, "div", |x, y| x / y, Op::Div(self.id, other.id))
    }

    fn row_op(self, row: Var<'g, T>, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Self> {
        self.check_graph(&row);
        let (a, b) = (self.value(), row.value());
        if b.rank() != 1 || a.last_dim() != b.len() {
            return Err(Error::Dimension(format!("{name} of {:?} and {:?}", a.shape(), b.shape())));
        }
        let n = b.len();
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &y) in chunk.iter_mut().zip(b.data()) {
                *x = f(*x, y);
            }
        }
        self.graph.push(Tensor::new(a.shape().to_vec(), data)?, op)
    }

    /// Adds a vector along the last axis of every row.
    pub fn add_row(self, row: Var<'g, T>) -> Result<Self> {
        self.row_op(row, "add_row", |x, y| x + y, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row elementwise by a vector.
    pub fn mul_row(self, row: Var<'g, T>) -> Result<Self> {
        self.row_op(row, "mul_row", |x, y| x * y, Op::MulRow(self.id, row.id))
    }

    pub fn scale(self, c: f64) -> Result<Self> {
        let c: T = lit(c);
        self.unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Result<Self> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Self> {
        let c: T = lit(c);
        self.unary(|x| x + c, Op::AddScalar(self.id))
    }

    pub fn exp(self) -> Result<Self> {
        self.unary(|x| x.exp(), Op::Exp(self.id))
    }

    pub fn ln(self) -> Result<Self> {
        self.unary(|x| x.ln(), Op::Ln(self.id))
    }

    pub fn sqrt(self) -> Result<Self> {
        self.unary(|x| x.sqrt(), Op::Sqrt(self.id))
    }

    pub fn abs(self) -> Result<Self> {
        self.unary(|x| x.abs(), Op::Abs(self.id))
    }

    /// GELU, tanh form: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(self) -> Result<Self> {
        self.unary(gelu_scalar, Op::Gelu(self.id))
    }

    pub fn clamp_min(self, lo: f64) -> Result<Self> {
        let lo: T = lit(lo);
        self.unary(|x| if x > lo { x } else { lo }, Op::ClampMin(self.id, lo))
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    ///
    /// A rank-3 left operand `[B,m,k]` multiplies either a shared `[k,n]`
    /// or a batch `[B,k,n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Self> {
        self.matmul_t(other, false, false)
    }

    /// Matrix product with either operand transposed in its last two axes.
    pub fn matmul_t(self, other: Var<'g, T>, ta: bool, tb: bool) -> Result<Self> {
        self.check_graph(&other);
        let (a, b) = (self.value(), other.value());
        let err = || Error::Dimension(format!("matmul of {:?} and {:?}", a.shape(), b.shape()));
        let (batch, ar, ac) = match a.shape() {
            [r, c] => (1, *r, *c),
            [bt, r, c] => (*bt, *r, *c),
            _ => return Err(err()),
        };
        let (b_shared, br, bc) = match b.shape() {
            [r, c] => (true, *r, *c),
            [bt, r, c] if *bt == batch && a.rank() == 3 => (false, *r, *c),
            _ => return Err(err()),
        };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(err());
        }
        let spec = MatMulSpec { a: self.id, b: other.id, ta, tb, batch, b_shared, m, k, n };
        let (ars, acs) = spec.a_strides();
        let (brs, bcs) = spec.b_strides();
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            // SAFETY: offsets and strides stay inside the checked shapes.
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    a.data().as_ptr().add(i * m * k),
                    ars,
                    acs,
                    b.data().as_ptr().add(spec.b_offset(i)),
                    brs,
                    bcs,
                    T::zero(),
                    out.as_mut_ptr().add(i * m * n),
                    n as isize,
                    1,
                );
            }
        }
        let shape = if a.rank() == 3 { vec![batch, m, n] } else { vec![m, n] };
        self.graph.push(Tensor::new(shape, out)?, Op::MatMul(spec))
    }

    /// `out[i] = self[idx[i]]` (or zero for [`GATHER_ZERO`]), shaped `shape`.
    /// Covers permutations, window partitioning, padding and broadcasting.
    pub fn gather(self, shape: &[usize], idx: Rc<[u32]>) -> Result<Self> {
        let a = self.value();
        let n: usize = shape.iter().product();
        if n != idx.len() {
            return Err(Error::Dimension(format!("gather into {shape:?} with {} indices", idx.len())));
        }
        let src = a.data();
        let mut data = Vec::with_capacity(n);
        for &i in idx.iter() {
            if i == GATHER_ZERO {
                data.push(T::zero());
            } else {
                let v = *src
                    .get(i as usize)
                    .ok_or_else(|| Error::Dimension(format!("gather index {i} out of range for {:?}", a.shape())))?;
                data.push(v);
            }
        }
        self.graph.push(Tensor::new(shape.to_vec(), data)?, Op::Gather(self.id, idx))
    }

    /// Broadcasts a one-element var to `shape`.
    pub fn broadcast_scalar(self, shape: &[usize]) -> Result<Self> {
        if self.len() != 1 {
            return Err(Error::Dimension(format!("broadcast of {:?}", self.shape())));
        }
        let n: usize = shape.iter().product();
        self.gather(shape, vec![0u32; n].into())
    }

    /// Softmax over the last axis. `mask`, when given, has one flag per
    /// element; disallowed entries get probability exactly zero.
    pub fn softmax(self, mask: Option<Rc<[bool]>>) -> Result<Self> {
        let a = self.value();
        if let Some(m) = &mask {
            if m.len() != a.len() {
                return Err(Error::Dimension("softmax mask length".into()));
            }
        }
        let out = softmax_rows(a.data(), a.last_dim(), mask.as_deref(), false);
        self.graph.push(Tensor::new(a.shape().to_vec(), out)?, Op::Softmax(self.id))
    }

    /// Log-softmax over the last axis; masked entries output 0 and receive
    /// no gradient.
    pub fn log_softmax(self, mask: Option<Rc<[bool]>>) -> Result<Self> {
        let a = self.value();
        if let Some(m) = &mask {
            if m.len() != a.len() {
                return Err(Error::Dimension("log_softmax mask length".into()));
            }
        }
        let out = softmax_rows(a.data(), a.last_dim(), mask.as_deref(), true);
        self.graph.push(Tensor::new(a.shape().to_vec(), out)?, Op::LogSoftmax(self.id, mask))
    }

    /// Layer normalization over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(self, gain: Var<'g, T>, bias: Var<'g, T>, eps: f64) -> Result<Self> {
        let a = self.value();
        let n = a.last_dim();
        if gain.shape() != [n] || bias.shape() != [n] {
            return Err(Error::Dimension(format!(
                "layer_norm of {:?} with gain {:?}, bias {:?}",
                a.shape(),
                gain.shape(),
                bias.shape()
            )));
        }
        let (gv, bv) = (gain.value(), bias.value());
        let eps: T = lit(eps);
        let inv_n = T::one() / lit(n as f64);
        let rows = a.len() / n;
        let mut out = vec![T::zero(); a.len()];
        let mut xhat = vec![T::zero(); a.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let x = &a.data()[r * n..(r + 1) * n];
            let mean = x.iter().copied().sum::<T>() * inv_n;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (x[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        self.graph.push(
            Tensor::new(a.shape().to_vec(), out)?,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, rstd },
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Result<Self> {
        let s = self.value().sum();
        self.graph.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Result<Self> {
        let n = self.len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sums the last axis away (`[.., n] -> [..]`, `[n] -> [1]`).
    pub fn sum_last(self) -> Result<Self> {
        let a = self.value();
        let n = a.last_dim();
        let data: Vec<T> = a.data().chunks(n).map(|c| c.iter().copied().sum()).collect();
        let mut shape = a.shape()[..a.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.graph.push(Tensor::new(shape, data)?, Op::SumLast(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let a = (*self.value()).clone().reshape(shape)?;
        self.graph.push(a, Op::Reshape(self.id))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(self, other: Var<'g, T>) -> Result<Self> {
        self.check_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != b.rank() || a.shape()[..a.rank() - 1] != b.shape()[..b.rank() - 1] {
            return Err(Error::Dimension(format!("concat_last of {:?} and {:?}", a.shape(), b.shape())));
        }
        let (na, nb) = (a.last_dim(), b.last_dim());
        let mut data = Vec::with_capacity(a.len() + b.len());
        for (ra, rb) in a.data().chunks(na).zip(b.data().chunks(nb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = na + nb;
        self.graph.push(Tensor::new(shape, data)?, Op::ConcatLast(self.id, other.id))
    }

    /// Concatenates along the first axis; trailing extents must agree.
    pub fn concat_rows(self, other: Var<'g, T>) -> Result<Self> {
        self.check_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != b.rank() || a.shape()[1..] != b.shape()[1..] {
            return Err(Error::Dimension(format!("concat_rows of {:?} and {:?}", a.shape(), b.shape())));
        }
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let mut shape = a.shape().to_vec();
        shape[0] += b.shape()[0];
        self.graph.push(Tensor::new(shape, data)?, Op::ConcatRows(self.id, other.id))
    }

    /// Squared Euclidean distances between the rows of `[M,d]` and `[N,d]`.
    pub fn pairwise_sq_dist(self, other: Var<'g, T>) -> Result<Self> {
        self.check_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(Error::Dimension(format!("pairwise distance of {:?} and {:?}", a.shape(), b.shape())));
        }
        let d = a.shape()[1];
        let (m, n) = (a.shape()[0], b.shape()[0]);
        let mut out = Vec::with_capacity(m * n);
        for ai in a.data().chunks(d) {
            for bj in b.data().chunks(d) {
                out.push(ai.iter().zip(bj).map(|(&x, &y)| (x - y) * (x - y)).sum());
            }
        }
        self.graph.push(Tensor::new(vec![m, n], out)?, Op::PairwiseSqDist(self.id, other.id))
    }

    /// For each row of `[N,d]`, the Euclidean distance to its nearest other
    /// row. Ties resolve to the lowest index.
    pub fn nn_dist(self) -> Result<Self> {
        let a = self.value();
        if a.rank() != 2 || a.shape()[0] < 2 {
            return Err(Error::Dimension(format!("nearest-neighbour distance needs [N>=2, d], got {:?}", a.shape())));
        }
        let (n, d) = (a.shape()[0], a.shape()[1]);
        let mut out = Vec::with_capacity(n);
        let mut argmin = Vec::with_capacity(n);
        for i in 0..n {
            let xi = &a.data()[i * d..(i + 1) * d];
            let mut best = (T::infinity(), usize::MAX);
            for j in (0..n).filter(|&j| j != i) {
                let xj = &a.data()[j * d..(j + 1) * d];
                let s: T = xi.iter().zip(xj).map(|(&x, &y)| (x - y) * (x - y)).sum();
                if s < best.0 {
                    best = (s, j);
                }
            }
            out.push(best.0.sqrt());
            argmin.push(best.1);
        }
        self.graph.push(Tensor::new(vec![n], out)?, Op::NnDist(self.id, argmin))
    }
}
