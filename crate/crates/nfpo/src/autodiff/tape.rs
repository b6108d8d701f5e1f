use std::cell::RefCell;

use super::optim::{ParamId, ParamStore};
use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use super::Real;
use crate::{Error, Result};

/// Broadcast pattern of a binary element-wise op.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    /// Identical shapes.
    Same,
    /// `[B, D] op [D]`: the 1-D right operand is applied to every row.
    Row,
    /// `any op scalar`.
    Scalar,
}

#[derive(Clone, Debug)]
enum OpKind<T> {
    Leaf,
    Matmul,
    Add(Bcast),
    Sub(Bcast),
    Mul(Bcast),
    Neg,
    Tanh,
    Exp,
    Ln,
    Elu,
    Clip { lo: T, hi: T },
    AddConst(T),
    MulConst(T),
    SumAll,
    MeanAll,
    SumLast,
    MinElem,
    ConcatLast { split: usize },
    SelectCols { idx: Vec<usize> },
    ScatterCols { idx: Vec<usize> },
    Reshape,
}

struct Node<T> {
    value: Tensor<T>,
    op: OpKind<T>,
    parents: [usize; 2],
    n_parents: u8,
    tracked: bool,
    param: Option<ParamId>,
}

/// Define-by-run record of executed primitives. Rebuilt per forward pass;
/// one backward pass visits each node exactly once, in reverse execution
/// order (which is a topological order by construction).
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    check_finite: bool,
}

/// Handle to a node on a [`Tape`]. Cheap to copy; all math lives either here
/// or on the tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// New empty tape. Finiteness diagnostics follow the precision mode:
    /// active for `f64`, off for `f32`.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            check_finite: T::VERIFY,
        }
    }

    pub fn with_finite_checks(check: bool) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            check_finite: check,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input: no gradient flows through it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false, None)
    }

    /// Tracked leaf bound to a parameter slot; `backward` accumulates its
    /// gradient into the store.
    pub fn param<'t>(&'t self, store: &ParamStore<T>, id: ParamId) -> Var<'t, T> {
        self.push_leaf(store.value(id).clone(), true, Some(id))
    }

    fn push_leaf(&self, value: Tensor<T>, tracked: bool, param: Option<ParamId>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op: OpKind::Leaf,
            parents: [0, 0],
            n_parents: 0,
            tracked,
            param,
        });
        Var { tape: self, id }
    }

    fn push_op(
        &self,
        value: Tensor<T>,
        op: OpKind<T>,
        parents: &[usize],
        context: &'static str,
    ) -> Result<Var<'_, T>> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite {
                context: context.to_string(),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let tracked = parents.iter().any(|&p| nodes[p].tracked);
        let mut ps = [0usize; 2];
        ps[..parents.len()].copy_from_slice(parents);
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            parents: ps,
            n_parents: parents.len() as u8,
            tracked,
            param: None,
        });
        Ok(Var { tape: self, id })
    }

    /// Clone out the forward value of a node.
    pub fn value(&self, v: Var<'_, T>) -> Tensor<T> {
        self.nodes.borrow()[v.id].value.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    /// Reverse pass from a scalar root; gradients accumulate into the store
    /// (repeated calls without `zero_grads` keep accumulating).
    pub fn backward(&self, root: Var<'_, T>, store: &mut ParamStore<T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        if !root_node.tracked {
            return Err(Error::Graph(
                "backward on an untracked tensor (no parameters in its history)".into(),
            ));
        }

        let mut adj: Vec<Option<Vec<T>>> = (0..=root.id).map(|_| None).collect();
        adj[root.id] = Some(vec![T::ONE]);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(dout) = adj[id].take() else { continue };

            if let Some(pid) = node.param {
                store.accumulate_grad(pid, &dout)?;
            }
            if node.n_parents == 0 {
                continue;
            }
            let pa = node.parents[0];
            let pb = node.parents[1];

            match &node.op {
                OpKind::Leaf => {}
                OpKind::Matmul => {
                    let a = &nodes[pa].value;
                    let b = &nodes[pb].value;
                    let (m, k) = (a.rows(), a.cols());
                    let n = b.cols();
                    if nodes[pa].tracked {
                        let da = matmul_nt(&dout, b.data(), m, n, k);
                        acc_slice(&mut adj, pa, m * k, &da);
                    }
                    if nodes[pb].tracked {
                        let db = matmul_tn(a.data(), &dout, m, k, n);
                        acc_slice(&mut adj, pb, k * n, &db);
                    }
                }
                OpKind::Add(bc) => {
                    if nodes[pa].tracked {
                        acc_slice(&mut adj, pa, dout.len(), &dout);
                    }
                    if nodes[pb].tracked {
                        acc_reduced(&mut adj, pb, &nodes[pb].value, &dout, *bc, false, None);
                    }
                }
                OpKind::Sub(bc) => {
                    if nodes[pa].tracked {
                        acc_slice(&mut adj, pa, dout.len(), &dout);
                    }
                    if nodes[pb].tracked {
                        acc_reduced(&mut adj, pb, &nodes[pb].value, &dout, *bc, true, None);
                    }
                }
                OpKind::Mul(bc) => {
                    let a = &nodes[pa].value;
                    let b = &nodes[pb].value;
                    if nodes[pa].tracked {
                        let da = mul_broadcast_grad_lhs(a, b, &dout, *bc);
                        acc_slice(&mut adj, pa, a.len(), &da);
                    }
                    if nodes[pb].tracked {
                        acc_reduced(&mut adj, pb, b, &dout, *bc, false, Some(a));
                    }
                }
                OpKind::Neg => {
                    let da: Vec<T> = dout.iter().map(|&g| -g).collect();
                    acc_slice(&mut adj, pa, da.len(), &da);
                }
                OpKind::Tanh => {
                    let y = &node.value;
                    let da: Vec<T> = dout
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &yv)| g * (T::ONE - yv * yv))
                        .collect();
                    acc_slice(&mut adj, pa, da.len(), &da);
                }
                OpKind::Exp => {
                    let y = &node.value;
                    let da: Vec<T> = dout
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &yv)| g * yv)
                        .collect();
                    acc_slice(&mut adj, pa, da.len(), &da);
                }
                OpKind::Ln => {
                    let x = &nodes[pa].value;
                    let da: Vec<T> = dout
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &xv)| g / xv)
                        .collect();
                    acc_slice(&mut adj, pa, da.len(), &da);
                }
                OpKind::Elu => {
                    let x = &nodes[pa].value;
                    let y = &node.value;
                    let da: Vec<T> = dout
                        .iter()
                        .zip(x.data().iter().zip(y.data()))
                        .map(|(&g, (&xv, &yv))| {
                            if xv > T::ZERO {
                                g
                            } else {
                                g * (yv + T::ONE)
                            }
                        })
                        .collect();
                    acc_slice(&mut adj, pa, da.len(), &da);
                }
                OpKind::Clip { lo, hi } => {
                    // Pass-through strictly inside and at the boundary, dead
                    // outside.
                    let x = &nodes[pa].value;
                    let da: Vec<T> = dout
                        .iter()
                        .zip(x.data())
                        .map(|(&g, &xv)| {
                            if xv >= *lo && xv <= *hi {
                                g
                            } else {
                                T::ZERO
                            }
                        })
                        .collect();
                    acc_slice(&mut adj, pa, da.len(), &da);
                }
                OpKind::AddConst(_) => {
                    acc_slice(&mut adj, pa, dout.len(), &dout);
                }
                OpKind::MulConst(c) => {
                    let da: Vec<T> = dout.iter().map(|&g| g * *c).collect();
                    acc_slice(&mut adj, pa, da.len(), &da);
                }
                OpKind::SumAll => {
                    let n = nodes[pa].value.len();
                    let g = dout[0];
                    let da = vec![g; n];
                    acc_slice(&mut adj, pa, n, &da);
                }
                OpKind::MeanAll => {
                    let n = nodes[pa].value.len();
                    let g = dout[0] / T::from_f64(n as f64);
                    let da = vec![g; n];
                    acc_slice(&mut adj, pa, n, &da);
                }
                OpKind::SumLast => {
                    let x = &nodes[pa].value;
                    let (b, d) = (x.rows(), x.cols());
                    let mut da = vec![T::ZERO; b * d];
                    for i in 0..b {
                        let g = dout[i];
                        for v in &mut da[i * d..(i + 1) * d] {
                            *v = g;
                        }
                    }
                    acc_slice(&mut adj, pa, b * d, &da);
                }
                OpKind::MinElem => {
                    let a = &nodes[pa].value;
                    let b = &nodes[pb].value;
                    if nodes[pa].tracked {
                        let da: Vec<T> = dout
                            .iter()
                            .zip(a.data().iter().zip(b.data()))
                            .map(|(&g, (&av, &bv))| if av <= bv { g } else { T::ZERO })
                            .collect();
                        acc_slice(&mut adj, pa, da.len(), &da);
                    }
                    if nodes[pb].tracked {
                        let db: Vec<T> = dout
                            .iter()
                            .zip(a.data().iter().zip(b.data()))
                            .map(|(&g, (&av, &bv))| if av <= bv { T::ZERO } else { g })
                            .collect();
                        acc_slice(&mut adj, pb, db.len(), &db);
                    }
                }
                OpKind::ConcatLast { split } => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let p = *split;
                    let q = total - p;
                    if nodes[pa].tracked {
                        let mut da = vec![T::ZERO; rows * p];
                        for i in 0..rows {
                            da[i * p..(i + 1) * p]
                                .copy_from_slice(&dout[i * total..i * total + p]);
                        }
                        acc_slice(&mut adj, pa, rows * p, &da);
                    }
                    if nodes[pb].tracked {
                        let mut db = vec![T::ZERO; rows * q];
                        for i in 0..rows {
                            db[i * q..(i + 1) * q]
                                .copy_from_slice(&dout[i * total + p..(i + 1) * total]);
                        }
                        acc_slice(&mut adj, pb, rows * q, &db);
                    }
                }
                OpKind::SelectCols { idx } => {
                    let x = &nodes[pa].value;
                    let (b, c) = (x.rows(), x.cols());
                    let k = idx.len();
                    let mut da = vec![T::ZERO; b * c];
                    for i in 0..b {
                        for (j, &col) in idx.iter().enumerate() {
                            da[i * c + col] += dout[i * k + j];
                        }
                    }
                    acc_slice(&mut adj, pa, b * c, &da);
                }
                OpKind::ScatterCols { idx } => {
                    let x = &nodes[pa].value;
                    let (b, k) = (x.rows(), x.cols());
                    let c = node.value.cols();
                    let mut da = vec![T::ZERO; b * k];
                    for i in 0..b {
                        for (j, &col) in idx.iter().enumerate() {
                            da[i * k + j] += dout[i * c + col];
                        }
                    }
                    acc_slice(&mut adj, pa, b * k, &da);
                }
                OpKind::Reshape => {
                    acc_slice(&mut adj, pa, dout.len(), &dout);
                }
            }
        }
        Ok(())
    }
}

fn acc_slice<T: Real>(adj: &mut [Option<Vec<T>>], id: usize, len: usize, contrib: &[T]) {
    let slot = adj[id].get_or_insert_with(|| vec![T::ZERO; len]);
    for (s, &c) in slot.iter_mut().zip(contrib) {
        *s += c;
    }
}

/// Gradient of the left operand of a broadcast `Mul`.
fn mul_broadcast_grad_lhs<T: Real>(a: &Tensor<T>, b: &Tensor<T>, dout: &[T], bc: Bcast) -> Vec<T> {
    match bc {
        Bcast::Same => dout
            .iter()
            .zip(b.data())
            .map(|(&g, &bv)| g * bv)
            .collect(),
        Bcast::Scalar => {
            let bv = b.data()[0];
            dout.iter().map(|&g| g * bv).collect()
        }
        Bcast::Row => {
            let d = b.len();
            let rows = a.rows();
            let mut out = vec![T::ZERO; rows * d];
            for i in 0..rows {
                for j in 0..d {
                    out[i * d + j] = dout[i * d + j] * b.data()[j];
                }
            }
            out
        }
    }
}

/// Accumulate the gradient of the (possibly broadcast) right operand of
/// `Add`/`Sub`/`Mul`. `factor = Some(a)` multiplies by the left operand
/// (Mul case); `negate` flips the sign (Sub case).
fn acc_reduced<T: Real>(
    adj: &mut [Option<Vec<T>>],
    id: usize,
    b: &Tensor<T>,
    dout: &[T],
    bc: Bcast,
    negate: bool,
    factor: Option<&Tensor<T>>,
) {
    let sign = if negate { -T::ONE } else { T::ONE };
    let term = |i: usize| -> T {
        match factor {
            Some(a) => dout[i] * a.data()[i],
            None => dout[i],
        }
    };
    match bc {
        Bcast::Same => {
            let contrib: Vec<T> = (0..dout.len()).map(|i| sign * term(i)).collect();
            acc_slice(adj, id, contrib.len(), &contrib);
        }
        Bcast::Scalar => {
            let mut acc = T::ZERO;
            for i in 0..dout.len() {
                acc += term(i);
            }
            acc_slice(adj, id, 1, &[sign * acc]);
        }
        Bcast::Row => {
            let d = b.len();
            let rows = dout.len() / d;
            let mut contrib = vec![T::ZERO; d];
            for i in 0..rows {
                for j in 0..d {
                    contrib[j] += term(i * d + j);
                }
            }
            for v in &mut contrib {
                *v = sign * *v;
            }
            acc_slice(adj, id, d, &contrib);
        }
    }
}

/// Determine how `rhs` broadcasts against `lhs`, or reject.
fn broadcast_kind(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
    lhs_len: usize,
    rhs_len: usize,
) -> Result<Bcast> {
    if lhs == rhs {
        return Ok(Bcast::Same);
    }
    if rhs_len == 1 && rhs.len() <= 1 {
        return Ok(Bcast::Scalar);
    }
    if lhs.len() == 2 && rhs.len() == 1 && rhs[0] == lhs[1] {
        return Ok(Bcast::Row);
    }
    let _ = lhs_len;
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

// The element-wise methods keep the operator names (`add`, `mul`, ...) even
// though they are fallible; the std ops traits cannot return `Result`.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    fn with_nodes<R>(&self, f: impl FnOnce(&[Node<T>]) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes)
    }

    /// `[m,k] @ [k,n] -> [m,n]`
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (value, shapes_ok) = self.with_nodes(|nodes| {
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                return (None, (a.shape().to_vec(), b.shape().to_vec()));
            }
            let out = matmul_nn(a.data(), b.data(), a.rows(), a.cols(), b.cols());
            (
                Some(Tensor::new(vec![a.rows(), b.cols()], out).expect("matmul shape")),
                (vec![], vec![]),
            )
        });
        match value {
            Some(v) => self.tape.push_op(v, OpKind::Matmul, &[self.id, rhs.id], "matmul"),
            None => Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: shapes_ok.0,
                rhs: shapes_ok.1,
            }),
        }
    }

    fn binary_map(
        self,
        rhs: Var<'t, T>,
        op_name: &'static str,
        make_op: impl FnOnce(Bcast) -> OpKind<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        let (bc, value) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            let bc = broadcast_kind(op_name, a.shape(), b.shape(), a.len(), b.len())?;
            let data: Vec<T> = match bc {
                Bcast::Same => a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
                Bcast::Scalar => {
                    let y = b.data()[0];
                    a.data().iter().map(|&x| f(x, y)).collect()
                }
                Bcast::Row => {
                    let d = b.len();
                    a.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, b.data()[i % d]))
                        .collect()
                }
            };
            (bc, Tensor::new(a.shape().to_vec(), data).expect("binary shape"))
        };
        self.tape
            .push_op(value, make_op(bc), &[self.id, rhs.id], op_name)
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_map(rhs, "add", OpKind::Add, |x, y| x + y)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_map(rhs, "sub", OpKind::Sub, |x, y| x - y)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_map(rhs, "mul", OpKind::Mul, |x, y| x * y)
    }

    /// Element-wise minimum; ties route the gradient to `self`.
    pub fn min_elem(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: "min",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let data: Vec<T> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| x.min(y))
                .collect();
            Tensor::new(a.shape().to_vec(), data).expect("min shape")
        };
        self.tape
            .push_op(value, OpKind::MinElem, &[self.id, rhs.id], "min")
    }

    fn unary(
        self,
        op: OpKind<T>,
        op_name: &'static str,
        f: impl Fn(T) -> T,
    ) -> Result<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.map(&f)
        };
        self.tape.push_op(value, op, &[self.id], op_name)
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary(OpKind::Neg, "neg", |x| -x)
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.unary(OpKind::Tanh, "tanh", |x| x.tanh())
    }

    pub fn exp(self) -> Result<Var<'t, T>> {
        self.unary(OpKind::Exp, "exp", |x| x.exp())
    }

    pub fn ln(self) -> Result<Var<'t, T>> {
        self.unary(OpKind::Ln, "ln", |x| x.ln())
    }

    pub fn elu(self) -> Result<Var<'t, T>> {
        self.unary(OpKind::Elu, "elu", |x| {
            if x > T::ZERO {
                x
            } else {
                x.exp() - T::ONE
            }
        })
    }

    pub fn clip(self, lo: f64, hi: f64) -> Result<Var<'t, T>> {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(OpKind::Clip { lo: l, hi: h }, "clip", |x| x.max(l).min(h))
    }

    pub fn add_const(self, c: f64) -> Result<Var<'t, T>> {
        let cv = T::from_f64(c);
        self.unary(OpKind::AddConst(cv), "add_const", |x| x + cv)
    }

    pub fn mul_const(self, c: f64) -> Result<Var<'t, T>> {
        let cv = T::from_f64(c);
        self.unary(OpKind::MulConst(cv), "mul_const", |x| x * cv)
    }

    pub fn sum_all(self) -> Result<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let mut acc = T::ZERO;
            for &x in nodes[self.id].value.data() {
                acc += x;
            }
            Tensor::scalar(acc)
        };
        self.tape.push_op(value, OpKind::SumAll, &[self.id], "sum")
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            let mut acc = T::ZERO;
            for &x in t.data() {
                acc += x;
            }
            Tensor::scalar(acc / T::from_f64(t.len() as f64))
        };
        self.tape.push_op(value, OpKind::MeanAll, &[self.id], "mean")
    }

    /// `[B, D] -> [B]`, summing over the last axis.
    pub fn sum_last(self) -> Result<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            if t.rank() != 2 {
                return Err(Error::ShapeMismatch {
                    op: "sum_last",
                    lhs: t.shape().to_vec(),
                    rhs: vec![],
                });
            }
            let (b, d) = (t.rows(), t.cols());
            let mut out = vec![T::ZERO; b];
            for i in 0..b {
                let mut acc = T::ZERO;
                for &x in &t.data()[i * d..(i + 1) * d] {
                    acc += x;
                }
                out[i] = acc;
            }
            Tensor::vector(out)
        };
        self.tape
            .push_op(value, OpKind::SumLast, &[self.id], "sum_last")
    }

    /// `[B, p] ++ [B, q] -> [B, p+q]` along the last axis.
    pub fn concat_last(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let (value, split) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            if a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows() {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (rows, p, q) = (a.rows(), a.cols(), b.cols());
            let mut data = Vec::with_capacity(rows * (p + q));
            for i in 0..rows {
                data.extend_from_slice(a.row(i));
                data.extend_from_slice(b.row(i));
            }
            (
                Tensor::new(vec![rows, p + q], data).expect("concat shape"),
                p,
            )
        };
        self.tape.push_op(
            value,
            OpKind::ConcatLast { split },
            &[self.id, rhs.id],
            "concat",
        )
    }

    /// Select the given columns of a `[B, C]` tensor, in index-set order.
    pub fn select_cols(self, idx: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            if t.rank() != 2 || idx.iter().any(|&c| c >= t.cols()) {
                return Err(Error::ShapeMismatch {
                    op: "select_cols",
                    lhs: t.shape().to_vec(),
                    rhs: vec![idx.len()],
                });
            }
            let (b, k) = (t.rows(), idx.len());
            let mut data = Vec::with_capacity(b * k);
            for i in 0..b {
                for &c in idx {
                    data.push(t.at2(i, c));
                }
            }
            Tensor::new(vec![b, k], data).expect("select shape")
        };
        self.tape.push_op(
            value,
            OpKind::SelectCols { idx: idx.to_vec() },
            &[self.id],
            "select_cols",
        )
    }

    /// Scatter a `[B, k]` tensor into the given columns of a zero-filled
    /// `[B, out_cols]` tensor.
    pub fn scatter_cols(self, idx: &[usize], out_cols: usize) -> Result<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            if t.rank() != 2 || t.cols() != idx.len() || idx.iter().any(|&c| c >= out_cols) {
                return Err(Error::ShapeMismatch {
                    op: "scatter_cols",
                    lhs: t.shape().to_vec(),
                    rhs: vec![out_cols],
                });
            }
            let b = t.rows();
            let mut data = vec![T::ZERO; b * out_cols];
            for i in 0..b {
                for (j, &c) in idx.iter().enumerate() {
                    data[i * out_cols + c] = t.at2(i, j);
                }
            }
            Tensor::new(vec![b, out_cols], data).expect("scatter shape")
        };
        self.tape.push_op(
            value,
            OpKind::ScatterCols { idx: idx.to_vec() },
            &[self.id],
            "scatter_cols",
        )
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t, T>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            let numel: usize = shape.iter().product();
            if numel != t.len() {
                return Err(Error::ShapeMismatch {
                    op: "reshape",
                    lhs: t.shape().to_vec(),
                    rhs: shape,
                });
            }
            Tensor::new(shape, t.data().to_vec()).expect("reshape")
        };
        self.tape
            .push_op(value, OpKind::Reshape, &[self.id], "reshape")
    }

    /// Convenience: `x * x`.
    pub fn square(self) -> Result<Var<'t, T>> {
        self.mul(self)
    }
}
