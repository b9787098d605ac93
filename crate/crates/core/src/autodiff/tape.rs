//! Eager reverse-mode tape.
//!
//! Every op evaluates immediately and records its inputs; `backward` walks the
//! tape in reverse creation order, which is a valid topological order.

use std::collections::HashMap;
use std::sync::Arc;

use super::array::{
    broadcast_shapes, broadcast_strides, canonical_sum, for_each_broadcast2, numel,
    reduce_to_shape, Array,
};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Sparse coupling table for a channel-wise bilinear product over the degree axis.
///
/// Each entry reads `(a_row, b_row, out_row, coefficient)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingTable {
    pub rows_in: usize,
    pub rows_out: usize,
    pub entries: Vec<(usize, usize, usize, f64)>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Powf(Var, f64),
    Silu(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Sum(Var),
    SumAxis { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    BroadcastTo(Var),
    GatherRows { x: Var, index: Arc<Vec<usize>> },
    ScatterAddRows { x: Var, index: Arc<Vec<usize>> },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax { x: Var, axis: usize },
    Coupling { a: Var, b: Var, table: Arc<CouplingTable> },
    /// Recorded without a derivative rule; backward through it is an error.
    Opaque { name: &'static str },
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass worth of recorded computation.
///
/// A tape is confined to one thread and dropped after `backward`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: HashMap<usize, Array>,
    params: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let len = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, len, inner)
}

fn matmul_rows(a: &[f64], b: &[f64], rows: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    for i in 0..rows {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Array::scalar(value))
    }

    /// Registers (once per tape) a trainable parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Records a value produced outside the supported op set.
    pub fn opaque(&mut self, name: &'static str, inputs: &[Var], value: Array) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value, Op::Opaque { name }, rg)
    }

    // ----- elementwise binary -------------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            return va.zip_map(vb, f);
        }
        let out_shape = broadcast_shapes(va.shape(), vb.shape()).unwrap_or_else(|| {
            panic!("shapes {:?} and {:?} do not broadcast", va.shape(), vb.shape())
        });
        let sa = broadcast_strides(va.shape(), &out_shape);
        let sb = broadcast_strides(vb.shape(), &out_shape);
        let (da, db) = (va.data(), vb.data());
        let mut out = vec![0.0; numel(&out_shape)];
        for_each_broadcast2(&out_shape, &sa, &sb, |k, ia, ib| out[k] = f(da[ia], db[ib]));
        Array::new(out_shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Div(a, b), rg)
    }

    // ----- elementwise unary ---------------------------------------------------------------

    pub fn neg(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| -a);
        let rg = self.rg(x);
        self.push(v, Op::Neg(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, c), rg)
    }

    /// `x + c` for a scalar constant.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let s = self.scalar(c);
        self.add(x, s)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(v, Op::Exp(x), rg)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        let rg = self.rg(x);
        self.push(v, Op::Ln(x), rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::sqrt);
        let rg = self.rg(x);
        self.push(v, Op::Sqrt(x), rg)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let v = self.value(x).map(|a| a.powf(p));
        let rg = self.rg(x);
        self.push(v, Op::Powf(x, p), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(silu);
        let rg = self.rg(x);
        self.push(v, Op::Silu(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    // ----- linear algebra & reductions ----------------------------------------------------

    /// `a[..., k] @ b[k, n]`, treating all leading axes of `a` as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(!sa.is_empty() && sb.len() == 2, "matmul expects a[...,k] and b[k,n], got {sa:?} {sb:?}");
        let k = *sa.last().unwrap();
        assert_eq!(k, sb[0], "matmul inner dimension mismatch {sa:?} x {sb:?}");
        let n = sb[1];
        let rows = numel(&sa) / k.max(1);
        let out = matmul_rows(self.value(a).data(), self.value(b).data(), rows, k, n);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Array::new(shape, out), Op::MatMul(a, b), rg)
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Array::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it as a size-1 axis.
    ///
    /// The sum over each lane is order-independent (sorted before
    /// accumulation), so permuting the reduced axis gives bit-identical output.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut lane = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (l, slot) in lane.iter_mut().enumerate() {
                    *slot = d[(o * len + l) * inner + i];
                }
                out[o * inner + i] = canonical_sum(&mut lane);
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let rg = self.rg(x);
        self.push(Array::new(oshape, out), Op::SumAxis { x }, rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis);
        self.scale(s, 1.0 / n)
    }

    // ----- shape manipulation -------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Var {
        let src = self.value(x);
        if src.shape() == shape {
            return x;
        }
        let sa = broadcast_strides(src.shape(), shape);
        let zero = vec![0; shape.len()];
        let d = src.data();
        let mut out = vec![0.0; numel(shape)];
        for_each_broadcast2(shape, &sa, &zero, |k, ia, _| out[k] = d[ia]);
        let rg = self.rg(x);
        self.push(Array::new(shape.to_vec(), out), Op::BroadcastTo(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
            }
            total += s[axis];
        }
        let mut oshape = first.clone();
        oshape[axis] = total;
        let (outer, _, inner) = axis_split(&oshape, axis);
        let mut out = vec![0.0; numel(&oshape)];
        let mut offset = 0;
        for &p in parts {
            let len = self.shape(p)[axis];
            let d = self.value(p).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                let src = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&d[src..src + len * inner]);
            }
            offset += len;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Array::new(oshape, out), Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start <= end && end <= shape[axis], "slice {start}..{end} out of range for {shape:?}");
        let (outer, len, inner) = axis_split(&shape, axis);
        let w = end - start;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let s = (o * len + start) * inner;
            out.extend_from_slice(&d[s..s + w * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = w;
        let rg = self.rg(x);
        self.push(Array::new(oshape, out), Op::Slice { x, axis, start }, rg)
    }

    /// Selects rows (first axis) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        let row = numel(&shape[1..]);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            assert!(i < shape[0], "gather index {i} out of range {}", shape[0]);
            out.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut oshape = shape;
        oshape[0] = index.len();
        let rg = self.rg(x);
        self.push(Array::new(oshape, out), Op::GatherRows { x, index: Arc::new(index.to_vec()) }, rg)
    }

    /// `out[index[m]] += x[m]` into `rows` zero-initialised rows.
    ///
    /// Contributions to each target element are summed order-independently.
    pub fn scatter_add_rows(&mut self, x: Var, index: &[usize], rows: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape[0], index.len(), "scatter index length mismatch");
        let row = numel(&shape[1..]);
        let d = self.value(x).data();
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); rows];
        for (m, &t) in index.iter().enumerate() {
            assert!(t < rows, "scatter target {t} out of range {rows}");
            buckets[t].push(m);
        }
        let mut out = vec![0.0; rows * row];
        let mut lane = Vec::new();
        for (t, members) in buckets.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            for c in 0..row {
                lane.clear();
                lane.extend(members.iter().map(|&m| d[m * row + c]));
                out[t * row + c] = canonical_sum(&mut lane);
            }
        }
        let mut oshape = shape;
        oshape[0] = rows;
        let rg = self.rg(x);
        self.push(
            Array::new(oshape, out),
            Op::ScatterAddRows { x, index: Arc::new(index.to_vec()) },
            rg,
        )
    }

    // ----- fused primitives -----------------------------------------------------------------

    /// Layer normalisation over the last axis without scale or bias.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let h = *shape.last().expect("layer_norm on scalar");
        let d = self.value(x).data();
        let rows = d.len() / h;
        let mut out = vec![0.0; d.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let xs = &d[r * h..(r + 1) * h];
            let mean = xs.iter().sum::<f64>() / h as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * h..(r + 1) * h].iter_mut().zip(xs) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(x);
        self.push(Array::new(shape, out), Op::LayerNorm { x, inv_std }, rg)
    }

    /// Softmax along `axis` with max subtraction; the normaliser is an
    /// order-independent sum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        let mut lane = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).fold(f64::NEG_INFINITY, |m, l| m.max(d[at(l)]));
                for (l, slot) in lane.iter_mut().enumerate() {
                    *slot = (d[at(l)] - m).exp();
                }
                let exps = lane.clone();
                let z = canonical_sum(&mut lane);
                for (l, e) in exps.iter().enumerate() {
                    out[at(l)] = e / z;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Array::new(shape, out), Op::Softmax { x, axis }, rg)
    }

    /// Channel-wise bilinear coupling over the second-to-last (degree) axis.
    ///
    /// `a` and `b` share shape `[..., rows_in, H]`; output is `[..., rows_out, H]`.
    pub fn coupling(&mut self, a: Var, b: Var, table: Arc<CouplingTable>) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape, self.shape(b), "coupling operands must share a shape");
        assert!(shape.len() >= 2);
        let h = shape[shape.len() - 1];
        let din = shape[shape.len() - 2];
        assert_eq!(din, table.rows_in, "coupling degree axis mismatch");
        let lead = numel(&shape[..shape.len() - 2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let dout = table.rows_out;
        let mut out = vec![0.0; lead * dout * h];
        for l in 0..lead {
            let ab = l * din * h;
            let ob = l * dout * h;
            for &(ia, ib, io, c) in &table.entries {
                let ra = &da[ab + ia * h..ab + (ia + 1) * h];
                let rb = &db[ab + ib * h..ab + (ib + 1) * h];
                let ro = &mut out[ob + io * h..ob + (io + 1) * h];
                for k in 0..h {
                    ro[k] += c * ra[k] * rb[k];
                }
            }
        }
        let mut oshape = shape;
        let n = oshape.len();
        oshape[n - 2] = dout;
        let rg = self.rg(a) || self.rg(b);
        self.push(Array::new(oshape, out), Op::Coupling { a, b, table }, rg)
    }

    // ----- backward -------------------------------------------------------------------------

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.grads.get(&v.0)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Gradients for every parameter registered on this tape, keyed by id.
    pub fn param_grads(&self) -> Vec<(ParamId, Array)> {
        let mut out: Vec<(ParamId, Array)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = self.grads.get(&v.0).cloned().unwrap_or_else(|| Array::zeros(self.shape(v)));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Reverse pass from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Array>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Array::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                match self.grads.get_mut(&idx) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        self.grads.insert(idx, g);
                    }
                }
                continue;
            }
            for (input, contrib) in self.local_grads(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &Array) -> Result<Vec<(Var, Array)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let bcast_pair = |a: Var, b: Var, fa: &dyn Fn(f64, f64, f64) -> f64, fb: &dyn Fn(f64, f64, f64) -> f64| {
            let (va, vb) = (val(a), val(b));
            let oshape = g.shape();
            let sa = broadcast_strides(va.shape(), oshape);
            let sb = broadcast_strides(vb.shape(), oshape);
            let (da, db, dg) = (va.data(), vb.data(), g.data());
            let mut ga = vec![0.0; va.len()];
            let mut gb = vec![0.0; vb.len()];
            let (wa, wb) = (self.rg(a), self.rg(b));
            for_each_broadcast2(oshape, &sa, &sb, |k, ia, ib| {
                if wa {
                    ga[ia] += fa(dg[k], da[ia], db[ib]);
                }
                if wb {
                    gb[ib] += fb(dg[k], da[ia], db[ib]);
                }
            });
            vec![
                (a, Array::new(va.shape().to_vec(), ga)),
                (b, Array::new(vb.shape().to_vec(), gb)),
            ]
        };
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_to_shape(g, val(*a).shape())),
                (*b, reduce_to_shape(g, val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to_shape(g, val(*a).shape())),
                (*b, reduce_to_shape(&g.map(|x| -x), val(*b).shape())),
            ],
            Op::Mul(a, b) => bcast_pair(*a, *b, &|g, _, y| g * y, &|g, x, _| g * x),
            Op::Div(a, b) => bcast_pair(*a, *b, &|g, _, y| g / y, &|g, x, y| -g * x / (y * y)),
            Op::Neg(x) => vec![(*x, g.map(|v| -v))],
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
            Op::Exp(x) => vec![(*x, g.zip_map(out, |a, e| a * e))],
            Op::Ln(x) => vec![(*x, g.zip_map(val(*x), |a, v| a / v))],
            Op::Sqrt(x) => vec![(*x, g.zip_map(out, |a, s| 0.5 * a / s))],
            Op::Powf(x, p) => vec![(*x, g.zip_map(val(*x), |a, v| a * p * v.powf(p - 1.0)))],
            Op::Silu(x) => vec![(*x, g.zip_map(val(*x), |a, v| {
                let s = sigmoid(v);
                a * s * (1.0 + v * (1.0 - s))
            }))],
            Op::Gelu(x) => vec![(*x, g.zip_map(val(*x), |a, v| a * gelu_grad(v)))],
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let k = vb.shape()[0];
                let n = vb.shape()[1];
                let rows = va.len() / k.max(1);
                let (da, db, dg) = (va.data(), vb.data(), g.data());
                let mut res = Vec::with_capacity(2);
                if self.rg(*a) {
                    let mut ga = vec![0.0; va.len()];
                    for i in 0..rows {
                        let grow = &dg[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    res.push((*a, Array::new(va.shape().to_vec(), ga)));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; vb.len()];
                    for i in 0..rows {
                        let grow = &dg[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = da[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    res.push((*b, Array::new(vb.shape().to_vec(), gb)));
                }
                res
            }
            Op::Sum(x) => vec![(*x, Array::full(val(*x).shape(), g.item()))],
            Op::SumAxis { x, .. } | Op::BroadcastTo(x) => {
                let xs = val(*x).shape();
                if matches!(node.op, Op::SumAxis { .. }) {
                    // broadcast g (size-1 on axis) back to x's shape
                    let sa = broadcast_strides(g.shape(), xs);
                    let zero = vec![0; xs.len()];
                    let dg = g.data();
                    let mut gx = vec![0.0; numel(xs)];
                    for_each_broadcast2(xs, &sa, &zero, |k, ia, _| gx[k] = dg[ia]);
                    vec![(*x, Array::new(xs.to_vec(), gx))]
                } else {
                    vec![(*x, reduce_to_shape(g, xs))]
                }
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape()))],
            Op::Concat { parts, axis } => {
                let oshape = g.shape();
                let total = oshape[*axis];
                let (outer, _, inner) = axis_split(oshape, *axis);
                let dg = g.data();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let ps = val(p).shape().to_vec();
                    let len = ps[*axis];
                    let mut gp = Vec::with_capacity(numel(&ps));
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        gp.extend_from_slice(&dg[s..s + len * inner]);
                    }
                    offset += len;
                    res.push((p, Array::new(ps, gp)));
                }
                res
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape().to_vec();
                let (outer, len, inner) = axis_split(&xs, *axis);
                let w = g.shape()[*axis];
                let dg = g.data();
                let mut gx = vec![0.0; numel(&xs)];
                for o in 0..outer {
                    let d = (o * len + start) * inner;
                    gx[d..d + w * inner].copy_from_slice(&dg[o * w * inner..(o + 1) * w * inner]);
                }
                vec![(*x, Array::new(xs, gx))]
            }
            Op::GatherRows { x, index } => {
                let xs = val(*x).shape().to_vec();
                let row = numel(&xs[1..]);
                let dg = g.data();
                let mut gx = vec![0.0; numel(&xs)];
                for (m, &i) in index.iter().enumerate() {
                    for (o, &v) in gx[i * row..(i + 1) * row].iter_mut().zip(&dg[m * row..(m + 1) * row]) {
                        *o += v;
                    }
                }
                vec![(*x, Array::new(xs, gx))]
            }
            Op::ScatterAddRows { x, index } => {
                let xs = val(*x).shape().to_vec();
                let row = numel(&xs[1..]);
                let dg = g.data();
                let mut gx = Vec::with_capacity(numel(&xs));
                for &t in index.iter() {
                    gx.extend_from_slice(&dg[t * row..(t + 1) * row]);
                }
                vec![(*x, Array::new(xs, gx))]
            }
            Op::LayerNorm { x, inv_std } => {
                let h = *out.shape().last().unwrap();
                let (dy, y) = (g.data(), out.data());
                let mut gx = vec![0.0; y.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let (ys, gs) = (&y[r * h..(r + 1) * h], &dy[r * h..(r + 1) * h]);
                    let mg = gs.iter().sum::<f64>() / h as f64;
                    let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / h as f64;
                    for c in 0..h {
                        gx[r * h + c] = is * (gs[c] - mg - ys[c] * mgy);
                    }
                }
                vec![(*x, Array::new(out.shape().to_vec(), gx))]
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let (y, dy) = (out.data(), g.data());
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| y[at(l)] * dy[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = y[at(l)] * (dy[at(l)] - dot);
                        }
                    }
                }
                vec![(*x, Array::new(out.shape().to_vec(), gx))]
            }
            Op::Coupling { a, b, table } => {
                let (va, vb) = (val(*a), val(*b));
                let shape = va.shape();
                let h = shape[shape.len() - 1];
                let din = table.rows_in;
                let dout = table.rows_out;
                let lead = numel(&shape[..shape.len() - 2]);
                let (da, db, dg) = (va.data(), vb.data(), g.data());
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for l in 0..lead {
                    let ab = l * din * h;
                    let ob = l * dout * h;
                    for &(ia, ib, io, c) in &table.entries {
                        for k in 0..h {
                            let go = c * dg[ob + io * h + k];
                            ga[ab + ia * h + k] += go * db[ab + ib * h + k];
                            gb[ab + ib * h + k] += go * da[ab + ia * h + k];
                        }
                    }
                }
                vec![(*a, Array::new(shape.to_vec(), ga)), (*b, Array::new(shape.to_vec(), gb))]
            }
            Op::Opaque { name, .. } => return Err(Error::UnsupportedOp(name)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Array::from_vec(vec![1.0, 2.0]));
        let sq = t.mul(w, w);
        let l = t.sum(sq);
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_sum_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Array::new(vec![2, 2], vec![1., 0., 0., 1.]));
        let b = t.constant(Array::ones(&[2, 2]));
        let m = t.matmul(a, b);
        let l = t.sum(m);
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[2., 2., 2., 2.]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let w = t.leaf(Array::from_vec(vec![3.0]));
        let sq = t.mul(w, w);
        let l = t.sum(sq);
        t.backward(l).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[12.0]);
        t.zero_grad();
        assert!(t.grad(w).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let w = t.leaf(Array::from_vec(vec![1.0, 2.0]));
        assert!(matches!(t.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn opaque_op_blocks_backward() {
        let mut t = Tape::new();
        let w = t.leaf(Array::from_vec(vec![1.0, 2.0]));
        let o = t.opaque("argmax", &[w], Array::scalar(1.0));
        assert!(matches!(t.backward(o), Err(Error::UnsupportedOp("argmax"))));
    }

    #[test]
    fn softmax_rows_are_convex() {
        let mut t = Tape::new();
        let x = t.constant(Array::new(vec![2, 3], vec![1000., 1001., 999., -3., 0., 2.]));
        let s = t.softmax(x, 1);
        let v = t.value(s);
        for r in 0..2 {
            let row = v.row(r);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn scatter_then_gather_shapes() {
        let mut t = Tape::new();
        let x = t.leaf(Array::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]));
        let s = t.scatter_add_rows(x, &[1, 1, 0], 2);
        assert_eq!(t.value(s).data(), &[5., 6., 4., 6.]);
        let gth = t.gather_rows(s, &[0, 0, 1]);
        assert_eq!(t.value(gth).data(), &[5., 6., 5., 6., 4., 6.]);
    }
}
