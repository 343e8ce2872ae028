//! Reverse-mode differentiation over batched row-major matrices.
//!
//! Every node holds a `rows × cols` value. Nodes are appended in evaluation
//! order, so node ids are already a topological order and [`Tape::backward`]
//! replays adjoints by walking the node list once in reverse.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis, Zip};

use super::params::{view, ParamRef};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// An op with a hand-written adjoint, for fused kernels that would be slow
/// to express as a chain of elementwise primitives.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Adjoints of each input, in the order the inputs were recorded.
    fn backward(&self, inputs: &[&Array2<f64>], output: &Array2<f64>, grad: &Array2<f64>) -> Vec<Array2<f64>>;
}

enum Op {
    Const,
    Param(ParamRef),
    MatMulT {
        x: NodeId,
        w: NodeId,
        mask: Option<Arc<Array2<f64>>>,
        effective: Option<Array2<f64>>,
    },
    AddRow { x: NodeId, b: NodeId },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    SumRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SelectCols { x: NodeId, cols: Vec<usize> },
    ConcatCols(Vec<NodeId>),
    Custom { inputs: Vec<NodeId>, op: Box<dyn CustomOp> },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Const => "const",
            Op::Param(_) => "param",
            Op::MatMulT { .. } => "matmul",
            Op::AddRow { .. } => "add_row",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Clamp { .. } => "clamp",
            Op::SumRows(_) => "sum_rows",
            Op::SumAll(_) => "sum_all",
            Op::MeanAll(_) => "mean_all",
            Op::SelectCols { .. } => "select_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::Custom { op, .. } => op.name(),
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records one evaluation of a computation against a fixed parameter array.
#[derive(Debug)]
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn into_value(mut self, id: NodeId) -> Array2<f64> {
        std::mem::take(&mut self.nodes[id.0].value)
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn constant_view(&mut self, value: ArrayView2<'_, f64>) -> NodeId {
        self.push(value.to_owned(), Op::Const)
    }

    pub fn param(&mut self, p: ParamRef) -> NodeId {
        let value = view(self.params, p).to_owned();
        self.push(value, Op::Param(p))
    }

    /// `x · (w ⊙ mask)ᵀ` with `x: n × in`, `w: out × in`.
    pub fn matmul_t(&mut self, x: NodeId, w: NodeId, mask: Option<Arc<Array2<f64>>>) -> Result<NodeId> {
        let (xv, wv) = (self.val(x), self.val(w));
        if xv.ncols() != wv.ncols() {
            return Err(Error::shape("matmul_t", format!("input width {}", wv.ncols()), xv.ncols()));
        }
        let effective = match &mask {
            Some(m) => {
                if m.dim() != wv.dim() {
                    return Err(Error::shape("matmul_t mask", format!("{:?}", wv.dim()), format!("{:?}", m.dim())));
                }
                Some(wv * &**m)
            }
            None => None,
        };
        let value = super::matmul(xv.view(), effective.as_ref().unwrap_or(wv).t());
        Ok(self.push(value, Op::MatMulT { x, w, mask, effective }))
    }

    /// Add a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.val(x), self.val(b));
        if bv.nrows() != 1 || bv.ncols() != xv.ncols() {
            return Err(Error::shape("add_row", format!("1 x {}", xv.ncols()), format!("{:?}", bv.dim())));
        }
        let value = xv + bv;
        Ok(self.push(value, Op::AddRow { x, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.val(x).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    fn check_same(&self, ctx: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (da, db) = (self.val(a).dim(), self.val(b).dim());
        if da != db {
            return Err(Error::shape(ctx, format!("{da:?}"), format!("{db:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("add", a, b)?;
        let value = self.val(a) + self.val(b);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("sub", a, b)?;
        let value = self.val(a) - self.val(b);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("mul", a, b)?;
        let value = self.val(a) * self.val(b);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.val(x) * c;
        self.push(value, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.val(x) + c;
        self.push(value, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = self.val(x).mapv(f64::exp);
        self.push(value, Op::Exp(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let value = self.val(x).mapv(|v| v * v);
        self.push(value, Op::Square(x))
    }

    /// Elementwise clamp; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.val(x).mapv(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp { x, lo, hi })
    }

    /// Per-row sum, `n × c → n × 1`.
    pub fn sum_rows(&mut self, x: NodeId) -> NodeId {
        let value = self.val(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::SumRows(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.val(x).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x);
        let m = v.sum() / v.len().max(1) as f64;
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(x))
    }

    /// Gather columns by index; indices may repeat.
    pub fn select_cols(&mut self, x: NodeId, cols: Vec<usize>) -> Result<NodeId> {
        let xv = self.val(x);
        if let Some(&bad) = cols.iter().find(|&&c| c >= xv.ncols()) {
            return Err(Error::shape("select_cols", format!("column < {}", xv.ncols()), bad));
        }
        let value = xv.select(Axis(1), &cols);
        Ok(self.push(value, Op::SelectCols { x, cols }))
    }

    /// Join matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map_or(0, |&p| self.val(p).nrows());
        if let Some(&bad) = parts.iter().find(|&&p| self.val(p).nrows() != rows) {
            return Err(Error::shape("concat_cols", format!("{rows} rows"), self.val(bad).nrows()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.val(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Contract(e.to_string()))?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Record a fused op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: Vec<NodeId>, value: Array2<f64>, op: Box<dyn CustomOp>) -> NodeId {
        self.push(value, Op::Custom { inputs, op })
    }

    /// Gradient of the scalar `loss` with respect to every parameter of the
    /// underlying array. Parameters never read by the tape get zero.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<f64>> {
        let lv = self.val(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss node, got shape {:?}",
                lv.dim()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut adj: Vec<Option<Array2<f64>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Array2::ones((1, 1)));

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Const => {}
                Op::Param(p) => {
                    for (dst, src) in grads[p.range()].iter_mut().zip(g.iter()) {
                        *dst += src;
                    }
                }
                Op::MatMulT { x, w, mask, effective } => {
                    let wv = effective.as_ref().unwrap_or(self.val(*w));
                    accumulate(&mut adj, *x, super::matmul(g.view(), wv.view()));
                    let mut gw = super::matmul(g.t(), self.val(*x).view());
                    if let Some(m) = mask {
                        gw *= &**m;
                    }
                    accumulate(&mut adj, *w, gw);
                }
                Op::AddRow { x, b } => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut adj, *b, gb);
                    accumulate(&mut adj, *x, g);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&node.value).for_each(|gx, &y| {
                        if y <= 0.0 {
                            *gx = 0.0;
                        }
                    });
                    accumulate(&mut adj, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, -&g);
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut adj, *a, &g * self.val(*b));
                    accumulate(&mut adj, *b, g * self.val(*a));
                }
                Op::Scale(x, c) => accumulate(&mut adj, *x, g * *c),
                Op::AddScalar(x) => accumulate(&mut adj, *x, g),
                Op::Exp(x) => accumulate(&mut adj, *x, g * &node.value),
                Op::Square(x) => accumulate(&mut adj, *x, g * self.val(*x) * 2.0),
                Op::Clamp { x, lo, hi } => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(self.val(*x)).for_each(|gx, &v| {
                        if v < *lo || v > *hi {
                            *gx = 0.0;
                        }
                    });
                    accumulate(&mut adj, *x, gx);
                }
                Op::SumRows(x) => {
                    let gx = ndarray::Array2::from_shape_fn(self.val(*x).dim(), |(r, _)| g[[r, 0]]);
                    accumulate(&mut adj, *x, gx);
                }
                Op::SumAll(x) => {
                    let gx = Array2::from_elem(self.val(*x).dim(), g[[0, 0]]);
                    accumulate(&mut adj, *x, gx);
                }
                Op::MeanAll(x) => {
                    let xv = self.val(*x);
                    let gx = Array2::from_elem(xv.dim(), g[[0, 0]] / xv.len().max(1) as f64);
                    accumulate(&mut adj, *x, gx);
                }
                Op::SelectCols { x, cols } => {
                    let mut gx = Array2::zeros(self.val(*x).dim());
                    for (j, &c) in cols.iter().enumerate() {
                        let mut dst = gx.column_mut(c);
                        dst += &g.column(j);
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let width = self.val(p).ncols();
                        let gp = g.slice(ndarray::s![.., start..start + width]).to_owned();
                        accumulate(&mut adj, p, gp);
                        start += width;
                    }
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Array2<f64>> = inputs.iter().map(|&i| self.val(i)).collect();
                    let gs = op.backward(&ins, &node.value, &g);
                    debug_assert_eq!(gs.len(), inputs.len());
                    for (&i, gi) in inputs.iter().zip(gs) {
                        accumulate(&mut adj, i, gi);
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut adj[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
