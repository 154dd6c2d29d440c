//! The tape. Ops append nodes in creation order; `backward` walks them in
//! strict reverse creation order and accumulates gradients additively, so a
//! value consumed twice receives the sum of both contributions.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::kernels as k;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Gelu { x: Var },
    Softmax { x: Var, axis: usize },
    SoftmaxRows { x: Var, mask: Option<Arc<Vec<bool>>> },
    Conv2d { x: Var, kernels: Var, bias: Var, stride: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    LayerNorm { x: Var, gain: Var, shift: Var, eps: f64 },
    Embedding { table: Var, ids: Arc<Vec<u32>> },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols { xs: Vec<Var> },
    StackRows { xs: Vec<Var> },
    Sum { x: Var },
    MaskedCrossEntropy { logits: Var, targets: Arc<Vec<u32>>, mask: Arc<Vec<bool>> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Wengert tape: nodes in creation order, acyclic by construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// A leaf that accumulates gradient during `backward`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        Tensor::from_vec(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("node shapes are consistent by construction")
    }

    /// Gradient of a node after `backward`; zeros for a participating leaf
    /// the loss never touched.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        match &n.grad {
            Some(g) => Tensor::from_vec(n.shape.clone(), g.clone()).unwrap(),
            None => Tensor::zeros(&n.shape),
        }
    }

    // ---- op constructors ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul inner extents", sa, sb));
        }
        let (m, kk, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0f32; m * n];
        k::matmul_nn(self.value(a), self.value(b), m, kk, n, &mut out);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], out, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose expects rank 2", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let mut out = vec![0f32; r * c];
        k::transpose2d(self.value(x), r, c, &mut out);
        let rg = self.needs(x);
        Ok(self.push(Op::Transpose { x }, vec![c, r], out, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.len() {
            return Err(Error::dim("reshape numel", self.shape(x), shape));
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.needs(x);
        Ok(self.push(Op::Reshape { x }, shape.to_vec(), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add shapes", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0f32; self.nodes[a.0].value.len()];
        k::add(self.value(a), self.value(b), &mut out);
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, shape, out, rg))
    }

    /// Broadcast-add a rank-1 bias over the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.is_empty() || *sx.last().unwrap() != sb[0] {
            return Err(Error::dim("bias over last axis", sx, sb));
        }
        let mut out = vec![0f32; self.nodes[x.0].value.len()];
        k::add_bias(self.value(x), self.value(b), &mut out);
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddBias { x, b }, shape, out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul shapes", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0f32; self.nodes[a.0].value.len()];
        k::mul(self.value(a), self.value(b), &mut out);
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, shape, out, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = vec![0f32; self.nodes[x.0].value.len()];
        k::scale(self.value(x), c, &mut out);
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs(x);
        self.push(Op::Scale { x, c }, shape, out, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |xv, out| k::relu(xv, out), |x| Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |xv, out| k::sigmoid(xv, out), |x| Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |xv, out| k::tanh(xv, out), |x| Op::Tanh { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |xv, out| k::gelu(xv, out), |x| Op::Gelu { x })
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(&[f32], &mut [f32]),
        op: impl Fn(Var) -> Op,
    ) -> Var {
        let mut out = vec![0f32; self.nodes[x.0].value.len()];
        f(self.value(x), &mut out);
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs(x);
        self.push(op(x), shape, out, rg)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::Index {
                context: "softmax axis",
                id: axis,
                bound: s.len(),
            });
        }
        let shape = s.to_vec();
        let mut out = vec![0f32; self.nodes[x.0].value.len()];
        k::softmax_axis(self.value(x), &shape, axis, &mut out);
        let rg = self.needs(x);
        Ok(self.push(Op::Softmax { x, axis }, shape, out, rg))
    }

    /// Softmax over the last axis with an optional attendable mask
    /// (`true` = attendable). Masked positions get weight exactly 0; every
    /// row must keep at least one attendable position.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::dim("softmax_rows expects rank >= 1", s, &[]));
        }
        let n = *s.last().unwrap();
        let numel = self.nodes[x.0].value.len();
        if let Some(m) = &mask {
            if m.len() != numel {
                return Err(Error::dim("softmax mask length", s, &[m.len()]));
            }
            for (r, row) in m.chunks_exact(n).enumerate() {
                if !row.iter().any(|&b| b) {
                    return Err(Error::Contract(format!(
                        "softmax row {r} has no attendable position"
                    )));
                }
            }
        }
        let shape = s.to_vec();
        let mut out = vec![0f32; numel];
        k::softmax_rows_masked(self.value(x), n, mask.as_deref().map(|m| &m[..]), &mut out);
        let rg = self.needs(x);
        Ok(self.push(Op::SoftmaxRows { x, mask }, shape, out, rg))
    }

    /// 3x3 cross-correlation, zero padding 1, given stride, plus bias.
    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Var, stride: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernels));
        if sx.len() != 3 || sk.len() != 4 || sk[0] != 3 || sk[1] != 3 {
            return Err(Error::dim("conv2d expects [h,w,cin] and [3,3,cin,cout]", sx, sk));
        }
        if sx[2] != sk[2] {
            return Err(Error::dim("conv2d channel mismatch", sx, sk));
        }
        let (h, w, cin, cout) = (sx[0], sx[1], sx[2], sk[3]);
        if self.shape(bias) != [cout] {
            return Err(Error::dim("conv2d bias", self.shape(bias), &[cout]));
        }
        let (oh, ow) = (k::conv_out(h, stride), k::conv_out(w, stride));
        let mut out = vec![0f32; oh * ow * cout];
        k::conv2d(
            self.value(x),
            self.value(kernels),
            self.value(bias),
            h,
            w,
            cin,
            cout,
            stride,
            &mut out,
        );
        let rg = self.needs(x) || self.needs(kernels) || self.needs(bias);
        Ok(self.push(
            Op::Conv2d { x, kernels, bias, stride },
            vec![oh, ow, cout],
            out,
            rg,
        ))
    }

    /// 2x2/stride-2 max pooling; trailing odd row/column dropped. The
    /// gradient routes to the window argmax, first in row-major order on
    /// ties.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] < 2 || s[1] < 2 {
            return Err(Error::dim("maxpool2d needs [h>=2, w>=2, c]", s, &[2, 2]));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0f32; oh * ow * c];
        let mut argmax = vec![0usize; oh * ow * c];
        k::maxpool2d(self.value(x), h, w, c, &mut out, &mut argmax);
        let rg = self.needs(x);
        Ok(self.push(Op::MaxPool2d { x, argmax }, vec![oh, ow, c], out, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(Error::dim("global_avg_pool expects [h,w,c]", s, &[]));
        }
        let (hw, c) = (s[0] * s[1], s[2]);
        let mut out = vec![0f32; c];
        k::global_avg_pool(self.value(x), hw, c, &mut out);
        let rg = self.needs(x);
        Ok(self.push(Op::GlobalAvgPool { x }, vec![c], out, rg))
    }

    /// Layer normalization over the last axis with affine gain/shift.
    pub fn layernorm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (sx, sg, ss) = (self.shape(x), self.shape(gain), self.shape(shift));
        let d = *sx.last().ok_or_else(|| Error::dim("layernorm rank", sx, &[]))?;
        if sg != [d] || ss != [d] {
            return Err(Error::dim("layernorm gain/shift", sg, &[d]));
        }
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layernorm eps must be positive, got {eps}")));
        }
        let mut out = vec![0f32; self.nodes[x.0].value.len()];
        k::layernorm(self.value(x), self.value(gain), self.value(shift), eps, &mut out);
        let shape = sx.to_vec();
        let rg = self.needs(x) || self.needs(gain) || self.needs(shift);
        Ok(self.push(Op::LayerNorm { x, gain, shift, eps }, shape, out, rg))
    }

    /// Row gather; the gradient scatters additively into the table.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::dim("embedding table must be [V,d]", s, &[]));
        }
        let (v, d) = (s[0], s[1]);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::Index {
                    context: "embedding id",
                    id: id as usize,
                    bound: v,
                });
            }
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&self.value(table)[id as usize * d..(id as usize + 1) * d]);
        }
        let rg = self.needs(table);
        Ok(self.push(
            Op::Embedding { table, ids: Arc::new(ids.to_vec()) },
            vec![ids.len(), d],
            out,
            rg,
        ))
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        let cols = *s.last().ok_or_else(|| Error::dim("slice_cols rank", s, &[]))?;
        if start + len > cols || len == 0 {
            return Err(Error::Index {
                context: "slice_cols range",
                id: start + len,
                bound: cols + 1,
            });
        }
        let rows = self.nodes[x.0].value.len() / cols;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.value(x)[r * cols + start..r * cols + start + len]);
        }
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start, len }, shape, out, rg))
    }

    /// Concatenate along the last axis; leading extents must agree.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Input("concat of zero tensors".into()));
        }
        let lead = self.shape(xs[0])[..self.shape(xs[0]).len() - 1].to_vec();
        let mut total = 0usize;
        for &x in xs {
            let s = self.shape(x);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat leading extents", self.shape(xs[0]), s));
            }
            total += *s.last().unwrap();
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                let c = *self.shape(x).last().unwrap();
                out.extend_from_slice(&self.value(x)[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Op::ConcatCols { xs: xs.to_vec() }, shape, out, rg))
    }

    /// Stack equal-shape tensors as the rows of a new leading axis.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Input("stack of zero tensors".into()));
        }
        let inner = self.shape(xs[0]).to_vec();
        for &x in xs {
            if self.shape(x) != inner {
                return Err(Error::dim("stack_rows shapes", &inner, self.shape(x)));
            }
        }
        let mut out = Vec::with_capacity(xs.len() * self.nodes[xs[0].0].value.len());
        for &x in xs {
            out.extend_from_slice(self.value(x));
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&inner);
        let rg = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Op::StackRows { xs: xs.to_vec() }, shape, out, rg))
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = k::sum_all(self.value(x));
        let rg = self.needs(x);
        self.push(Op::Sum { x }, vec![], vec![total as f32], rg)
    }

    /// x @ w + b.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Sum over mask-true rows of -log softmax(logits_row)[target]. Divide
    /// by the mask count (via [`Graph::scale`]) for the mean form.
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(Error::dim("cross entropy expects [rows, vocab]", s, &[]));
        }
        let (rows, v) = (s[0], s[1]);
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::dim("cross entropy rows", &[rows], &[targets.len(), mask.len()]));
        }
        for (&t, &m) in targets.iter().zip(mask) {
            if m && t as usize >= v {
                return Err(Error::Index {
                    context: "cross entropy target",
                    id: t as usize,
                    bound: v,
                });
            }
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Contract("cross entropy mask has zero true entries".into()));
        }
        let total = k::masked_ce_sum(self.value(logits), v, targets, mask);
        let rg = self.needs(logits);
        Ok(self.push(
            Op::MaskedCrossEntropy {
                logits,
                targets: Arc::new(targets.to_vec()),
                mask: Arc::new(mask.to_vec()),
            },
            vec![],
            vec![total as f32],
            rg,
        ))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Every `requires_grad` leaf reachable
    /// from the loss ends up holding d(loss)/d(leaf); untouched leaves read
    /// back as zeros via [`Graph::grad_tensor`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let grad = match self.nodes[id].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let contribs = self.vjp(id, &grad);
            self.nodes[id].grad = Some(grad);
            for (target, c) in contribs {
                self.accumulate(target, c);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f32>) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (gv, cv) in g.iter_mut().zip(&contrib) {
                    *gv += cv;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    /// Per-op vector-Jacobian products into inputs that require grad.
    fn vjp(&self, id: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let mut out: Vec<(Var, Vec<f32>)> = Vec::new();
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, kk) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let mut da = vec![0f32; m * kk];
                    k::matmul_nt(g, self.value(*b), m, n, kk, &mut da);
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0f32; kk * n];
                    k::matmul_tn(self.value(*a), g, m, kk, n, &mut db);
                    out.push((*b, db));
                }
            }
            Op::Transpose { x } => {
                let s = &node.shape; // [c, r]
                let mut dx = vec![0f32; g.len()];
                k::transpose2d(g, s[0], s[1], &mut dx);
                out.push((*x, dx));
            }
            Op::Reshape { x } => out.push((*x, g.to_vec())),
            Op::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::AddBias { x, b } => {
                if self.needs(*x) {
                    out.push((*x, g.to_vec()));
                }
                if self.needs(*b) {
                    let d = self.shape(*b)[0];
                    let mut db = vec![0f64; d];
                    for row in g.chunks_exact(d) {
                        for (acc, gv) in db.iter_mut().zip(row) {
                            *acc += *gv as f64;
                        }
                    }
                    out.push((*b, db.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let mut da = vec![0f32; g.len()];
                    k::mul(g, self.value(*b), &mut da);
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0f32; g.len()];
                    k::mul(g, self.value(*a), &mut db);
                    out.push((*b, db));
                }
            }
            Op::Scale { x, c } => {
                let mut dx = vec![0f32; g.len()];
                k::scale(g, *c, &mut dx);
                out.push((*x, dx));
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                out.push((*x, dx));
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(gv, yv)| {
                        let y = *yv as f64;
                        (*gv as f64 * y * (1.0 - y)) as f32
                    })
                    .collect();
                out.push((*x, dx));
            }
            Op::Tanh { x } => {
                let y = &node.value;
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(gv, yv)| {
                        let y = *yv as f64;
                        (*gv as f64 * (1.0 - y * y)) as f32
                    })
                    .collect();
                out.push((*x, dx));
            }
            Op::Gelu { x } => {
                let xv = self.value(*x);
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(gv, xv)| (*gv as f64 * k::gelu_grad_f64(*xv as f64)) as f32)
                    .collect();
                out.push((*x, dx));
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let shape = &node.shape;
                let n = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let mut dx = vec![0f32; g.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let base = o * n * inner + r;
                        let mut dot = 0f64;
                        for i in 0..n {
                            let idx = base + i * inner;
                            dot += g[idx] as f64 * y[idx] as f64;
                        }
                        for i in 0..n {
                            let idx = base + i * inner;
                            dx[idx] = (y[idx] as f64 * (g[idx] as f64 - dot)) as f32;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::SoftmaxRows { x, mask } => {
                let y = &node.value;
                let n = *node.shape.last().unwrap();
                let mut dx = vec![0f32; g.len()];
                for r in 0..g.len() / n {
                    let base = r * n;
                    let live = |i: usize| mask.as_ref().map_or(true, |m| m[base + i]);
                    let mut dot = 0f64;
                    for i in 0..n {
                        if live(i) {
                            dot += g[base + i] as f64 * y[base + i] as f64;
                        }
                    }
                    for i in 0..n {
                        if live(i) {
                            dx[base + i] =
                                (y[base + i] as f64 * (g[base + i] as f64 - dot)) as f32;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Conv2d { x, kernels, bias, stride } => {
                let sx = self.shape(*x);
                let (h, w, cin) = (sx[0], sx[1], sx[2]);
                let cout = self.shape(*kernels)[3];
                let grads =
                    k::conv2d_vjp(self.value(*x), self.value(*kernels), g, h, w, cin, cout, *stride);
                if self.needs(*x) {
                    out.push((*x, grads.dinput));
                }
                if self.needs(*kernels) {
                    out.push((*kernels, grads.dkernels));
                }
                if self.needs(*bias) {
                    out.push((*bias, grads.dbias));
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0f32; self.nodes[x.0].value.len()];
                for (gv, &idx) in g.iter().zip(argmax) {
                    dx[idx] += gv;
                }
                out.push((*x, dx));
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let (hw, c) = (s[0] * s[1], s[2]);
                let inv = 1.0 / hw as f64;
                let mut dx = vec![0f32; hw * c];
                for row in dx.chunks_exact_mut(c) {
                    for (dv, gv) in row.iter_mut().zip(g) {
                        *dv = (*gv as f64 * inv) as f32;
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm { x, gain, shift, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = gv.len();
                let rows = xv.len() / d;
                let mut dx = vec![0f32; xv.len()];
                let mut dgain = vec![0f64; d];
                let mut dshift = vec![0f64; d];
                for r in 0..rows {
                    let xrow = &xv[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let (mean, var) = k::row_moments(xrow);
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut s1 = 0f64;
                    let mut s2 = 0f64;
                    for i in 0..d {
                        let xhat = (xrow[i] as f64 - mean) * inv;
                        let dxhat = grow[i] as f64 * gv[i] as f64;
                        s1 += dxhat;
                        s2 += dxhat * xhat;
                        dgain[i] += grow[i] as f64 * xhat;
                        dshift[i] += grow[i] as f64;
                    }
                    let dn = d as f64;
                    for i in 0..d {
                        let xhat = (xrow[i] as f64 - mean) * inv;
                        let dxhat = grow[i] as f64 * gv[i] as f64;
                        dx[r * d + i] = ((dxhat - s1 / dn - xhat * s2 / dn) * inv) as f32;
                    }
                }
                if self.needs(*x) {
                    out.push((*x, dx));
                }
                if self.needs(*gain) {
                    out.push((*gain, dgain.into_iter().map(|v| v as f32).collect()));
                }
                if self.needs(*shift) {
                    out.push((*shift, dshift.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0f32; self.nodes[table.0].value.len()];
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    for (dv, gv) in dst.iter_mut().zip(&g[row * d..(row + 1) * d]) {
                        *dv += gv;
                    }
                }
                out.push((*table, dt));
            }
            Op::SliceCols { x, start, len } => {
                let cols = *self.shape(*x).last().unwrap();
                let rows = self.nodes[x.0].value.len() / cols;
                let mut dx = vec![0f32; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                out.push((*x, dx));
            }
            Op::ConcatCols { xs } => {
                let total = *node.shape.last().unwrap();
                let rows = node.value.len() / total;
                let mut offset = 0usize;
                for &x in xs {
                    let c = *self.shape(x).last().unwrap();
                    if self.needs(x) {
                        let mut dx = vec![0f32; rows * c];
                        for r in 0..rows {
                            dx[r * c..(r + 1) * c]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        out.push((x, dx));
                    }
                    offset += c;
                }
            }
            Op::StackRows { xs } => {
                let inner = node.value.len() / xs.len();
                for (i, &x) in xs.iter().enumerate() {
                    if self.needs(x) {
                        out.push((x, g[i * inner..(i + 1) * inner].to_vec()));
                    }
                }
            }
            Op::Sum { x } => {
                out.push((*x, vec![g[0]; self.nodes[x.0].value.len()]));
            }
            Op::MaskedCrossEntropy { logits, targets, mask } => {
                let s = self.shape(*logits);
                let (rows, v) = (s[0], s[1]);
                let lv = self.value(*logits);
                let upstream = g[0] as f64;
                let mut dl = vec![0f32; rows * v];
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    let row = &lv[r * v..(r + 1) * v];
                    let mut m = f64::NEG_INFINITY;
                    for x in row {
                        m = m.max(*x as f64);
                    }
                    let mut z = 0f64;
                    for x in row {
                        z += (*x as f64 - m).exp();
                    }
                    for i in 0..v {
                        let p = (row[i] as f64 - m).exp() / z;
                        let delta = if i == targets[r] as usize { 1.0 } else { 0.0 };
                        dl[r * v + i] = ((p - delta) * upstream) as f32;
                    }
                }
                out.push((*logits, dl));
            }
        }
        out
    }

    // ---- 64-bit replay ----

    /// Re-evaluate the recorded tape in f64 up to `target`, with optional
    /// leaf overrides. Data-dependent choices (max pooling) are recomputed
    /// from the overridden values. This is the reference evaluation the
    /// finite-difference checker differentiates.
    pub fn eval_f64(&self, target: Var, overrides: &[(Var, &[f64])]) -> Vec<f64> {
        let mut vals: Vec<Option<Vec<f64>>> = (0..=target.0).map(|_| None).collect();
        for id in 0..=target.0 {
            let node = &self.nodes[id];
            // Inputs always precede outputs on the tape, so borrow them from
            // the prefix while writing the current slot.
            let (prefix, rest) = vals.split_at_mut(id);
            let get = |v: &Var| -> &[f64] {
                prefix[v.0].as_deref().expect("inputs precede outputs on the tape")
            };
            let out: Vec<f64> = match &node.op {
                Op::Leaf => {
                    match overrides.iter().find(|(v, _)| v.0 == id) {
                        Some((_, data)) => data.to_vec(),
                        None => node.value.iter().map(|&v| v as f64).collect(),
                    }
                }
                Op::Matmul { a, b } => {
                    let (m, kk) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    let mut o = vec![0f64; m * n];
                    k::matmul_nn(&get(a, &vals), &get(b, &vals), m, kk, n, &mut o);
                    o
                }
                Op::Transpose { x } => {
                    let s = self.shape(*x);
                    let mut o = vec![0f64; node.value.len()];
                    k::transpose2d(&get(x, &vals), s[0], s[1], &mut o);
                    o
                }
                Op::Reshape { x } => get(x, &vals),
                Op::Add { a, b } => {
                    let mut o = vec![0f64; node.value.len()];
                    k::add(&get(a, &vals), &get(b, &vals), &mut o);
                    o
                }
                Op::AddBias { x, b } => {
                    let mut o = vec![0f64; node.value.len()];
                    k::add_bias(&get(x, &vals), &get(b, &vals), &mut o);
                    o
                }
                Op::Mul { a, b } => {
                    let mut o = vec![0f64; node.value.len()];
                    k::mul(&get(a, &vals), &get(b, &vals), &mut o);
                    o
                }
                Op::Scale { x, c } => {
                    let mut o = vec![0f64; node.value.len()];
                    k::scale(&get(x, &vals), *c, &mut o);
                    o
                }
                Op::Relu { x } => {
                    let mut o = vec![0f64; node.value.len()];
                    k::relu(&get(x, &vals), &mut o);
                    o
                }
                Op::Sigmoid { x } => {
                    let mut o = vec![0f64; node.value.len()];
                    k::sigmoid(&get(x, &vals), &mut o);
                    o
                }
                Op::Tanh { x } => {
                    let mut o = vec![0f64; node.value.len()];
                    k::tanh(&get(x, &vals), &mut o);
                    o
                }
                Op::Gelu { x } => {
                    let mut o = vec![0f64; node.value.len()];
                    k::gelu(&get(x, &vals), &mut o);
                    o
                }
                Op::Softmax { x, axis } => {
                    let mut o = vec![0f64; node.value.len()];
                    k::softmax_axis(&get(x, &vals), &node.shape, *axis, &mut o);
                    o
                }
                Op::SoftmaxRows { x, mask } => {
                    let n = *node.shape.last().unwrap();
                    let mut o = vec![0f64; node.value.len()];
                    k::softmax_rows_masked(
                        &get(x, &vals),
                        n,
                        mask.as_deref().map(|m| &m[..]),
                        &mut o,
                    );
                    o
                }
                Op::Conv2d { x, kernels, bias, stride } => {
                    let sx = self.shape(*x);
                    let cout = self.shape(*kernels)[3];
                    let mut o = vec![0f64; node.value.len()];
                    k::conv2d(
                        &get(x, &vals),
                        &get(kernels, &vals),
                        &get(bias, &vals),
                        sx[0],
                        sx[1],
                        sx[2],
                        cout,
                        *stride,
                        &mut o,
                    );
                    o
                }
                Op::MaxPool2d { x, .. } => {
                    let s = self.shape(*x);
                    let mut o = vec![0f64; node.value.len()];
                    let mut scratch = vec![0usize; node.value.len()];
                    k::maxpool2d(&get(x, &vals), s[0], s[1], s[2], &mut o, &mut scratch);
                    o
                }
                Op::GlobalAvgPool { x } => {
                    let s = self.shape(*x);
                    let mut o = vec![0f64; node.value.len()];
                    k::global_avg_pool(&get(x, &vals), s[0] * s[1], s[2], &mut o);
                    o
                }
                Op::LayerNorm { x, gain, shift, eps } => {
                    let mut o = vec![0f64; node.value.len()];
                    k::layernorm(&get(x, &vals), &get(gain, &vals), &get(shift, &vals), *eps, &mut o);
                    o
                }
                Op::Embedding { table, ids } => {
                    let d = self.shape(*table)[1];
                    let t = get(table, &vals);
                    let mut o = Vec::with_capacity(ids.len() * d);
                    for &id in ids.iter() {
                        o.extend_from_slice(&t[id as usize * d..(id as usize + 1) * d]);
                    }
                    o
                }
                Op::SliceCols { x, start, len } => {
                    let cols = *self.shape(*x).last().unwrap();
                    let xv = get(x, &vals);
                    let rows = xv.len() / cols;
                    let mut o = Vec::with_capacity(rows * len);
                    for r in 0..rows {
                        o.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
                    }
                    o
                }
                Op::ConcatCols { xs } => {
                    let total = *node.shape.last().unwrap();
                    let rows = node.value.len() / total;
                    let parts: Vec<Vec<f64>> = xs.iter().map(|x| get(x, &vals)).collect();
                    let widths: Vec<usize> =
                        xs.iter().map(|x| *self.shape(*x).last().unwrap()).collect();
                    let mut o = Vec::with_capacity(node.value.len());
                    for r in 0..rows {
                        for (p, &c) in parts.iter().zip(&widths) {
                            o.extend_from_slice(&p[r * c..(r + 1) * c]);
                        }
                    }
                    o
                }
                Op::StackRows { xs } => {
                    let mut o = Vec::with_capacity(node.value.len());
                    for x in xs {
                        o.extend_from_slice(&get(x, &vals));
                    }
                    o
                }
                Op::Sum { x } => vec![k::sum_all(&get(x, &vals))],
                Op::MaskedCrossEntropy { logits, targets, mask } => {
                    let v = self.shape(*logits)[1];
                    vec![k::masked_ce_sum(&get(logits, &vals), v, targets, mask)]
                }
            };
            vals[id] = Some(out);
        }
        vals[target.0].take().expect("target evaluated")
    }
}
