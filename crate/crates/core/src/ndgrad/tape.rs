use std::cell::RefCell;
use std::sync::Arc;

use super::tensor::{broadcast_offsets, broadcast_shape, matmul_raw, reduce_to_shape, Tensor};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Pow(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskMul(usize, Arc<Vec<f64>>),
    Sum(usize),
    SliceLast {
        x: usize,
        start: usize,
    },
    ConcatLast(Vec<usize>),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications for one forward pass.
///
/// Nodes are appended in execution order, so the recording order is already
/// a topological order and `backward` simply walks it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf sharing storage with a parameter store.
    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_arc(value, Op::Leaf, requires_grad)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Accumulated gradient of a leaf, if any was produced.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(var.id).cloned().flatten()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across calls.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to another tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        let mut leaf_grads = self.grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize(nodes.len(), None);
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let mut send = |i: usize, t: Tensor| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => match &mut leaf_grads[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::Add(a, b) => {
                    send(*a, reduce_to_shape(&g, val(*a).shape()));
                    send(*b, reduce_to_shape(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, reduce_to_shape(&g, val(*a).shape()));
                    send(*b, reduce_to_shape(&g.map(|x| -x), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let ao = broadcast_offsets(av.shape(), g.shape());
                    let bo = broadcast_offsets(bv.shape(), g.shape());
                    if nodes[*a].requires_grad {
                        let t = Tensor::from_fn(g.shape(), |i| g.data()[i] * bv.data()[bo[i]]);
                        send(*a, reduce_to_shape(&t, av.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let t = Tensor::from_fn(g.shape(), |i| g.data()[i] * av.data()[ao[i]]);
                        send(*b, reduce_to_shape(&t, bv.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let ao = broadcast_offsets(av.shape(), g.shape());
                    let bo = broadcast_offsets(bv.shape(), g.shape());
                    if nodes[*a].requires_grad {
                        let t = Tensor::from_fn(g.shape(), |i| g.data()[i] / bv.data()[bo[i]]);
                        send(*a, reduce_to_shape(&t, av.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let t = Tensor::from_fn(g.shape(), |i| {
                            let d = bv.data()[bo[i]];
                            -g.data()[i] * av.data()[ao[i]] / (d * d)
                        });
                        send(*b, reduce_to_shape(&t, bv.shape()));
                    }
                }
                Op::Pow(base, exp) => {
                    let (bv, ev, out) = (val(*base), val(*exp), &node.value);
                    let bo = broadcast_offsets(bv.shape(), g.shape());
                    let eo = broadcast_offsets(ev.shape(), g.shape());
                    if nodes[*base].requires_grad {
                        let t = Tensor::from_fn(g.shape(), |i| {
                            g.data()[i] * out.data()[i] * ev.data()[eo[i]] / bv.data()[bo[i]]
                        });
                        send(*base, reduce_to_shape(&t, bv.shape()));
                    }
                    if nodes[*exp].requires_grad {
                        let t = Tensor::from_fn(g.shape(), |i| {
                            g.data()[i] * out.data()[i] * bv.data()[bo[i]].ln()
                        });
                        send(*exp, reduce_to_shape(&t, ev.shape()));
                    }
                }
                Op::Scale(a, s) => send(*a, g.map(|x| x * s)),
                Op::Offset(a) => send(*a, g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let da = matmul_raw(&g, &bv.transpose_last())?;
                        send(*a, reduce_to_shape(&da, av.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let db = if bv.rank() == 2 && av.rank() > 2 {
                            // Shared right operand: fold the batch into rows.
                            let k = av.shape()[av.rank() - 1];
                            let n = g.shape()[g.rank() - 1];
                            let a2 = av.reshaped(&[av.len() / k, k])?;
                            let g2 = g.reshaped(&[g.len() / n, n])?;
                            matmul_raw(&a2.transpose_last(), &g2)?
                        } else {
                            reduce_to_shape(&matmul_raw(&av.transpose_last(), &g)?, bv.shape())
                        };
                        send(*b, db);
                    }
                }
                Op::Transpose(a) => send(*a, g.transpose_last()),
                Op::Reshape(a) => send(*a, g.reshaped(val(*a).shape())?),
                Op::Exp(a) => send(*a, g.zip_map(&node.value, |g, y| g * y)),
                Op::Log(a) => send(*a, g.zip_map(val(*a), |g, x| g / x)),
                Op::Relu(a) => send(
                    *a,
                    g.zip_map(val(*a), |g, x| if x >= 0.0 { g } else { 0.0 }),
                ),
                Op::LeakyRelu(a, slope) => send(
                    *a,
                    g.zip_map(val(*a), |g, x| if x >= 0.0 { g } else { g * slope }),
                ),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = Vec::with_capacity(g.len());
                    for (gr, yr) in g.rows().zip(y.rows()) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        dx.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                    }
                    send(*a, Tensor::new(g.shape(), dx)?);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut dx = Vec::with_capacity(g.len());
                    for (gr, yr) in g.rows().zip(y.rows()) {
                        let total: f64 = gr.iter().sum();
                        dx.extend(gr.iter().zip(yr).map(|(g, y)| g - y.exp() * total));
                    }
                    send(*a, Tensor::new(g.shape(), dx)?);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = val(*gain);
                    let d = gv.len();
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    let mut dx = vec![0.0; g.len()];
                    for (r, gr) in g.rows().enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            dgain[j] += gr[j] * xh[j];
                            dbias[j] += gr[j];
                            let dxh = gr[j] * gv.data()[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[j];
                        }
                        let s = inv_std[r] / d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gv.data()[j];
                            dx[r * d + j] = s * (d as f64 * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                        }
                    }
                    send(*x, Tensor::new(g.shape(), dx)?);
                    send(*gain, Tensor::new(gv.shape(), dgain)?);
                    send(*bias, Tensor::new(gv.shape(), dbias)?);
                }
                Op::MaskMul(a, mask) => {
                    let data = g.data().iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
                    send(*a, Tensor::new(g.shape(), data)?);
                }
                Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::SliceLast { x, start } => {
                    let xs = val(*x).shape().to_vec();
                    let d = *xs.last().unwrap();
                    let w = *g.shape().last().unwrap();
                    let mut t = Tensor::zeros(&xs);
                    for (r, gr) in g.rows().enumerate() {
                        t.data_mut()[r * d + start..r * d + start + w].copy_from_slice(gr);
                    }
                    send(*x, t);
                }
                Op::ConcatLast(parts) => {
                    let total = *g.shape().last().unwrap();
                    let mut offset = 0;
                    for &p in parts {
                        let ps = val(p).shape().to_vec();
                        let w = *ps.last().unwrap();
                        let mut data = Vec::with_capacity(val(p).len());
                        for gr in g.data().chunks(total) {
                            data.extend_from_slice(&gr[offset..offset + w]);
                        }
                        offset += w;
                        send(p, Tensor::new(&ps, data)?);
                    }
                }
                Op::Gather { table, ids } => {
                    let ts = val(*table).shape().to_vec();
                    let d = ts[1];
                    let mut t = Tensor::zeros(&ts);
                    for (row, &id) in g.data().chunks(d).zip(ids) {
                        for (dst, src) in t.data_mut()[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *dst += src;
                        }
                    }
                    send(*table, t);
                }
            }
        }
        Ok(())
    }
}

fn binary_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, f));
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let ao = broadcast_offsets(a.shape(), &shape);
    let bo = broadcast_offsets(b.shape(), &shape);
    Ok(Tensor::from_fn(&shape, |i| f(a.data()[ao[i]], b.data()[bo[i]])))
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    fn check_same_tape(&self, other: &Var<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract(format!("{op}: operands on different tapes")))
        }
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other, "add")?;
        let v = binary_broadcast("add", &self.value(), &other.value(), |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other, "sub")?;
        let v = binary_broadcast("sub", &self.value(), &other.value(), |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other, "mul")?;
        let v = binary_broadcast("mul", &self.value(), &other.value(), |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other, "div")?;
        let v = binary_broadcast("div", &self.value(), &other.value(), |a, b| a / b)?;
        Ok(self.binary(other, v, Op::Div(self.id, other.id)))
    }

    /// Elementwise `self^exponent`, evaluated as `exp(exponent·ln(self))`.
    pub fn elem_pow(self, exponent: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&exponent, "elem_pow")?;
        let base = self.value();
        if let Some(bad) = base.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "elem_pow",
                detail: format!("base element {bad} is not strictly positive"),
            });
        }
        let v = binary_broadcast("elem_pow", &base, &exponent.value(), |b, e| b.powf(e))?;
        Ok(self.binary(exponent, v, Op::Pow(self.id, exponent.id)))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::Offset(self.id))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other, "matmul")?;
        let v = matmul_raw(&self.value(), &other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.value();
        if value.rank() < 2 {
            return Err(Error::shape("transpose", value.shape(), &[]));
        }
        Ok(self.unary(value.transpose_last(), Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshaped(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn log(self) -> Result<Var<'t>> {
        let value = self.value();
        if let Some(bad) = value.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {bad} is not strictly positive"),
            });
        }
        Ok(self.unary(value.map(f64::ln), Op::Log(self.id)))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let v = self.value().map(|x| if x >= 0.0 { x } else { slope * x });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    /// Softmax over the trailing axis with max subtraction.
    pub fn softmax_lastdim(self) -> Var<'t> {
        let x = self.value();
        let mut out = Vec::with_capacity(x.len());
        for row in x.rows() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for &v in row {
                let e = (v - m).exp();
                z += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= z;
            }
        }
        let v = Tensor::new(x.shape(), out).expect("softmax keeps shape");
        self.unary(v, Op::Softmax(self.id))
    }

    /// Log-softmax over the trailing axis via log-sum-exp.
    pub fn log_softmax_lastdim(self) -> Var<'t> {
        let x = self.value();
        let mut out = Vec::with_capacity(x.len());
        for row in x.rows() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let v = Tensor::new(x.shape(), out).expect("log_softmax keeps shape");
        self.unary(v, Op::LogSoftmax(self.id))
    }

    /// Normalises each trailing-axis slice, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (gv, bv) = (gain.value(), bias.value());
        let d = *x.shape().last().unwrap_or(&0);
        if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", x.shape(), gv.shape()));
        }
        let rows = x.len() / d;
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for row in x.rows() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        let rg = self.tape.requires(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Multiplies by a fixed mask of the same shape; the mask is not differentiated.
    pub fn mask_mul(self, mask: Vec<f64>) -> Result<Var<'t>> {
        let x = self.value();
        if mask.len() != x.len() {
            return Err(Error::shape("mask_mul", x.shape(), &[mask.len()]));
        }
        let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v = Tensor::new(x.shape(), data)?;
        Ok(self.unary(v, Op::MaskMul(self.id, Arc::new(mask))))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Columns `start..start+len` of the trailing axis.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&0);
        if start + len > d {
            return Err(Error::shape("slice_last", x.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(x.len() / d.max(1) * len);
        for row in x.rows() {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let v = Tensor::new(&shape, data)?;
        Ok(self.unary(v, Op::SliceLast { x: self.id, start }))
    }

    /// Element at a full multi-index as a one-element var.
    pub fn pick(self, index: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if index.len() != x.rank() || index.iter().zip(x.shape()).any(|(i, n)| i >= n) {
            return Err(Error::shape("pick", x.shape(), index));
        }
        let mut mask = vec![0.0; x.len()];
        let mut off = 0;
        for (i, n) in index.iter().zip(x.shape()) {
            off = off * n + i;
        }
        mask[off] = 1.0;
        Ok(self.mask_mul(mask)?.sum())
    }
}

/// Concatenates along the trailing axis. Leading extents must agree.
pub fn concat_last<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
    let tape = first.tape;
    let values: Vec<Arc<Tensor>> = parts.iter().map(Var::value).collect();
    let lead = &values[0].shape()[..values[0].rank() - 1];
    for v in &values {
        if &v.shape()[..v.rank() - 1] != lead {
            return Err(Error::shape("concat_last", values[0].shape(), v.shape()));
        }
    }
    let widths: Vec<usize> = values.iter().map(|v| *v.shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (v, &w) in values.iter().zip(&widths) {
            data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.requires(&ids);
    Ok(tape.push(Tensor::new(&shape, data)?, Op::ConcatLast(ids), rg))
}

/// Row lookup `table[ids]`; output shape is `ids_shape ++ [d]`.
pub fn gather_rows<'t>(table: Var<'t>, ids: &[usize], ids_shape: &[usize]) -> Result<Var<'t>> {
    let tv = table.value();
    if tv.rank() != 2 {
        return Err(Error::shape("gather_rows", tv.shape(), ids_shape));
    }
    let (rows, d) = (tv.shape()[0], tv.shape()[1]);
    if let Some(pos) = ids.iter().position(|&i| i >= rows) {
        return Err(Error::data(format!(
            "token id {} at position {pos} exceeds table size {rows}",
            ids[pos]
        )));
    }
    let mut data = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        data.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
    }
    let mut shape = ids_shape.to_vec();
    shape.push(d);
    let v = Tensor::new(&shape, data)?;
    Ok(table.unary(
        v,
        Op::Gather {
            table: table.id,
            ids: ids.to_vec(),
        },
    ))
}

/// Inverted dropout. Identity when not training or at rate zero, in which
/// case no randomness is consumed.
pub fn dropout<'t>(x: Var<'t>, rate: f64, training: bool, rng: &mut SeedStream) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let n = x.value().len();
    let mask = (0..n)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    x.mask_mul(mask)
}
