//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only arena. Every operation pushes one node whose
//! inputs are strictly earlier nodes, so node ids double as a topological
//! order and `backward` is a single reverse sweep. Nodes created from
//! non-trainable inputs only carry no gradient and cost nothing in the sweep.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{HebaError, Result};
use crate::scalar::{normal_cdf, normal_pdf};
use crate::tensor::{inverse_perm, permute_data, Tensor};
use crate::Scalar;

/// Handle to a node in one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule for a fused operation: receives the input values, the
/// output value and the output gradient, returns one optional gradient per
/// input (same order as the inputs).
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Option<Vec<T>>>>;

enum Op<T> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    AddBroadcast {
        x: Var,
        b: Var,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Gelu {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    DepthwiseConv {
        x: Var,
        k: Var,
    },
    PointwiseConv {
        x: Var,
        w: Var,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    L2NormalizeRows {
        a: Var,
        norms: Vec<T>,
    },
    Custom {
        name: &'static str,
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul { a, b }
            | Op::Bmm { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::AddBroadcast { x, b } => vec![*x, *b],
            Op::Scale { a, .. }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Narrow { a, .. }
            | Op::Gelu { a }
            | Op::Softmax { a }
            | Op::LogSoftmax { a }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::L2NormalizeRows { a, .. } => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::DepthwiseConv { x, k } => vec![*x, *k],
            Op::PointwiseConv { x, w } => vec![*x, *w],
            Op::GatherRows { table, .. } => vec![*table],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Gelu { .. } => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::DepthwiseConv { .. } => "conv2d_depthwise",
            Op::PointwiseConv { .. } => "conv2d_pointwise",
            Op::GatherRows { .. } => "gather_rows",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients of the loss with respect to every trainable leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    by_node: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(&v.0)
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    grid_reshapes: usize,
}

impl<T> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .field("backward_done", &self.backward_done)
            .finish()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<T>(op: &'static str, a: &[usize], b: &[usize]) -> Result<T> {
    Err(HebaError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
            grid_reshapes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of token-to-grid reshapes recorded on this graph.
    pub fn grid_reshapes(&self) -> usize {
        self.grid_reshapes
    }

    pub(crate) fn note_grid_reshape(&mut self) {
        self.grid_reshapes += 1;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on any node by the last `backward`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let n = &self.nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    // ---- linear algebra ----

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return mismatch("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::Matmul { a, b }))
    }

    /// Batched `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return mismatch("bmm", sa, sb);
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(bt * m * n);
        for i in 0..bt {
            out.extend(matmul_raw(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let t = Tensor::new(vec![bt, m, n], out)?;
        Ok(self.push(t, Op::Bmm { a, b }))
    }

    /// 2-d transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(HebaError::InvalidShape {
                op: "transpose",
                detail: format!("expected rank 2, got {:?}", self.shape(a)),
            });
        }
        self.permute(a, &[1, 0])
    }

    /// `x [..., d_in] -> x W^T + b`, with `w [d_out, d_in]` and `b [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return mismatch("linear", &sx, &sw);
        }
        let d_in = sw[1];
        let rows = self.value(x).len() / d_in;
        let x2 = self.reshape(x, &[rows, d_in])?;
        let wt = self.transpose(w)?;
        let mut y = self.matmul(x2, wt)?;
        if let Some(b) = b {
            y = self.add_broadcast(y, b)?;
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[0];
        self.reshape(y, &out_shape)
    }

    // ---- elementwise ----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return mismatch(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_values(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_values(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_values(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale { a, c })
    }

    /// `x + b` where `b`'s shape is a suffix of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return mismatch("add_broadcast", sx, sb);
        }
        let (vx, vb) = (self.value(x), self.value(b));
        let m = vb.len();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % m])
            .collect();
        let t = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(t, Op::AddBroadcast { x, b }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * normal_cdf(x));
        self.push(t, Op::Gelu { a })
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { a }))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut check: Vec<usize> = perm.to_vec();
        check.sort_unstable();
        if perm.len() != shape.len() || check != (0..shape.len()).collect::<Vec<_>>() {
            return Err(HebaError::InvalidShape {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            });
        }
        let (data, out_shape) = permute_data(self.value(a).data(), shape, perm);
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(
            t,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(HebaError::InvalidShape {
                op: "narrow",
                detail: format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Narrow { a, axis, start }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(HebaError::InvalidShape {
                op: "concat",
                detail: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return mismatch("concat", &first, s);
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    // ---- normalization / reductions ----

    /// Standardize over the last axis, then `* gamma + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return mismatch("layer_norm", &sx, self.shape(p));
            }
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let (vx, vg, vb) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let rows = vx.len() / d;
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.len());
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) / dn;
            let var = row
                .iter()
                .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
                / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * vg[j] + vb[j]);
            }
        }
        let t = Tensor::new(sx, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = *v.shape().last().unwrap();
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(d) {
            out.extend(softmax_row(row));
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("shape");
        self.push(t, Op::Softmax { a })
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = *v.shape().last().unwrap();
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(d) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|&x| x - lse));
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("shape");
        self.push(t, Op::LogSoftmax { a })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        self.push(t, Op::Mean { a })
    }

    /// Divide each row (last axis) by its L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = *v.shape().last().unwrap();
        let mut norms = Vec::with_capacity(v.len() / d);
        let mut out = Vec::with_capacity(v.len());
        for row in v.data().chunks(d) {
            let n = row.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
            norms.push(n);
            out.extend(row.iter().map(|&x| x / n));
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("shape");
        self.push(t, Op::L2NormalizeRows { a, norms })
    }

    // ---- convolutions ----

    /// 3x3 per-channel convolution, zero padding 1, stride 1.
    pub fn conv2d_depthwise(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 {
            return Err(HebaError::InvalidShape {
                op: "conv2d_depthwise",
                detail: format!("input must be [B,C,H,W], got {sx:?}"),
            });
        }
        if sk.len() != 3 || sk[1] != 3 || sk[2] != 3 || sk[0] != sx[1] {
            return mismatch("conv2d_depthwise", &sx, &sk);
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (vx, vk) = (self.value(x).data(), self.value(k).data());
        let mut out = vec![T::zero(); vx.len()];
        for bc in 0..b * c {
            let ch = bc % c;
            let plane = &vx[bc * h * w..(bc + 1) * h * w];
            let ker = &vk[ch * 9..(ch + 1) * 9];
            let dst = &mut out[bc * h * w..(bc + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = T::zero();
                    for u in 0..3 {
                        let ii = i + u;
                        if ii < 1 || ii > h {
                            continue;
                        }
                        for v in 0..3 {
                            let jj = j + v;
                            if jj < 1 || jj > w {
                                continue;
                            }
                            acc = acc + plane[(ii - 1) * w + (jj - 1)] * ker[u * 3 + v];
                        }
                    }
                    dst[i * w + j] = acc;
                }
            }
        }
        let t = Tensor::new(sx, out)?;
        Ok(self.push(t, Op::DepthwiseConv { x, k }))
    }

    /// 1x1 convolution: `out[b,o,p] = sum_c w[o,c] * x[b,c,p]`.
    pub fn conv2d_pointwise(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 {
            return Err(HebaError::InvalidShape {
                op: "conv2d_pointwise",
                detail: format!("input must be [B,C,H,W], got {sx:?}"),
            });
        }
        if sw.len() != 2 || sw[1] != sx[1] {
            return mismatch("conv2d_pointwise", &sx, &sw);
        }
        let (b, cin, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let cout = sw[0];
        let (vx, vw) = (self.value(x).data(), self.value(w).data());
        let mut out = Vec::with_capacity(b * cout * hw);
        for bi in 0..b {
            let xb = &vx[bi * cin * hw..(bi + 1) * cin * hw];
            out.extend(matmul_raw(vw, xb, cout, cin, hw));
        }
        let t = Tensor::new(vec![b, cout, sx[2], sx[3]], out)?;
        Ok(self.push(t, Op::PointwiseConv { x, w }))
    }

    // ---- indexing ----

    /// `out[r] = table[ids[r]]` for a `[V, D]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(HebaError::InvalidShape {
                op: "gather_rows",
                detail: format!("table must be rank 2, got {st:?}"),
            });
        }
        let (v, d) = (st[0], st[1]);
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(HebaError::IndexOutOfRange {
                    what: "token id",
                    index: id,
                    limit: v,
                });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Fused operation with a caller-supplied backward rule.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Var {
        self.push(
            value,
            Op::Custom {
                name,
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    // ---- reverse sweep ----

    /// Accumulate `d loss / d node` for every node that depends on a
    /// trainable leaf. Returns gradients for every trainable leaf (zeros if
    /// the leaf does not reach the loss).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.backward_done {
            return Err(HebaError::BackwardTwice);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(HebaError::NonScalarLoss(ls.to_vec()));
        }
        for (id, n) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if n.op.inputs().iter().any(|v| v.0 >= id) {
                return Err(HebaError::Cycle(id));
            }
        }
        self.backward_done = true;
        if self.nodes[loss.0].requires_grad {
            self.nodes[loss.0].grad = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                self.nodes[id].grad = Some(g);
                continue;
            }
            let contributions = self.local_grads(id, &g);
            self.nodes[id].grad = Some(g);
            for (v, dv) in contributions {
                self.accumulate(v, dv);
            }
        }
        let mut by_node = BTreeMap::new();
        for (id, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) && n.requires_grad {
                let g = n
                    .grad
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); n.value.len()]);
                by_node.insert(id, Tensor::new(n.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients { by_node })
    }

    fn accumulate(&mut self, v: Var, dv: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(dv) {
                    *a = *a + b;
                }
            }
            None => node.grad = Some(dv),
        }
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn local_grads(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let out = &node.value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    res.push((*a, matmul_nt(g, val(*b).data(), m, n, k)));
                }
                if rg(*b) {
                    res.push((*b, matmul_tn(val(*a).data(), g, m, k, n)));
                }
            }
            Op::Bmm { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (val(*a).data(), val(*b).data());
                if rg(*a) {
                    let mut ga = Vec::with_capacity(bt * m * k);
                    for i in 0..bt {
                        ga.extend(matmul_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &db[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                        ));
                    }
                    res.push((*a, ga));
                }
                if rg(*b) {
                    let mut gb = Vec::with_capacity(bt * k * n);
                    for i in 0..bt {
                        gb.extend(matmul_tn(
                            &da[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                        ));
                    }
                    res.push((*b, gb));
                }
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    res.push((*a, g.to_vec()));
                }
                if rg(*b) {
                    res.push((*b, g.to_vec()));
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    res.push((*a, g.to_vec()));
                }
                if rg(*b) {
                    res.push((*b, g.iter().map(|&x| -x).collect()));
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    res.push((
                        *a,
                        g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect(),
                    ));
                }
                if rg(*b) {
                    res.push((
                        *b,
                        g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect(),
                    ));
                }
            }
            Op::Scale { a, c } => res.push((*a, g.iter().map(|&x| x * *c).collect())),
            Op::AddBroadcast { x, b } => {
                if rg(*x) {
                    res.push((*x, g.to_vec()));
                }
                if rg(*b) {
                    let m = val(*b).len();
                    let mut gb = vec![T::zero(); m];
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % m] = gb[i % m] + v;
                    }
                    res.push((*b, gb));
                }
            }
            Op::Reshape { a } => res.push((*a, g.to_vec())),
            Op::Permute { a, perm } => {
                let (data, _) = permute_data(g, out.shape(), &inverse_perm(perm));
                res.push((*a, data));
            }
            Op::Narrow { a, axis, start } => {
                let shape = val(*a).shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = out.shape()[*axis];
                let mut ga = vec![T::zero(); val(*a).len()];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                res.push((*a, ga));
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut off = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis] * inner;
                    if rg(p) {
                        let mut gp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * total + off..o * total + off + len]);
                        }
                        res.push((p, gp));
                    }
                    off += len;
                }
            }
            Op::Gelu { a } => {
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| gy * (normal_cdf(x) + x * normal_pdf(x)))
                    .collect();
                res.push((*a, d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *out.shape().last().unwrap();
                let dn = T::of(d as f64);
                let vg = val(*gamma).data();
                if rg(*x) {
                    let mut gx = Vec::with_capacity(g.len());
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * vg[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * hr[j];
                        }
                        let (m1, m2) = (s1 / dn, s2 / dn);
                        for j in 0..d {
                            gx.push(rs * (gr[j] * vg[j] - m1 - hr[j] * m2));
                        }
                    }
                    res.push((*x, gx));
                }
                if rg(*gamma) {
                    let mut gg = vec![T::zero(); d];
                    for (i, (&gy, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] = gg[i % d] + gy * h;
                    }
                    res.push((*gamma, gg));
                }
                if rg(*beta) {
                    let mut gb = vec![T::zero(); d];
                    for (i, &gy) in g.iter().enumerate() {
                        gb[i % d] = gb[i % d] + gy;
                    }
                    res.push((*beta, gb));
                }
            }
            Op::Softmax { a } => {
                let d = *out.shape().last().unwrap();
                let mut ga = Vec::with_capacity(g.len());
                for (yr, gr) in out.data().chunks(d).zip(g.chunks(d)) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&y, &gy)| s + y * gy);
                    ga.extend(yr.iter().zip(gr).map(|(&y, &gy)| y * (gy - dot)));
                }
                res.push((*a, ga));
            }
            Op::LogSoftmax { a } => {
                let d = *out.shape().last().unwrap();
                let mut ga = Vec::with_capacity(g.len());
                for (yr, gr) in out.data().chunks(d).zip(g.chunks(d)) {
                    let gs = gr.iter().fold(T::zero(), |s, &x| s + x);
                    ga.extend(yr.iter().zip(gr).map(|(&y, &gy)| gy - y.exp() * gs));
                }
                res.push((*a, ga));
            }
            Op::Sum { a } => res.push((*a, vec![g[0]; val(*a).len()])),
            Op::Mean { a } => {
                let n = val(*a).len();
                res.push((*a, vec![g[0] / T::of(n as f64); n]));
            }
            Op::L2NormalizeRows { a, norms } => {
                let d = *out.shape().last().unwrap();
                let mut ga = Vec::with_capacity(g.len());
                for ((yr, gr), &n) in out.data().chunks(d).zip(g.chunks(d)).zip(norms) {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&y, &gy)| s + y * gy);
                    ga.extend(yr.iter().zip(gr).map(|(&y, &gy)| (gy - y * dot) / n));
                }
                res.push((*a, ga));
            }
            Op::DepthwiseConv { x, k } => {
                let s = val(*x).shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (vx, vk) = (val(*x).data(), val(*k).data());
                let mut gx = vec![T::zero(); vx.len()];
                let mut gk = vec![T::zero(); vk.len()];
                for bc in 0..b * c {
                    let ch = bc % c;
                    let base = bc * h * w;
                    for i in 0..h {
                        for j in 0..w {
                            let gy = g[base + i * w + j];
                            for u in 0..3 {
                                let ii = i + u;
                                if ii < 1 || ii > h {
                                    continue;
                                }
                                for v in 0..3 {
                                    let jj = j + v;
                                    if jj < 1 || jj > w {
                                        continue;
                                    }
                                    let xi = base + (ii - 1) * w + (jj - 1);
                                    gx[xi] = gx[xi] + gy * vk[ch * 9 + u * 3 + v];
                                    gk[ch * 9 + u * 3 + v] = gk[ch * 9 + u * 3 + v] + gy * vx[xi];
                                }
                            }
                        }
                    }
                }
                if rg(*x) {
                    res.push((*x, gx));
                }
                if rg(*k) {
                    res.push((*k, gk));
                }
            }
            Op::PointwiseConv { x, w } => {
                let s = val(*x).shape();
                let (b, cin, hw) = (s[0], s[1], s[2] * s[3]);
                let cout = val(*w).shape()[0];
                let (vx, vw) = (val(*x).data(), val(*w).data());
                if rg(*x) {
                    let mut gx = Vec::with_capacity(vx.len());
                    for bi in 0..b {
                        gx.extend(matmul_tn(
                            vw,
                            &g[bi * cout * hw..(bi + 1) * cout * hw],
                            cout,
                            cin,
                            hw,
                        ));
                    }
                    res.push((*x, gx));
                }
                if rg(*w) {
                    let mut gw = vec![T::zero(); cout * cin];
                    for bi in 0..b {
                        let part = matmul_nt(
                            &g[bi * cout * hw..(bi + 1) * cout * hw],
                            &vx[bi * cin * hw..(bi + 1) * cin * hw],
                            cout,
                            hw,
                            cin,
                        );
                        for (a, p) in gw.iter_mut().zip(part) {
                            *a = *a + p;
                        }
                    }
                    res.push((*w, gw));
                }
            }
            Op::GatherRows { table, ids } => {
                let d = val(*table).shape()[1];
                let mut gt = vec![T::zero(); val(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                    }
                }
                res.push((*table, gt));
            }
            Op::Custom {
                inputs, backward, ..
            } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                for (&v, gv) in inputs.iter().zip(backward(&vals, out, g)) {
                    if let Some(gv) = gv {
                        if rg(v) {
                            res.push((v, gv));
                        }
                    }
                }
            }
        }
        res
    }

    #[cfg(test)]
    fn push_raw_for_test(&mut self, value: Tensor<T>, input: usize) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: true,
            op: Op::Reshape { a: Var(input) },
        });
        Var(self.nodes.len() - 1)
    }
}

pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = row.iter().map(|&x| (x - m).exp()).collect();
    let s = e.iter().fold(T::zero(), |a, &b| a + b);
    e.into_iter().map(|x| x / s).collect()
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    m + row.iter().fold(T::zero(), |a, &x| a + (x - m).exp()).ln()
}

/// `a [m,k] x b [k,n]`.
fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a [m,n] x b[k,n]^T -> [m,k]`.
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            out.push(
                arow.iter()
                    .zip(brow)
                    .fold(T::zero(), |s, (&x, &y)| s + x * y),
            );
        }
    }
    out
}

/// `a [m,k]^T x b [m,n] -> [k,n]`.
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = g.matmul(i, v).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);

        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn matmul_grad_of_sum() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = g.matmul(a, b).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn sum_and_square_grads() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 0.0, 7.0]));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_twice_errors_until_reset() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(HebaError::BackwardTwice)));
        g.reset_grads();
        assert!(g.backward(l).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(HebaError::NonScalarLoss(_))));
    }

    #[test]
    fn forward_reference_is_reported_as_cycle() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[1.0]));
        // node 1 claims node 2 as input
        let y = g.push_raw_for_test(t(&[1], &[1.0]), 2);
        let _z = g.push_raw_for_test(t(&[1], &[1.0]), y.id());
        let _ = x;
        assert!(matches!(g.backward(Var(2)), Err(HebaError::Cycle(1))));
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn depthwise_ramp_all_ones_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = g.constant(Tensor::ones(&[1, 3, 3]));
        let y = g.conv2d_depthwise(x, k).unwrap();
        let out = g.value(y);
        assert_eq!(out.at(&[0, 0, 1, 1]), 45.0);
        assert_eq!(out.at(&[0, 0, 0, 0]), 12.0);
    }

    #[test]
    fn depthwise_zero_and_identity_kernels() {
        let mut rng = crate::Rng::new(1);
        let mut g = Graph::<f64>::new();
        let xv = Tensor::<f64>::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let x = g.constant(xv.clone());
        let z = g.constant(Tensor::zeros(&[3, 3, 3]));
        let y = g.conv2d_depthwise(x, z).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let mut id = Tensor::zeros(&[3, 3, 3]);
        for c in 0..3 {
            id.data_mut()[c * 9 + 4] = 1.0;
        }
        let k = g.constant(id);
        let y = g.conv2d_depthwise(x, k).unwrap();
        assert!(g.value(y).bitwise_eq(&xv));
    }

    #[test]
    fn depthwise_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let k = g.constant(Tensor::zeros(&[3, 3, 3]));
        assert!(matches!(
            g.conv2d_depthwise(x, k),
            Err(HebaError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn pointwise_identity_and_sum() {
        let mut rng = crate::Rng::new(2);
        let mut g = Graph::<f64>::new();
        let xv = Tensor::<f64>::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        let x = g.constant(xv.clone());
        let w = g.constant(Tensor::eye(3));
        let y = g.conv2d_pointwise(x, w).unwrap();
        assert!(g.value(y).bitwise_eq(&xv));

        let xv = Tensor::<f64>::randn(&[1, 2, 2, 2], 1.0, &mut rng);
        let x = g.constant(xv.clone());
        let w = g.constant(t(&[1, 2], &[1.0, 1.0]));
        let y = g.conv2d_pointwise(x, w).unwrap();
        for p in 0..4 {
            assert_eq!(g.value(y).data()[p], xv.data()[p] + xv.data()[4 + p]);
        }
        let bad = g.constant(Tensor::zeros(&[1, 3]));
        assert!(g.conv2d_pointwise(x, bad).is_err());
    }

    #[test]
    fn gelu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[0.0, 1.0]));
        let y = g.gelu(x);
        assert_eq!(g.value(y).data()[0], 0.0);
        assert!((g.value(y).data()[1] - 0.841345).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::<f64>::new();
        let ones = g.constant(Tensor::ones(&[4]));
        let zeros = g.constant(Tensor::zeros(&[4]));
        let x = g.constant(t(&[4], &[2.5; 4]));
        let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-3));

        let one2 = g.constant(Tensor::ones(&[2]));
        let zero2 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[2], &[1.0, -1.0]));
        let y = g.layer_norm(x, one2, zero2, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] - expect).abs() < 1e-12);
        assert!((g.value(y).data()[1] + expect).abs() < 1e-12);

        let beta = g.constant(t(&[2], &[0.3, -0.7]));
        let y = g.layer_norm(x, zero2, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -0.7]);

        let bad = g.constant(Tensor::ones(&[3]));
        assert!(g.layer_norm(x, bad, zero2, 1e-5).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x);
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[2], &[1.0, 2.0]));
        let y = g.softmax(x);
        assert!((g.value(y).data()[0] - 0.268941).abs() < 1e-6);
        assert!((g.value(y).data()[1] - 0.731059).abs() < 1e-6);
        let xs = g.constant(t(&[2], &[1001.0, 1002.0]));
        let ys = g.softmax(xs);
        assert!(g.value(ys).max_abs_diff(g.value(y)) < 1e-12);
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let mut rng = crate::Rng::new(4);
        let mut g = Graph::<f64>::new();
        let xv = Tensor::<f64>::randn(&[2, 5, 3], 1.0, &mut rng);
        let x = g.constant(xv.clone());
        let a = g.narrow(x, 1, 0, 1).unwrap();
        let b = g.narrow(x, 1, 1, 4).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert!(g.value(c).bitwise_eq(&xv));
    }

    #[test]
    fn gather_out_of_range() {
        let mut g = Graph::<f64>::new();
        let tab = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            g.gather_rows(tab, &[1, 4]),
            Err(HebaError::IndexOutOfRange { index: 4, .. })
        ));
    }

    #[test]
    fn l2_rows_unit_norm() {
        let mut rng = crate::Rng::new(8);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::<f64>::randn(&[5, 7], 3.0, &mut rng));
        let y = g.l2_normalize_rows(x);
        for row in g.value(y).data().chunks(7) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
