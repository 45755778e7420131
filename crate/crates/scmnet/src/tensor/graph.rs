use super::kernels::{self, ConvShape};
use super::Tensor;
use crate::{Result, ScmError};

pub type NodeId = usize;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        shape: ConvShape,
        batch: usize,
    },
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax {
        input: NodeId,
        axis: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    AbsSum(NodeId),
    UpsampleNearest2x(NodeId),
    Concat {
        axis: usize,
        inputs: Vec<NodeId>,
    },
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(NodeId),
    CenterColumns(NodeId),
    NormalizeColumns {
        input: NodeId,
        eps: f64,
    },
    RegionAvgPool {
        features: NodeId,
        mask: NodeId,
        counts: Vec<usize>,
    },
    BceWithLogits {
        logits: NodeId,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Persistent gradient buffer; allocated for grad-tracked leaves only.
    leaf_grad: Option<Vec<f64>>,
}

/// Computation tape. Ops append nodes in topological order; `backward`
/// replays the tape in reverse exactly once per call.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let leaf_grad = requires_grad.then(|| vec![0.0; value.len()]);
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, leaf_grad });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Accumulated gradient of a grad-tracked leaf.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].leaf_grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.leaf_grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn push(&mut self, op: &'static str, value: Tensor, o: Op, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(ScmError::NonFinite { op });
        }
        self.nodes.push(Node { value, op: o, requires_grad, leaf_grad: None });
        Ok(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(ScmError::Shape {
                op,
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a].value.shape(),
                    self.nodes[b].value.shape()
                ),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        let rg = self.requires(&[a, b]);
        self.push("add", t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        let rg = self.requires(&[a, b]);
        self.push("sub", t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        let rg = self.requires(&[a, b]);
        self.push("mul", t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let data = self.nodes[a].value.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        let rg = self.requires(&[a]);
        self.push("scale", t, Op::Scale(a, c), rg)
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { alpha * x })
            .collect();
        let t = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        let rg = self.requires(&[a]);
        self.push("leaky_relu", t, Op::LeakyRelu(a, alpha), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let t = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        let rg = self.requires(&[a]);
        self.push("sigmoid", t, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.nodes[a].value.data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        let rg = self.requires(&[a]);
        self.push("tanh", t, Op::Tanh(a), rg)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(ScmError::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.nodes[a].value.data(), self.nodes[b].value.data(), &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.requires(&[a, b]);
        self.push("matmul", t, Op::MatMul(a, b), rg)
    }

    pub fn transpose2d(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.nodes[a].value.shape();
        if s.len() != 2 {
            return Err(ScmError::Shape { op: "transpose", detail: format!("{:?}", s) });
        }
        let (m, n) = (s[0], s[1]);
        let src = self.nodes[a].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let rg = self.requires(&[a]);
        self.push("transpose", t, Op::Transpose(a), rg)
    }

    /// Cross-correlation convolution. Input may be [Cin,H,W] or [N,Cin,H,W];
    /// output rank matches.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let si = self.nodes[input].value.shape().to_vec();
        let sw = self.nodes[weight].value.shape().to_vec();
        let sbias = self.nodes[bias].value.shape().to_vec();
        if sw.len() != 4 || sbias.len() != 1 {
            return Err(ScmError::Shape {
                op: "conv2d",
                detail: format!("weight {:?} bias {:?}", sw, sbias),
            });
        }
        let (batched, batch, cin, h, w) = match si.len() {
            3 => (false, 1, si[0], si[1], si[2]),
            4 => (true, si[0], si[1], si[2], si[3]),
            _ => {
                return Err(ScmError::Shape { op: "conv2d", detail: format!("input {:?}", si) })
            }
        };
        let (cout, kcin, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if kcin != cin || sbias[0] != cout {
            return Err(ScmError::Shape {
                op: "conv2d",
                detail: format!("input {:?} weight {:?} bias {:?}", si, sw, sbias),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(ScmError::Config(format!(
                "conv2d needs odd kernel and stride >= 1, got k=({},{}) stride={}",
                kh, kw, stride
            )));
        }
        if (h + 2 * pad) < kh || (w + 2 * pad) < kw {
            return Err(ScmError::Config(format!(
                "conv2d output would be empty: input {}x{} kernel {}x{} pad {}",
                h, w, kh, kw, pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let shape = ConvShape { cin, cout, h, w, kh, kw, stride, pad, ho, wo };

        let mut out = vec![0.0; batch * cout * ho * wo];
        let mut col = vec![0.0; shape.patch_len() * shape.out_len()];
        let in_data = self.nodes[input].value.data();
        let w_data = self.nodes[weight].value.data();
        let b_data = self.nodes[bias].value.data();
        let in_stride = cin * h * w;
        let out_stride = cout * ho * wo;
        for n in 0..batch {
            kernels::conv2d_single(
                &shape,
                &in_data[n * in_stride..(n + 1) * in_stride],
                w_data,
                b_data,
                &mut col,
                &mut out[n * out_stride..(n + 1) * out_stride],
            );
        }
        let out_shape = if batched {
            vec![batch, cout, ho, wo]
        } else {
            vec![cout, ho, wo]
        };
        let t = Tensor::new(out_shape, out)?;
        let rg = self.requires(&[input, weight, bias]);
        self.push("conv2d", t, Op::Conv2d { input, weight, bias, shape, batch }, rg)
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.nodes[a].value.clone().reshaped(shape)?;
        let rg = self.requires(&[a]);
        self.push("reshape", t, Op::Reshape(a), rg)
    }

    pub fn concat(&mut self, axis: usize, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(ScmError::Shape { op: "concat", detail: "no inputs".into() });
        }
        let base = self.nodes[inputs[0]].value.shape().to_vec();
        if axis >= base.len() {
            return Err(ScmError::Shape {
                op: "concat",
                detail: format!("axis {} of {:?}", axis, base),
            });
        }
        let mut axis_total = 0;
        for &id in inputs {
            let s = self.nodes[id].value.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(ScmError::Shape {
                    op: "concat",
                    detail: format!("{:?} vs {:?}", s, base),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &id in inputs {
            let s = self.nodes[id].value.shape();
            let ax = s[axis];
            let src = self.nodes[id].value.data();
            for o in 0..outer {
                let dst_start = (o * axis_total + offset) * inner;
                let src_start = o * ax * inner;
                out[dst_start..dst_start + ax * inner]
                    .copy_from_slice(&src[src_start..src_start + ax * inner]);
            }
            offset += ax;
        }
        let t = Tensor::new(out_shape, out)?;
        let rg = self.requires(inputs);
        self.push("concat", t, Op::Concat { axis, inputs: inputs.to_vec() }, rg)
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let s = self.nodes[a].value.shape().to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(ScmError::Shape {
                op: "slice",
                detail: format!("axis {} range {}..{} of {:?}", axis, start, end, s),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let ax = s[axis];
        let span = end - start;
        let src = self.nodes[a].value.data();
        let mut out = vec![0.0; outer * span * inner];
        for o in 0..outer {
            let src_start = (o * ax + start) * inner;
            out[o * span * inner..(o + 1) * span * inner]
                .copy_from_slice(&src[src_start..src_start + span * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = span;
        let t = Tensor::new(out_shape, out)?;
        let rg = self.requires(&[a]);
        self.push("slice", t, Op::Slice { input: a, axis, start, end }, rg)
    }

    /// Nearest-neighbor x2 upsampling of a [C,H,W] map.
    pub fn upsample_nearest2x(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.nodes[a].value.shape().to_vec();
        if s.len() != 3 {
            return Err(ScmError::Shape { op: "upsample", detail: format!("{:?}", s) });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.nodes[a].value.data();
        let mut out = vec![0.0; c * 4 * h * w];
        let (ho, wo) = (2 * h, 2 * w);
        for ch in 0..c {
            for y in 0..ho {
                let sy = y / 2;
                let srow = &src[(ch * h + sy) * w..(ch * h + sy + 1) * w];
                let drow = &mut out[(ch * ho + y) * wo..(ch * ho + y + 1) * wo];
                for x in 0..wo {
                    drow[x] = srow[x / 2];
                }
            }
        }
        let t = Tensor::new(vec![c, ho, wo], out)?;
        let rg = self.requires(&[a]);
        self.push("upsample", t, Op::UpsampleNearest2x(a), rg)
    }

    // ---- normalization / attention ----

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.nodes[a].value.shape().to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(ScmError::Shape {
                op: "softmax",
                detail: format!("axis {} of {:?}", axis, s),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let k = s[axis];
        let src = self.nodes[a].value.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * k + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..k {
                    mx = mx.max(src[idx(j)]);
                }
                let mut sum = 0.0;
                for j in 0..k {
                    let e = (src[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..k {
                    out[idx(j)] /= sum;
                }
            }
        }
        let t = Tensor::new(s, out)?;
        let rg = self.requires(&[a]);
        self.push("softmax", t, Op::Softmax { input: a, axis }, rg)
    }

    /// Subtract from every column of a [C,M] matrix its own mean over rows.
    pub fn center_columns(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.nodes[a].value.shape().to_vec();
        if s.len() != 2 {
            return Err(ScmError::Shape { op: "center_columns", detail: format!("{:?}", s) });
        }
        let (c, m) = (s[0], s[1]);
        let src = self.nodes[a].value.data();
        let mut out = src.to_vec();
        for j in 0..m {
            let mut mean = 0.0;
            for i in 0..c {
                mean += src[i * m + j];
            }
            mean /= c as f64;
            for i in 0..c {
                out[i * m + j] -= mean;
            }
        }
        let t = Tensor::new(s, out)?;
        let rg = self.requires(&[a]);
        self.push("center_columns", t, Op::CenterColumns(a), rg)
    }

    /// Divide every column of a [C,M] matrix by max(its L2 norm, eps).
    /// The floor form (rather than adding eps to the norm) keeps cosine
    /// similarity exactly invariant under positive per-column scaling
    /// whenever the norm exceeds eps.
    pub fn normalize_columns(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let s = self.nodes[a].value.shape().to_vec();
        if s.len() != 2 {
            return Err(ScmError::Shape { op: "normalize_columns", detail: format!("{:?}", s) });
        }
        let (c, m) = (s[0], s[1]);
        let src = self.nodes[a].value.data();
        let mut out = vec![0.0; src.len()];
        for j in 0..m {
            let mut sq = 0.0;
            for i in 0..c {
                sq += src[i * m + j] * src[i * m + j];
            }
            let denom = sq.sqrt().max(eps);
            for i in 0..c {
                out[i * m + j] = src[i * m + j] / denom;
            }
        }
        let t = Tensor::new(s, out)?;
        let rg = self.requires(&[a]);
        self.push("normalize_columns", t, Op::NormalizeColumns { input: a, eps }, rg)
    }

    /// Mean feature vector per mask region. `features` is [C,H,W], `mask`
    /// is [R,H,W] with values in {0,1}; output is [R,C]. Empty regions give
    /// a zero vector (and receive zero gradient).
    pub fn region_avg_pool(&mut self, features: NodeId, mask: NodeId) -> Result<NodeId> {
        let sf = self.nodes[features].value.shape().to_vec();
        let sm = self.nodes[mask].value.shape().to_vec();
        if sf.len() != 3 || sm.len() != 3 || sf[1] != sm[1] || sf[2] != sm[2] {
            return Err(ScmError::Shape {
                op: "region_avg_pool",
                detail: format!("features {:?} mask {:?}", sf, sm),
            });
        }
        let (c, h, w) = (sf[0], sf[1], sf[2]);
        let r = sm[0];
        let hw = h * w;
        let f = self.nodes[features].value.data();
        let m = self.nodes[mask].value.data();
        let mut counts = vec![0usize; r];
        let mut out = vec![0.0; r * c];
        for reg in 0..r {
            let mplane = &m[reg * hw..(reg + 1) * hw];
            let mut count = 0;
            for p in 0..hw {
                if mplane[p] > 0.5 {
                    count += 1;
                    for ch in 0..c {
                        out[reg * c + ch] += f[ch * hw + p];
                    }
                }
            }
            counts[reg] = count;
            if count > 0 {
                for ch in 0..c {
                    out[reg * c + ch] /= count as f64;
                }
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        let rg = self.requires(&[features]);
        self.push("region_avg_pool", t, Op::RegionAvgPool { features, mask, counts }, rg)
    }

    // ---- reductions / losses ----

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.data().iter().sum();
        let rg = self.requires(&[a]);
        self.push("sum", Tensor::scalar(v), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a].value.len() as f64;
        let v = self.nodes[a].value.data().iter().sum::<f64>() / n;
        let rg = self.requires(&[a]);
        self.push("mean", Tensor::scalar(v), Op::Mean(a), rg)
    }

    /// L1 norm: sum of absolute values.
    pub fn abs_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a].value.data().iter().map(|x| x.abs()).sum();
        let rg = self.requires(&[a]);
        self.push("abs_sum", Tensor::scalar(v), Op::AbsSum(a), rg)
    }

    /// Mean absolute value; L1 distance when applied to a difference.
    pub fn mean_abs(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.nodes[a].value.len() as f64;
        let s = self.abs_sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Numerically stable mean binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: f64) -> Result<NodeId> {
        let src = self.nodes[logits].value.data();
        let n = src.len() as f64;
        let v = src
            .iter()
            .map(|&x| x.max(0.0) - x * target + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.requires(&[logits]);
        let targets = vec![target; src.len()];
        self.push("bce_with_logits", Tensor::scalar(v), Op::BceWithLogits { logits, targets }, rg)
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar loss. Gradients of grad-tracked
    /// leaves accumulate across calls until `zero_grad`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(ScmError::NonScalarLoss(self.nodes[loss].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backprop_node(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                if let Some(lg) = self.nodes[id].leaf_grad.as_mut() {
                    for (a, b) in lg.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
            }
        }
        Ok(())
    }

    fn grad_buf<'a>(
        nodes: &[Node],
        grads: &'a mut [Option<Vec<f64>>],
        id: NodeId,
    ) -> Option<&'a mut Vec<f64>> {
        if !nodes[id].requires_grad {
            return None;
        }
        if grads[id].is_none() {
            grads[id] = Some(vec![0.0; nodes[id].value.len()]);
        }
        grads[id].as_mut()
    }

    fn backprop_node(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &inp in &[*a, *b] {
                    if let Some(d) = Self::grad_buf(nodes, grads, inp) {
                        for (x, y) in d.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(d) = Self::grad_buf(nodes, grads, a) {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(d) = Self::grad_buf(nodes, grads, b) {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if nodes[a].requires_grad {
                    let bv: Vec<f64> = nodes[b].value.data().to_vec();
                    let d = Self::grad_buf(nodes, grads, a).unwrap();
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if nodes[b].requires_grad {
                    let av: Vec<f64> = nodes[a].value.data().to_vec();
                    let d = Self::grad_buf(nodes, grads, b).unwrap();
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                if let Some(d) = Self::grad_buf(nodes, grads, a) {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += c * y;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let m = nodes[a].value.shape()[0];
                let k = nodes[a].value.shape()[1];
                let n = nodes[b].value.shape()[1];
                if nodes[a].requires_grad {
                    let bv = nodes[b].value.data().to_vec();
                    let d = Self::grad_buf(nodes, grads, a).unwrap();
                    kernels::gemm_nt(m, n, k, g, &bv, d);
                }
                if nodes[b].requires_grad {
                    let av = nodes[a].value.data().to_vec();
                    let d = Self::grad_buf(nodes, grads, b).unwrap();
                    kernels::gemm_tn(k, m, n, &av, g, d);
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                let (m, n) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                if let Some(d) = Self::grad_buf(nodes, grads, a) {
                    // g has shape [n,m]
                    for j in 0..n {
                        for i in 0..m {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Conv2d { input, weight, bias, shape, batch } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let shape = *shape;
                let batch = *batch;
                let in_stride = shape.cin * shape.h * shape.w;
                let out_stride = shape.cout * shape.out_len();
                let in_data = nodes[input].value.data().to_vec();
                let w_data = nodes[weight].value.data().to_vec();
                let need_in = nodes[input].requires_grad;
                let need_w = nodes[weight].requires_grad;
                let need_b = nodes[bias].requires_grad;
                let mut din = need_in.then(|| vec![0.0; in_data.len()]);
                let mut dw = need_w.then(|| vec![0.0; w_data.len()]);
                let mut db = need_b.then(|| vec![0.0; shape.cout]);
                let mut col = vec![0.0; shape.patch_len() * shape.out_len()];
                let mut dcol = vec![0.0; shape.patch_len() * shape.out_len()];
                for s in 0..batch {
                    kernels::conv2d_backward_single(
                        &shape,
                        &in_data[s * in_stride..(s + 1) * in_stride],
                        &w_data,
                        &g[s * out_stride..(s + 1) * out_stride],
                        &mut col,
                        &mut dcol,
                        din.as_mut().map(|d| &mut d[s * in_stride..(s + 1) * in_stride]),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                }
                if let Some(di) = din {
                    let d = Self::grad_buf(nodes, grads, input).unwrap();
                    for (x, y) in d.iter_mut().zip(&di) {
                        *x += y;
                    }
                }
                if let Some(dwv) = dw {
                    let d = Self::grad_buf(nodes, grads, weight).unwrap();
                    for (x, y) in d.iter_mut().zip(&dwv) {
                        *x += y;
                    }
                }
                if let Some(dbv) = db {
                    let d = Self::grad_buf(nodes, grads, bias).unwrap();
                    for (x, y) in d.iter_mut().zip(&dbv) {
                        *x += y;
                    }
                }
            }
            Op::LeakyRelu(a, alpha) => {
                let (a, alpha) = (*a, *alpha);
                if nodes[a].requires_grad {
                    let xv = nodes[a].value.data().to_vec();
                    let d = Self::grad_buf(nodes, grads, a).unwrap();
                    for i in 0..d.len() {
                        d[i] += g[i] * if xv[i] > 0.0 { 1.0 } else { alpha };
                    }
                }
            }
            Op::Sigmoid(a) => {
                let a = *a;
                if nodes[a].requires_grad {
                    let yv = nodes[id].value.data().to_vec();
                    let d = Self::grad_buf(nodes, grads, a).unwrap();
                    for i in 0..d.len() {
                        d[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                }
            }
            Op::Tanh(a) => {
                let a = *a;
                if nodes[a].requires_grad {
                    let yv = nodes[id].value.data().to_vec();
                    let d = Self::grad_buf(nodes, grads, a).unwrap();
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - yv[i] * yv[i]);
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let (a, axis) = (*input, *axis);
                if nodes[a].requires_grad {
                    let s = nodes[a].value.shape().to_vec();
                    let outer: usize = s[..axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let k = s[axis];
                    let yv = nodes[id].value.data().to_vec();
                    let d = Self::grad_buf(nodes, grads, a).unwrap();
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * k + j) * inner + i;
                            let mut dot = 0.0;
                            for j in 0..k {
                                dot += yv[idx(j)] * g[idx(j)];
                            }
                            for j in 0..k {
                                d[idx(j)] += yv[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let a = *a;
                if let Some(d) = Self::grad_buf(nodes, grads, a) {
                    for x in d.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let a = *a;
                let n = nodes[a].value.len() as f64;
                if let Some(d) = Self::grad_buf(nodes, grads, a) {
                    let gv = g[0] / n;
                    for x in d.iter_mut() {
                        *x += gv;
                    }
                }
            }
            Op::AbsSum(a) => {
                let a = *a;
                if nodes[a].requires_grad {
                    let xv = nodes[a].value.data().to_vec();
                    let d = Self::grad_buf(nodes, grads, a).unwrap();
                    for i in 0..d.len() {
                        // subgradient 0 at the kink
                        d[i] += g[0] * xv[i].signum() * (xv[i] != 0.0) as u8 as f64;
                    }
                }
            }
            Op::UpsampleNearest2x(a) => {
                let a = *a;
                if nodes[a].requires_grad {
                    let s = nodes[a].value.shape().to_vec();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (ho, wo) = (2 * h, 2 * w);
                    let d = Self::grad_buf(nodes, grads, a).unwrap();
                    for ch in 0..c {
                        for y in 0..ho {
                            let sy = y / 2;
                            for x in 0..wo {
                                d[(ch * h + sy) * w + x / 2] += g[(ch * ho + y) * wo + x];
                            }
                        }
                    }
                }
            }
            Op::Concat { axis, inputs } => {
                let axis = *axis;
                let inputs = inputs.clone();
                let total_shape = nodes[id].value.shape().to_vec();
                let outer: usize = total_shape[..axis].iter().product();
                let inner: usize = total_shape[axis + 1..].iter().product();
                let axis_total = total_shape[axis];
                let mut offset = 0;
                for inp in inputs {
                    let ax = nodes[inp].value.shape()[axis];
                    if let Some(d) = Self::grad_buf(nodes, grads, inp) {
                        for o in 0..outer {
                            let src_start = (o * axis_total + offset) * inner;
                            let dst_start = o * ax * inner;
                            for i in 0..ax * inner {
                                d[dst_start + i] += g[src_start + i];
                            }
                        }
                    }
                    offset += ax;
                }
            }
            Op::Slice { input, axis, start, end } => {
                let (a, axis, start, end) = (*input, *axis, *start, *end);
                let s = nodes[a].value.shape().to_vec();
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let ax = s[axis];
                let span = end - start;
                if let Some(d) = Self::grad_buf(nodes, grads, a) {
                    for o in 0..outer {
                        let dst_start = (o * ax + start) * inner;
                        let src_start = o * span * inner;
                        for i in 0..span * inner {
                            d[dst_start + i] += g[src_start + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                let a = *a;
                if let Some(d) = Self::grad_buf(nodes, grads, a) {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::CenterColumns(a) => {
                let a = *a;
                if nodes[a].requires_grad {
                    let s = nodes[a].value.shape().to_vec();
                    let (c, m) = (s[0], s[1]);
                    let d = Self::grad_buf(nodes, grads, a).unwrap();
                    for j in 0..m {
                        let mut mean = 0.0;
                        for i in 0..c {
                            mean += g[i * m + j];
                        }
                        mean /= c as f64;
                        for i in 0..c {
                            d[i * m + j] += g[i * m + j] - mean;
                        }
                    }
                }
            }
            Op::NormalizeColumns { input, eps } => {
                let (a, eps) = (*input, *eps);
                if nodes[a].requires_grad {
                    let s = nodes[a].value.shape().to_vec();
                    let (c, m) = (s[0], s[1]);
                    let xv = nodes[a].value.data().to_vec();
                    let d = Self::grad_buf(nodes, grads, a).unwrap();
                    for j in 0..m {
                        let mut sq = 0.0;
                        let mut dot = 0.0;
                        for i in 0..c {
                            sq += xv[i * m + j] * xv[i * m + j];
                            dot += g[i * m + j] * xv[i * m + j];
                        }
                        let norm = sq.sqrt();
                        if norm > eps {
                            // y = x / |x|: dy = g/|x| - (g.x) x / |x|^3
                            let coef = dot / (norm * norm * norm);
                            for i in 0..c {
                                d[i * m + j] += g[i * m + j] / norm - coef * xv[i * m + j];
                            }
                        } else {
                            // Floored denominator is a constant.
                            for i in 0..c {
                                d[i * m + j] += g[i * m + j] / eps;
                            }
                        }
                    }
                }
            }
            Op::RegionAvgPool { features, mask, counts } => {
                let (features, mask) = (*features, *mask);
                let counts = counts.clone();
                if nodes[features].requires_grad {
                    let sf = nodes[features].value.shape().to_vec();
                    let (c, h, w) = (sf[0], sf[1], sf[2]);
                    let hw = h * w;
                    let mv = nodes[mask].value.data().to_vec();
                    let d = Self::grad_buf(nodes, grads, features).unwrap();
                    for (reg, &count) in counts.iter().enumerate() {
                        if count == 0 {
                            continue;
                        }
                        let inv = 1.0 / count as f64;
                        let mplane = &mv[reg * hw..(reg + 1) * hw];
                        for p in 0..hw {
                            if mplane[p] > 0.5 {
                                for ch in 0..c {
                                    d[ch * hw + p] += g[reg * c + ch] * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let a = *logits;
                let targets = targets.clone();
                if nodes[a].requires_grad {
                    let xv = nodes[a].value.data().to_vec();
                    let n = xv.len() as f64;
                    let d = Self::grad_buf(nodes, grads, a).unwrap();
                    for i in 0..d.len() {
                        let sig = if xv[i] >= 0.0 {
                            1.0 / (1.0 + (-xv[i]).exp())
                        } else {
                            let e = xv[i].exp();
                            e / (1.0 + e)
                        };
                        d[i] += g[0] * (sig - targets[i]) / n;
                    }
                }
            }
        }
    }
}
