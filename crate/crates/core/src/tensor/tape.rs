use super::gemm::{matmul_into, transpose};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalarVar(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumLast(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    Conv2d(Box<ConvSaved>),
    AvgPool2(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Gather { src: Var, index: Vec<usize> },
    Reshape(Var),
    Detach,
}

#[derive(Debug)]
struct ConvSaved {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    geom: ConvGeom,
    cols: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Detach => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) | MulRow(a, b)
            | MulScalarVar(a, b) | MatMul(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Sigmoid(a) | Relu(a) | Exp(a) | Log(a) | Sqrt(a)
            | Square(a) | Abs(a) | Clamp(a, _, _) | Sum(a) | Mean(a) | MeanRows(a)
            | SumLast(a) | Transpose(a) | Softmax(a, _) | LogSoftmax(a, _) | AvgPool2(a)
            | Reshape(a) => vec![*a],
            Conv2d(s) => {
                let mut v = vec![s.input, s.weight];
                v.extend(s.bias);
                v
            }
            Concat { inputs, .. } => inputs.clone(),
            Gather { src, .. } => vec![*src],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Records operations in creation order; that order is a topological order,
/// so the reverse sweep visits every node once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn last_dim(op: &'static str, t: &Tensor) -> Result<usize> {
    t.shape()
        .last()
        .copied()
        .filter(|&d| d > 0)
        .ok_or_else(|| TensorError::InvalidArgument {
            op,
            msg: format!("needs a non-empty trailing axis, got {:?}", t.shape()),
        })
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Multiply-accumulates executed by the forward matmul and conv2d
    /// calls recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it participates in gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.nodes.push(Node {
            value: Tensor { grad: None, ..t },
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_grad())
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Copies a value into a new gradient-free leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.nodes.push(Node {
            value: Tensor {
                requires_grad: false,
                grad: None,
                ..value
            },
            op: Op::Detach,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient stored on a leaf by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push(&mut self, op_name: &'static str, shape: &[usize], data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|&x| f(x)).collect();
        self.push(name, &shape, data, op)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(name, ta, tb)?;
        let shape = ta.shape().to_vec();
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        self.push(name, &shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, super::sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::InvalidArgument {
                op: "clamp",
                msg: format!("lo {lo} > hi {hi}"),
            });
        }
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// `x[..., c] + b[c]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = last_dim("add_row", self.value(x))?;
        if self.shape(b) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let shape = self.shape(x).to_vec();
        let bd = self.data(b);
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bd).map(|(v, w)| v + w))
            .collect();
        self.push("add_row", &shape, data, Op::AddRow(x, b))
    }

    /// `x[..., c] * s[c]`.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = last_dim("mul_row", self.value(x))?;
        if self.shape(s) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let shape = self.shape(x).to_vec();
        let sd = self.data(s);
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(sd).map(|(v, w)| v * w))
            .collect();
        self.push("mul_row", &shape, data, Op::MulRow(x, s))
    }

    /// Multiplies every entry of `x` by the single-element tensor `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "mul_scalar_var",
                msg: format!("scale must have one element, got {:?}", self.shape(s)),
            });
        }
        let k = self.data(s)[0];
        self.unary("mul_scalar_var", x, |v| v * k, Op::MulScalarVar(x, s))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push("sum", &[], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s = self.data(a).iter().sum::<f64>() / n as f64;
        self.push("mean", &[], vec![s], Op::Mean(a))
    }

    /// Mean over every axis but the last: `[..., C] -> [C]`. Global average
    /// pooling for channel-last maps.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let c = last_dim("mean_rows", self.value(a))?;
        let rows = self.value(a).len() / c;
        let mut out = vec![0.0; c];
        for row in self.data(a).chunks(c) {
            add_into(&mut out, row);
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        self.push("mean_rows", &[c], out, Op::MeanRows(a))
    }

    /// Sum over the last axis: `[..., K] -> [...]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let k = last_dim("sum_last", self.value(a))?;
        let shape = self.shape(a)[..self.shape(a).len() - 1].to_vec();
        let data = self.data(a).chunks(k).map(|r| r.iter().sum()).collect();
        self.push("sum_last", &shape, data, Op::SumLast(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        self.macs += (m * k * n) as u64;
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n, false);
        self.push("matmul", &[m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: format!("needs rank 2, got {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let data = transpose(self.data(a), r, c);
        self.push("transpose", &[c, r], data, Op::Transpose(a))
    }

    /// Softmax of `a / temperature` along the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        check_temperature("softmax", temperature)?;
        let k = last_dim("softmax", self.value(a))?;
        let shape = self.shape(a).to_vec();
        let data = self
            .data(a)
            .chunks(k)
            .flat_map(|row| super::softmax_slice(row, temperature))
            .collect();
        self.push("softmax", &shape, data, Op::Softmax(a, temperature))
    }

    pub fn log_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        check_temperature("log_softmax", temperature)?;
        let k = last_dim("log_softmax", self.value(a))?;
        let shape = self.shape(a).to_vec();
        let mut data = Vec::with_capacity(self.value(a).len());
        for row in self.data(a).chunks(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row
                .iter()
                .map(|&z| ((z - max) / temperature).exp())
                .sum::<f64>()
                .ln();
            data.extend(row.iter().map(|&z| (z - max) / temperature - lse));
        }
        self.push("log_softmax", &shape, data, Op::LogSoftmax(a, temperature))
    }

    /// 2-D cross-correlation over a channel-last map.
    ///
    /// `input: [H, W, Cin]`, `weight: [kh, kw, Cin, Cout]`, `bias: [Cout]`.
    /// Output is `[(H + 2p - kh)/s + 1, (W + 2p - kw)/s + 1, Cout]`, zero padded.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 3 || sw.len() != 4 || si[2] != sw[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: si,
                rhs: sw,
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (h, w, cin) = (si[0], si[1], si[2]);
        let (kh, kw, cout) = (sw[0], sw[1], sw[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        };
        self.macs += (geom.ho * geom.wo * geom.k() * cout) as u64;
        let cols = im2col(self.data(input), &geom);
        let mut out = vec![0.0; geom.ho * geom.wo * cout];
        matmul_into(&cols, self.data(weight), &mut out, geom.ho * geom.wo, geom.k(), cout, false);
        if let Some(b) = bias {
            let bd = self.data(b);
            for row in out.chunks_mut(cout) {
                add_into(row, bd);
            }
        }
        let saved = ConvSaved {
            input,
            weight,
            bias,
            geom,
            cols,
        };
        self.push("conv2d", &[geom.ho, geom.wo, cout], out, Op::Conv2d(Box::new(saved)))
    }

    /// 2×2 average pooling with stride 2 over `[H, W, C]`; odd edges use the
    /// partial window, so the output is `[ceil(H/2), ceil(W/2), C]`.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(TensorError::InvalidArgument {
                op: "avg_pool2",
                msg: format!("needs [H, W, C], got {s:?}"),
            });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let src = self.data(a);
        let mut out = vec![0.0; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let window = pool_window(oy, ox, h, w);
                let dst = &mut out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                for &(y, x) in &window {
                    add_into(dst, &src[(y * w + x) * c..(y * w + x + 1) * c]);
                }
                let inv = 1.0 / window.len() as f64;
                dst.iter_mut().for_each(|v| *v *= inv);
            }
        }
        self.push("avg_pool2", &[ho, wo, c], out, Op::AvgPool2(a))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            &shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// `out.flat[i] = src.flat[index[i]]`, reshaped to `shape`. Covers
    /// resampling, flips, rotations and row selection.
    pub fn gather(&mut self, src: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(src).len();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of bounds for {n} elements"),
            });
        }
        let sd = self.data(src);
        let data = index.iter().map(|&i| sd[i]).collect();
        self.push("gather", shape, data, Op::Gather { src, index })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let data = self.data(a).to_vec();
        self.push("reshape", shape, data, Op::Reshape(a))
    }

    /// Reverse sweep from a scalar loss. Leaf gradients are written to the
    /// leaves (see [`Tape::grad`]) and also returned.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                node.value.grad = Some(g.clone().unwrap_or_else(|| vec![0.0; node.value.len()]));
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => add_into(existing, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let zip_map = |a: &[f64], f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..a.len()).map(f).collect() };

        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, zip_map(g, &|k| g[k] * vb[k]));
                acc(*b, zip_map(g, &|k| g[k] * va[k]));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, zip_map(g, &|k| g[k] / vb[k]));
                acc(*b, zip_map(g, &|k| -g[k] * va[k] / (vb[k] * vb[k])));
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Sigmoid(a) => acc(*a, zip_map(g, &|k| g[k] * y[k] * (1.0 - y[k]))),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, zip_map(g, &|k| if x[k] > 0.0 { g[k] } else { 0.0 }));
            }
            Op::Exp(a) => acc(*a, zip_map(g, &|k| g[k] * y[k])),
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, zip_map(g, &|k| g[k] / x[k]));
            }
            Op::Sqrt(a) => acc(*a, zip_map(g, &|k| g[k] / (2.0 * y[k]))),
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, zip_map(g, &|k| 2.0 * x[k] * g[k]));
            }
            Op::Abs(a) => {
                let x = val(*a);
                acc(*a, zip_map(g, &|k| if x[k] > 0.0 { g[k] } else if x[k] < 0.0 { -g[k] } else { 0.0 }));
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                acc(*a, zip_map(g, &|k| if x[k] >= *lo && x[k] <= *hi { g[k] } else { 0.0 }));
            }
            Op::AddRow(x, b) => {
                acc(*x, g.to_vec());
                if wants(*b) {
                    let c = val(*b).len();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        add_into(&mut gb, row);
                    }
                    acc(*b, gb);
                }
            }
            Op::MulRow(x, s) => {
                let (vx, vs) = (val(*x), val(*s));
                let c = vs.len();
                if wants(*x) {
                    acc(*x, zip_map(g, &|k| g[k] * vs[k % c]));
                }
                if wants(*s) {
                    let mut gs = vec![0.0; c];
                    for (k, (gv, xv)) in g.iter().zip(vx).enumerate() {
                        gs[k % c] += gv * xv;
                    }
                    acc(*s, gs);
                }
            }
            Op::MulScalarVar(x, s) => {
                let (vx, k) = (val(*x), val(*s)[0]);
                acc(*x, g.iter().map(|v| v * k).collect());
                if wants(*s) {
                    let gs = g.iter().zip(vx).map(|(a, b)| a * b).sum();
                    acc(*s, vec![gs]);
                }
            }
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::MeanRows(a) => {
                let c = g.len();
                let n = val(*a).len();
                let rows = (n / c) as f64;
                acc(*a, (0..n).map(|k| g[k % c] / rows).collect());
            }
            Op::SumLast(a) => {
                let n = val(*a).len();
                let k = n / g.len().max(1);
                acc(*a, (0..n).map(|j| g[j / k]).collect());
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let bt = transpose(val(*b), k, n);
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g, &bt, &mut ga, m, n, k, false);
                    acc(*a, ga);
                }
                if wants(*b) {
                    let at = transpose(val(*a), m, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_into(&at, g, &mut gb, k, m, n, false);
                    acc(*b, gb);
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                acc(*a, transpose(g, s[0], s[1]));
            }
            Op::Softmax(a, t) => {
                let k = *node.value.shape().last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(k).zip(y.chunks(k)).zip(gx.chunks_mut(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        out[j] = yr[j] * (gr[j] - dot) / t;
                    }
                }
                acc(*a, gx);
            }
            Op::LogSoftmax(a, t) => {
                let k = *node.value.shape().last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(k).zip(y.chunks(k)).zip(gx.chunks_mut(k)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..k {
                        out[j] = (gr[j] - yr[j].exp() * total) / t;
                    }
                }
                acc(*a, gx);
            }
            Op::Conv2d(s) => {
                let geom = s.geom;
                let m = geom.ho * geom.wo;
                let kdim = geom.k();
                if wants(s.weight) {
                    let ct = transpose(&s.cols, m, kdim);
                    let mut gw = vec![0.0; kdim * geom.cout];
                    matmul_into(&ct, g, &mut gw, kdim, m, geom.cout, false);
                    acc(s.weight, gw);
                }
                if let Some(b) = s.bias {
                    if wants(b) {
                        let mut gb = vec![0.0; geom.cout];
                        for row in g.chunks(geom.cout) {
                            add_into(&mut gb, row);
                        }
                        acc(b, gb);
                    }
                }
                if wants(s.input) {
                    let wt = transpose(val(s.weight), kdim, geom.cout);
                    let mut gcols = vec![0.0; m * kdim];
                    matmul_into(g, &wt, &mut gcols, m, geom.cout, kdim, false);
                    acc(s.input, col2im(&gcols, &geom));
                }
            }
            Op::AvgPool2(a) => {
                let s = nodes[a.0].value.shape();
                let (h, w, c) = (s[0], s[1], s[2]);
                let wo = w.div_ceil(2);
                let mut gx = vec![0.0; h * w * c];
                for oy in 0..h.div_ceil(2) {
                    for ox in 0..wo {
                        let window = pool_window(oy, ox, h, w);
                        let inv = 1.0 / window.len() as f64;
                        let src = &g[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
                        for &(yy, xx) in &window {
                            let dst = &mut gx[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                            for (d, v) in dst.iter_mut().zip(src) {
                                *d += v * inv;
                            }
                        }
                    }
                }
                acc(*a, gx);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = nodes[v.0].value.shape()[*axis] * inner;
                    if wants(v) {
                        let mut gv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gv.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                        }
                        acc(v, gv);
                    }
                    offset += chunk;
                }
            }
            Op::Gather { src, index } => {
                let mut gs = vec![0.0; val(*src).len()];
                for (gv, &ix) in g.iter().zip(index) {
                    gs[ix] += gv;
                }
                acc(*src, gs);
            }
        }
    }
}

fn check_temperature(op: &'static str, t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("temperature must be positive, got {t}"),
        });
    }
    Ok(())
}

fn pool_window(oy: usize, ox: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(4);
    for y in 2 * oy..(2 * oy + 2).min(h) {
        for x in 2 * ox..(2 * ox + 2).min(w) {
            v.push((y, x));
        }
    }
    v
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kdim = g.k();
    let mut cols = vec![0.0; g.ho * g.wo * kdim];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * kdim..(oy * g.wo + ox + 1) * kdim];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.kw + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kdim = g.k();
    let mut out = vec![0.0; g.h * g.w * g.cin];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * kdim..(oy * g.wo + ox + 1) * kdim];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.kw + kx) * g.cin;
                    add_into(&mut out[dst..dst + g.cin], &row[src..src + g.cin]);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap().with_grad());
        let s = t.sum(w).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_hand_derivative() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad());
        let ww = t.mul(w, w).unwrap();
        let s = t.sum(ww).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::scalar(3.0).with_grad());
        let a = t.scale(w, 2.0).unwrap();
        let b = t.scale(w, 5.0).unwrap();
        let c = t.add(a, b).unwrap();
        t.backward(c).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[7.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::zeros(&[2]).with_grad());
        assert!(matches!(t.backward(w), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::new(&[1], vec![-1.0]).unwrap());
        assert!(matches!(t.ln(w), Err(TensorError::NonFinite { op: "log" })));
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let a = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = t.matmul(i2, a).unwrap();
        assert_eq!(t.data(p), t.data(a));
        let col = t.constant(Tensor::from_rows(&[&[0.0], &[1.0]]));
        let q = t.matmul(a, col).unwrap();
        assert_eq!(t.shape(q), &[2, 1]);
        assert_eq!(t.data(q), &[2.0, 4.0]);
        assert!(matches!(t.matmul(a, q), Ok(_)));
        assert!(matches!(t.matmul(col, a), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::full(&[3], 0.7));
        for tau in [0.1, 1.0, 7.0] {
            let s = t.softmax(c, tau).unwrap();
            for &p in t.data(s) {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let z = t.constant(Tensor::zeros(&[2]));
        let s = t.softmax(z, 1.0).unwrap();
        assert_eq!(t.data(s), &[0.5, 0.5]);
        assert!(t.softmax(z, 0.0).is_err());
        assert!(t.softmax(z, -1.0).is_err());
    }

    #[test]
    fn conv_same_padding_shape_and_identity() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[4, 5, 2], (0..40).map(|v| v as f64).collect()).unwrap());
        // 3x3 kernel that copies the centre tap, channel-wise.
        let mut w = Tensor::zeros(&[3, 3, 2, 2]);
        w.data_mut()[(4 * 2) * 2] = 1.0;
        w.data_mut()[(4 * 2 + 1) * 2 + 1] = 1.0;
        let wv = t.constant(w);
        let y = t.conv2d(x, wv, None, 1, 1).unwrap();
        assert_eq!(t.shape(y), &[4, 5, 2]);
        assert_eq!(t.data(y), t.data(x));
        let y2 = t.conv2d(x, wv, None, 2, 1).unwrap();
        assert_eq!(t.shape(y2), &[2, 3, 2]);
    }

    #[test]
    fn avg_pool_ceil_mode() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[3, 3, 1], (1..=9).map(|v| v as f64).collect()).unwrap());
        let y = t.avg_pool2(x).unwrap();
        assert_eq!(t.shape(y), &[2, 2, 1]);
        assert_eq!(t.data(y), &[3.0, 4.5, 7.5, 9.0]);
    }

    #[test]
    fn concat_middle_axis() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
        let b = t.constant(Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.data(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut t = Tape::new();
        let frozen = t.constant(Tensor::ones(&[2]));
        let live = t.leaf(Tensor::ones(&[2]).with_grad());
        let p = t.mul(frozen, live).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(frozen).is_none());
        assert_eq!(g.get(live).unwrap(), &[1.0, 1.0]);
    }
}
