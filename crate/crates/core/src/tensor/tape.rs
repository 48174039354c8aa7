use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

/// Operation kinds, used to name a backward rule for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv2d,
    Concat,
    ChannelMean,
    Add,
    Mul,
    AddScalar,
    Relu,
    AvgPool,
    GlobalAvgPool,
    Linear,
    SoftmaxCrossEntropy,
    Sum,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Conv2d,
        OpKind::Concat,
        OpKind::ChannelMean,
        OpKind::Add,
        OpKind::Mul,
        OpKind::AddScalar,
        OpKind::Relu,
        OpKind::AvgPool,
        OpKind::GlobalAvgPool,
        OpKind::Linear,
        OpKind::SoftmaxCrossEntropy,
        OpKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::Concat => "concat",
            OpKind::ChannelMean => "channel_mean",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::Relu => "relu",
            OpKind::AvgPool => "avg_pool",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Linear => "linear",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::Sum => "sum",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    Concat { inputs: Vec<Var> },
    ChannelMean { x: Var },
    Binary { a: Var, b: Var, op: BinaryOp, broadcast: bool },
    AddScalar { x: Var },
    Relu { x: Var },
    AvgPool { x: Var, k: usize },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum { x: Var },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Concat { .. } => OpKind::Concat,
            Op::ChannelMean { .. } => OpKind::ChannelMean,
            Op::Binary { op: BinaryOp::Add, .. } => OpKind::Add,
            Op::Binary { op: BinaryOp::Mul, .. } => OpKind::Mul,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::Relu { .. } => OpKind::Relu,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Linear { .. } => OpKind::Linear,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Sum { .. } => OpKind::Sum,
        })
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Eager computation record. Every operation evaluates immediately and
/// appends one node; nodes are therefore always in topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero if `v` does not reach it.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape tracks value shape"),
            None => Tensor::zeros(shape).expect("recorded shapes are valid"),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Negates every gradient flowing back through operations of `kind`.
    /// Exists only to prove that gradient checking catches a broken rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.value(x).dims4()?, self.value(w).dims4()?, stride, pad)?;
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [geom.out_channels] {
                    return Err(Error::input(format!(
                        "bias shape {:?} does not match {} output channels",
                        bv.shape(),
                        geom.out_channels
                    )));
                }
                Some(bv.data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), bias);
        let value = Tensor::new(&[geom.batch, geom.out_channels, geom.out_h, geom.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }

    /// Concatenates `[N, Ci, H, W]` tensors along the channel axis, in order.
    pub fn channel_concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::input("channel_concat of an empty list"))?;
        let [n, _, h, w] = self.value(first).dims4()?;
        let mut channels = 0;
        for &x in xs {
            let [xn, xc, xh, xw] = self.value(x).dims4()?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(Error::input(format!(
                    "channel_concat: shape {:?} incompatible with {:?}",
                    self.value(x).shape(),
                    self.value(first).shape()
                )));
            }
            channels += xc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * channels * plane);
        for i in 0..n {
            for &x in xs {
                let t = self.value(x);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[i * c * plane..(i + 1) * c * plane]);
            }
        }
        let value = Tensor::new(&[n, channels, h, w], data)?;
        Ok(self.push(value, Op::Concat { inputs: xs.to_vec() }))
    }

    /// Mean over the channel axis: `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let plane = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * plane];
        for i in 0..n {
            let o = &mut out[i * plane..][..plane];
            for ch in 0..c {
                let src = &xd[(i * c + ch) * plane..][..plane];
                o.iter_mut().zip(src).for_each(|(a, s)| *a += s);
            }
            o.iter_mut().for_each(|a| *a /= c as f64);
        }
        let value = Tensor::new(&[n, 1, h, w], out)?;
        Ok(self.push(value, Op::ChannelMean { x }))
    }

    /// Pointwise `a op b`. `b` may have a single channel, in which case it is
    /// broadcast across the channels of `a`.
    pub fn elementwise(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Mul => x * y,
        };
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            let value = Tensor::new(av.shape(), data)?;
            return Ok(self.push(value, Op::Binary { a, b, op, broadcast: false }));
        }
        let incompatible = || {
            Error::input(format!("elementwise: shapes {:?} and {:?} do not broadcast", av.shape(), bv.shape()))
        };
        let [n, c, h, w] = av.dims4().map_err(|_| incompatible())?;
        if bv.shape() != [n, 1, h, w] {
            return Err(incompatible());
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(av.len());
        for i in 0..n {
            let bp = &bv.data()[i * plane..][..plane];
            for ch in 0..c {
                let ap = &av.data()[(i * c + ch) * plane..][..plane];
                data.extend(ap.iter().zip(bp).map(|(&x, &y)| f(x, y)));
            }
        }
        let value = Tensor::new(av.shape(), data)?;
        Ok(self.push(value, Op::Binary { a, b, op, broadcast: true }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryOp::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryOp::Mul)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu { x })
    }

    /// Non-overlapping `k`×`k` mean pooling; `k` must divide H and W.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let dims @ [n, c, h, w] = self.value(x).dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::config(format!("pool size {k} does not divide {h}x{w}")));
        }
        let out = kernels::avg_pool_forward(dims, k, self.value(x).data());
        let value = Tensor::new(&[n, c, h / k, w / k], out)?;
        Ok(self.push(value, Op::AvgPool { x, k }))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let plane = h * w;
        let xd = self.value(x).data();
        let data = (0..n * c).map(|i| xd[i * plane..][..plane].iter().sum::<f64>() / plane as f64).collect();
        let value = Tensor::new(&[n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }))
    }

    /// `x · wᵀ + b` for `x: [N, D]`, `w: [K, D]`, `b: [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, d] = self.value(x).dims2()?;
        let [k, wd] = self.value(w).dims2()?;
        if wd != d || self.value(b).shape() != [k] {
            return Err(Error::input(format!(
                "linear: input {:?}, weight {:?}, bias {:?} are incompatible",
                self.value(x).shape(),
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let (xd, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            let row = &xd[i * d..][..d];
            for j in 0..k {
                let wr = &wv[j * d..][..d];
                out.push(bv[j] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let value = Tensor::new(&[n, k], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::input(format!("{} labels for a batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::input(format!("label {bad} out of range for {k} classes")));
        }
        let zd = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &zd[i * k..][..k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            loss += total.ln() - (row[label] - max);
            probs.extend(exps.iter().map(|e| e / total));
        }
        let value = Tensor::scalar(loss / n as f64);
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x })
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::input(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(mut g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if self.fault.is_some() && node.op.kind() == self.fault {
                g.iter_mut().for_each(|v| *v = -*v);
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let dx = kernels::conv2d_backward_input(geom, g, self.value(*w).data());
                let dw = kernels::conv2d_backward_weight(geom, g, self.value(*x).data());
                add_into(&mut grads[x.0], dx);
                add_into(&mut grads[w.0], dw);
                if let Some(b) = b {
                    add_into(&mut grads[b.0], kernels::conv2d_backward_bias(geom, g));
                }
            }
            Op::Concat { inputs } => {
                let [n, total, h, w] = out.dims4().expect("concat output is rank 4");
                let plane = h * w;
                let mut offset = 0;
                for x in inputs {
                    let c = self.value(*x).shape()[1];
                    let mut dx = Vec::with_capacity(n * c * plane);
                    for i in 0..n {
                        let start = (i * total + offset) * plane;
                        dx.extend_from_slice(&g[start..start + c * plane]);
                    }
                    add_into(&mut grads[x.0], dx);
                    offset += c;
                }
            }
            Op::ChannelMean { x } => {
                let [n, c, h, w] = self.value(*x).dims4().expect("rank 4");
                let plane = h * w;
                let mut dx = Vec::with_capacity(n * c * plane);
                for i in 0..n {
                    let gp = &g[i * plane..][..plane];
                    for _ in 0..c {
                        dx.extend(gp.iter().map(|v| v / c as f64));
                    }
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Binary { a, b, op, broadcast } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (da, db) = match (op, broadcast) {
                    (BinaryOp::Add, false) => (g.to_vec(), g.to_vec()),
                    (BinaryOp::Mul, false) => (
                        g.iter().zip(bv.data()).map(|(g, b)| g * b).collect(),
                        g.iter().zip(av.data()).map(|(g, a)| g * a).collect(),
                    ),
                    (op, true) => {
                        let [n, c, h, w] = av.dims4().expect("broadcast operand is rank 4");
                        let plane = h * w;
                        let mut da = Vec::with_capacity(av.len());
                        let mut db = vec![0.0; n * plane];
                        for i in 0..n {
                            let bp = &bv.data()[i * plane..][..plane];
                            let dbp = &mut db[i * plane..][..plane];
                            for ch in 0..c {
                                let base = (i * c + ch) * plane;
                                let gp = &g[base..][..plane];
                                match op {
                                    BinaryOp::Add => {
                                        da.extend_from_slice(gp);
                                        dbp.iter_mut().zip(gp).for_each(|(d, g)| *d += g);
                                    }
                                    BinaryOp::Mul => {
                                        let ap = &av.data()[base..][..plane];
                                        da.extend(gp.iter().zip(bp).map(|(g, b)| g * b));
                                        for ((d, g), a) in dbp.iter_mut().zip(gp).zip(ap) {
                                            *d += g * a;
                                        }
                                    }
                                }
                            }
                        }
                        (da, db)
                    }
                };
                add_into(&mut grads[a.0], da);
                add_into(&mut grads[b.0], db);
            }
            Op::AddScalar { x } => add_into(&mut grads[x.0], g.to_vec()),
            Op::Relu { x } => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], dx);
            }
            Op::AvgPool { x, k } => {
                let dims = self.value(*x).dims4().expect("rank 4");
                add_into(&mut grads[x.0], kernels::avg_pool_backward(dims, *k, g));
            }
            Op::GlobalAvgPool { x } => {
                let [n, c, h, w] = self.value(*x).dims4().expect("rank 4");
                let plane = h * w;
                let mut dx = Vec::with_capacity(n * c * plane);
                for gv in &g[..n * c] {
                    dx.extend(std::iter::repeat_n(gv / plane as f64, plane));
                }
                add_into(&mut grads[x.0], dx);
            }
            Op::Linear { x, w, b } => {
                let [n, d] = self.value(*x).dims2().expect("rank 2");
                let k = self.value(*b).len();
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = vec![0.0; n * d];
                let mut dw = vec![0.0; k * d];
                let mut db = vec![0.0; k];
                for i in 0..n {
                    let xr = &xd[i * d..][..d];
                    let dxr = &mut dx[i * d..][..d];
                    for j in 0..k {
                        let gv = g[i * k + j];
                        db[j] += gv;
                        let wr = &wd[j * d..][..d];
                        let dwr = &mut dw[j * d..][..d];
                        for t in 0..d {
                            dxr[t] += gv * wr[t];
                            dwr[t] += gv * xr[t];
                        }
                    }
                }
                add_into(&mut grads[x.0], dx);
                add_into(&mut grads[w.0], dw);
                add_into(&mut grads[b.0], db);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &label) in labels.iter().enumerate() {
                    dz[i * k + label] -= scale;
                }
                add_into(&mut grads[logits.0], dz);
            }
            Op::Sum { x } => {
                let len = self.value(*x).len();
                add_into(&mut grads[x.0], vec![g[0]; len]);
            }
        }
    }
}
