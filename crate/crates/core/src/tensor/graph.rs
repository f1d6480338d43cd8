use super::kernels::{col2im_add, conv2d_out_size, gemm, im2col, tile_rows, ConvGeom};
use super::{shape_err, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kernel/stride/padding of a 2-D convolution, with the output size the caller
/// expects. The expectation is checked when the op is recorded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (kernel.0 / 2, kernel.1 / 2),
        }
    }

    pub fn stride(mut self, s: (usize, usize)) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: (usize, usize)) -> Self {
        self.padding = p;
        self
    }

    pub fn out_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv2d_out_size(h, self.kernel.0, self.stride.0, self.padding.0)?,
            conv2d_out_size(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        ]
    }
}

/// Max-pooling window. Padded positions never win.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl PoolSpec {
    pub fn out_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv2d_out_size(h, self.kernel.0, self.stride.0, self.padding.0)?,
            conv2d_out_size(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        b: Var,
        axis: usize,
    },
    Relu { a: Var, mask: Vec<bool> },
    Sigmoid(Var),
    Reshape(Var),
    Sum(Var),
    Transpose(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Subsample {
        x: Var,
        stride: (usize, usize),
        offset: (usize, usize),
    },
    RowSoftmax {
        x: Var,
        scale: f64,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(a, _) | Relu { a, .. } | Sigmoid(a) | Reshape(a) | Sum(a) | Transpose(a)
            | GlobalAvgPool(a) => vec![*a],
            AddBias { x, b, .. } => vec![*x, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            BatchNormTrain { x, gamma, beta, .. } | BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            MaxPool2d { x, .. } | Subsample { x, .. } | RowSoftmax { x, .. } => vec![*x],
            Concat { parts, .. } => parts.clone(),
            Bce { p, .. } => vec![*p],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<f64>>,
}

/// A recording of forward computations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    pattern: PatternState,
}

/// Which side of every ReLU and which max-pool input won, in op order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KinkPattern {
    relu: Vec<Vec<bool>>,
    pool: Vec<Vec<usize>>,
}

#[derive(Debug, Default)]
enum PatternState {
    #[default]
    Off,
    Record(KinkPattern),
    Replay {
        pattern: KinkPattern,
        relu_pos: usize,
        pool_pos: usize,
    },
}

impl PatternState {
    fn next_relu(&mut self, len: usize) -> Result<Option<Vec<bool>>> {
        let PatternState::Replay { pattern, relu_pos, .. } = self else {
            return Ok(None);
        };
        let m = pattern
            .relu
            .get(*relu_pos)
            .filter(|m| m.len() == len)
            .ok_or_else(|| shape_err("relu", "replayed pattern does not match the graph"))?
            .clone();
        *relu_pos += 1;
        Ok(Some(m))
    }

    fn next_pool(&mut self, len: usize) -> Result<Option<Vec<usize>>> {
        let PatternState::Replay { pattern, pool_pos, .. } = self else {
            return Ok(None);
        };
        let m = pattern
            .pool
            .get(*pool_pos)
            .filter(|m| m.len() == len)
            .ok_or_else(|| shape_err("max_pool2d", "replayed pattern does not match the graph"))?
            .clone();
        *pool_pos += 1;
        Ok(Some(m))
    }

    fn record_relu(&mut self, mask: &[bool]) {
        if let PatternState::Record(p) = self {
            p.relu.push(mask.to_vec());
        }
    }

    fn record_pool(&mut self, argmax: &[usize]) {
        if let PatternState::Record(p) = self {
            p.pool.push(argmax.to_vec());
        }
    }
}

fn strides_last2(shape: &[usize]) -> (usize, usize, usize) {
    // (batch, rows, cols) of a rank-2 or rank-3 operand
    match shape {
        [r, c] => (1, *r, *c),
        [b, r, c] => (*b, *r, *c),
        _ => (0, 0, 0),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Starts recording the ReLU masks and max-pool winners of later ops.
    pub fn record_pattern(&mut self) {
        self.pattern = PatternState::Record(KinkPattern::default());
    }

    /// Makes later ReLU and max-pool ops reuse `pattern` instead of
    /// comparing their inputs, so the graph is smooth in its leaves.
    pub fn replay_pattern(&mut self, pattern: KinkPattern) {
        self.pattern = PatternState::Replay {
            pattern,
            relu_pos: 0,
            pool_pos: 0,
        };
    }

    /// The recorded pattern, if recording was on.
    pub fn take_pattern(&mut self) -> Option<KinkPattern> {
        match std::mem::take(&mut self.pattern) {
            PatternState::Record(p) => Some(p),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::new(t.shape(), t.data().iter().map(|x| x * c).collect())?;
        self.push(v, Op::Scale(a, c), "scale")
    }

    /// Adds the 1-D `b` along `axis` of `x`, broadcasting over every other axis.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(b) != [shape[axis]] {
            return Err(shape_err(
                "add_bias",
                format!("x {:?}, bias {:?}, axis {axis}", shape, self.shape(b)),
            ));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bias[(i / inner) % n];
        }
        self.push(Tensor::new(&shape, data)?, Op::AddBias { x, b, axis }, "add_bias")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let replay = self.pattern.next_relu(self.value(a).numel())?;
        let t = self.value(a);
        let (data, mask) = match replay {
            Some(mask) => {
                let data = t.data().iter().zip(&mask).map(|(&x, &on)| if on { x } else { 0.0 }).collect();
                (data, mask)
            }
            None => (
                t.data().iter().map(|&x| x.max(0.0)).collect(),
                t.data().iter().map(|&x| x > 0.0).collect(),
            ),
        };
        let v = Tensor::new(t.shape(), data)?;
        self.pattern.record_relu(&mask);
        self.push(v, Op::Relu { a, mask }, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::new(t.shape(), t.data().iter().map(|&x| sigmoid(x)).collect())?;
        self.push(v, Op::Sigmoid(a), "sigmoid")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(v, Op::Reshape(a), "reshape")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (b, r, c) = strides_last2(&shape);
        if b == 0 {
            return Err(shape_err("transpose", format!("{shape:?}")));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for k in 0..b {
            let (s, d) = (&src[k * r * c..(k + 1) * r * c], &mut data[k * r * c..(k + 1) * r * c]);
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = s[i * c + j];
                }
            }
        }
        let mut out_shape = shape.clone();
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        self.push(Tensor::new(&out_shape, data)?, Op::Transpose(a), "transpose")
    }

    /// Matrix product of rank-2 or batched rank-3 operands, optionally
    /// transposing either one. A rank-2 operand is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (ba, ra, ca) = strides_last2(&sa);
        let (bb, rb, cb) = strides_last2(&sb);
        if ba == 0 || bb == 0 {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        let batched_a = sa.len() == 3;
        let batched_b = sb.len() == 3;
        if k != k2 || (batched_a && batched_b && ba != bb) {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?} (ta={ta}, tb={tb})")));
        }
        let batch = ba.max(bb);
        let out_shape: Vec<usize> = if batched_a || batched_b {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let a_st = if ta { (1, ca as isize) } else { (ca as isize, 1) };
            let b_st = if tb { (1, cb as isize) } else { (cb as isize, 1) };
            for i in 0..batch {
                let ao = if batched_a { i * ra * ca } else { 0 };
                let bo = if batched_b { i * rb * cb } else { 0 };
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &va[ao..ao + ra * ca],
                    a_st,
                    &vb[bo..bo + rb * cb],
                    b_st,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        self.push(
            Tensor::new(&out_shape, out)?,
            Op::MatMul { a, b, ta, tb },
            "matmul",
        )
    }

    fn conv_geom(&self, x: Var, spec: &Conv2dSpec) -> Result<(usize, ConvGeom)> {
        let shape = self.shape(x);
        let [n, c, h, w] = shape[..] else {
            return Err(shape_err("conv2d", format!("input {shape:?} is not NCHW")));
        };
        if c != spec.in_channels {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels, spec expects {}", spec.in_channels),
            ));
        }
        let (ho, wo) = spec.out_size(h, w).ok_or_else(|| {
            shape_err("conv2d", format!("kernel {:?} does not fit {h}x{w}", spec.kernel))
        })?;
        Ok((
            n,
            ConvGeom {
                c_in: c,
                h,
                w,
                kh: spec.kernel.0,
                kw: spec.kernel.1,
                sh: spec.stride.0,
                sw: spec.stride.1,
                ph: spec.padding.0,
                pw: spec.padding.1,
                ho,
                wo,
            },
        ))
    }

    /// Cross-correlation over `x[N, C_in, H, W]` with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (n, g) = self.conv_geom(x, &spec)?;
        if self.shape(w) != spec.weight_shape() {
            return Err(shape_err(
                "conv2d",
                format!("weight {:?}, expected {:?}", self.shape(w), spec.weight_shape()),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [spec.out_channels] {
                return Err(shape_err("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let c_out = spec.out_channels;
        let (k, p) = (g.col_rows(), g.col_cols());
        let in_len = g.c_in * g.h * g.w;
        let mut out = vec![0.0; n * c_out * p];
        let step = tile_rows(&g);
        let mut col = vec![0.0; k * step * g.wo];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            for i in 0..n {
                let x_i = &xv[i * in_len..(i + 1) * in_len];
                let dst = &mut out[i * c_out * p..(i + 1) * c_out * p];
                if let Some(bias) = bias {
                    for (o, chunk) in dst.chunks_mut(p).enumerate() {
                        chunk.fill(bias[o]);
                    }
                }
                let beta = if bias.is_some() { 1.0 } else { 0.0 };
                for oy in (0..g.ho).step_by(step) {
                    let rows = oy..(oy + step).min(g.ho);
                    let cols = rows.len() * g.wo;
                    im2col(x_i, &g, rows, &mut col[..k * cols]);
                    // out^T [cols x c_out] = col^T * W^T; the long axis on the
                    // gemm's row side suits its kernel better when c_out is small.
                    gemm(
                        cols,
                        k,
                        c_out,
                        1.0,
                        &col,
                        (1, cols as isize),
                        wv,
                        (1, k as isize),
                        beta,
                        &mut dst[oy * g.wo..],
                        (1, p as isize),
                    );
                }
            }
        }
        let v = Tensor::new(&[n, c_out, g.ho, g.wo], out)?;
        self.push(v, Op::Conv2d { x, w, b, spec }, "conv2d")
    }

    /// Layout helper for channel-wise ops on `[N, C, ...]`.
    fn channel_layout(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(shape_err(op, format!("input {shape:?} has no channel axis")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                op,
                format!(
                    "gamma {:?} / beta {:?} for {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok((n, c, inner))
    }

    /// Batch normalisation over axis 1 of `[N, C, ...]`.
    ///
    /// Train mode normalises with the batch statistics and updates `stats`
    /// (unbiased variance, momentum `stats.momentum`); eval mode uses `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BnMode,
    ) -> Result<Var> {
        let (n, c, inner) = self.channel_layout("batch_norm", x, gamma, beta)?;
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(shape_err("batch_norm", "running stats channel count"));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let shape = self.shape(x).to_vec();
        let m = (n * inner) as f64;
        let mut out = vec![0.0; xv.len()];
        let idx = |i: usize, ch: usize, j: usize| (i * c + ch) * inner + j;
        match mode {
            BnMode::Train => {
                let mut xhat = vec![0.0; xv.len()];
                let mut inv_std = vec![0.0; c];
                for ch in 0..c {
                    let mut sum = 0.0;
                    for i in 0..n {
                        sum += xv[idx(i, ch, 0)..idx(i, ch, 0) + inner].iter().sum::<f64>();
                    }
                    let mean = sum / m;
                    let mut sq = 0.0;
                    for i in 0..n {
                        sq += xv[idx(i, ch, 0)..idx(i, ch, 0) + inner]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    let var = sq / m;
                    let is = 1.0 / (var + stats.eps).sqrt();
                    inv_std[ch] = is;
                    for i in 0..n {
                        for j in 0..inner {
                            let k = idx(i, ch, j);
                            xhat[k] = (xv[k] - mean) * is;
                            out[k] = gv[ch] * xhat[k] + bv[ch];
                        }
                    }
                    let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
                    let mo = stats.momentum;
                    stats.mean[ch] = (1.0 - mo) * stats.mean[ch] + mo * mean;
                    stats.var[ch] = (1.0 - mo) * stats.var[ch] + mo * unbiased;
                }
                self.push(
                    Tensor::new(&shape, out)?,
                    Op::BatchNormTrain {
                        x,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                    },
                    "batch_norm",
                )
            }
            BnMode::Eval => {
                let inv_std: Vec<f64> = stats
                    .var
                    .iter()
                    .map(|v| 1.0 / (v + stats.eps).sqrt())
                    .collect();
                for i in 0..n {
                    for ch in 0..c {
                        for j in 0..inner {
                            let k = idx(i, ch, j);
                            out[k] = (xv[k] - stats.mean[ch]) * inv_std[ch] * gv[ch] + bv[ch];
                        }
                    }
                }
                let mean = stats.mean.clone();
                self.push(
                    Tensor::new(&shape, out)?,
                    Op::BatchNormEval {
                        x,
                        gamma,
                        beta,
                        mean,
                        inv_std,
                    },
                    "batch_norm",
                )
            }
        }
    }

    /// Max pooling over the last two axes of `[N, C, H, W]`.
    pub fn max_pool2d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(shape_err("max_pool2d", format!("input {shape:?} is not NCHW")));
        };
        let (ho, wo) = spec
            .out_size(h, w)
            .ok_or_else(|| shape_err("max_pool2d", format!("window does not fit {h}x{w}")))?;
        if spec.padding.0 >= spec.kernel.0 || spec.padding.1 >= spec.kernel.1 {
            return Err(shape_err("max_pool2d", "padding must be smaller than the window"));
        }
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..spec.kernel.0 {
                        let iy = (oy * spec.stride.0 + ky) as isize - spec.padding.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..spec.kernel.1 {
                            let ix = (ox * spec.stride.1 + kx) as isize - spec.padding.1 as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if xv[i] > best || best_i == usize::MAX {
                                best = xv[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        if let Some(fixed) = self.pattern.next_pool(argmax.len())? {
            argmax = fixed;
            for (o, &i) in out.iter_mut().zip(&argmax) {
                *o = xv[i];
            }
        }
        self.pattern.record_pool(&argmax);
        self.push(
            Tensor::new(&[n, c, ho, wo], out)?,
            Op::MaxPool2d { x, argmax },
            "max_pool2d",
        )
    }

    /// Mean over every axis after the first two: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(shape_err("global_avg_pool", format!("{shape:?}")));
        }
        let inner: usize = shape[2..].iter().product();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        self.push(
            Tensor::new(&shape[..2], out)?,
            Op::GlobalAvgPool(x),
            "global_avg_pool",
        )
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
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
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Strided selection on the last two axes of `[N, C, H, W]`:
    /// `out[.., i, j] = x[.., offset.0 + i*stride.0, offset.1 + j*stride.1]`,
    /// producing `out_hw` positions.
    pub fn subsample(
        &mut self,
        x: Var,
        stride: (usize, usize),
        offset: (usize, usize),
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(shape_err("subsample", format!("input {shape:?} is not NCHW")));
        };
        let (ho, wo) = out_hw;
        if ho == 0
            || wo == 0
            || offset.0 + (ho - 1) * stride.0 >= h
            || offset.1 + (wo - 1) * stride.1 >= w
        {
            return Err(shape_err(
                "subsample",
                format!("{ho}x{wo} at stride {stride:?} offset {offset:?} from {h}x{w}"),
            ));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            for i in 0..ho {
                let row = plane * h * w + (offset.0 + i * stride.0) * w;
                for j in 0..wo {
                    out.push(xv[row + offset.1 + j * stride.1]);
                }
            }
        }
        self.push(
            Tensor::new(&[n, c, ho, wo], out)?,
            Op::Subsample { x, stride, offset },
            "subsample",
        )
    }

    /// `softmax(x_row / scale)` over the last axis, with max subtraction.
    pub fn row_softmax(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0) {
            return Err(shape_err("row_softmax", format!("scale {scale} must be > 0")));
        }
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| shape_err("row_softmax", "scalar input"))?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row, scale);
        }
        self.push(
            Tensor::new(&shape, data)?,
            Op::RowSoftmax { x, scale },
            "row_softmax",
        )
    }

    /// Summed binary cross-entropy of probabilities `p` against `targets`,
    /// with `p` clamped to `[1e-12, 1 - 1e-12]` inside the logs.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let pv = self.value(p).data();
        if pv.len() != targets.len() {
            return Err(shape_err(
                "bce",
                format!("{} predictions vs {} targets", pv.len(), targets.len()),
            ));
        }
        let loss = bce_sum(pv, targets);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            "bce",
        )
    }

    /// Reverse pass from a scalar `loss`, adding into the `grad` of every leaf
    /// created with [`Graph::param`]. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(g) => g.iter_mut().zip(&gout).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(gout),
                }
                continue;
            }
            for input in self.nodes[i].op.inputs() {
                if input.0 >= i {
                    return Err(TensorError::GraphCycle(i));
                }
            }
            let contributions = self.local_grads(i, &gout);
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn local_grads(&self, i: usize, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, gout.to_vec()));
                out.push((*b, gout.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gout.to_vec()));
                out.push((*b, gout.iter().map(|g| -g).collect()));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, gout.iter().zip(val(*b)).map(|(g, y)| g * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, gout.iter().zip(val(*a)).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(a, c) => out.push((*a, gout.iter().map(|g| g * c).collect())),
            Op::AddBias { x, b, axis } => {
                out.push((*x, gout.to_vec()));
                if self.wants(*b) {
                    let shape = node.value.shape();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let n = shape[*axis];
                    let mut gb = vec![0.0; n];
                    for (k, g) in gout.iter().enumerate() {
                        gb[(k / inner) % n] += g;
                    }
                    out.push((*b, gb));
                }
            }
            Op::Relu { a, mask } => out.push((
                *a,
                gout.iter()
                    .zip(mask)
                    .map(|(g, &on)| if on { *g } else { 0.0 })
                    .collect(),
            )),
            Op::Sigmoid(a) => out.push((
                *a,
                gout.iter()
                    .zip(node.value.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect(),
            )),
            Op::Reshape(a) => out.push((*a, gout.to_vec())),
            Op::Sum(a) => out.push((*a, vec![gout[0]; self.nodes[a.0].value.numel()])),
            Op::Transpose(a) => {
                let (b, r, c) = strides_last2(node.value.shape());
                // output is [b, r, c]; input is [b, c, r]
                let mut g = vec![0.0; gout.len()];
                for k in 0..b {
                    for i2 in 0..r {
                        for j in 0..c {
                            g[k * r * c + j * r + i2] = gout[k * r * c + i2 * c + j];
                        }
                    }
                }
                out.push((*a, g));
            }
            Op::MatMul { a, b, ta, tb } => {
                out.extend(self.matmul_grads(*a, *b, *ta, *tb, gout));
            }
            Op::Conv2d { x, w, b, spec } => {
                out.extend(self.conv2d_grads(*x, *w, *b, spec, gout));
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let shape = self.nodes[x.0].value.shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let m = (n * inner) as f64;
                let gv = val(*gamma);
                let mut dx = vec![0.0; gout.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                    for s in 0..n {
                        let base = (s * c + ch) * inner;
                        for j in base..base + inner {
                            sum_g += gout[j];
                            sum_gx += gout[j] * xhat[j];
                        }
                    }
                    dgamma[ch] = sum_gx;
                    dbeta[ch] = sum_g;
                    let k = gv[ch] * inv_std[ch] / m;
                    for s in 0..n {
                        let base = (s * c + ch) * inner;
                        for j in base..base + inner {
                            dx[j] = k * (m * gout[j] - sum_g - xhat[j] * sum_gx);
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let shape = self.nodes[x.0].value.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let gv = val(*gamma);
                let xv = val(*x);
                let mut dx = vec![0.0; gout.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (j, g) in gout.iter().enumerate() {
                    let ch = (j / inner) % c;
                    dx[j] = g * gv[ch] * inv_std[ch];
                    dgamma[ch] += g * (xv[j] - mean[ch]) * inv_std[ch];
                    dbeta[ch] += g;
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for (g, &k) in gout.iter().zip(argmax) {
                    dx[k] += g;
                }
                out.push((*x, dx));
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.nodes[x.0].value.shape();
                let inner: usize = shape[2..].iter().product();
                let mut dx = Vec::with_capacity(inner * gout.len());
                for g in gout {
                    dx.extend(std::iter::repeat_n(g / inner as f64, inner));
                }
                out.push((*x, dx));
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis] * inner;
                    if self.wants(p) {
                        let mut g = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            g.extend_from_slice(&gout[o * total + offset..o * total + offset + len]);
                        }
                        out.push((p, g));
                    }
                    offset += len;
                }
            }
            Op::Subsample { x, stride, offset } => {
                let in_shape = self.nodes[x.0].value.shape();
                let (h, w) = (in_shape[2], in_shape[3]);
                let s = node.value.shape();
                let (planes, ho, wo) = (s[0] * s[1], s[2], s[3]);
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for plane in 0..planes {
                    for i2 in 0..ho {
                        let row = plane * h * w + (offset.0 + i2 * stride.0) * w;
                        for j in 0..wo {
                            dx[row + offset.1 + j * stride.1] += gout[(plane * ho + i2) * wo + j];
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::RowSoftmax { x, scale } => {
                let cols = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx
                    .chunks_mut(cols)
                    .zip(y.chunks(cols))
                    .zip(gout.chunks(cols))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot) / scale;
                    }
                }
                out.push((*x, dx));
            }
            Op::Bce { p, targets } => {
                let g0 = gout[0];
                let dp = val(*p)
                    .iter()
                    .zip(targets)
                    .map(|(&pv, &y)| {
                        let q = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        if q != pv {
                            // clamped: the loss is flat in p here
                            0.0
                        } else {
                            g0 * (-(y / q) + (1.0 - y) / (1.0 - q))
                        }
                    })
                    .collect();
                out.push((*p, dp));
            }
        }
        out
    }

    fn matmul_grads(&self, a: Var, b: Var, ta: bool, tb: bool, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        let (ba, ra, ca) = strides_last2(sa);
        let (bb, rb, cb) = strides_last2(sb);
        let (batched_a, batched_b) = (sa.len() == 3, sb.len() == 3);
        let batch = ba.max(bb);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let n = if tb { rb } else { cb };
        let va = self.nodes[a.0].value.data();
        let vb = self.nodes[b.0].value.data();
        let mut out = Vec::new();
        // op(A) = A or A^T as an m x k view; op(B) likewise k x n.
        let a_st = if ta { (1, ca as isize) } else { (ca as isize, 1) };
        let b_st = if tb { (1, cb as isize) } else { (cb as isize, 1) };
        if self.wants(a) {
            // d op(A) = G op(B)^T  (m x k); write into A's storage layout.
            let mut ga = vec![0.0; va.len()];
            for i in 0..batch {
                let ao = if batched_a { i * ra * ca } else { 0 };
                let bo = if batched_b { i * rb * cb } else { 0 };
                // destination op(A) view strides inside A storage
                let dst_st = if ta { (1, ca as isize) } else { (ca as isize, 1) };
                gemm(
                    m,
                    n,
                    k,
                    1.0,
                    &gout[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                    &vb[bo..bo + rb * cb],
                    (b_st.1, b_st.0),
                    1.0,
                    &mut ga[ao..ao + ra * ca],
                    dst_st,
                );
            }
            out.push((a, ga));
        }
        if self.wants(b) {
            // d op(B) = op(A)^T G  (k x n)
            let mut gb = vec![0.0; vb.len()];
            for i in 0..batch {
                let ao = if batched_a { i * ra * ca } else { 0 };
                let bo = if batched_b { i * rb * cb } else { 0 };
                let dst_st = if tb { (1, cb as isize) } else { (cb as isize, 1) };
                gemm(
                    k,
                    m,
                    n,
                    1.0,
                    &va[ao..ao + ra * ca],
                    (a_st.1, a_st.0),
                    &gout[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                    1.0,
                    &mut gb[bo..bo + rb * cb],
                    dst_st,
                );
            }
            out.push((b, gb));
        }
        out
    }

    fn conv2d_grads(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: &Conv2dSpec,
        gout: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let (n, g) = self.conv_geom(x, spec).expect("validated in forward");
        let c_out = spec.out_channels;
        let (k, p) = (g.col_rows(), g.col_cols());
        let in_len = g.c_in * g.h * g.w;
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut dx = if want_x { vec![0.0; xv.len()] } else { vec![] };
        let mut dw = vec![0.0; wv.len()];
        let step = tile_rows(&g);
        let mut col = vec![0.0; k * step * g.wo];
        for i in 0..n {
            let go = &gout[i * c_out * p..(i + 1) * c_out * p];
            let x_i = &xv[i * in_len..(i + 1) * in_len];
            for oy in (0..g.ho).step_by(step) {
                let rows = oy..(oy + step).min(g.ho);
                let cols = rows.len() * g.wo;
                let go_t = &go[oy * g.wo..];
                if want_w {
                    im2col(x_i, &g, rows.clone(), &mut col[..k * cols]);
                    // dW^T [k x c_out] += col [k x cols] * G^T [cols x c_out]
                    gemm(
                        k,
                        cols,
                        c_out,
                        1.0,
                        &col,
                        (cols as isize, 1),
                        go_t,
                        (1, p as isize),
                        1.0,
                        &mut dw,
                        (1, k as isize),
                    );
                }
                if want_x {
                    // dcol^T [cols x k] = G^T [cols x c_out] * W [c_out x k]
                    gemm(
                        cols,
                        c_out,
                        k,
                        1.0,
                        go_t,
                        (1, p as isize),
                        wv,
                        (k as isize, 1),
                        0.0,
                        &mut col,
                        (1, cols as isize),
                    );
                    col2im_add(&col[..k * cols], &g, rows, &mut dx[i * in_len..(i + 1) * in_len]);
                }
            }
        }
        let mut out = Vec::new();
        if want_x {
            out.push((x, dx));
        }
        if want_w {
            out.push((w, dw));
        }
        if let Some(b) = b {
            let mut db = vec![0.0; c_out];
            for i in 0..n {
                for (o, d) in db.iter_mut().enumerate() {
                    let base = (i * c_out + o) * p;
                    *d += gout[base..base + p].iter().sum::<f64>();
                }
            }
            out.push((b, db));
        }
        out
    }
}

pub(crate) const BCE_EPS: f64 = 1e-12;

pub(crate) fn bce_sum(p: &[f64], targets: &[f64]) -> f64 {
    -p.iter()
        .zip(targets)
        .map(|(&pv, &y)| {
            let q = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
            y * q.ln() + (1.0 - y) * (1.0 - q).ln()
        })
        .sum::<f64>()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / scale).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
