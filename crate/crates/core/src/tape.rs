//! Reverse-mode differentiation over a recorded op tape.
//!
//! Each op appends a node holding its output value and whatever it saved for
//! the backward pass. [`Tape::backward`] walks the nodes in exact reverse
//! order of recording and accumulates vector-Jacobian products into the
//! inputs.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::rsa::PartitionSpec;
use crate::tensor::{strides, DType, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Running statistics of a batch-norm layer. Scale and shift are tape values.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Fraction of the old running value kept on each update.
    pub momentum: f64,
    pub eps: f64,
}

impl BnRunning {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BnRunning {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        batch: usize,
        cout: usize,
        // Empty for pointwise convolutions, which read the input directly.
        cols: Vec<Vec<f64>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
        outer: usize,
        channels: usize,
        inner: usize,
    },
    RegionPool {
        x: Var,
        spec: PartitionSpec,
    },
    Concat {
        xs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBcast {
        x: Var,
        y: Var,
        map: Vec<usize>,
    },
    MulBcast {
        x: Var,
        y: Var,
        map: Vec<usize>,
    },
    ScaleVar {
        x: Var,
        s: Var,
    },
    ScaleConst {
        x: Var,
        c: f64,
    },
    AddConst {
        x: Var,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum {
        x: Var,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        outer: usize,
        classes: usize,
        inner: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Softmax { .. } => "softmax",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::RegionPool { .. } => "region_pool",
            Op::Concat { .. } => "concat",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::AddBcast { .. } => "add_bcast",
            Op::MulBcast { .. } => "mul_bcast",
            Op::ScaleVar { .. } => "scale",
            Op::ScaleConst { .. } => "scale_const",
            Op::AddConst { .. } => "add_const",
            Op::Gather { .. } => "gather",
            Op::Reshape { .. } => "reshape",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Sum { .. } => "sum",
            Op::Upsample { .. } => "upsample",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed ops.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not reach the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.dims(), like.dtype()).expect("valid dims"))
    }

    /// Nodes in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[Var] {
        &self.visited
    }
}

fn same_dtype(a: &Tensor, b: &Tensor, op: &str) -> Result<DType> {
    if a.dtype() != b.dtype() {
        return Err(Error::shape(format!(
            "{op}: dtype mismatch {} vs {}",
            a.dtype(),
            b.dtype()
        )));
    }
    Ok(a.dtype())
}

/// For each flat index of `xdims`, the flat index into a broadcast operand `ydims`.
fn broadcast_map(xdims: &[usize], ydims: &[usize]) -> Result<Vec<usize>> {
    if xdims.len() != ydims.len()
        || xdims.iter().zip(ydims).any(|(&x, &y)| y != x && y != 1)
    {
        return Err(Error::shape(format!(
            "cannot broadcast {ydims:?} onto {xdims:?}"
        )));
    }
    let ys = strides(ydims);
    let eff: Vec<usize> = ydims
        .iter()
        .zip(&ys)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    Ok(index_map(xdims, &eff))
}

/// Walks `dims` in row-major order, emitting Σ idx[a]·src_strides[a].
fn index_map(dims: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let n: usize = dims.iter().product();
    let mut out = Vec::with_capacity(n);
    let rank = dims.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(offset);
        for a in (0..rank).rev() {
            idx[a] += 1;
            offset += src_strides[a];
            if idx[a] < dims[a] {
                break;
            }
            offset -= src_strides[a] * dims[a];
            idx[a] = 0;
        }
    }
    out
}

fn rank_is(t: &Tensor, rank: usize, op: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(format!(
            "{op}: expected rank {rank}, got {:?}",
            t.dims()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Hash of which ReLU inputs are positive. Two evaluations of the same
    /// graph with equal signatures ran on the same linear piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| h = (h ^ v).wrapping_mul(0x0100_0000_01b3);
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                for (i, &v) in self.nodes[x.0].value.data().iter().enumerate() {
                    if v > 0.0 {
                        mix(i as u64);
                    }
                }
                mix(u64::MAX);
            }
        }
        h
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        rank_is(ta, 2, "matmul")?;
        rank_is(tb, 2, "matmul")?;
        let dtype = same_dtype(ta, tb, "matmul")?;
        let (m, k) = (ta.dims()[0], ta.dims()[1]);
        let (k2, n) = (tb.dims()[0], tb.dims()[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner dims differ, {:?} x {:?}",
                ta.dims(),
                tb.dims()
            )));
        }
        let c = kernels::matmul(ta.data(), tb.data(), m, k, n);
        Ok(self.push(
            Tensor::from_op(vec![m, n], c, dtype),
            Op::MatMul { a, b, m, k, n },
        ))
    }

    /// Batched product of rank-3 operands `[B,m,k] × [B,k,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        rank_is(ta, 3, "bmm")?;
        rank_is(tb, 3, "bmm")?;
        let dtype = same_dtype(ta, tb, "bmm")?;
        let (batch, m, k) = (ta.dims()[0], ta.dims()[1], ta.dims()[2]);
        if tb.dims()[0] != batch || tb.dims()[1] != k {
            return Err(Error::shape(format!(
                "bmm: incompatible {:?} x {:?}",
                ta.dims(),
                tb.dims()
            )));
        }
        let n = tb.dims()[2];
        let mut out = Vec::with_capacity(batch * m * n);
        for bi in 0..batch {
            out.extend(kernels::matmul(
                &ta.data()[bi * m * k..(bi + 1) * m * k],
                &tb.data()[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        Ok(self.push(
            Tensor::from_op(vec![batch, m, n], out, dtype),
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape(format!(
                "softmax: axis {axis} out of range for {:?}",
                t.dims()
            )));
        }
        let (outer, len, inner) = kernels::axis_split(t.dims(), axis);
        let y = kernels::softmax(t.data(), outer, len, inner);
        let value = Tensor::from_op(t.dims().to_vec(), y, t.dtype());
        Ok(self.push(value, Op::Softmax {
            x,
            outer,
            len,
            inner,
        }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x);
        match kind {
            Activation::Relu => {
                let y = t.data().iter().map(|&v| v.max(0.0)).collect();
                let value = Tensor::from_op(t.dims().to_vec(), y, t.dtype());
                self.push(value, Op::Relu { x })
            }
            Activation::Sigmoid => {
                let y = t.data().iter().map(|&v| kernels::sigmoid(v)).collect();
                let value = Tensor::from_op(t.dims().to_vec(), y, t.dtype());
                self.push(value, Op::Sigmoid { x })
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Cross-correlation of `[B,Cin,H,W]` with `[Cout,Cin,kh,kw]`, kernels 1×1 or 3×3.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        rank_is(tx, 4, "conv2d input")?;
        rank_is(tw, 4, "conv2d weight")?;
        let dtype = same_dtype(tx, tw, "conv2d")?;
        let [batch, cin, h, wd] = [tx.dims()[0], tx.dims()[1], tx.dims()[2], tx.dims()[3]];
        let [cout, wcin, kh, kw] = [tw.dims()[0], tw.dims()[1], tw.dims()[2], tw.dims()[3]];
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: weight expects {wcin} input channels, input has {cin}"
            )));
        }
        if !matches!(kh, 1 | 3) || !matches!(kw, 1 | 3) {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} unsupported, use 1x1 or 3x3"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d: {h}x{wd} input incompatible with kernel {kh}x{kw}, stride {stride}, pad {pad}"
            )));
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let rows = geom.col_rows();
        let plane = geom.col_cols();
        let img = cin * h * wd;
        let mut out = Vec::with_capacity(batch * cout * plane);
        let mut saved = Vec::new();
        for b in 0..batch {
            let xb = &tx.data()[b * img..(b + 1) * img];
            if geom.is_pointwise() {
                out.extend(kernels::matmul(tw.data(), xb, cout, rows, plane));
            } else {
                let cols = kernels::im2col(xb, &geom);
                out.extend(kernels::matmul(tw.data(), &cols, cout, rows, plane));
                saved.push(cols);
            }
        }
        let value = Tensor::from_op(vec![batch, cout, geom.ho, geom.wo], out, dtype);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                geom,
                batch,
                cout,
                cols: saved,
            },
        ))
    }

    /// Batch normalization over channel axis 1 of a rank-2..4 tensor.
    ///
    /// Training mode normalizes with batch statistics and updates `running`;
    /// evaluation mode normalizes with the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut BnRunning,
        training: bool,
    ) -> Result<Var> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(Error::shape("batchnorm needs a channel axis"));
        }
        let channels = t.dims()[1];
        let outer = t.dims()[0];
        let inner: usize = t.dims()[2..].iter().product();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.len() != channels || tb.len() != channels || running.mean.len() != channels {
            return Err(Error::shape(format!(
                "batchnorm: state has {} channels, input has {channels}",
                running.mean.len()
            )));
        }
        if running.eps <= 0.0 {
            return Err(Error::usage("batchnorm epsilon must be positive"));
        }
        let m = (outer * inner) as f64;
        let data = t.data();
        let mut inv_std = vec![0.0; channels];
        let mut xhat = vec![0.0; data.len()];
        let mut y = vec![0.0; data.len()];
        for c in 0..channels {
            let (mean, var) = if training {
                let mut s = 0.0;
                for o in 0..outer {
                    let base = (o * channels + c) * inner;
                    s += data[base..base + inner].iter().sum::<f64>();
                }
                let mean = s / m;
                let mut sq = 0.0;
                for o in 0..outer {
                    let base = (o * channels + c) * inner;
                    sq += data[base..base + inner]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                let var = sq / m;
                let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
                let keep = running.momentum;
                running.mean[c] = keep * running.mean[c] + (1.0 - keep) * mean;
                running.var[c] = keep * running.var[c] + (1.0 - keep) * unbiased;
                (mean, var)
            } else {
                (running.mean[c], running.var[c].max(0.0))
            };
            let is = 1.0 / (var + running.eps).sqrt();
            inv_std[c] = is;
            let (g, bsh) = (tg.data()[c], tb.data()[c]);
            for o in 0..outer {
                let base = (o * channels + c) * inner;
                for i in base..base + inner {
                    let xh = (data[i] - mean) * is;
                    xhat[i] = xh;
                    y[i] = g * xh + bsh;
                }
            }
        }
        let value = Tensor::from_op(t.dims().to_vec(), y, t.dtype());
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
                outer,
                channels,
                inner,
            },
        ))
    }

    /// Per-region spatial means: `[B,C,H,W] → [B,C,G_h·G_w]`.
    pub fn region_pool(&mut self, x: Var, spec: PartitionSpec) -> Result<Var> {
        let t = self.value(x);
        rank_is(t, 4, "region_pool")?;
        let [b, c, h, w] = [t.dims()[0], t.dims()[1], t.dims()[2], t.dims()[3]];
        spec.check(h, w)?;
        let g = spec.regions();
        let area = spec.region_size() as f64;
        let mut out = vec![0.0; b * c * g];
        let data = t.data();
        for bc in 0..b * c {
            let plane = &data[bc * h * w..(bc + 1) * h * w];
            for gy in 0..spec.gh {
                for gx in 0..spec.gw {
                    let mut s = 0.0;
                    for py in 0..spec.ph {
                        let row = (gy * spec.ph + py) * w + gx * spec.pw;
                        s += plane[row..row + spec.pw].iter().sum::<f64>();
                    }
                    out[bc * g + gy * spec.gw + gx] = s / area;
                }
            }
        }
        let value = Tensor::from_op(vec![b, c, g], out, t.dtype());
        Ok(self.push(value, Op::RegionPool { x, spec }))
    }

    /// Spatial mean per channel: `[B,C,H,W] → [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        rank_is(t, 4, "global_avg_pool")?;
        let [b, c, h, w] = [t.dims()[0], t.dims()[1], t.dims()[2], t.dims()[3]];
        let pooled = self.region_pool(x, PartitionSpec::new(1, 1, h, w))?;
        self.reshape(pooled, &[b, c])
    }

    /// Stacks `[B,Ci,H,W]` inputs along the channel axis, in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let t0 = self.value(*first);
        rank_is(t0, 4, "concat")?;
        let (b, h, w, dtype) = (t0.dims()[0], t0.dims()[2], t0.dims()[3], t0.dtype());
        let mut total = 0;
        for &v in xs {
            let t = self.value(v);
            rank_is(t, 4, "concat")?;
            if t.dims()[0] != b || t.dims()[2] != h || t.dims()[3] != w || t.dtype() != dtype {
                return Err(Error::shape(format!(
                    "concat: {:?} incompatible with {:?}",
                    t.dims(),
                    t0.dims()
                )));
            }
            total += t.dims()[1];
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for &v in xs {
                let t = self.value(v);
                let ci = t.dims()[1];
                out.extend_from_slice(&t.data()[bi * ci * plane..(bi + 1) * ci * plane]);
            }
        }
        let value = Tensor::from_op(vec![b, total, h, w], out, dtype);
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<DType> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                ta.dims(),
                tb.dims()
            )));
        }
        same_dtype(ta, tb, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let dtype = self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let y = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_op(ta.dims().to_vec(), y, dtype);
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dtype = self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let y = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_op(ta.dims().to_vec(), y, dtype);
        Ok(self.push(value, Op::Mul { a, b }))
    }

    /// `x + y` where `y` has the rank of `x` and extent 1 on broadcast axes.
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        let dtype = same_dtype(tx, ty, "add_bcast")?;
        let map = broadcast_map(tx.dims(), ty.dims())?;
        let out = tx
            .data()
            .iter()
            .zip(&map)
            .map(|(v, &j)| v + ty.data()[j])
            .collect();
        let value = Tensor::from_op(tx.dims().to_vec(), out, dtype);
        Ok(self.push(value, Op::AddBcast { x, y, map }))
    }

    /// `x ⊙ y` where `y` has the rank of `x` and extent 1 on broadcast axes.
    pub fn mul_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        let dtype = same_dtype(tx, ty, "mul_bcast")?;
        let map = broadcast_map(tx.dims(), ty.dims())?;
        let out = tx
            .data()
            .iter()
            .zip(&map)
            .map(|(v, &j)| v * ty.data()[j])
            .collect();
        let value = Tensor::from_op(tx.dims().to_vec(), out, dtype);
        Ok(self.push(value, Op::MulBcast { x, y, map }))
    }

    /// Multiplies `x` by the single-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.len() != 1 {
            return Err(Error::shape(format!(
                "scale factor must have one element, got {:?}",
                ts.dims()
            )));
        }
        let dtype = same_dtype(tx, ts, "scale")?;
        let f = ts.item();
        let y = tx.data().iter().map(|v| v * f).collect();
        let value = Tensor::from_op(tx.dims().to_vec(), y, dtype);
        Ok(self.push(value, Op::ScaleVar { x, s }))
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let y = tx.data().iter().map(|v| v * c).collect();
        let value = Tensor::from_op(tx.dims().to_vec(), y, tx.dtype());
        self.push(value, Op::ScaleConst { x, c })
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let y = tx.data().iter().map(|v| v + c).collect();
        let value = Tensor::from_op(tx.dims().to_vec(), y, tx.dtype());
        self.push(value, Op::AddConst { x })
    }

    /// `out[i] = x[index[i]]`, reshaped to `dims`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, dims: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let n = crate::tensor::check_dims(dims)?;
        if n != index.len() || index.iter().any(|&i| i >= tx.len()) {
            return Err(Error::shape("gather: index map inconsistent with shapes"));
        }
        let y = index.iter().map(|&i| tx.data()[i]).collect();
        let value = Tensor::from_op(dims.to_vec(), y, tx.dtype());
        Ok(self.push(value, Op::Gather { x, index }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        let mut seen = vec![false; dims.len()];
        if axes.len() != dims.len() || axes.iter().any(|&a| a >= dims.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!(
                "permute: {axes:?} is not a permutation of rank {}",
                dims.len()
            )));
        }
        let src = strides(&dims);
        let out_dims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
        let out_strides: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
        let index = index_map(&out_dims, &out_strides);
        self.gather(x, index, &out_dims)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(dims)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Mean over `axis`, which is removed from the output dims.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || t.rank() < 2 {
            return Err(Error::shape(format!(
                "mean_axis: axis {axis} invalid for {:?}",
                t.dims()
            )));
        }
        let (outer, len, inner) = kernels::axis_split(t.dims(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &t.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in &mut out {
            *v /= len as f64;
        }
        let mut dims = t.dims().to_vec();
        dims.remove(axis);
        let value = Tensor::from_op(dims, out, t.dtype());
        Ok(self.push(value, Op::MeanAxis {
            x,
            outer,
            len,
            inner,
        }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::from_op(vec![1], vec![t.sum()], t.dtype());
        self.push(value, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale_const(s, 1.0 / n)
    }

    /// Nearest-neighbour upsampling of a `[B,C,H,W]` map by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let t = self.value(x);
        rank_is(t, 4, "upsample")?;
        if factor == 0 {
            return Err(Error::shape("upsample factor must be positive"));
        }
        let [b, c, h, w] = [t.dims()[0], t.dims()[1], t.dims()[2], t.dims()[3]];
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(b * c * ho * wo);
        for bc in 0..b * c {
            let plane = &t.data()[bc * h * w..(bc + 1) * h * w];
            for y in 0..ho {
                let row = &plane[(y / factor) * w..(y / factor + 1) * w];
                for xo in 0..wo {
                    out.push(row[xo / factor]);
                }
            }
        }
        let value = Tensor::from_op(vec![b, c, ho, wo], out, t.dtype());
        Ok(self.push(value, Op::Upsample { x, factor }))
    }

    /// Mean negative log-likelihood of `labels` under softmax over axis 1 of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() < 2 {
            return Err(Error::shape("cross_entropy: logits need a class axis"));
        }
        let (outer, classes, inner) = kernels::axis_split(t.dims(), 1);
        if labels.len() != outer * inner {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for logits {:?}",
                labels.len(),
                t.dims()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let probs = kernels::softmax(t.data(), outer, classes, inner);
        let mut total = 0.0;
        for o in 0..outer {
            for i in 0..inner {
                let k = labels[o * inner + i];
                // log-softmax directly from logits keeps peaked cases accurate
                let at = |c: usize| t.data()[(o * classes + c) * inner + i];
                let max = (0..classes).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..classes).map(|c| (at(c) - max).exp()).sum::<f64>().ln();
                total += lse - at(k);
            }
        }
        let loss = total / (outer * inner) as f64;
        let value = Tensor::from_op(vec![1], vec![loss], t.dtype());
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                outer,
                classes,
                inner,
            },
        ))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                lt.dims()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = Vec::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            visited.push(Var(id));
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| {
                    let v = &self.nodes[i].value;
                    Tensor::from_op(v.dims().to_vec(), g, v.dtype())
                })
            })
            .collect();
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (ta, tb) = (self.value(a), self.value(b));
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                let da = kernels::matmul_nt(g, tb.data(), m, n, k);
                acc(a, &mut |s| add_into(s, &da));
                acc(b, &mut |s| kernels::matmul_tn_acc(ta.data(), g, m, k, n, s));
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (ta, tb) = (self.value(a), self.value(b));
                acc(a, &mut |s| {
                    for bi in 0..batch {
                        let da = kernels::matmul_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &tb.data()[bi * k * n..(bi + 1) * k * n],
                            m,
                            n,
                            k,
                        );
                        add_into(&mut s[bi * m * k..(bi + 1) * m * k], &da);
                    }
                });
                acc(b, &mut |s| {
                    for bi in 0..batch {
                        kernels::matmul_tn_acc(
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut s[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                });
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => acc(x, &mut |s| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..len {
                            s[at(k)] += out[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            }),
            &Op::Relu { x } => acc(x, &mut |s| {
                for ((d, gv), y) in s.iter_mut().zip(g).zip(out) {
                    if *y > 0.0 {
                        *d += gv;
                    }
                }
            }),
            &Op::Sigmoid { x } => acc(x, &mut |s| {
                for ((d, gv), y) in s.iter_mut().zip(g).zip(out) {
                    *d += gv * y * (1.0 - y);
                }
            }),
            Op::Conv2d {
                x,
                w,
                geom,
                batch,
                cout,
                cols,
            } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let rows = geom.col_rows();
                let plane = geom.col_cols();
                let img = geom.cin * geom.h * geom.w;
                let oimg = cout * plane;
                acc(*w, &mut |s| {
                    for b in 0..*batch {
                        let gb = &g[b * oimg..(b + 1) * oimg];
                        let cb: &[f64] = if geom.is_pointwise() {
                            &tx.data()[b * img..(b + 1) * img]
                        } else {
                            &cols[b]
                        };
                        let dw = kernels::matmul_nt(gb, cb, *cout, plane, rows);
                        add_into(s, &dw);
                    }
                });
                acc(*x, &mut |s| {
                    for b in 0..*batch {
                        let gb = &g[b * oimg..(b + 1) * oimg];
                        let dst = &mut s[b * img..(b + 1) * img];
                        if geom.is_pointwise() {
                            kernels::matmul_tn_acc(tw.data(), gb, *cout, rows, plane, dst);
                        } else {
                            let mut dcols = vec![0.0; rows * plane];
                            kernels::matmul_tn_acc(tw.data(), gb, *cout, rows, plane, &mut dcols);
                            kernels::col2im_acc(&dcols, geom, dst);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
                outer,
                channels,
                inner,
            } => {
                let tg = self.value(*gamma);
                let (outer, channels, inner) = (*outer, *channels, *inner);
                let m = (outer * inner) as f64;
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                for c in 0..channels {
                    for o in 0..outer {
                        let base = (o * channels + c) * inner;
                        for i in base..base + inner {
                            dgamma[c] += g[i] * xhat[i];
                            dbeta[c] += g[i];
                        }
                    }
                }
                acc(*gamma, &mut |s| add_into(s, &dgamma));
                acc(*beta, &mut |s| add_into(s, &dbeta));
                acc(*x, &mut |s| {
                    for c in 0..channels {
                        let gc = tg.data()[c];
                        let is = inv_std[c];
                        if *training {
                            // dγ/dβ sums equal Σ dx̂·x̂ / γ and Σ dx̂ / γ
                            let sum_dxh = dbeta[c] * gc;
                            let sum_dxh_xh = dgamma[c] * gc;
                            for o in 0..outer {
                                let base = (o * channels + c) * inner;
                                for i in base..base + inner {
                                    let dxh = g[i] * gc;
                                    s[i] += is / m * (m * dxh - sum_dxh - xhat[i] * sum_dxh_xh);
                                }
                            }
                        } else {
                            for o in 0..outer {
                                let base = (o * channels + c) * inner;
                                for i in base..base + inner {
                                    s[i] += g[i] * gc * is;
                                }
                            }
                        }
                    }
                });
            }
            &Op::RegionPool { x, spec } => {
                let t = self.value(x);
                let (h, w) = (t.dims()[2], t.dims()[3]);
                let bc = t.dims()[0] * t.dims()[1];
                let gcount = spec.regions();
                let area = spec.region_size() as f64;
                acc(x, &mut |s| {
                    for p in 0..bc {
                        for gy in 0..spec.gh {
                            for gx in 0..spec.gw {
                                let gv = g[p * gcount + gy * spec.gw + gx] / area;
                                for py in 0..spec.ph {
                                    let row = p * h * w + (gy * spec.ph + py) * w + gx * spec.pw;
                                    for d in &mut s[row..row + spec.pw] {
                                        *d += gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Concat { xs } => {
                let b = node.value.dims()[0];
                let total = node.value.dims()[1];
                let plane = node.value.dims()[2] * node.value.dims()[3];
                let mut offset = 0;
                for &v in xs {
                    let ci = self.dims(v)[1];
                    acc(v, &mut |s| {
                        for bi in 0..b {
                            let src = &g[(bi * total + offset) * plane..(bi * total + offset + ci) * plane];
                            add_into(&mut s[bi * ci * plane..(bi + 1) * ci * plane], src);
                        }
                    });
                    offset += ci;
                }
            }
            &Op::Add { a, b } => {
                acc(a, &mut |s| add_into(s, g));
                acc(b, &mut |s| add_into(s, g));
            }
            &Op::Mul { a, b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                acc(a, &mut |s| {
                    for ((d, gv), y) in s.iter_mut().zip(g).zip(tb.data()) {
                        *d += gv * y;
                    }
                });
                acc(b, &mut |s| {
                    for ((d, gv), y) in s.iter_mut().zip(g).zip(ta.data()) {
                        *d += gv * y;
                    }
                });
            }
            Op::AddBcast { x, y, map } => {
                acc(*x, &mut |s| add_into(s, g));
                acc(*y, &mut |s| {
                    for (gv, &j) in g.iter().zip(map) {
                        s[j] += gv;
                    }
                });
            }
            Op::MulBcast { x, y, map } => {
                let (tx, ty) = (self.value(*x), self.value(*y));
                acc(*x, &mut |s| {
                    for ((d, gv), &j) in s.iter_mut().zip(g).zip(map) {
                        *d += gv * ty.data()[j];
                    }
                });
                acc(*y, &mut |s| {
                    for ((gv, xv), &j) in g.iter().zip(tx.data()).zip(map) {
                        s[j] += gv * xv;
                    }
                });
            }
            &Op::ScaleVar { x, s: sv } => {
                let (tx, ts) = (self.value(x), self.value(sv));
                let f = ts.item();
                acc(x, &mut |s| {
                    for (d, gv) in s.iter_mut().zip(g) {
                        *d += gv * f;
                    }
                });
                let dot: f64 = g.iter().zip(tx.data()).map(|(a, b)| a * b).sum();
                acc(sv, &mut |s| s[0] += dot);
            }
            &Op::ScaleConst { x, c } => acc(x, &mut |s| {
                for (d, gv) in s.iter_mut().zip(g) {
                    *d += gv * c;
                }
            }),
            &Op::AddConst { x } | &Op::Reshape { x } => acc(x, &mut |s| add_into(s, g)),
            Op::Gather { x, index } => acc(*x, &mut |s| {
                for (gv, &i) in g.iter().zip(index) {
                    s[i] += gv;
                }
            }),
            &Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            } => acc(x, &mut |s| {
                let scale = 1.0 / len as f64;
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for k in 0..len {
                        let dst = &mut s[(o * len + k) * inner..(o * len + k + 1) * inner];
                        for (d, gv) in dst.iter_mut().zip(src) {
                            *d += gv * scale;
                        }
                    }
                }
            }),
            &Op::Sum { x } => acc(x, &mut |s| {
                for d in s.iter_mut() {
                    *d += g[0];
                }
            }),
            &Op::Upsample { x, factor } => {
                let [_, _, h, w] = [
                    self.dims(x)[0],
                    self.dims(x)[1],
                    self.dims(x)[2],
                    self.dims(x)[3],
                ];
                let (ho, wo) = (h * factor, w * factor);
                let bc = self.dims(x)[0] * self.dims(x)[1];
                acc(x, &mut |s| {
                    for p in 0..bc {
                        for y in 0..ho {
                            for xo in 0..wo {
                                s[p * h * w + (y / factor) * w + xo / factor] +=
                                    g[p * ho * wo + y * wo + xo];
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                outer,
                classes,
                inner,
            } => {
                let scale = g[0] / (outer * inner) as f64;
                acc(*logits, &mut |s| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let k = labels[o * inner + i];
                            for c in 0..*classes {
                                let at = (o * classes + c) * inner + i;
                                let target = if c == k { 1.0 } else { 0.0 };
                                s[at] += scale * (probs[at] - target);
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(dims, data.to_vec())
    }

    #[test]
    fn matmul_small_cases() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let p = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(t(&[2, 3], &[0.0; 6]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
        let c = tape.leaf(Tensor::zeros(&[3, 2], DType::F32).unwrap());
        assert!(matches!(tape.matmul(a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.leaf(t(&[2], &[1f64.ln(), 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);

        let x = tape.leaf(t(&[2], &[1000.0, 1000.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn activations() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[-1.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let z = tape.leaf(t(&[3], &[0.0, 500.0, -500.0]));
        let s = tape.sigmoid(z);
        let v = tape.value(s).data();
        assert_eq!(v[0], 0.5);
        assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn conv_identity_1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng).unwrap();
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(t(&[3, 3, 1, 1], &w));
        let y = tape.conv2d(xv, wv, 1, 0).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn conv_ones_kernel_counts_neighbours() {
        let mut img = vec![0.0; 9];
        img[4] = 1.0;
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3, 3], &img));
        let w = tape.leaf(t(&[1, 1, 3, 3], &[1.0; 9]));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        // the centre pixel lies in every 3×3 window of a 3×3 image
        assert_eq!(tape.value(y).data(), &[1.0; 9]);

        let mut img = vec![0.0; 9];
        img[0] = 1.0;
        let x = tape.leaf(t(&[1, 1, 3, 3], &img));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn conv_geometry_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4], DType::F64).unwrap());
        let w5 = tape.leaf(Tensor::zeros(&[1, 2, 5, 5], DType::F64).unwrap());
        assert!(matches!(tape.conv2d(x, w5, 1, 2), Err(Error::Shape(_))));
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3], DType::F64).unwrap());
        assert!(matches!(tape.conv2d(x, w, 1, 1), Err(Error::Shape(_))));
        let tiny = tape.leaf(Tensor::zeros(&[1, 2, 1, 1], DType::F64).unwrap());
        let w = tape.leaf(Tensor::zeros(&[1, 2, 3, 3], DType::F64).unwrap());
        assert!(matches!(tape.conv2d(tiny, w, 1, 0), Err(Error::Shape(_))));
        let y = tape.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(tape.dims(y), &[1, 1, 2, 2]);
    }

    fn bn_leaves(tape: &mut Tape, c: usize, g: f64, b: f64) -> (Var, Var) {
        let gv = tape.leaf(Tensor::full(&[c], g, DType::F64).unwrap());
        let bv = tape.leaf(Tensor::full(&[c], b, DType::F64).unwrap());
        (gv, bv)
    }

    #[test]
    fn batchnorm_constant_input_gives_shift() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 2, 3, 3], 4.2, DType::F64).unwrap());
        let (g, b) = bn_leaves(&mut tape, 2, 1.7, -0.3);
        let mut run = BnRunning::new(2);
        let y = tape.batch_norm(x, g, b, &mut run, true).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == -0.3));
        // running stats moved toward the batch statistics
        assert!((run.mean[0] - 0.1 * 4.2).abs() < 1e-12);
        assert!((run.var[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_training_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut raw = Tensor::randn(&[3, 4, 5, 5], 2.5, &mut rng).unwrap();
        raw.map_inplace(|v| v + 1.5);
        let mut tape = Tape::new();
        let x = tape.leaf(raw);
        let (g, b) = bn_leaves(&mut tape, 4, 1.0, 0.0);
        let mut run = BnRunning::new(4);
        let y = tape.batch_norm(x, g, b, &mut run, true).unwrap();
        let out = tape.value(y);
        for c in 0..4 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|o| {
                    let base = (o * 4 + c) * 25;
                    out.data()[base..base + 25].to_vec()
                })
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5, "mean {m}");
            // epsilon shrinks the variance by var/(var+eps)
            assert!((v - 1.0).abs() < 1e-5, "var {v}");
        }
    }

    #[test]
    fn batchnorm_standardized_input_passes_through() {
        // two values ±1 per channel have batch mean 0 and biased variance 1
        let data = vec![1.0, -1.0, -1.0, 1.0];
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &data));
        let (g, b) = bn_leaves(&mut tape, 2, 1.0, 0.0);
        let mut run = BnRunning::new(2);
        let y = tape.batch_norm(x, g, b, &mut run, true).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(&data) {
            // eps shifts a unit-variance input by 1 - 1/sqrt(1 + eps) ≈ 5e-6
            let expected = i / (1.0 + BnRunning::DEFAULT_EPS).sqrt();
            assert!((o - expected).abs() < 1e-12);
            assert!((o - i).abs() < 6e-6);
        }
        // eval mode with running stats (0,1) is also a near-identity
        let run_eval = &mut BnRunning::new(2);
        let y = tape.batch_norm(x, g, b, run_eval, false).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(&data) {
            assert!((o - i).abs() < 1e-5);
        }
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).data(), &[2.5]);
        assert_eq!(tape.dims(p), &[1, 1]);

        let c = tape.leaf(Tensor::full(&[1, 2, 3, 3], 7.0, DType::F64).unwrap());
        let p = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(p).data(), &[7.0, 7.0]);

        let mut q = vec![0.0; 16];
        for y in 0..4 {
            for x in 0..4 {
                q[y * 4 + x] = [10.0, 20.0, 30.0, 40.0][(y / 2) * 2 + x / 2];
            }
        }
        let x = tape.leaf(t(&[1, 1, 4, 4], &q));
        let r = tape.region_pool(x, PartitionSpec::new(2, 2, 2, 2)).unwrap();
        assert_eq!(tape.value(r).data(), &[10.0, 20.0, 30.0, 40.0]);
        assert!(matches!(
            tape.region_pool(x, PartitionSpec::new(3, 1, 1, 4)),
            Err(Error::Partition(_))
        ));
    }

    #[test]
    fn concat_stacks_in_order() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[1, 1, 1, 2], &[3.0, 4.0]));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.dims(c), &[1, 2, 1, 2]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let single = tape.concat_channels(&[a]).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
        let bad = tape.leaf(t(&[1, 1, 2, 1], &[0.0, 0.0]));
        assert!(tape.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn permute_transposes() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let y = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.dims(y), &[3, 2]);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(tape.permute(x, &[0, 0]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_label_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 6, 2, 2], DType::F64).unwrap());
        let l = tape.cross_entropy(x, &[0, 1, 2, 5]).unwrap();
        assert!((tape.value(l).item() - 6f64.ln()).abs() < 1e-12);
        assert!(matches!(
            tape.cross_entropy(x, &[0, 1, 2, 6]),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn backward_visits_in_reverse_order() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2], &[3.0, -1.0]));
        let c = tape.mul(a, b).unwrap();
        let d = tape.relu(c);
        let e = tape.add(d, a).unwrap();
        let s = tape.sum(e);
        let grads = tape.backward(s).unwrap();
        let order: Vec<usize> = grads.visit_order().iter().map(|v| v.index()).collect();
        assert!(order.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(order.first(), Some(&s.index()));
        // d/da [relu(a·b) + a] = b·[ab>0] + 1
        assert_eq!(grads.get(a).unwrap().data(), &[4.0, 1.0]);
    }
}
