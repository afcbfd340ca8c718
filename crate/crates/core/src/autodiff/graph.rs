//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] simply walks it in reverse.

use std::sync::Arc;

use super::kernels::{col2im, im2col, ConvGeom};
use super::scalar::gemm;
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::resample::SamplePlan;

/// Group-norm variance floor.
pub const NORM_EPS: f64 = 1e-6;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
        x: Var,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Concat {
        xs: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        dims: [usize; 4],
    },
    SoftmaxRows {
        x: Var,
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
        x: Var,
        s: T,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Mse {
        a: Var,
        b: Var,
    },
    SpatialMean {
        x: Var,
    },
    Replicate {
        x: Var,
    },
    Resample {
        src: Var,
        plan: Arc<SamplePlan>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::LeakyRelu { x, .. }
            | Op::Sigmoid { x }
            | Op::Upsample { x, .. }
            | Op::Reshape { x }
            | Op::SoftmaxRows { x }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::SpatialMean { x }
            | Op::Replicate { x } => vec![*x],
            Op::Concat { xs } => xs.clone(),
            Op::BatchMatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Mse { a, b } => vec![*a, *b],
            Op::Resample { src, .. } => vec![*src],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    name: &'static str,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to the leaves that require them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros shaped like `like` when `v` received none.
    pub fn wrt(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    exec: Exec,
    check_finite: bool,
    non_finite: Option<(&'static str, usize)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape4(s: &[usize], what: &str) -> Result<[usize; 4]> {
    match s {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        _ => Err(Error::param(format!("{what}: expected a 4-D tensor, got {s:?}"))),
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph {
            nodes: Vec::new(),
            exec,
            check_finite: false,
            non_finite: None,
        }
    }

    /// Records the first op whose output contains NaN or infinity.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Fails with the provenance of the first non-finite op output, if any
    /// was recorded.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((op, node)) => Err(Error::Numeric { op, node }),
            None => Ok(()),
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    /// Which side of zero every leaky-ReLU input lies on, in tape order.
    /// Two evaluations share one linear piece of the network iff their
    /// patterns are equal.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu { x, .. } = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > T::zero()));
            }
        }
        out
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, name, requires_grad)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.check_finite && self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((name, idx));
        }
        self.nodes.push(Node {
            value,
            op,
            name,
            requires_grad,
        });
        Var(idx)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(t, Op::Leaf, "leaf", requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Cross-correlation of `x [N,Cin,H,W]` with `w [Cout,Cin,kh,kw]` plus
    /// optional bias `b [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, h, wd] = shape4(self.shape(x), "conv2d input")?;
        let [cout, wcin, kh, kw] = shape4(self.shape(w), "conv2d weight")?;
        if wcin != cin {
            return Err(Error::param(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::param("conv2d: stride must be >= 1"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::param("conv2d: kernel larger than padded input"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::param(format!(
                    "conv2d: bias shape {:?} != [{cout}]",
                    self.shape(b)
                )));
            }
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
        let p = geom.out_len();
        let k = geom.patch_len();
        let mut out = vec![T::zero(); n * cout * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            exec::for_each_chunk(self.exec, &mut out, cout * p, |i, out_i| {
                let xi = &xv[i * cin * h * wd..(i + 1) * cin * h * wd];
                if geom.is_pointwise() {
                    gemm(cout, k, p, T::one(), wv, false, xi, false, T::zero(), out_i);
                } else {
                    let mut cols = vec![T::zero(); k * p];
                    im2col(xi, &geom, &mut cols);
                    gemm(cout, k, p, T::one(), wv, false, &cols, false, T::zero(), out_i);
                }
                if let Some(bv) = bv {
                    for (c, row) in out_i.chunks_mut(p).enumerate() {
                        row.iter_mut().for_each(|v| *v = *v + bv[c]);
                    }
                }
            });
        }
        let value = Tensor::new(&[n, cout, geom.ho, geom.wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, "conv2d"))
    }

    /// Group normalization over `x [N,C,...]` with per-channel affine
    /// `gamma`, `beta` of shape `[C]`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::param("group_norm: need at least [N, C]"));
        }
        let (n, c) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::param(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::param("group_norm: affine parameters must have shape [C]"));
        }
        let spatial: usize = shape[2..].iter().product();
        let cpg = c / groups;
        let m = cpg * spatial;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut mean = vec![T::zero(); n * groups];
        let mut rstd = vec![T::zero(); n * groups];
        let mut out = vec![T::zero(); xv.len()];
        let eps = T::of(NORM_EPS);
        let mf = T::of(m as f64);
        for ni in 0..n {
            for gi in 0..groups {
                let base = (ni * c + gi * cpg) * spatial;
                let seg = &xv[base..base + m];
                let mu = seg.iter().copied().sum::<T>() / mf;
                let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / mf;
                let r = T::one() / (var + eps).sqrt();
                mean[ni * groups + gi] = mu;
                rstd[ni * groups + gi] = r;
                for cc in 0..cpg {
                    let ch = gi * cpg + cc;
                    let off = base + cc * spatial;
                    for s in 0..spatial {
                        out[off + s] = (xv[off + s] - mu) * r * gv[ch] + bv[ch];
                    }
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            "group_norm",
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| if v > T::zero() { v } else { v * s }).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(value, Op::LeakyRelu { x, slope: s }, "leaky_relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(value, Op::Sigmoid { x }, "sigmoid")
    }

    /// Nearest-neighbour upsampling of `[N,C,H,W]` by an integer factor.
    pub fn nearest_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = shape4(self.shape(x), "nearest_upsample")?;
        if factor == 0 {
            return Err(Error::param("nearest_upsample: factor must be >= 1"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for (plane, src) in out.chunks_mut(ho * wo).zip(xv.chunks(h * w)) {
            for y in 0..ho {
                for xx in 0..wo {
                    plane[y * wo + xx] = src[(y / factor) * w + xx / factor];
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(value, Op::Upsample { x, factor }, "nearest_upsample"))
    }

    /// Concatenates `[N,Ci,...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::param("concat_channels: empty input"))?)
            .to_vec();
        if first.len() < 2 {
            return Err(Error::param("concat_channels: need at least [N, C]"));
        }
        let n = first[0];
        let rest = &first[2..];
        let mut total_c = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s[0] != n || &s[2..] != rest {
                return Err(Error::param(format!(
                    "concat_channels: shape {s:?} incompatible with {first:?}"
                )));
            }
            total_c += s[1];
        }
        let spatial: usize = rest.iter().product();
        let mut out = Vec::with_capacity(n * total_c * spatial);
        for ni in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                let d = self.value(v).data();
                out.extend_from_slice(&d[ni * c * spatial..(ni + 1) * c * spatial]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }, "concat_channels"))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, "reshape"))
    }

    /// Batched product `op(a) op(b)`: `a` is `[B,M,K]` (`[B,K,M]` when `ta`),
    /// `b` is `[B,K,N]` (`[B,N,K]` when `tb`); the result is `[B,M,N]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::param(format!("bmm: incompatible shapes {sa:?}, {sb:?}")));
        }
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::param(format!("bmm: inner dims {k} != {kb}")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        exec::for_each_chunk(self.exec, &mut out, (m * n).max(1), |i, o| {
            gemm(m, k, n, T::one(), &av[i * m * k..(i + 1) * m * k], ta, &bv[i * k * n..(i + 1) * k * n], tb, T::zero(), o);
        });
        let value = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(
            value,
            Op::BatchMatMul {
                a,
                b,
                ta,
                tb,
                dims: [batch, m, k, n],
            },
            "bmm",
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().ok_or_else(|| Error::param("softmax_rows: scalar input"))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(last) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z = z + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::SoftmaxRows { x }, "softmax_rows"))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::param(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add { a, b }, "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub { a, b }, "sub"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul { a, b }, "mul"))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * s).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(value, Op::Scale { x, s }, "scale")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { x }, "mean")
    }

    /// Mean squared difference of two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let s = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / T::of(av.len() as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mse { a, b }, "mse"))
    }

    /// `[N,C,H,W] -> [N,C]` average over spatial positions.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = shape4(self.shape(x), "spatial_mean")?;
        let hw = T::of((h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() / hw)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        Ok(self.push(value, Op::SpatialMean { x }, "spatial_mean"))
    }

    /// Tiles vectors `x [S,C]` over a `rows x cols` grid, giving
    /// `[batch,C,rows,cols]`. `S` is 1 (shared) or `batch`.
    pub fn replicate(&mut self, x: Var, batch: usize, rows: usize, cols: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || !(s[0] == 1 || s[0] == batch) {
            return Err(Error::param(format!(
                "replicate: expected [1|{batch}, C], got {s:?}"
            )));
        }
        let (src_n, c) = (s[0], s[1]);
        let xv = self.value(x).data();
        let hw = rows * cols;
        let mut out = Vec::with_capacity(batch * c * hw);
        for b in 0..batch {
            let row = &xv[(b % src_n) * c..(b % src_n + 1) * c];
            for &v in row {
                out.extend(std::iter::repeat_n(v, hw));
            }
        }
        let value = Tensor::new(&[batch, c, rows, cols], out)?;
        Ok(self.push(value, Op::Replicate { x }, "replicate"))
    }

    /// Bilinear gather of `src [1,C,H,W]` through a precomputed plan,
    /// giving `[groups,C,rows,cols]`.
    pub fn resample(&mut self, src: Var, plan: Arc<SamplePlan>) -> Result<Var> {
        let [s, c, h, w] = shape4(self.shape(src), "resample")?;
        if s != 1 || (h, w) != plan.source_dims() {
            return Err(Error::param(format!(
                "resample: source {:?} does not match plan source {:?}",
                self.shape(src),
                plan.source_dims()
            )));
        }
        let out = plan.apply(self.value(src).data(), c, self.exec);
        let (rows, cols) = plan.grid_dims();
        let value = Tensor::new(&[plan.groups(), c, rows, cols], out)?;
        Ok(self.push(value, Op::Resample { src, plan }, "resample"))
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::param(format!(
                "backward: root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        match &mut grads[v.0] {
            Some(g) => add_into(g, &contrib),
            slot => *slot = Some(contrib),
        }
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let geom = *geom;
                let n = self.shape(*x)[0];
                let cout = self.shape(*w)[0];
                let (p, k) = (geom.out_len(), geom.patch_len());
                let in_len = geom.cin * geom.h * geom.w;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); cout];
                        for gi in g.chunks(cout * p) {
                            for (c, row) in gi.chunks(p).enumerate() {
                                db[c] = db[c] + row.iter().copied().sum::<T>();
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
                if self.wants(*w) {
                    let partials = exec::map(self.exec, n, |ni| {
                        let xi = &xv[ni * in_len..(ni + 1) * in_len];
                        let gi = &g[ni * cout * p..(ni + 1) * cout * p];
                        let mut dw = vec![T::zero(); cout * k];
                        if geom.is_pointwise() {
                            gemm(cout, p, k, T::one(), gi, false, xi, true, T::zero(), &mut dw);
                        } else {
                            let mut cols = vec![T::zero(); k * p];
                            im2col(xi, &geom, &mut cols);
                            gemm(cout, p, k, T::one(), gi, false, &cols, true, T::zero(), &mut dw);
                        }
                        dw
                    });
                    let mut dw = vec![T::zero(); cout * k];
                    for part in &partials {
                        add_into(&mut dw, part);
                    }
                    self.accumulate(grads, *w, dw);
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * in_len];
                    exec::for_each_chunk(self.exec, &mut dx, in_len, |ni, dxi| {
                        let gi = &g[ni * cout * p..(ni + 1) * cout * p];
                        if geom.is_pointwise() {
                            gemm(k, cout, p, T::one(), wv, true, gi, false, T::zero(), dxi);
                        } else {
                            let mut dcols = vec![T::zero(); k * p];
                            gemm(k, cout, p, T::one(), wv, true, gi, false, T::zero(), &mut dcols);
                            col2im(&dcols, &geom, dxi);
                        }
                    });
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let cpg = c / groups;
                let m = cpg * spatial;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xv.len()];
                let mf = T::of(m as f64);
                for ni in 0..n {
                    for gi in 0..*groups {
                        let mu = mean[ni * groups + gi];
                        let r = rstd[ni * groups + gi];
                        let base = (ni * c + gi * cpg) * spatial;
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for cc in 0..cpg {
                            let ch = gi * cpg + cc;
                            let off = base + cc * spatial;
                            for s in 0..spatial {
                                let xh = (xv[off + s] - mu) * r;
                                let go = g[off + s];
                                dgamma[ch] = dgamma[ch] + go * xh;
                                dbeta[ch] = dbeta[ch] + go;
                                let dxh = go * gv[ch];
                                sum_dxh = sum_dxh + dxh;
                                sum_dxh_xh = sum_dxh_xh + dxh * xh;
                            }
                        }
                        for cc in 0..cpg {
                            let ch = gi * cpg + cc;
                            let off = base + cc * spatial;
                            for s in 0..spatial {
                                let xh = (xv[off + s] - mu) * r;
                                let dxh = g[off + s] * gv[ch];
                                dx[off + s] = r / mf * (mf * dxh - sum_dxh - xh * sum_dxh_xh);
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, dgamma);
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, dbeta);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let d = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &go)| if v > T::zero() { go } else { go * *slope })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid { x } => {
                let d = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &go)| go * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Upsample { x, factor } => {
                let [_, _, h, w] = shape4(self.shape(*x), "nearest_upsample")?;
                let (ho, wo) = (h * factor, w * factor);
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (dst, src) in d.chunks_mut(h * w).zip(g.chunks(ho * wo)) {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let j = (y / factor) * w + xx / factor;
                            dst[j] = dst[j] + src[y * wo + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Concat { xs } => {
                let shape = out.shape();
                let n = shape[0];
                let total_c = shape[1];
                let spatial: usize = shape[2..].iter().product();
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(n * c * spatial);
                        for ni in 0..n {
                            let start = (ni * total_c + offset) * spatial;
                            d.extend_from_slice(&g[start..start + c * spatial]);
                        }
                        self.accumulate(grads, v, d);
                    }
                    offset += c;
                }
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::BatchMatMul { a, b, ta, tb, dims } => {
                let [batch, m, k, n] = *dims;
                let (ta, tb) = (*ta, *tb);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    exec::for_each_chunk(self.exec, &mut da, (m * k).max(1), |i, d| {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        if ta {
                            gemm(k, n, m, T::one(), bi, tb, gi, true, T::zero(), d);
                        } else {
                            gemm(m, n, k, T::one(), gi, false, bi, !tb, T::zero(), d);
                        }
                    });
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    exec::for_each_chunk(self.exec, &mut db, (k * n).max(1), |i, d| {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        if tb {
                            gemm(n, m, k, T::one(), gi, true, ai, ta, T::zero(), d);
                        } else {
                            gemm(k, m, n, T::one(), ai, !ta, gi, false, T::zero(), d);
                        }
                    });
                    self.accumulate(grads, *b, db);
                }
            }
            Op::SoftmaxRows { x } => {
                let last = *out.shape().last().expect("non-scalar");
                let mut d = vec![T::zero(); out.numel()];
                for ((dr, yr), gr) in d.chunks_mut(last).zip(out.data().chunks(last)).zip(g.chunks(last)) {
                    let dotp = yr.iter().zip(gr).map(|(&y, &go)| y * go).sum::<T>();
                    for j in 0..last {
                        dr[j] = yr[j] * (gr[j] - dotp);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(&go, &y)| go * y).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(&go, &y)| go * y).collect());
                }
            }
            Op::Scale { x, s } => self.accumulate(grads, *x, g.iter().map(|&v| v * *s).collect()),
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Mse { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let k = T::of(2.0) * g[0] / T::of(av.len() as f64);
                let d: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| k * (x - y)).collect();
                if self.wants(*b) {
                    self.accumulate(grads, *b, d.iter().map(|&v| -v).collect());
                }
                if self.wants(*a) {
                    self.accumulate(grads, *a, d);
                }
            }
            Op::SpatialMean { x } => {
                let [_, _, h, w] = shape4(self.shape(*x), "spatial_mean")?;
                let hw = h * w;
                let inv = T::one() / T::of(hw as f64);
                let mut d = Vec::with_capacity(g.len() * hw);
                for &go in g {
                    d.extend(std::iter::repeat_n(go * inv, hw));
                }
                self.accumulate(grads, *x, d);
            }
            Op::Replicate { x } => {
                let s = self.shape(*x);
                let (src_n, c) = (s[0], s[1]);
                let [batch, _, rows, cols] = shape4(out.shape(), "replicate")?;
                let hw = rows * cols;
                let mut d = vec![T::zero(); src_n * c];
                for b in 0..batch {
                    for ch in 0..c {
                        let start = (b * c + ch) * hw;
                        let sum = g[start..start + hw].iter().copied().sum::<T>();
                        let j = (b % src_n) * c + ch;
                        d[j] = d[j] + sum;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Resample { src, plan } => {
                let c = self.shape(*src)[1];
                let d = plan.adjoint(g, c, self.exec);
                self.accumulate(grads, *src, d);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]));
        let w = g.constant(t(&[2, 2, 1, 1], &[1., 0., 0., 1.]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn hand_summed_conv() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let w = g.constant(t(&[1, 1, 2, 2], &[1.; 4]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_output_size_formula() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 9, 7]));
        let w = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 5, 4]);
        let bad = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(g.conv2d(x, bad, None, 1, 0).is_err());
    }

    #[test]
    fn group_norm_of_constant_is_shift() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 4, 3, 3], 0.7));
        let gamma = g.constant(t(&[4], &[2., 3., 4., 5.]));
        let beta = g.constant(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
        let y = g.group_norm(x, 2, gamma, beta).unwrap();
        // The rounding error of the mean is amplified by 1/sqrt(eps) * gamma.
        for (i, v) in g.value(y).data().iter().enumerate() {
            let ch = (i / 9) % 4;
            assert!((v - [0.1, 0.2, 0.3, 0.4][ch]).abs() < 1e-10, "{i} {v}");
        }
        assert!(g.group_norm(x, 3, gamma, beta).is_err());
    }

    #[test]
    fn upsample_block_replicates() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = g.nearest_upsample(x, 2).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1., 2., 3., -50., 0., 50.]));
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0 || v == 1.0));
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(&[3]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn non_finite_outputs_are_traced() {
        let mut g = Graph::<f64>::new();
        g.set_check_finite(true);
        let x = g.variable(t(&[2], &[1.0, 1e308]));
        let y = g.scale(x, 10.0);
        let _ = g.sum(y);
        match g.ensure_finite() {
            Err(Error::Numeric { op, node }) => {
                assert_eq!(op, "scale");
                assert_eq!(node, 1);
            }
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
