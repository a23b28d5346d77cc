use std::collections::HashMap;

use super::{ParamStore, Real, Tensor};
use crate::error::{contract_err, dim_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulRows(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Reshape(Var),
    Permute { a: Var, src: Vec<usize> },
    GatherRows { a: Var, idx: Vec<usize> },
    ConcatRows(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Depthwise3x3 { x: Var, w: Var, b: Option<Var> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    L2NormalizeRows { a: Var, norms: Vec<T>, eps: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::MulRows(..) => "mul_rows",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Depthwise3x3 { .. } => "depthwise_conv2d",
            Op::CrossEntropy { .. } => "softmax_cross_entropy",
            Op::Mse(..) => "mse",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::L2NormalizeRows { .. } => "l2_normalize",
        }
    }
}

/// Spatial geometry shared by the convolution ops.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-owner tape: every op appends a node, `backward` replays them in
/// reverse. Parameters are copied in from a [`ParamStore`] and their
/// gradients are written back to it.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    frozen: Vec<String>,
    non_finite: Option<&'static str>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: Vec::new(),
            non_finite: None,
        }
    }

    /// A graph on which parameters whose names start with any of `prefixes`
    /// enter as constants.
    pub fn with_frozen(prefixes: &[&str]) -> Self {
        let mut g = Self::new();
        g.frozen = prefixes.iter().map(|s| s.to_string()).collect();
        g
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

    /// Name of the first op whose output was not finite, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.non_finite
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite { op: op.to_string() }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            let name = op.name();
            log::error!("non-finite activation from {name} at node {}", self.nodes.len());
            self.non_finite = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Same value as `v`, cut from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Fetches a named parameter. Repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Missing(name.to_string()))?
            .clone();
        if self.frozen.iter().any(|p| name.starts_with(p.as_str())) {
            let v = self.constant(t);
            self.params.insert(name.to_string(), v);
            return Ok(v);
        }
        let v = self.push(t, Op::Param, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    // ---------------------------------------------------------------------
    // linear algebra

    /// 2-D product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(dim_err!("matmul needs 2-D operands, got {sa:?} and {sb:?}"));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(dim_err!("matmul inner dims differ: {sa:?} x {sb:?}"));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.val(a),
            view_strides(ta, m, k),
            self.val(b),
            view_strides(tb, k, n),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, ta, tb },
            ng,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product over the leading axis of two 3-D tensors.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err!("bmm needs [G,.,.] operands, got {sa:?} and {sb:?}"));
        }
        let g = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(dim_err!("bmm inner dims differ: {sa:?} x {sb:?}"));
        }
        let mut out = vec![T::zero(); g * m * n];
        let (av, bv) = (self.val(a), self.val(b));
        for i in 0..g {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..(i + 1) * m * k],
                view_strides(ta, m, k),
                &bv[i * k * n..(i + 1) * k * n],
                view_strides(tb, k, n),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(vec![g, m, n], out)?,
            Op::BatchMatMul { a, b, ta, tb },
            ng,
        ))
    }

    /// `x @ w + b` for `x: [rows, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ---------------------------------------------------------------------
    // element-wise

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{op}: shapes differ {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let data = self
            .val(a)
            .iter()
            .zip(self.val(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds `b: [n]` to every row of `x: [..., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(b) != [n] {
            return Err(dim_err!(
                "bias shape {:?} does not match last dim {n}",
                self.shape(b)
            ));
        }
        let bv = self.val(b);
        let data = self
            .val(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&v, &c)| v + c))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(t, Op::AddBias(x, b), ng))
    }

    /// Scales row `r` of `x: [R, d]` by `s[r]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || self.value(s).len() != sx[0] {
            return Err(dim_err!(
                "mul_rows: {:?} rows vs {:?} scales",
                sx,
                self.shape(s)
            ));
        }
        let d = sx[1];
        let sv = self.val(s);
        let data = self
            .val(x)
            .chunks(d)
            .zip(sv)
            .flat_map(|(row, &c)| row.iter().map(move |&v| v * c))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(t, Op::MulRows(x, s), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let data = self.val(a).iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Scale(a, c), ng))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let data = self.val(a).iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, op, ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |v| if v > T::zero() { v } else { T::zero() })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu(a), |x| x * sigmoid(T::lit(2.0) * gelu_inner(x)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap();
        let mut data = self.val(a).to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Softmax(a), ng))
    }

    /// Per-row normalization over the last axis followed by `gamma * x + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layernorm eps must be > 0, got {eps}")));
        }
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err!(
                "layernorm affine params {:?}/{:?} vs last dim {d}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let rows = self.value(x).len() / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        for row in self.val(x).chunks(d) {
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dn;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let (gv, bv) = (self.val(gamma), self.val(beta));
        let out = xhat
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(gv.iter().zip(bv))
                    .map(|(&h, (&g, &b))| h * g + b)
            })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------------
    // shape manipulation

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("invalid permutation {perm:?} for rank {rank}"));
        }
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.value(a).len();
        let mut src = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let (inner, inner_stride) = match rank {
            0 => (1, 1),
            _ => (out_shape[rank - 1], strides[rank - 1]),
        };
        let mut base = 0usize;
        while src.len() < n {
            src.extend((0..inner).map(|i| base + i * inner_stride));
            // odometer over the outer axes, keeping `base` in sync
            for ax in (0..rank.saturating_sub(1)).rev() {
                idx[ax] += 1;
                base += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                base -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        let av = self.val(a);
        let data = src.iter().map(|&s| av[s]).collect();
        let t = Tensor::new(out_shape, data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Permute { a, src }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.permute(a, &[1, 0])
    }

    /// Selects rows of `a: [R, d]` (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(dim_err!("gather_rows needs a 2-D table, got {sa:?}"));
        }
        let (r, d) = (sa[0], sa[1]);
        if idx.is_empty() {
            return Err(dim_err!("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} out of range for {r} rows")));
        }
        let av = self.val(a);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&av[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![idx.len(), d], data)?;
        let ng = self.ng(a);
        Ok(self.push(
            t,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(dim_err!("concat_rows: {sa:?} vs {sb:?}"));
        }
        let shape = vec![sa[0] + sb[0], sa[1]];
        let mut data = self.val(a).to_vec();
        data.extend_from_slice(self.val(b));
        let t = Tensor::new(shape, data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::ConcatRows(a, b), ng))
    }

    // ---------------------------------------------------------------------
    // convolutions

    /// Cross-correlation of `x: [B,Cin,H,W]` with `w: [Cout,Cin,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(dim_err!("conv2d: input {sx:?} vs kernel {sw:?}"));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let (kh, kw) = (sw[2], sw[3]);
        let oh = conv_out(sx[2], kh, stride, pad)?;
        let ow = conv_out(sx[3], kw, stride, pad)?;
        let geom = ConvGeom {
            batch: sx[0],
            cin: sx[1],
            cout: sw[0],
            h: sx[2],
            w: sx[3],
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        self.check_bias(b, geom.cout)?;
        let kdim = geom.cin * kh * kw;
        let p = oh * ow;
        let mut out = vec![T::zero(); geom.batch * geom.cout * p];
        let mut cols = vec![T::zero(); kdim * p];
        let (xv, wv) = (self.val(x), self.val(w));
        let in_sz = geom.cin * geom.h * geom.w;
        for bi in 0..geom.batch {
            im2col(&xv[bi * in_sz..(bi + 1) * in_sz], &geom, geom.cin, geom.h, geom.w, &mut cols);
            T::gemm(
                geom.cout,
                kdim,
                p,
                T::one(),
                wv,
                (kdim as isize, 1),
                &cols,
                (p as isize, 1),
                T::zero(),
                &mut out[bi * geom.cout * p..(bi + 1) * geom.cout * p],
                (p as isize, 1),
            );
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.val(b), p);
        }
        let t = Tensor::new(vec![geom.batch, geom.cout, oh, ow], out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Transposed convolution: `x: [B,Cin,H,W]`, `w: [Cin,Cout,kh,kw]`,
    /// output side `(H-1)*stride - 2*pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(dim_err!("conv_transpose2d: input {sx:?} vs kernel {sw:?}"));
        }
        if stride == 0 {
            return Err(Error::Config("conv_transpose2d stride must be >= 1".into()));
        }
        let (kh, kw) = (sw[2], sw[3]);
        let oh = ((sx[2] - 1) * stride + kh)
            .checked_sub(2 * pad)
            .filter(|&v| v > 0)
            .ok_or_else(|| dim_err!("conv_transpose2d: padding {pad} too large"))?;
        let ow = ((sx[3] - 1) * stride + kw)
            .checked_sub(2 * pad)
            .filter(|&v| v > 0)
            .ok_or_else(|| dim_err!("conv_transpose2d: padding {pad} too large"))?;
        // Geometry of the equivalent forward conv: image (cout, oh, ow) -> grid (h, w).
        let geom = ConvGeom {
            batch: sx[0],
            cin: sx[1],
            cout: sw[1],
            h: sx[2],
            w: sx[3],
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        self.check_bias(b, geom.cout)?;
        let ck = geom.cout * kh * kw;
        let p = geom.h * geom.w;
        let out_sz = geom.cout * oh * ow;
        let mut out = vec![T::zero(); geom.batch * out_sz];
        let mut cols = vec![T::zero(); ck * p];
        let (xv, wv) = (self.val(x), self.val(w));
        for bi in 0..geom.batch {
            // cols[ck, p] = W^T[ck, cin] * x[cin, p]
            T::gemm(
                ck,
                geom.cin,
                p,
                T::one(),
                wv,
                (1, ck as isize),
                &xv[bi * geom.cin * p..(bi + 1) * geom.cin * p],
                (p as isize, 1),
                T::zero(),
                &mut cols,
                (p as isize, 1),
            );
            col2im(&cols, &transposed_geom(&geom), &mut out[bi * out_sz..(bi + 1) * out_sz]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.val(b), oh * ow);
        }
        let t = Tensor::new(vec![geom.batch, geom.cout, oh, ow], out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }, ng))
    }

    /// Per-channel 3x3 convolution, stride 1, padding 1.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 4 || sw[1] != 1 || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::Config(format!(
                "depthwise kernel must be [C,1,3,3], got {sw:?}"
            )));
        }
        if sx.len() != 4 || sx[1] != sw[0] {
            return Err(dim_err!("depthwise_conv2d: input {sx:?} vs kernel {sw:?}"));
        }
        self.check_bias(b, sx[1])?;
        let (bn, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (xv, wv) = (self.val(x), self.val(w));
        let mut out = vec![T::zero(); bn * c * h * wd];
        for plane in 0..bn * c {
            let ch = plane % c;
            let k = &wv[ch * 9..ch * 9 + 9];
            let src = &xv[plane * h * wd..(plane + 1) * h * wd];
            let dst = &mut out[plane * h * wd..(plane + 1) * h * wd];
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = T::zero();
                    for di in 0..3 {
                        let ii = i + di;
                        if ii == 0 || ii > h {
                            continue;
                        }
                        for dj in 0..3 {
                            let jj = j + dj;
                            if jj == 0 || jj > wd {
                                continue;
                            }
                            acc += k[di * 3 + dj] * src[(ii - 1) * wd + jj - 1];
                        }
                    }
                    dst[i * wd + j] = acc;
                }
            }
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.val(b), h * wd);
        }
        let t = Tensor::new(sx, out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(t, Op::Depthwise3x3 { x, w, b }, ng))
    }

    fn check_bias(&self, b: Option<Var>, c: usize) -> Result<()> {
        match b {
            Some(b) if self.shape(b) != [c] => Err(dim_err!(
                "channel bias {:?} vs {c} channels",
                self.shape(b)
            )),
            _ => Ok(()),
        }
    }

    // ---------------------------------------------------------------------
    // reductions and losses

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(dim_err!(
                "cross entropy: logits {sl:?} vs {} targets",
                targets.len()
            ));
        }
        let n = sl[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Index(format!("target {bad} out of range for {n} classes")));
        }
        let mut probs = self.val(logits).to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(n).zip(targets) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().fold(T::zero(), |s, &v| s + (v - m).exp()).ln() + m;
            loss += lse - row[t];
            softmax_in_place(row);
        }
        loss /= T::lit(targets.len() as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = T::lit(self.value(a).len() as f64);
        let s = self
            .val(a)
            .iter()
            .zip(self.val(b))
            .fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).iter().fold(T::zero(), |s, &v| s + v);
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::lit(self.value(a).len() as f64);
        let s = self.val(a).iter().fold(T::zero(), |s, &v| s + v);
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s / n), Op::Mean(a), ng))
    }

    /// Divides each row of `a: [R, d]` by `norm + eps`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(dim_err!("l2_normalize_rows needs 2-D input, got {sa:?}"));
        }
        let d = sa[1];
        let eps = T::lit(eps);
        let mut norms = Vec::with_capacity(sa[0]);
        let mut data = Vec::with_capacity(self.value(a).len());
        for row in self.val(a).chunks(d) {
            let n = row.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
            norms.push(n);
            data.extend(row.iter().map(|&v| v / (n + eps)));
        }
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::L2NormalizeRows { a, norms, eps }, ng))
    }

    // ---------------------------------------------------------------------
    // backward

    /// Reverse-mode sweep from the scalar `loss`. Every parameter on this
    /// graph receives a gradient in `store`, zero if unreachable.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.check_finite()?;
        if self.value(loss).len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        for (name, &v) in &self.params {
            if !self.ng(v) {
                continue;
            }
            let shape = self.shape(v).to_vec();
            let g = grads
                .get_mut(v.0)
                .and_then(|g| g.take())
                .unwrap_or_else(|| vec![T::zero(); self.value(v).len()]);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("gradient of {name}"),
                });
            }
            store.set_grad(name, Tensor::new(shape, g)?)?;
        }
        Ok(())
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.ng(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let sa = self.shape(a);
                let k = if ta { sa[0] } else { sa[1] };
                matmul_backward(self, grads, a, b, ta, tb, m, k, n, g, 0, 0);
            }
            &Op::BatchMatMul { a, b, ta, tb } => {
                let s = node.value.shape();
                let (gn, m, n) = (s[0], s[1], s[2]);
                let sa = self.shape(a);
                let k = if ta { sa[1] } else { sa[2] };
                for gi in 0..gn {
                    matmul_backward(
                        self,
                        grads,
                        a,
                        b,
                        ta,
                        tb,
                        m,
                        k,
                        n,
                        &g[gi * m * n..(gi + 1) * m * n],
                        gi * m * k,
                        gi * k * n,
                    );
                }
            }
            &Op::Add(a, b) => {
                if let Some(da) = self.acc(grads, a) {
                    axpy(da, g, T::one());
                }
                if let Some(db) = self.acc(grads, b) {
                    axpy(db, g, T::one());
                }
            }
            &Op::Sub(a, b) => {
                if let Some(da) = self.acc(grads, a) {
                    axpy(da, g, T::one());
                }
                if let Some(db) = self.acc(grads, b) {
                    axpy(db, g, -T::one());
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                if let Some(da) = self.acc(grads, a) {
                    for ((d, &gg), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gg * y;
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    for ((d, &gg), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gg * x;
                    }
                }
            }
            &Op::AddBias(x, b) => {
                if let Some(dx) = self.acc(grads, x) {
                    axpy(dx, g, T::one());
                }
                if let Some(db) = self.acc(grads, b) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        axpy(db, row, T::one());
                    }
                }
            }
            &Op::MulRows(x, s) => {
                let d = self.shape(x)[1];
                let (xv, sv) = (self.val(x), self.val(s));
                if let Some(dx) = self.acc(grads, x) {
                    for ((drow, grow), &c) in dx.chunks_mut(d).zip(g.chunks(d)).zip(sv) {
                        axpy(drow, grow, c);
                    }
                }
                if let Some(ds) = self.acc(grads, s) {
                    for ((dsv, grow), xrow) in ds.iter_mut().zip(g.chunks(d)).zip(xv.chunks(d)) {
                        *dsv += dot(grow, xrow);
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(da) = self.acc(grads, a) {
                    axpy(da, g, c);
                }
            }
            &Op::Relu(a) => {
                if let Some(da) = self.acc(grads, a) {
                    for ((d, &gg), &y) in da.iter_mut().zip(g).zip(out) {
                        if y > T::zero() {
                            *d += gg;
                        }
                    }
                }
            }
            &Op::Gelu(a) => {
                let av = self.val(a);
                if let Some(da) = self.acc(grads, a) {
                    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
                    let k = T::lit(0.044715);
                    let two = T::lit(2.0);
                    for ((d, &gg), &x) in da.iter_mut().zip(g).zip(av) {
                        // 0.5 (1 + tanh u) = sigmoid(2u)
                        let s = sigmoid(two * gelu_inner(x));
                        let du = c * (T::one() + T::lit(3.0) * k * x * x);
                        let dy = s + two * x * s * (T::one() - s) * du;
                        *d += gg * dy;
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(da) = self.acc(grads, a) {
                    for ((d, &gg), &y) in da.iter_mut().zip(g).zip(out) {
                        *d += gg * y * (T::one() - y);
                    }
                }
            }
            &Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap();
                if let Some(da) = self.acc(grads, a) {
                    for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let s = dot(grow, yrow);
                        for ((d, &gg), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gg - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let gv = self.val(*gamma);
                if let Some(dg) = self.acc(grads, *gamma) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((dd, &gg), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *dd += gg * h;
                        }
                    }
                }
                if let Some(db) = self.acc(grads, *beta) {
                    for grow in g.chunks(d) {
                        axpy(db, grow, T::one());
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let dn = T::lit(d as f64);
                    let mut dh = vec![T::zero(); d];
                    for (((dxrow, grow), hrow), &r) in dx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .zip(rstd)
                    {
                        for ((v, &gg), &gm) in dh.iter_mut().zip(grow).zip(gv) {
                            *v = gg * gm;
                        }
                        let m1 = dh.iter().fold(T::zero(), |s, &v| s + v) / dn;
                        let m2 = dot(&dh, hrow) / dn;
                        for ((o, &v), &h) in dxrow.iter_mut().zip(&dh).zip(hrow) {
                            *o += r * (v - m1 - h * m2);
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(da) = self.acc(grads, a) {
                    axpy(da, g, T::one());
                }
            }
            Op::Permute { a, src } => {
                if let Some(da) = self.acc(grads, *a) {
                    for (&s, &gg) in src.iter().zip(g) {
                        da[s] += gg;
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let d = self.shape(*a)[1];
                if let Some(da) = self.acc(grads, *a) {
                    for (&r, grow) in idx.iter().zip(g.chunks(d)) {
                        axpy(&mut da[r * d..(r + 1) * d], grow, T::one());
                    }
                }
            }
            &Op::ConcatRows(a, b) => {
                let na = self.value(a).len();
                if let Some(da) = self.acc(grads, a) {
                    axpy(da, &g[..na], T::one());
                }
                if let Some(db) = self.acc(grads, b) {
                    axpy(db, &g[na..], T::one());
                }
            }
            &Op::Conv2d { x, w, b, geom } => conv2d_backward(self, grads, x, w, b, &geom, g),
            &Op::ConvTranspose2d { x, w, b, geom } => {
                conv_transpose2d_backward(self, grads, x, w, b, &geom, g)
            }
            &Op::Depthwise3x3 { x, w, b } => depthwise_backward(self, grads, x, w, b, g),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = self.shape(*logits)[1];
                let scale = g[0] / T::lit(targets.len() as f64);
                if let Some(dl) = self.acc(grads, *logits) {
                    for ((drow, prow), &t) in dl.chunks_mut(n).zip(probs.chunks(n)).zip(targets) {
                        for (j, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                            let y = if j == t { T::one() } else { T::zero() };
                            *d += scale * (p - y);
                        }
                    }
                }
            }
            &Op::Mse(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let c = T::lit(2.0) * g[0] / T::lit(av.len() as f64);
                if let Some(da) = self.acc(grads, a) {
                    for ((d, &x), &y) in da.iter_mut().zip(av).zip(bv) {
                        *d += c * (x - y);
                    }
                }
                if let Some(db) = self.acc(grads, b) {
                    for ((d, &x), &y) in db.iter_mut().zip(av).zip(bv) {
                        *d -= c * (x - y);
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(da) = self.acc(grads, a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(a) => {
                let c = g[0] / T::lit(self.value(a).len() as f64);
                if let Some(da) = self.acc(grads, a) {
                    da.iter_mut().for_each(|d| *d += c);
                }
            }
            Op::L2NormalizeRows { a, norms, eps } => {
                let d = self.shape(*a)[1];
                let av = self.val(*a);
                if let Some(da) = self.acc(grads, *a) {
                    for (((drow, grow), xrow), &n) in da
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(av.chunks(d))
                        .zip(norms)
                    {
                        let s = n + *eps;
                        let corr = if n > T::zero() {
                            dot(xrow, grow) / (s * s * n)
                        } else {
                            T::zero()
                        };
                        for ((o, &gg), &x) in drow.iter_mut().zip(grow).zip(xrow) {
                            *o += gg / s - x * corr;
                        }
                    }
                }
            }
        }
    }
}

fn view_strides(transposed: bool, rows: usize, cols: usize) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

/// Gradient of `C = op(A) op(B)` for one (possibly batched) slice.
#[allow(clippy::too_many_arguments)]
fn matmul_backward<T: Real>(
    graph: &Graph<T>,
    grads: &mut [Option<Vec<T>>],
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    g: &[T],
    off_a: usize,
    off_b: usize,
) {
    let sa = view_strides(ta, m, k);
    let sb = view_strides(tb, k, n);
    let gs = (n as isize, 1);
    if graph.ng(a) {
        let bv = &graph.val(b)[off_b..off_b + k * n];
        let da = graph.acc(grads, a).unwrap();
        // dA' = dC * B'^T, written through A's view strides
        T::gemm(
            m,
            n,
            k,
            T::one(),
            g,
            gs,
            bv,
            (sb.1, sb.0),
            T::one(),
            &mut da[off_a..off_a + m * k],
            sa,
        );
    }
    if graph.ng(b) {
        let av = &graph.val(a)[off_a..off_a + m * k];
        let db = graph.acc(grads, b).unwrap();
        // dB' = A'^T * dC
        T::gemm(
            k,
            m,
            n,
            T::one(),
            av,
            (sa.1, sa.0),
            g,
            gs,
            T::one(),
            &mut db[off_b..off_b + k * n],
            sb,
        );
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k || !(padded - k).is_multiple_of(stride) {
        return Err(dim_err!(
            "conv output not integral: size {size}, kernel {k}, stride {stride}, pad {pad}"
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Geometry of the forward conv that a transposed conv inverts.
fn transposed_geom(g: &ConvGeom) -> ConvGeom {
    ConvGeom {
        cin: g.cout,
        h: g.oh,
        w: g.ow,
        oh: g.h,
        ow: g.w,
        ..*g
    }
}

/// Unfolds `img: [c, h, w]` into `cols: [c*kh*kw, oh*ow]`.
fn im2col<T: Real>(img: &[T], g: &ConvGeom, c: usize, h: usize, w: usize, cols: &mut [T]) {
    let p = g.oh * g.ow;
    for ci in 0..c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        dst[oi * g.ow + oj] = if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                            img[(ci * h + ii as usize) * w + jj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `img: [cin, h, w]`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let p = g.oh * g.ow;
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    for oj in 0..g.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj < 0 || jj as usize >= g.w {
                            continue;
                        }
                        img[(ci * g.h + ii as usize) * g.w + jj as usize] += src[oi * g.ow + oj];
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_bias_grad<T: Real>(db: &mut [T], g: &[T], plane: usize) {
    let c = db.len();
    for (i, chunk) in g.chunks(plane).enumerate() {
        db[i % c] += chunk.iter().fold(T::zero(), |s, &v| s + v);
    }
}

fn conv2d_backward<T: Real>(
    graph: &Graph<T>,
    grads: &mut [Option<Vec<T>>],
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: &ConvGeom,
    g: &[T],
) {
    let kdim = geom.cin * geom.kh * geom.kw;
    let p = geom.oh * geom.ow;
    let in_sz = geom.cin * geom.h * geom.w;
    let out_sz = geom.cout * p;
    if let Some(b) = b {
        if let Some(db) = graph.acc(grads, b) {
            channel_bias_grad(db, g, p);
        }
    }
    let (xv, wv) = (graph.val(x), graph.val(w));
    let mut cols = vec![T::zero(); kdim * p];
    if graph.ng(w) {
        for bi in 0..geom.batch {
            im2col(&xv[bi * in_sz..(bi + 1) * in_sz], geom, geom.cin, geom.h, geom.w, &mut cols);
            let dw = graph.acc(grads, w).unwrap();
            T::gemm(
                geom.cout,
                p,
                kdim,
                T::one(),
                &g[bi * out_sz..(bi + 1) * out_sz],
                (p as isize, 1),
                &cols,
                (1, p as isize),
                T::one(),
                dw,
                (kdim as isize, 1),
            );
        }
    }
    if graph.ng(x) {
        for bi in 0..geom.batch {
            T::gemm(
                kdim,
                geom.cout,
                p,
                T::one(),
                wv,
                (1, kdim as isize),
                &g[bi * out_sz..(bi + 1) * out_sz],
                (p as isize, 1),
                T::zero(),
                &mut cols,
                (p as isize, 1),
            );
            let dx = graph.acc(grads, x).unwrap();
            col2im(&cols, geom, &mut dx[bi * in_sz..(bi + 1) * in_sz]);
        }
    }
}

fn conv_transpose2d_backward<T: Real>(
    graph: &Graph<T>,
    grads: &mut [Option<Vec<T>>],
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: &ConvGeom,
    g: &[T],
) {
    let ck = geom.cout * geom.kh * geom.kw;
    let p = geom.h * geom.w;
    let out_sz = geom.cout * geom.oh * geom.ow;
    let in_sz = geom.cin * p;
    if let Some(b) = b {
        if let Some(db) = graph.acc(grads, b) {
            channel_bias_grad(db, g, geom.oh * geom.ow);
        }
    }
    let fwd = transposed_geom(geom);
    let (xv, wv) = (graph.val(x), graph.val(w));
    let mut cols = vec![T::zero(); ck * p];
    for bi in 0..geom.batch {
        im2col(&g[bi * out_sz..(bi + 1) * out_sz], &fwd, geom.cout, geom.oh, geom.ow, &mut cols);
        if graph.ng(x) {
            let dx = graph.acc(grads, x).unwrap();
            // dx[cin, p] = W[cin, ck] * dcols[ck, p]
            T::gemm(
                geom.cin,
                ck,
                p,
                T::one(),
                wv,
                (ck as isize, 1),
                &cols,
                (p as isize, 1),
                T::one(),
                &mut dx[bi * in_sz..(bi + 1) * in_sz],
                (p as isize, 1),
            );
        }
        if graph.ng(w) {
            let dw = graph.acc(grads, w).unwrap();
            // dW[cin, ck] += x[cin, p] * dcols^T[p, ck]
            T::gemm(
                geom.cin,
                p,
                ck,
                T::one(),
                &xv[bi * in_sz..(bi + 1) * in_sz],
                (p as isize, 1),
                &cols,
                (1, p as isize),
                T::one(),
                dw,
                (ck as isize, 1),
            );
        }
    }
}

fn depthwise_backward<T: Real>(
    graph: &Graph<T>,
    grads: &mut [Option<Vec<T>>],
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &[T],
) {
    let s = graph.shape(x);
    let (bn, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let plane = h * wd;
    if let Some(b) = b {
        if let Some(db) = graph.acc(grads, b) {
            channel_bias_grad(db, g, plane);
        }
    }
    let (xv, wv) = (graph.val(x), graph.val(w));
    // Visit every (output pixel, tap) pair whose source lies inside the image.
    let taps = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
        for pl in 0..bn * c {
            let ch = pl % c;
            for i in 0..h {
                for j in 0..wd {
                    for di in 0..3 {
                        let ii = i + di;
                        if ii == 0 || ii > h {
                            continue;
                        }
                        for dj in 0..3 {
                            let jj = j + dj;
                            if jj == 0 || jj > wd {
                                continue;
                            }
                            f(
                                pl * plane + i * wd + j,
                                ch * 9 + di * 3 + dj,
                                pl * plane + (ii - 1) * wd + jj - 1,
                                ch,
                            );
                        }
                    }
                }
            }
        }
    };
    if let Some(dw) = graph.acc(grads, w) {
        taps(&mut |o, k, src, _| dw[k] += g[o] * xv[src]);
    }
    if let Some(dx) = graph.acc(grads, x) {
        taps(&mut |o, k, src, _| dx[src] += g[o] * wv[k]);
    }
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], c: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn gelu_inner<T: Real>(x: T) -> T {
    T::lit((2.0 / std::f64::consts::PI).sqrt()) * (x + T::lit(0.044715) * x * x * x)
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
