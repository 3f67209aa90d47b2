//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameters
//! are borrowed from a [`ParamStore`] rather than copied; calling
//! [`Graph::backward`] on a scalar loss yields one gradient per reachable,
//! non-frozen parameter.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::scalar::{matmul_into, MatView, Scalar};
use crate::tensor::Tensor;
use crate::{NnError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

enum Value<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, din: usize, dout: usize },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, batch: usize, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast { x: Var, b: Var },
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { qkv: Var, batch: usize, seq: usize, width: usize, heads: usize, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize>, dim: usize },
    Conv2d { x: Var, w: Var, b: Var, geo: Conv2dGeometry },
    Upsample2x { x: Var, n: usize, c: usize, h: usize, w: usize },
    PixelShuffle { x: Var, n: usize, c: usize, h: usize, w: usize },
    Reshape(Var),
    Concat { a: Var, b: Var, outer: usize, a_inner: usize, b_inner: usize },
    Narrow { x: Var, outer: usize, inner: usize, offset: usize, len: usize },
    WeightedPool { x: Var, weights: Vec<T>, batch: usize, seq: usize, dim: usize },
    L2Normalize { x: Var, norms: Vec<T>, dim: usize },
    StraightThrough(Var),
    SumAll(Var),
    MeanAll(Var),
    Mse { a: Var, b: Var },
    BceWithLogits { logits: Var, targets: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T>, classes: usize },
}

struct Node<T> {
    value: Value<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients indexed by [`ParamId`]; `None` for parameters the loss does
/// not reach or that were frozen.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.index()).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    frozen: Vec<bool>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit(0.797_884_560_802_865_4);
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let value = half * x * (T::one() + t);
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
    (value, deriv)
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            frozen: vec![false; store.len()],
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// Graph in which every parameter is frozen; nothing is differentiable.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        let mut g = Self::new(store);
        g.frozen.iter_mut().for_each(|f| *f = true);
        g
    }

    /// Marks parameters whose name matches `pred` as frozen.
    pub fn freeze(mut self, pred: impl Fn(&str) -> bool) -> Self {
        for id in self.store.ids() {
            if pred(self.store.name(id)) {
                self.frozen[id.index()] = true;
            }
        }
        self
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value: Value::Owned(value), shape, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.store.get(*id).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let shape = self.store.get(id).shape().to_vec();
        let needs_grad = !self.frozen[id.index()];
        self.nodes.push(Node { value: Value::Param(id), shape, op: Op::Param(id), needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.param(id))
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, Op::Leaf, false)
    }

    /// Constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let data = self.value(v).to_vec();
        let shape = self.shape(v).to_vec();
        self.push(data, shape, Op::Leaf, false)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// `x·w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(NnError::Shape(format!("linear weight must be 2-d, got {ws:?}")));
        }
        let (din, dout) = (ws[0], ws[1]);
        let xs = self.shape(x).to_vec();
        if xs.last() != Some(&din) {
            return Err(NnError::Shape(format!("linear input {xs:?} vs weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(NnError::Shape(format!("linear bias {:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bv);
            }
        }
        matmul_into(
            MatView::row_major(self.value(x), rows, din),
            MatView::row_major(self.value(w), din, dout),
            &mut out,
            dout,
            T::one(),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let ng = self.ng(x) || self.ng(w) || b.map_or(false, |b| self.ng(b));
        Ok(self.push(out, shape, Op::Linear { x, w, b, rows, din, dout }, ng))
    }

    /// Plain 2-d product `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NnError::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            MatView::row_major(self.value(a), m, k),
            MatView::row_major(self.value(b), k, n),
            &mut out,
            n,
            T::zero(),
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n }, ng))
    }

    /// Swaps the last two axes; leading axes are batch dimensions.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(NnError::Shape(format!("transpose needs at least 2 axes, got {s:?}")));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for (src, dst) in xv.chunks_exact(rows * cols).zip(out.chunks_exact_mut(rows * cols)) {
            for r in 0..rows {
                for c in 0..cols {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
        let mut shape = s;
        let k = shape.len();
        shape.swap(k - 2, k - 1);
        let ng = self.ng(x);
        Ok(self.push(out, shape, Op::Transpose { x, batch, rows, cols }, ng))
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let out: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        self.push(out, shape, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds `b` to every trailing block of `x` (e.g. positional tables).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(NnError::Shape(format!("broadcast {bs:?} onto {xs:?}")));
        }
        let bv = self.value(b);
        let n = bv.len();
        let out: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        let shape = xs.to_vec();
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, shape, Op::AddBroadcast { x, b }, ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(out, shape, Op::Scale(x, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(out, shape, Op::Relu(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_parts(v).0).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(out, shape, Op::Gelu(x), ng)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(NnError::Shape("layer norm affine size".into()));
        }
        let eps = T::lit(1e-5);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, shape, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    /// Multi-head self-attention over a packed `[batch, seq, 3*width]`
    /// query/key/value tensor; returns `[batch, seq, width]`.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 3 || s[2] % 3 != 0 || (s[2] / 3) % heads != 0 {
            return Err(NnError::Shape(format!("attention input {s:?} with {heads} heads")));
        }
        let (batch, seq, width) = (s[0], s[1], s[2] / 3);
        let dh = width / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let qv = self.value(qkv);
        let mut out = vec![T::zero(); batch * seq * width];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        for b in 0..batch {
            let base = &qv[b * seq * 3 * width..(b + 1) * seq * 3 * width];
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                let q = MatView {
                    data: &base[h * dh..],
                    rows: seq,
                    cols: dh,
                    row_stride: 3 * width,
                    col_stride: 1,
                };
                let kt = MatView {
                    data: &base[width + h * dh..],
                    rows: dh,
                    cols: seq,
                    row_stride: 1,
                    col_stride: 3 * width,
                };
                matmul_into(q, kt, p, seq, T::zero());
                for row in p.chunks_exact_mut(seq) {
                    let mut mx = T::neg_infinity();
                    for v in row.iter_mut() {
                        *v *= scale;
                        mx = mx.max(*v);
                    }
                    let mut sum = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                let vv = MatView {
                    data: &base[2 * width + h * dh..],
                    rows: seq,
                    cols: dh,
                    row_stride: 3 * width,
                    col_stride: 1,
                };
                let o = &mut out[b * seq * width + h * dh..];
                matmul_into(MatView::row_major(p, seq, seq), vv, o, width, T::zero());
            }
        }
        let ng = self.ng(qkv);
        if !ng {
            probs = Vec::new();
        }
        Ok(self.push(
            out,
            vec![batch, seq, width],
            Op::Attention { qkv, batch, seq, width, heads, probs },
            ng,
        ))
    }

    /// Row lookup into `table` (`[n, dim]`); output `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(NnError::Shape(format!("embedding table {ts:?}")));
        }
        let (n, dim) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(NnError::Shape(format!("embedding id {bad} >= {n}")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let ng = self.ng(table);
        Ok(self.push(out, vec![ids.len(), dim], Op::Embedding { table, ids: ids.to_vec(), dim }, ng))
    }

    /// Square-kernel 2-d convolution on NCHW input; `w` is `[out, in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(NnError::Shape(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        if self.shape(b) != [ws[0]] {
            return Err(NnError::Shape("conv2d bias".into()));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(NnError::Shape("conv2d kernel larger than input".into()));
        }
        let geo = Conv2dGeometry {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: k,
            stride,
            pad,
            out_height: (xs[2] + 2 * pad - k) / stride + 1,
            out_width: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let ohw = geo.out_height * geo.out_width;
        let ckk = geo.in_channels * k * k;
        let mut out = vec![T::zero(); geo.batch * geo.out_channels * ohw];
        let mut cols = vec![T::zero(); ckk * ohw];
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let in_size = geo.in_channels * geo.height * geo.width;
        for n in 0..geo.batch {
            im2col(&xv[n * in_size..(n + 1) * in_size], &geo, &mut cols);
            let o = &mut out[n * geo.out_channels * ohw..(n + 1) * geo.out_channels * ohw];
            for (c, chunk) in o.chunks_exact_mut(ohw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[c]);
            }
            matmul_into(
                MatView::row_major(wv, geo.out_channels, ckk),
                MatView::row_major(&cols, ckk, ohw),
                o,
                ohw,
                T::one(),
            );
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            out,
            vec![geo.batch, geo.out_channels, geo.out_height, geo.out_width],
            Op::Conv2d { x, w, b, geo },
            ng,
        ))
    }

    /// Nearest-neighbour 2x upsampling of NCHW input.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(NnError::Shape(format!("upsample needs NCHW, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, vec![n, c, 2 * h, 2 * w], Op::Upsample2x { x, n, c, h, w }, ng))
    }

    /// Depth-to-space by 2: `[N, 4C, H, W]` to `[N, C, 2H, 2W]`, with
    /// channel `4c + 2dy + dx` landing at offset `(dy, dx)`.
    pub fn pixel_shuffle(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] % 4 != 0 {
            return Err(NnError::Shape(format!("pixel shuffle needs NCHW with C divisible by 4, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1] / 4, s[2], s[3]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for_each_shuffle(n, c, h, w, |src, dst| out[dst] = xv[src]);
        let ng = self.ng(x);
        Ok(self.push(out, vec![n, c, 2 * h, 2 * w], Op::PixelShuffle { x, n, c, h, w }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(NnError::Shape(format!(
                "reshape {:?} -> {shape:?}",
                self.shape(x)
            )));
        }
        let data = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(data, shape, Op::Reshape(x), ng))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len()
            || axis >= sa.len()
            || sa.iter().zip(&sb).enumerate().any(|(i, (x, y))| i != axis && x != y)
        {
            return Err(NnError::Shape(format!("concat {sa:?} with {sb:?} on axis {axis}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let tail: usize = sa[axis + 1..].iter().product();
        let (a_inner, b_inner) = (sa[axis] * tail, sb[axis] * tail);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            out.extend_from_slice(&av[o * a_inner..(o + 1) * a_inner]);
            out.extend_from_slice(&bv[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa;
        shape[axis] += sb[axis];
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, shape, Op::Concat { a, b, outer, a_inner, b_inner }, ng))
    }

    /// Slice `[start, start+len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(NnError::Shape(format!("narrow {s:?} axis {axis} {start}+{len}")));
        }
        let outer: usize = s[..axis].iter().product();
        let tail: usize = s[axis + 1..].iter().product();
        let inner = s[axis] * tail;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * tail);
        for o in 0..outer {
            let base = o * inner + start * tail;
            out.extend_from_slice(&xv[base..base + len * tail]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            shape,
            Op::Narrow { x, outer, inner, offset: start * tail, len: len * tail },
            ng,
        ))
    }

    /// `[batch, seq, dim] -> [batch, dim]`, weighting position `(b, s)` by
    /// `weights[b * seq + s]`.
    pub fn weighted_pool(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || weights.len() != s[0] * s[1] {
            return Err(NnError::Shape(format!("weighted pool {s:?} / {}", weights.len())));
        }
        let (batch, seq, dim) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut out = vec![T::zero(); batch * dim];
        for b in 0..batch {
            for t in 0..seq {
                let w = weights[b * seq + t];
                if w == T::zero() {
                    continue;
                }
                let row = &xv[(b * seq + t) * dim..(b * seq + t + 1) * dim];
                for (o, &v) in out[b * dim..(b + 1) * dim].iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, vec![batch, dim], Op::WeightedPool { x, weights, batch, seq, dim }, ng))
    }

    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(NnError::Shape(format!("mean pool {s:?}")));
        }
        let w = T::one() / T::from_usize(s[1]).unwrap();
        self.weighted_pool(x, vec![w; s[0] * s[1]])
    }

    /// Rows scaled to unit Euclidean norm over the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let dim = *self.shape(x).last().unwrap_or(&1);
        let xv = self.value(x);
        let eps = T::lit(1e-12);
        let mut out = vec![T::zero(); xv.len()];
        let mut norms = Vec::with_capacity(xv.len() / dim.max(1));
        for (row, o) in xv.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(n);
            for (a, &b) in o.iter_mut().zip(row) {
                *a = b / n;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(out, shape, Op::L2Normalize { x, norms, dim }, ng)
    }

    /// Forward value `value`, backward identity into `x`.
    pub fn straight_through(&mut self, x: Var, value: Vec<T>) -> Result<Var> {
        if value.len() != self.value(x).len() {
            return Err(NnError::Shape("straight-through value size".into()));
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(value, shape, Op::StraightThrough(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![s], vec![1], Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::from_usize(v.len().max(1)).unwrap();
        let ng = self.ng(x);
        self.push(vec![s], vec![1], Op::MeanAll(x), ng)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mse")?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = T::from_usize(av.len().max(1)).unwrap();
        let s = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![s], vec![1], Op::Mse { a, b }, ng))
    }

    /// Mean binary cross-entropy on logits, in the overflow-free form
    /// `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(NnError::Shape("bce targets".into()));
        }
        let n = T::from_usize(lv.len().max(1)).unwrap();
        let s = lv
            .iter()
            .zip(targets)
            .map(|(&z, &y)| bce_term(z, y))
            .sum::<T>()
            / n;
        let ng = self.ng(logits);
        Ok(self.push(vec![s], vec![1], Op::BceWithLogits { logits, targets: targets.to_vec() }, ng))
    }

    /// Weighted mean softmax cross-entropy over the rows of `[rows, classes]`
    /// logits. Rows with zero weight are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let classes = *self.shape(logits).last().unwrap_or(&0);
        let lv = self.value(logits);
        let rows = lv.len() / classes.max(1);
        if targets.len() != rows || weights.len() != rows {
            return Err(NnError::Shape(format!(
                "cross entropy: {rows} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(NnError::Shape(format!("target class {bad} >= {classes}")));
        }
        let total_w = weights.iter().copied().sum::<T>();
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for r in 0..rows {
            let row = &lv[r * classes..(r + 1) * classes];
            let p = &mut probs[r * classes..(r + 1) * classes];
            let lse = log_softmax_into(row, p);
            if weights[r] != T::zero() {
                loss += weights[r] * (lse - row[targets[r]]);
            }
        }
        let loss = if total_w > T::zero() { loss / total_w } else { T::zero() };
        let ng = self.ng(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                classes,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(NnError::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients { grads: (0..self.store.len()).map(|_| None).collect() };
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.value(v).len()]);
        f(slot);
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let shape = self.store.get(*id).shape().to_vec();
                match &mut out.grads[id.index()] {
                    Some(t) => t.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(Tensor::new(shape, g.to_vec())?),
                }
            }
            &Op::Linear { x, w, b, rows, din, dout } => {
                self.acc(grads, x, |dx| {
                    matmul_into(
                        MatView::row_major(g, rows, dout),
                        MatView::transposed(self.value(w), din, dout),
                        dx,
                        din,
                        T::one(),
                    )
                });
                self.acc(grads, w, |dw| {
                    matmul_into(
                        MatView::transposed(self.value(x), rows, din),
                        MatView::row_major(g, rows, dout),
                        dw,
                        dout,
                        T::one(),
                    )
                });
                if let Some(b) = b {
                    self.acc(grads, b, |db| {
                        for row in g.chunks_exact(dout) {
                            db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                    });
                }
            }
            &Op::MatMul { a, b, m, k, n } => {
                self.acc(grads, a, |da| {
                    matmul_into(
                        MatView::row_major(g, m, n),
                        MatView::transposed(self.value(b), k, n),
                        da,
                        k,
                        T::one(),
                    )
                });
                self.acc(grads, b, |db| {
                    matmul_into(
                        MatView::transposed(self.value(a), m, k),
                        MatView::row_major(g, m, n),
                        db,
                        n,
                        T::one(),
                    )
                });
            }
            &Op::Transpose { x, batch, rows, cols } => self.acc(grads, x, |dx| {
                let plane = rows * cols;
                for b in 0..batch {
                    let (dx, g) = (&mut dx[b * plane..(b + 1) * plane], &g[b * plane..(b + 1) * plane]);
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }),
            &Op::Add(a, b) => {
                self.acc(grads, a, |d| add_into(d, g));
                self.acc(grads, b, |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |d| add_into(d, g));
                self.acc(grads, b, |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.acc(grads, a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            &Op::AddBroadcast { x, b } => {
                self.acc(grads, x, |d| add_into(d, g));
                self.acc(grads, b, |d| {
                    let n = d.len();
                    for (i, &v) in g.iter().enumerate() {
                        d[i % n] += v;
                    }
                });
            }
            &Op::Scale(x, c) => self.acc(grads, x, |d| {
                d.iter_mut().zip(g).for_each(|(a, &v)| *a += v * c)
            }),
            &Op::Relu(x) => {
                let xv = self.value(x);
                self.acc(grads, x, |d| {
                    for i in 0..d.len() {
                        if xv[i] > T::zero() {
                            d[i] += g[i];
                        }
                    }
                })
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                self.acc(grads, x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_parts(xv[i]).1;
                    }
                })
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *node.shape.last().unwrap();
                let gv = self.value(*gamma);
                self.acc(grads, *gamma, |dg| {
                    for (row_g, row_h) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += row_g[j] * row_h[j];
                        }
                    }
                });
                self.acc(grads, *beta, |db| {
                    for row in g.chunks_exact(d) {
                        add_into(db, row);
                    }
                });
                let dn = T::from_usize(d).unwrap();
                self.acc(grads, *x, |dx| {
                    let mut dxhat = vec![T::zero(); d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * hr[j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            dx[r * d + j] += rs * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            Op::Attention { qkv, batch, seq, width, heads, probs } => {
                let (batch, seq, width, heads) = (*batch, *seq, *width, *heads);
                let dh = width / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let qv = self.value(*qkv);
                self.acc(grads, *qkv, |dq| {
                    let mut dp = vec![T::zero(); seq * seq];
                    for b in 0..batch {
                        let base = &qv[b * seq * 3 * width..(b + 1) * seq * 3 * width];
                        let dbase = &mut dq[b * seq * 3 * width..(b + 1) * seq * 3 * width];
                        for h in 0..heads {
                            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                            let go = MatView {
                                data: &g[b * seq * width + h * dh..],
                                rows: seq,
                                cols: dh,
                                row_stride: width,
                                col_stride: 1,
                            };
                            // dV = P^T dO
                            matmul_into(
                                MatView::transposed(p, seq, seq),
                                go,
                                &mut dbase[2 * width + h * dh..],
                                3 * width,
                                T::one(),
                            );
                            // dP = dO V^T
                            let vt = MatView {
                                data: &base[2 * width + h * dh..],
                                rows: dh,
                                cols: seq,
                                row_stride: 1,
                                col_stride: 3 * width,
                            };
                            matmul_into(go, vt, &mut dp, seq, T::zero());
                            for (prow, dprow) in p.chunks_exact(seq).zip(dp.chunks_exact_mut(seq)) {
                                let dot = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                                for (d, &pv) in dprow.iter_mut().zip(prow) {
                                    *d = pv * (*d - dot) * scale;
                                }
                            }
                            // dQ = dS K, dK = dS^T Q
                            let k = MatView {
                                data: &base[width + h * dh..],
                                rows: seq,
                                cols: dh,
                                row_stride: 3 * width,
                                col_stride: 1,
                            };
                            matmul_into(
                                MatView::row_major(&dp, seq, seq),
                                k,
                                &mut dbase[h * dh..],
                                3 * width,
                                T::one(),
                            );
                            let q = MatView {
                                data: &base[h * dh..],
                                rows: seq,
                                cols: dh,
                                row_stride: 3 * width,
                                col_stride: 1,
                            };
                            matmul_into(
                                MatView::transposed(&dp, seq, seq),
                                q,
                                &mut dbase[width + h * dh..],
                                3 * width,
                                T::one(),
                            );
                        }
                    }
                });
            }
            Op::Embedding { table, ids, dim } => {
                let dim = *dim;
                self.acc(grads, *table, |dt| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut dt[i * dim..(i + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                });
            }
            &Op::Conv2d { x, w, b, geo } => {
                let ohw = geo.out_height * geo.out_width;
                let ckk = geo.in_channels * geo.kernel * geo.kernel;
                let in_size = geo.in_channels * geo.height * geo.width;
                let out_size = geo.out_channels * ohw;
                self.acc(grads, b, |db| {
                    for n in 0..geo.batch {
                        for c in 0..geo.out_channels {
                            let s = n * out_size + c * ohw;
                            db[c] += g[s..s + ohw].iter().copied().sum::<T>();
                        }
                    }
                });
                let xv = self.value(x);
                let wv = self.value(w);
                let need_w = self.nodes[w.0].needs_grad;
                let need_x = self.nodes[x.0].needs_grad;
                let mut cols = vec![T::zero(); ckk * ohw];
                if need_w {
                    self.acc(grads, w, |dw| {
                        for n in 0..geo.batch {
                            im2col(&xv[n * in_size..(n + 1) * in_size], &geo, &mut cols);
                            matmul_into(
                                MatView::row_major(&g[n * out_size..(n + 1) * out_size], geo.out_channels, ohw),
                                MatView::transposed(&cols, ckk, ohw),
                                dw,
                                ckk,
                                T::one(),
                            );
                        }
                    });
                }
                if need_x {
                    self.acc(grads, x, |dx| {
                        for n in 0..geo.batch {
                            matmul_into(
                                MatView::transposed(wv, geo.out_channels, ckk),
                                MatView::row_major(&g[n * out_size..(n + 1) * out_size], geo.out_channels, ohw),
                                &mut cols,
                                ohw,
                                T::zero(),
                            );
                            col2im(&cols, &geo, &mut dx[n * in_size..(n + 1) * in_size]);
                        }
                    });
                }
            }
            &Op::PixelShuffle { x, n, c, h, w } => self.acc(grads, x, |dx| {
                for_each_shuffle(n, c, h, w, |src, dst| dx[src] += g[dst]);
            }),
            &Op::Upsample2x { x, n, c, h, w } => self.acc(grads, x, |dx| {
                for plane in 0..n * c {
                    let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
            }),
            &Op::Reshape(x) | &Op::StraightThrough(x) => self.acc(grads, x, |d| add_into(d, g)),
            &Op::Concat { a, b, outer, a_inner, b_inner } => {
                let row = a_inner + b_inner;
                self.acc(grads, a, |d| {
                    for o in 0..outer {
                        add_into(&mut d[o * a_inner..(o + 1) * a_inner], &g[o * row..o * row + a_inner]);
                    }
                });
                self.acc(grads, b, |d| {
                    for o in 0..outer {
                        add_into(
                            &mut d[o * b_inner..(o + 1) * b_inner],
                            &g[o * row + a_inner..(o + 1) * row],
                        );
                    }
                });
            }
            &Op::Narrow { x, outer, inner, offset, len } => self.acc(grads, x, |d| {
                for o in 0..outer {
                    let base = o * inner + offset;
                    add_into(&mut d[base..base + len], &g[o * len..(o + 1) * len]);
                }
            }),
            Op::WeightedPool { x, weights, batch, seq, dim } => {
                let (batch, seq, dim) = (*batch, *seq, *dim);
                self.acc(grads, *x, |d| {
                    for b in 0..batch {
                        for t in 0..seq {
                            let w = weights[b * seq + t];
                            if w == T::zero() {
                                continue;
                            }
                            let dst = &mut d[(b * seq + t) * dim..(b * seq + t + 1) * dim];
                            for (o, &v) in dst.iter_mut().zip(&g[b * dim..(b + 1) * dim]) {
                                *o += w * v;
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms, dim } => {
                let dim = *dim;
                let y = match &node.value {
                    Value::Owned(v) => v,
                    Value::Param(_) => unreachable!(),
                };
                self.acc(grads, *x, |d| {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * dim..(r + 1) * dim];
                        let gr = &g[r * dim..(r + 1) * dim];
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..dim {
                            d[r * dim + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                });
            }
            &Op::SumAll(x) => self.acc(grads, x, |d| d.iter_mut().for_each(|v| *v += g[0])),
            &Op::MeanAll(x) => {
                let n = T::from_usize(self.value(x).len().max(1)).unwrap();
                self.acc(grads, x, |d| d.iter_mut().for_each(|v| *v += g[0] / n))
            }
            &Op::Mse { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let c = T::lit(2.0) * g[0] / T::from_usize(av.len().max(1)).unwrap();
                self.acc(grads, a, |d| {
                    for i in 0..d.len() {
                        d[i] += c * (av[i] - bv[i]);
                    }
                });
                self.acc(grads, b, |d| {
                    for i in 0..d.len() {
                        d[i] -= c * (av[i] - bv[i]);
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits);
                let c = g[0] / T::from_usize(lv.len().max(1)).unwrap();
                self.acc(grads, *logits, |d| {
                    for i in 0..d.len() {
                        d[i] += c * (sigmoid(lv[i]) - targets[i]);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, weights, probs, classes } => {
                let total_w = weights.iter().copied().sum::<T>();
                if total_w > T::zero() {
                    let classes = *classes;
                    self.acc(grads, *logits, |d| {
                        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                            if w == T::zero() {
                                continue;
                            }
                            let c = g[0] * w / total_w;
                            let p = &probs[r * classes..(r + 1) * classes];
                            let dr = &mut d[r * classes..(r + 1) * classes];
                            for j in 0..classes {
                                dr[j] += c * p[j];
                            }
                            dr[t] -= c;
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// One term of the stable binary cross-entropy on a logit.
pub fn bce_term<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

/// Writes softmax probabilities of `row` into `probs`; returns log-sum-exp.
pub fn log_softmax_into<T: Scalar>(row: &[T], probs: &mut [T]) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (p, &v) in probs.iter_mut().zip(row) {
        *p = (v - mx).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    mx + sum.ln()
}

fn for_each_shuffle(n: usize, c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    let src_plane = ((b * c + ch) * 4 + dy * 2 + dx) * h * w;
                    let dst_plane = (b * c + ch) * 4 * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            f(src_plane + y * w + xx, dst_plane + (2 * y + dy) * 2 * w + 2 * xx + dx);
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `ox` whose input column `ox * s + kx - p` lies in
/// `[0, width)`.
fn valid_cols(geo: &Conv2dGeometry, kx: usize) -> (usize, usize) {
    let (s, p) = (geo.stride, geo.pad);
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    let hi = if geo.width + p > kx { (geo.width + p - kx).div_ceil(s) } else { 0 };
    (lo.min(geo.out_width), hi.min(geo.out_width).max(lo.min(geo.out_width)))
}

fn im2col<T: Scalar>(x: &[T], geo: &Conv2dGeometry, cols: &mut [T]) {
    let (k, s, p) = (geo.kernel, geo.stride, geo.pad);
    let (ow, ohw) = (geo.out_width, geo.out_height * geo.out_width);
    for c in 0..geo.in_channels {
        let plane = &x[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_cols(geo, kx);
                let row = &mut cols[((c * k + ky) * k + kx) * ohw..((c * k + ky) * k + kx + 1) * ohw];
                for oy in 0..geo.out_height {
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= geo.height as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let first = lo * s + kx - p;
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[first + j * s];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], geo: &Conv2dGeometry, dx: &mut [T]) {
    let (k, s, p) = (geo.kernel, geo.stride, geo.pad);
    let (ow, ohw) = (geo.out_width, geo.out_height * geo.out_width);
    for c in 0..geo.in_channels {
        let plane = &mut dx[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ky in 0..k {
            for kx in 0..k {
                let (lo, hi) = valid_cols(geo, kx);
                let row = &cols[((c * k + ky) * k + kx) * ohw..((c * k + ky) * k + kx + 1) * ohw];
                for oy in 0..geo.out_height {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    let src = &row[oy * ow + lo..oy * ow + hi];
                    let first = lo * s + kx - p;
                    if s == 1 {
                        for (d, v) in dst[first..first + hi - lo].iter_mut().zip(src) {
                            *d += *v;
                        }
                    } else {
                        for (j, v) in src.iter().enumerate() {
                            dst[first + j * s] += *v;
                        }
                    }
                }
            }
        }
    }
}
