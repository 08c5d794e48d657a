//! Reverse-mode automatic differentiation on dynamically shaped arrays.
//!
//! A [`Tape`] records every operation as it executes; [`Tape::backward`]
//! replays the record in reverse, accumulating gradients. Nodes are arena
//! indices ([`Var`]), ops are a closed enum, and construction order is the
//! topological order, which keeps the engine small and the borrow checker
//! happy.
//!
//! The element type is generic so the same graph code runs in `f32` for
//! training and `f64` for finite-difference gradient checks.

pub mod check;
pub mod kernels;

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};

use crate::util::par_map_indexed;

/// Element type the engine is generic over.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + num_traits::NumAssignOps
    + num_traits::FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lifting an `f64` constant into the element type.
pub fn c<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("constant conversion")
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddConst(Var, T),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Clamp(Var, T, T),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    AddChanBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        cols: Vec<Array2<T>>,
    },
    NearestUp2(Var),
    SoftmaxLast(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Array1<T>,
        rstd: Array1<T>,
    },
    Mha {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        attn: Array4<T>,
    },
    AddBcast0(Var, Var),
    ConcatTokens(Var, Var),
    SliceTokens(Var, usize, usize),
    FeatToTokens(Var),
    TokensToFeat(Var),
    Reshape(Var),
    RowDot(Var, Var),
    DivRows(Var, Var),
    MulRows(Var, Var),
    MulChanBroadcast(Var, Var),
    RowSelect(Var, Vec<usize>),
    LogSumExpRows(Var),
    MeanAll(Var),
    SumAll(Var),
    MaxPerItem(Var, Vec<usize>),
    MeanSpatial(Var),
}

/// Records a computation graph and runs reverse-mode differentiation on it.
pub struct Tape<T: Scalar> {
    values: Vec<ArrayD<T>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<ArrayD<T>>>,
    tags: Vec<Option<usize>>,
    tag_cache: HashMap<usize, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            tags: Vec::new(),
            tag_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.tags.push(None);
        Var(self.values.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.values[v.0]
    }

    /// Scalar payload of a 0-d (or single-element) node.
    pub fn scalar(&self, v: Var) -> T {
        let a = &self.values[v.0];
        debug_assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        *a.iter().next().expect("empty array")
    }

    pub fn grad(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    // ---- graph inputs ----

    pub fn leaf(&mut self, value: ArrayD<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, v: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Leaf tied to an external parameter slot. Repeated calls with the same
    /// tag return the same node, so gradients from every use accumulate.
    pub fn leaf_tagged(&mut self, value: ArrayD<T>, requires_grad: bool, tag: usize) -> Var {
        if let Some(&v) = self.tag_cache.get(&tag) {
            return v;
        }
        let v = self.push(value, Op::Leaf, requires_grad);
        self.tags[v.0] = Some(tag);
        self.tag_cache.insert(tag, v);
        v
    }

    /// Gradients of all tagged leaves, in tag order of first use.
    pub fn tagged_grads(&self) -> Vec<(usize, &ArrayD<T>)> {
        let mut out = Vec::new();
        for (i, tag) in self.tags.iter().enumerate() {
            if let (Some(t), Some(g)) = (tag, self.grads.get(i).and_then(|g| g.as_ref())) {
                out.push((*t, g));
            }
        }
        out
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.values[a.0] + &self.values[b.0];
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Add(a, b), r)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = &self.values[a.0] - &self.values[b.0];
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Sub(a, b), r)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = &self.values[a.0] * &self.values[b.0];
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Mul(a, b), r)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let v = &self.values[a.0] / &self.values[b.0];
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Div(a, b), r)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.values[a.0].mapv(|x| x * k);
        let r = self.req(a);
        self.push(v, Op::Scale(a, k), r)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_const(&mut self, a: Var, k: T) -> Var {
        let v = self.values[a.0].mapv(|x| x + k);
        let r = self.req(a);
        self.push(v, Op::AddConst(a, k), r)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.abs());
        let r = self.req(a);
        self.push(v, Op::Abs(a), r)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| if x > T::zero() { x } else { T::zero() });
        let r = self.req(a);
        self.push(v, Op::Relu(a), r)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.values[a.0].mapv(|x| if x > T::zero() { x } else { x * slope });
        let r = self.req(a);
        self.push(v, Op::LeakyRelu(a, slope), r)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.tanh());
        let r = self.req(a);
        self.push(v, Op::Tanh(a), r)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(sigmoid_stable);
        let r = self.req(a);
        self.push(v, Op::Sigmoid(a), r)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(softplus_stable);
        let r = self.req(a);
        self.push(v, Op::Softplus(a), r)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.exp());
        let r = self.req(a);
        self.push(v, Op::Exp(a), r)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.ln());
        let r = self.req(a);
        self.push(v, Op::Ln(a), r)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.sqrt());
        let r = self.req(a);
        self.push(v, Op::Sqrt(a), r)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.values[a.0].mapv(|x| {
            if x < lo {
                lo
            } else if x > hi {
                hi
            } else {
                x
            }
        });
        let r = self.req(a);
        self.push(v, Op::Clamp(a, lo, hi), r)
    }

    // ---- linear algebra ----

    /// (m,k) x (k,n) -> (m,n)
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.values[a.0]);
        let bv = as2(&self.values[b.0]);
        let v = av.dot(&bv).into_dyn();
        let r = self.req(a) || self.req(b);
        self.push(v, Op::MatMul(a, b), r)
    }

    /// (rows, d) + (d), broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = as2(&self.values[x.0]);
        let bv = &self.values[bias.0];
        let bv1 = bv.view().into_dimensionality::<ndarray::Ix1>().expect("bias rank");
        let v = (&xv + &bv1).into_dyn();
        let r = self.req(x) || self.req(bias);
        self.push(v, Op::AddRowBias(x, bias), r)
    }

    /// (n,c,h,w) + (c), broadcast over item and spatial dims.
    pub fn add_chan_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = as4(&self.values[x.0]);
        let b = &self.values[bias.0];
        let mut v = xv.to_owned();
        for (ci, mut lane) in v.axis_iter_mut(Axis(1)).enumerate() {
            let bc = b[[ci]];
            lane.mapv_inplace(|t| t + bc);
        }
        let r = self.req(x) || self.req(bias);
        self.push(v.into_dyn(), Op::AddChanBias(x, bias), r)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = as4(&self.values[x.0]);
        let wv = as4(&self.values[w.0]);
        let fwd = kernels::conv2d_forward(&xv.view(), &wv.view(), stride, pad);
        let r = self.req(x) || self.req(w);
        self.push(
            fwd.y.into_dyn(),
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols: fwd.cols,
            },
            r,
        )
    }

    pub fn nearest_up2(&mut self, x: Var) -> Var {
        let xv = as4(&self.values[x.0]);
        let v = kernels::nearest_up2(&xv.view()).into_dyn();
        let r = self.req(x);
        self.push(v, Op::NearestUp2(x), r)
    }

    // ---- normalization & attention ----

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let shape = self.values[x.0].shape().to_vec();
        let cols = *shape.last().expect("softmax needs rank >= 1");
        let rows = self.values[x.0].len() / cols;
        let flat = self.values[x.0]
            .to_shape((rows, cols))
            .expect("softmax reshape")
            .into_owned();
        let sm = kernels::softmax_rows(&flat.view());
        let v = sm.into_shape_with_order(IxDyn(&shape)).expect("softmax back");
        let r = self.req(x);
        self.push(v, Op::SoftmaxLast(x), r)
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = c::<T>(1e-5);
        let shape = self.values[x.0].shape().to_vec();
        let d = *shape.last().expect("layer_norm rank");
        let rows = self.values[x.0].len() / d;
        let flat = self.values[x.0]
            .to_shape((rows, d))
            .expect("ln reshape")
            .into_owned();
        let g = &self.values[gamma.0];
        let b = &self.values[beta.0];
        let mut out = Array2::<T>::zeros((rows, d));
        let mut means = Array1::<T>::zeros(rows);
        let mut rstds = Array1::<T>::zeros(rows);
        let inv_d = T::one() / c::<T>(d as f64);
        for i in 0..rows {
            let row = flat.row(i);
            let mut mean = T::zero();
            for &v in row.iter() {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = T::zero();
            for &v in row.iter() {
                let dv = v - mean;
                var += dv * dv;
            }
            var = var * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            means[i] = mean;
            rstds[i] = rstd;
            for j in 0..d {
                out[[i, j]] = (row[j] - mean) * rstd * g[[j]] + b[[j]];
            }
        }
        let v = out.into_shape_with_order(IxDyn(&shape)).expect("ln back");
        let r = self.req(x) || self.req(gamma) || self.req(beta);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            r,
        )
    }

    /// Multi-head scaled dot-product self-attention over (n, t, d) inputs.
    /// Queries, keys and values are already projected.
    pub fn mha(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let qv = as3(&self.values[q.0]);
        let kv = as3(&self.values[k.0]);
        let vv = as3(&self.values[v.0]);
        let (n, t, d) = qv.dim();
        assert_eq!(d % heads, 0, "dim {} not divisible by heads {}", d, heads);
        let dh = d / heads;
        let scale = T::one() / c::<T>((dh as f64).sqrt());
        let per_item: Vec<(Array2<T>, Vec<Array2<T>>)> = par_map_indexed(n, |ni| {
            let mut out = Array2::<T>::zeros((t, d));
            let mut attns = Vec::with_capacity(heads);
            for h in 0..heads {
                let lo = h * dh;
                let hi = lo + dh;
                let qh = qv.slice(ndarray::s![ni, .., lo..hi]);
                let kh = kv.slice(ndarray::s![ni, .., lo..hi]);
                let vh = vv.slice(ndarray::s![ni, .., lo..hi]);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|x| x * scale);
                let attn = kernels::softmax_rows(&scores.view());
                let oh = attn.dot(&vh);
                out.slice_mut(ndarray::s![.., lo..hi]).assign(&oh);
                attns.push(attn);
            }
            (out, attns)
        });
        let mut out = ndarray::Array3::<T>::zeros((n, t, d));
        let mut attn_all = Array4::<T>::zeros((n, heads, t, t));
        for (ni, (o, attns)) in per_item.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), ni).assign(&o);
            for (h, a) in attns.into_iter().enumerate() {
                attn_all
                    .slice_mut(ndarray::s![ni, h, .., ..])
                    .assign(&a);
            }
        }
        let r = self.req(q) || self.req(k) || self.req(v);
        self.push(
            out.into_dyn(),
            Op::Mha {
                q,
                k,
                v,
                heads,
                attn: attn_all,
            },
            r,
        )
    }

    /// Saved attention weights (n, heads, t, t) of an `mha` node.
    pub fn attention_weights(&self, node: Var) -> Option<&Array4<T>> {
        match &self.ops[node.0] {
            Op::Mha { attn, .. } => Some(attn),
            _ => None,
        }
    }

    /// x (n, rest...) + b (rest...): add `b` to every item along axis 0.
    pub fn add_bcast0(&mut self, x: Var, b: Var) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        let bs = self.values[b.0].shape().to_vec();
        assert_eq!(&xs[1..], &bs[..], "broadcast shape mismatch");
        let mut v = self.values[x.0].clone();
        let bv = &self.values[b.0];
        for mut item in v.axis_iter_mut(Axis(0)) {
            item += bv;
        }
        let r = self.req(x) || self.req(b);
        self.push(v, Op::AddBcast0(x, b), r)
    }

    // ---- layout ----

    /// Concatenate along the token axis of (n, t, d).
    pub fn concat_tokens(&mut self, a: Var, b: Var) -> Var {
        let av = as3(&self.values[a.0]);
        let bv = as3(&self.values[b.0]);
        let v = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
            .expect("concat_tokens")
            .into_dyn();
        let r = self.req(a) || self.req(b);
        self.push(v, Op::ConcatTokens(a, b), r)
    }

    /// Token range [from, to) of (n, t, d).
    pub fn slice_tokens(&mut self, x: Var, from: usize, to: usize) -> Var {
        let xv = as3(&self.values[x.0]);
        let v = xv.slice(ndarray::s![.., from..to, ..]).to_owned().into_dyn();
        let r = self.req(x);
        self.push(v, Op::SliceTokens(x, from, to), r)
    }

    /// (n,c,h,w) -> (n, h*w, c), row-major over the spatial grid.
    pub fn feat_to_tokens(&mut self, x: Var) -> Var {
        let xv = as4(&self.values[x.0]);
        let (n, cdim, h, w) = xv.dim();
        let mut out = ndarray::Array3::<T>::zeros((n, h * w, cdim));
        for ni in 0..n {
            for ci in 0..cdim {
                for i in 0..h {
                    for j in 0..w {
                        out[[ni, i * w + j, ci]] = xv[[ni, ci, i, j]];
                    }
                }
            }
        }
        let r = self.req(x);
        self.push(out.into_dyn(), Op::FeatToTokens(x), r)
    }

    /// (n, h*w, c) -> (n, c, h, w); exact inverse of `feat_to_tokens`.
    pub fn tokens_to_feat(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = as3(&self.values[x.0]);
        let (n, t, cdim) = xv.dim();
        assert_eq!(t, h * w, "token count {} != {}x{}", t, h, w);
        let mut out = Array4::<T>::zeros((n, cdim, h, w));
        for ni in 0..n {
            for ci in 0..cdim {
                for i in 0..h {
                    for j in 0..w {
                        out[[ni, ci, i, j]] = xv[[ni, i * w + j, ci]];
                    }
                }
            }
        }
        let r = self.req(x);
        self.push(out.into_dyn(), Op::TokensToFeat(x), r)
    }

    /// Row-major reshape (same element order).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.values[x.0]
            .to_shape(IxDyn(shape))
            .expect("reshape")
            .into_owned();
        let r = self.req(x);
        self.push(v, Op::Reshape(x), r)
    }

    // ---- reductions & row ops ----

    /// Per-row dot product of two (n, d) arrays -> (n).
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.values[a.0]);
        let bv = as2(&self.values[b.0]);
        let n = av.nrows();
        let mut out = Array1::<T>::zeros(n);
        for i in 0..n {
            out[i] = av.row(i).dot(&bv.row(i));
        }
        let r = self.req(a) || self.req(b);
        self.push(out.into_dyn(), Op::RowDot(a, b), r)
    }

    /// (n, d) / (n), broadcast over columns.
    pub fn div_rows(&mut self, x: Var, d: Var) -> Var {
        let xv = as2(&self.values[x.0]);
        let dv = &self.values[d.0];
        let mut out = xv.to_owned();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let k = T::one() / dv[[i]];
            row.mapv_inplace(|t| t * k);
        }
        let r = self.req(x) || self.req(d);
        self.push(out.into_dyn(), Op::DivRows(x, d), r)
    }

    /// (n, d) * (n), broadcast over columns.
    pub fn mul_rows(&mut self, x: Var, m: Var) -> Var {
        let xv = as2(&self.values[x.0]);
        let mv = &self.values[m.0];
        let mut out = xv.to_owned();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let k = mv[[i]];
            row.mapv_inplace(|t| t * k);
        }
        let r = self.req(x) || self.req(m);
        self.push(out.into_dyn(), Op::MulRows(x, m), r)
    }

    /// (n,c,h,w) * (n,h,w), the mask broadcast across channels.
    pub fn mul_chan_broadcast(&mut self, x: Var, m: Var) -> Var {
        let xv = as4(&self.values[x.0]);
        let mv = &self.values[m.0];
        let (n, cdim, h, w) = xv.dim();
        let mut out = xv.to_owned();
        for ni in 0..n {
            for ci in 0..cdim {
                for i in 0..h {
                    for j in 0..w {
                        out[[ni, ci, i, j]] = out[[ni, ci, i, j]] * mv[[ni, i, j]];
                    }
                }
            }
        }
        let r = self.req(x) || self.req(m);
        self.push(out.into_dyn(), Op::MulChanBroadcast(x, m), r)
    }

    /// Select one column per row of an (n, c) array -> (n).
    pub fn row_select(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = as2(&self.values[x.0]);
        let mut out = Array1::<T>::zeros(xv.nrows());
        for (i, &j) in idx.iter().enumerate() {
            out[i] = xv[[i, j]];
        }
        let r = self.req(x);
        self.push(out.into_dyn(), Op::RowSelect(x, idx), r)
    }

    /// Row-wise log-sum-exp of (n, c) -> (n), numerically stable.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let xv = as2(&self.values[x.0]);
        let mut out = Array1::<T>::zeros(xv.nrows());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mut m = row[0];
            for &v in row.iter() {
                if v > m {
                    m = v;
                }
            }
            let mut s = T::zero();
            for &v in row.iter() {
                s += (v - m).exp();
            }
            out[i] = m + s.ln();
        }
        let r = self.req(x);
        self.push(out.into_dyn(), Op::LogSumExpRows(x), r)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.values[x.0].len();
        let mut s = T::zero();
        for &v in self.values[x.0].iter() {
            s += v;
        }
        let v = ArrayD::from_elem(IxDyn(&[]), s / c::<T>(n as f64));
        let r = self.req(x);
        self.push(v, Op::MeanAll(x), r)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.values[x.0].iter() {
            s += v;
        }
        let v = ArrayD::from_elem(IxDyn(&[]), s);
        let r = self.req(x);
        self.push(v, Op::SumAll(x), r)
    }

    /// Max over all non-batch axes: (n, ...) -> (n). Ties resolve to the
    /// first element in row-major order.
    pub fn max_per_item(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let n = xv.shape()[0];
        let per = xv.len() / n;
        let flat = xv.to_shape((n, per)).expect("max reshape");
        let mut out = Array1::<T>::zeros(n);
        let mut arg = vec![0usize; n];
        for i in 0..n {
            let row = flat.row(i);
            let mut best = row[0];
            let mut bj = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > best {
                    best = v;
                    bj = j;
                }
            }
            out[i] = best;
            arg[i] = bj;
        }
        let r = self.req(x);
        self.push(out.into_dyn(), Op::MaxPerItem(x, arg), r)
    }

    /// Global average pool: (n,c,h,w) -> (n,c).
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xv = as4(&self.values[x.0]);
        let (n, cdim, h, w) = xv.dim();
        let inv = T::one() / c::<T>((h * w) as f64);
        let mut out = Array2::<T>::zeros((n, cdim));
        for ni in 0..n {
            for ci in 0..cdim {
                let mut s = T::zero();
                for i in 0..h {
                    for j in 0..w {
                        s += xv[[ni, ci, i, j]];
                    }
                }
                out[[ni, ci]] = s * inv;
            }
        }
        let r = self.req(x);
        self.push(out.into_dyn(), Op::MeanSpatial(x), r)
    }

    // ---- reverse pass ----

    /// Accumulate gradients of every `requires_grad` node reachable from
    /// `seed`, which must be scalar.
    pub fn backward(&mut self, seed: Var) {
        assert_eq!(self.values[seed.0].len(), 1, "backward seed must be scalar");
        self.grads = vec![None; self.values.len()];
        self.grads[seed.0] = Some(ArrayD::from_elem(self.values[seed.0].raw_dim(), T::one()));
        for i in (0..=seed.0).rev() {
            if !self.requires[i] || self.grads[i].is_none() {
                continue;
            }
            self.step_backward(i);
        }
    }

    fn step_backward(&mut self, i: usize) {
        let (head, tail) = self.grads.split_at_mut(i);
        let g = tail[0].as_ref().expect("grad present").clone();
        let values = &self.values;
        let requires = &self.requires;
        let mut acc = |v: Var, delta: ArrayD<T>| {
            if !requires[v.0] {
                return;
            }
            debug_assert_eq!(delta.shape(), values[v.0].shape(), "grad shape mismatch");
            match &mut head[v.0] {
                Some(slot) => *slot += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, &g * &values[b.0]);
                acc(*b, &g * &values[a.0]);
            }
            Op::Div(a, b) => {
                acc(*a, &g / &values[b.0]);
                let d = &g * &values[a.0] / (&values[b.0] * &values[b.0]);
                acc(*b, d.mapv(|x| -x));
            }
            Op::Scale(a, k) => acc(*a, g.mapv(|x| x * *k)),
            Op::AddConst(a, _) => acc(*a, g),
            Op::Abs(a) => {
                let s = values[a.0].mapv(|x| {
                    if x > T::zero() {
                        T::one()
                    } else if x < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
                acc(*a, &g * &s);
            }
            Op::Relu(a) => {
                let m = values[a.0].mapv(|x| if x > T::zero() { T::one() } else { T::zero() });
                acc(*a, &g * &m);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let m = values[a.0].mapv(|x| if x > T::zero() { T::one() } else { s });
                acc(*a, &g * &m);
            }
            Op::Tanh(a) => {
                let y = &values[i];
                let d = y.mapv(|t| T::one() - t * t);
                acc(*a, &g * &d);
            }
            Op::Sigmoid(a) => {
                let y = &values[i];
                let d = y.mapv(|s| s * (T::one() - s));
                acc(*a, &g * &d);
            }
            Op::Softplus(a) => {
                let d = values[a.0].mapv(sigmoid_stable);
                acc(*a, &g * &d);
            }
            Op::Exp(a) => acc(*a, &g * &values[i]),
            Op::Ln(a) => acc(*a, &g / &values[a.0]),
            Op::Sqrt(a) => {
                let half = c::<T>(0.5);
                let d = values[i].mapv(|y| half / y);
                acc(*a, &g * &d);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let m = values[a.0].mapv(|x| {
                    if x > lo && x < hi {
                        T::one()
                    } else {
                        T::zero()
                    }
                });
                acc(*a, &g * &m);
            }
            Op::MatMul(a, b) => {
                let g2 = as2(&g);
                let av = as2(&values[a.0]);
                let bv = as2(&values[b.0]);
                acc(*a, g2.dot(&bv.t()).into_dyn());
                acc(*b, av.t().dot(&g2).into_dyn());
            }
            Op::AddRowBias(x, bias) => {
                let g2 = as2(&g);
                acc(*x, g.clone());
                acc(*bias, g2.sum_axis(Axis(0)).into_dyn());
            }
            Op::AddChanBias(x, bias) => {
                let g4 = as4(&g);
                let db = g4.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1));
                acc(*x, g.clone());
                acc(*bias, db.into_dyn());
            }
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            } => {
                let xv = as4(&values[x.0]);
                let wv = as4(&values[w.0]);
                let g4 = as4(&g);
                let back = kernels::conv2d_backward(
                    xv.dim(),
                    &wv.view(),
                    cols,
                    &g4.view(),
                    *stride,
                    *pad,
                );
                acc(*x, back.dx.into_dyn());
                acc(*w, back.dw.into_dyn());
            }
            Op::NearestUp2(x) => {
                let g4 = as4(&g);
                acc(*x, kernels::nearest_up2_backward(&g4.view()).into_dyn());
            }
            Op::SoftmaxLast(x) => {
                let shape = values[i].shape().to_vec();
                let colsn = *shape.last().unwrap();
                let rows = values[i].len() / colsn;
                let y = values[i].to_shape((rows, colsn)).unwrap();
                let g2 = g.to_shape((rows, colsn)).unwrap();
                let mut dx = Array2::<T>::zeros((rows, colsn));
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = g2.row(r);
                    let dot = yr.dot(&gr);
                    for cidx in 0..colsn {
                        dx[[r, cidx]] = yr[cidx] * (gr[cidx] - dot);
                    }
                }
                acc(*x, dx.into_shape_with_order(IxDyn(&shape)).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let shape = values[x.0].shape().to_vec();
                let d = *shape.last().unwrap();
                let rows = values[x.0].len() / d;
                let xv = values[x.0].to_shape((rows, d)).unwrap();
                let g2 = g.to_shape((rows, d)).unwrap();
                let gam = &values[gamma.0];
                let inv_d = T::one() / c::<T>(d as f64);
                let mut dx = Array2::<T>::zeros((rows, d));
                let mut dgamma = Array1::<T>::zeros(d);
                let mut dbeta = Array1::<T>::zeros(d);
                for r in 0..rows {
                    let mu = mean[r];
                    let rs = rstd[r];
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        let xhat = (xv[[r, j]] - mu) * rs;
                        let dy = g2[[r, j]];
                        dgamma[j] += dy * xhat;
                        dbeta[j] += dy;
                        let dxhat = dy * gam[[j]];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for j in 0..d {
                        let xhat = (xv[[r, j]] - mu) * rs;
                        let dxhat = g2[[r, j]] * gam[[j]];
                        dx[[r, j]] =
                            rs * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
                    }
                }
                acc(*x, dx.into_shape_with_order(IxDyn(&shape)).unwrap());
                acc(*gamma, dgamma.into_dyn());
                acc(*beta, dbeta.into_dyn());
            }
            Op::Mha {
                q,
                k,
                v,
                heads,
                attn,
            } => {
                let qv = as3(&values[q.0]);
                let kv = as3(&values[k.0]);
                let vv = as3(&values[v.0]);
                let (n, t, d) = qv.dim();
                let heads = *heads;
                let dh = d / heads;
                let scale = T::one() / c::<T>((dh as f64).sqrt());
                let g3 = g.to_shape((n, t, d)).unwrap();
                let per_item: Vec<(Array2<T>, Array2<T>, Array2<T>)> = par_map_indexed(n, |ni| {
                    let mut dqi = Array2::<T>::zeros((t, d));
                    let mut dki = Array2::<T>::zeros((t, d));
                    let mut dvi = Array2::<T>::zeros((t, d));
                    for h in 0..heads {
                        let lo = h * dh;
                        let hi = lo + dh;
                        let qh = qv.slice(ndarray::s![ni, .., lo..hi]);
                        let kh = kv.slice(ndarray::s![ni, .., lo..hi]);
                        let vh = vv.slice(ndarray::s![ni, .., lo..hi]);
                        let ah = attn.slice(ndarray::s![ni, h, .., ..]);
                        let gh = g3.slice(ndarray::s![ni, .., lo..hi]);
                        let dattn = gh.dot(&vh.t());
                        let dv_h = ah.t().dot(&gh);
                        // softmax backward per row
                        let mut dscores = Array2::<T>::zeros((t, t));
                        for r in 0..t {
                            let ar = ah.row(r);
                            let dr = dattn.row(r);
                            let dot = ar.dot(&dr);
                            for cidx in 0..t {
                                dscores[[r, cidx]] = ar[cidx] * (dr[cidx] - dot) * scale;
                            }
                        }
                        let dq_h = dscores.dot(&kh);
                        let dk_h = dscores.t().dot(&qh);
                        dqi.slice_mut(ndarray::s![.., lo..hi]).assign(&dq_h);
                        dki.slice_mut(ndarray::s![.., lo..hi]).assign(&dk_h);
                        dvi.slice_mut(ndarray::s![.., lo..hi]).assign(&dv_h);
                    }
                    (dqi, dki, dvi)
                });
                let mut dq = ndarray::Array3::<T>::zeros((n, t, d));
                let mut dk = ndarray::Array3::<T>::zeros((n, t, d));
                let mut dv = ndarray::Array3::<T>::zeros((n, t, d));
                for (ni, (a, b2, c2)) in per_item.into_iter().enumerate() {
                    dq.index_axis_mut(Axis(0), ni).assign(&a);
                    dk.index_axis_mut(Axis(0), ni).assign(&b2);
                    dv.index_axis_mut(Axis(0), ni).assign(&c2);
                }
                acc(*q, dq.into_dyn());
                acc(*k, dk.into_dyn());
                acc(*v, dv.into_dyn());
            }
            Op::AddBcast0(x, b) => {
                acc(*x, g.clone());
                acc(*b, g.sum_axis(Axis(0)));
            }
            Op::ConcatTokens(a, b) => {
                let ta = values[a.0].shape()[1];
                let g3 = as3(&g);
                let ga = g3.slice(ndarray::s![.., ..ta, ..]).to_owned().into_dyn();
                let gb = g3.slice(ndarray::s![.., ta.., ..]).to_owned().into_dyn();
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::SliceTokens(x, from, to) => {
                let mut dx = ArrayD::<T>::zeros(values[x.0].raw_dim());
                {
                    let mut dx3 = dx
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix3>()
                        .expect("slice grad rank");
                    let g3 = as3(&g);
                    dx3.slice_mut(ndarray::s![.., *from..*to, ..]).assign(&g3);
                }
                acc(*x, dx);
            }
            Op::FeatToTokens(x) => {
                let xv = as4(&values[x.0]);
                let (n, cdim, h, w) = xv.dim();
                let g3 = g.to_shape((n, h * w, cdim)).unwrap();
                let mut dx = Array4::<T>::zeros((n, cdim, h, w));
                for ni in 0..n {
                    for ci in 0..cdim {
                        for ii in 0..h {
                            for jj in 0..w {
                                dx[[ni, ci, ii, jj]] = g3[[ni, ii * w + jj, ci]];
                            }
                        }
                    }
                }
                acc(*x, dx.into_dyn());
            }
            Op::TokensToFeat(x) => {
                let g4 = as4(&g);
                let (n, cdim, h, w) = g4.dim();
                let mut dx = ndarray::Array3::<T>::zeros((n, h * w, cdim));
                for ni in 0..n {
                    for ci in 0..cdim {
                        for ii in 0..h {
                            for jj in 0..w {
                                dx[[ni, ii * w + jj, ci]] = g4[[ni, ci, ii, jj]];
                            }
                        }
                    }
                }
                acc(*x, dx.into_dyn());
            }
            Op::Reshape(x) => {
                let dx = g
                    .to_shape(values[x.0].raw_dim())
                    .expect("reshape grad")
                    .into_owned();
                acc(*x, dx);
            }
            Op::RowDot(a, b) => {
                let av = as2(&values[a.0]);
                let bv = as2(&values[b.0]);
                let (n, d) = av.dim();
                let mut da = Array2::<T>::zeros((n, d));
                let mut db = Array2::<T>::zeros((n, d));
                for r in 0..n {
                    let gr = g[[r]];
                    for cidx in 0..d {
                        da[[r, cidx]] = gr * bv[[r, cidx]];
                        db[[r, cidx]] = gr * av[[r, cidx]];
                    }
                }
                acc(*a, da.into_dyn());
                acc(*b, db.into_dyn());
            }
            Op::DivRows(x, dvar) => {
                let xv = as2(&values[x.0]);
                let dvals = &values[dvar.0];
                let (n, d) = xv.dim();
                let g2 = as2(&g);
                let mut dx = Array2::<T>::zeros((n, d));
                let mut dd = Array1::<T>::zeros(n);
                for r in 0..n {
                    let den = dvals[[r]];
                    let inv = T::one() / den;
                    let mut s = T::zero();
                    for cidx in 0..d {
                        dx[[r, cidx]] = g2[[r, cidx]] * inv;
                        s += g2[[r, cidx]] * xv[[r, cidx]];
                    }
                    dd[r] = -s * inv * inv;
                }
                acc(*x, dx.into_dyn());
                acc(*dvar, dd.into_dyn());
            }
            Op::MulRows(x, mvar) => {
                let xv = as2(&values[x.0]);
                let mvals = &values[mvar.0];
                let (n, d) = xv.dim();
                let g2 = as2(&g);
                let mut dx = Array2::<T>::zeros((n, d));
                let mut dm = Array1::<T>::zeros(n);
                for r in 0..n {
                    let k = mvals[[r]];
                    let mut s = T::zero();
                    for cidx in 0..d {
                        dx[[r, cidx]] = g2[[r, cidx]] * k;
                        s += g2[[r, cidx]] * xv[[r, cidx]];
                    }
                    dm[r] = s;
                }
                acc(*x, dx.into_dyn());
                acc(*mvar, dm.into_dyn());
            }
            Op::MulChanBroadcast(x, mvar) => {
                let xv = as4(&values[x.0]);
                let mv = &values[mvar.0];
                let (n, cdim, h, w) = xv.dim();
                let g4 = as4(&g);
                let mut dx = Array4::<T>::zeros((n, cdim, h, w));
                let mut dm = ndarray::Array3::<T>::zeros((n, h, w));
                for ni in 0..n {
                    for ci in 0..cdim {
                        for ii in 0..h {
                            for jj in 0..w {
                                let gv = g4[[ni, ci, ii, jj]];
                                dx[[ni, ci, ii, jj]] = gv * mv[[ni, ii, jj]];
                                dm[[ni, ii, jj]] += gv * xv[[ni, ci, ii, jj]];
                            }
                        }
                    }
                }
                acc(*x, dx.into_dyn());
                acc(*mvar, dm.into_dyn());
            }
            Op::RowSelect(x, idx) => {
                let mut dx = ArrayD::<T>::zeros(values[x.0].raw_dim());
                for (r, &j) in idx.iter().enumerate() {
                    dx[[r, j]] = g[[r]];
                }
                acc(*x, dx);
            }
            Op::LogSumExpRows(x) => {
                let xv = as2(&values[x.0]);
                let (n, d) = xv.dim();
                let lse = &values[i];
                let mut dx = Array2::<T>::zeros((n, d));
                for r in 0..n {
                    let gr = g[[r]];
                    for cidx in 0..d {
                        dx[[r, cidx]] = gr * (xv[[r, cidx]] - lse[[r]]).exp();
                    }
                }
                acc(*x, dx.into_dyn());
            }
            Op::MeanAll(x) => {
                let n = values[x.0].len();
                let gv = *g.iter().next().unwrap() / c::<T>(n as f64);
                acc(*x, ArrayD::from_elem(values[x.0].raw_dim(), gv));
            }
            Op::SumAll(x) => {
                let gv = *g.iter().next().unwrap();
                acc(*x, ArrayD::from_elem(values[x.0].raw_dim(), gv));
            }
            Op::MaxPerItem(x, arg) => {
                let n = values[x.0].shape()[0];
                let per = values[x.0].len() / n;
                let mut dx = ArrayD::<T>::zeros(values[x.0].raw_dim());
                {
                    let mut flat = dx.view_mut().into_shape_with_order((n, per)).unwrap();
                    for r in 0..n {
                        flat[[r, arg[r]]] = g[[r]];
                    }
                }
                acc(*x, dx);
            }
            Op::MeanSpatial(x) => {
                let xv = as4(&values[x.0]);
                let (n, cdim, h, w) = xv.dim();
                let inv = T::one() / c::<T>((h * w) as f64);
                let g2 = as2(&g);
                let mut dx = Array4::<T>::zeros((n, cdim, h, w));
                for ni in 0..n {
                    for ci in 0..cdim {
                        let gv = g2[[ni, ci]] * inv;
                        for ii in 0..h {
                            for jj in 0..w {
                                dx[[ni, ci, ii, jj]] = gv;
                            }
                        }
                    }
                }
                acc(*x, dx.into_dyn());
            }
        }
    }
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus_stable<T: Scalar>(x: T) -> T {
    let z = if x > T::zero() { x } else { T::zero() };
    z + (T::one() + (-x.abs()).exp()).ln()
}

fn as2<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view().into_dimensionality().expect("rank-2 view")
}

fn as3<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView3<'_, T> {
    a.view().into_dimensionality().expect("rank-3 view")
}

fn as4<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView4<'_, T> {
    a.view().into_dimensionality().expect("rank-4 view")
}

#[cfg(test)]
mod tests {
    use super::check::{finite_diff, max_rel_error};
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    /// Builds `f(x)` twice: once differentiably, once through finite
    /// differences, and compares gradients.
    fn check_op<F>(shape: &[usize], seed: u64, f: F)
    where
        F: Fn(&mut Tape<f64>, Var) -> Var,
    {
        let x0 = randn(shape, seed);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let y = f(&mut tape, x);
        let loss = tape.mean_all(y);
        tape.backward(loss);
        let analytic = tape.grad(x).expect("grad").clone();
        let numeric = finite_diff(&x0, 1e-5, |xv| {
            let mut t = Tape::new();
            let xx = t.leaf(xv.clone(), false);
            let yy = f(&mut t, xx);
            let l = t.mean_all(yy);
            t.scalar(l)
        });
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-5, "op gradient mismatch: rel err {}", err);
    }

    #[test]
    fn grad_elementwise_chain() {
        check_op(&[3, 4], 1, |t, x| {
            let a = t.tanh(x);
            let b = t.sigmoid(a);
            let cnode = t.softplus(b);
            let d = t.scale(cnode, 1.7);
            t.add_const(d, 0.3)
        });
    }

    #[test]
    fn grad_matmul_bias() {
        let w0 = randn(&[4, 5], 7);
        let b0 = randn(&[5], 8);
        check_op(&[3, 4], 2, move |t, x| {
            let w = t.leaf(w0.clone(), false);
            let b = t.leaf(b0.clone(), false);
            let y = t.matmul(x, w);
            t.add_row_bias(y, b)
        });
    }

    #[test]
    fn grad_conv2d_input_and_weight() {
        let x0 = randn(&[2, 3, 5, 5], 3);
        let w0 = randn(&[4, 3, 3, 3], 4);
        // input gradient
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let w = tape.leaf(w0.clone(), true);
        let y = tape.conv2d(x, w, 2, 1);
        let loss = tape.mean_all(y);
        tape.backward(loss);
        let gx = tape.grad(x).unwrap().clone();
        let gw = tape.grad(w).unwrap().clone();
        let f = |xv: &ArrayD<f64>, wv: &ArrayD<f64>| {
            let mut t = Tape::new();
            let xx = t.leaf(xv.clone(), false);
            let ww = t.leaf(wv.clone(), false);
            let yy = t.conv2d(xx, ww, 2, 1);
            let l = t.mean_all(yy);
            t.scalar(l)
        };
        let nx = finite_diff(&x0, 1e-5, |xv| f(xv, &w0));
        let nw = finite_diff(&w0, 1e-5, |wv| f(&x0, wv));
        assert!(max_rel_error(&gx, &nx) < 1e-6);
        assert!(max_rel_error(&gw, &nw) < 1e-6);
    }

    #[test]
    fn grad_softmax_layernorm() {
        let g0 = randn(&[6], 11).mapv(|v| v + 1.5);
        let b0 = randn(&[6], 12);
        check_op(&[2, 3, 6], 5, move |t, x| {
            let gamma = t.leaf(g0.clone(), false);
            let beta = t.leaf(b0.clone(), false);
            let y = t.layer_norm(x, gamma, beta);
            t.softmax_last(y)
        });
    }

    #[test]
    fn grad_mha() {
        let k0 = randn(&[2, 5, 8], 21);
        let v0 = randn(&[2, 5, 8], 22);
        check_op(&[2, 5, 8], 20, move |t, q| {
            let k = t.leaf(k0.clone(), false);
            let v = t.leaf(v0.clone(), false);
            t.mha(q, k, v, 2)
        });
        // and through k, v
        let q0 = randn(&[2, 5, 8], 23);
        let v0b = randn(&[2, 5, 8], 24);
        check_op(&[2, 5, 8], 25, move |t, k| {
            let q = t.leaf(q0.clone(), false);
            let v = t.leaf(v0b.clone(), false);
            t.mha(q, k, v, 2)
        });
    }

    #[test]
    fn grad_reductions_and_rows() {
        let b0 = randn(&[4, 6], 31);
        check_op(&[4, 6], 30, move |t, a| {
            let b = t.leaf(b0.clone(), false);
            let d = t.row_dot(a, b);
            let dd = t.add_const(d, 3.0);
            let q = t.div_rows(a, dd);
            t.mul_rows(q, d)
        });
        check_op(&[3, 7], 32, |t, x| {
            let m = t.max_per_item(x);
            let l = t.logsumexp_rows(x);
            t.mul(m, l)
        });
        check_op(&[2, 3, 4, 4], 33, |t, x| {
            let up = t.nearest_up2(x);
            t.mean_spatial(up)
        });
    }

    #[test]
    fn grad_add_bcast0() {
        let b0 = randn(&[4, 3], 45);
        check_op(&[2, 4, 3], 44, move |t, x| {
            let b = t.leaf(b0.clone(), false);
            t.add_bcast0(x, b)
        });
        // gradient w.r.t. the broadcast operand
        let x0 = randn(&[2, 4, 3], 46);
        check_op(&[4, 3], 47, move |t, b| {
            let x = t.leaf(x0.clone(), false);
            t.add_bcast0(x, b)
        });
    }

    #[test]
    fn grad_layout_roundtrip() {
        check_op(&[2, 3, 4, 4], 40, |t, x| {
            let tok = t.feat_to_tokens(x);
            let back = t.tokens_to_feat(tok, 4, 4);
            t.mul(back, x)
        });
        let b0 = randn(&[2, 2, 5], 41);
        check_op(&[2, 3, 5], 42, move |t, a| {
            let b = t.leaf(b0.clone(), false);
            let cat = t.concat_tokens(a, b);
            t.slice_tokens(cat, 1, 4)
        });
    }

    #[test]
    fn flatten_unflatten_exact() {
        let x0 = randn(&[3, 7, 4, 6], 50);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone(), false);
        let tok = tape.feat_to_tokens(x);
        let back = tape.tokens_to_feat(tok, 4, 6);
        assert_eq!(tape.value(back), &x0);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(randn(&[1, 9, 8], 60), false);
        let k = tape.leaf(randn(&[1, 9, 8], 61), false);
        let v = tape.leaf(randn(&[1, 9, 8], 62), false);
        let out = tape.mha(q, k, v, 4);
        let attn = tape.attention_weights(out).unwrap();
        for h in 0..4 {
            for r in 0..9 {
                let s: f64 = attn.slice(ndarray::s![0, h, r, ..]).sum();
                assert!((s - 1.0).abs() < 1e-5, "row sum {}", s);
            }
        }
    }

    #[test]
    fn tagged_leaves_accumulate_over_reuse() {
        let mut tape = Tape::<f64>::new();
        let w0 = ArrayD::from_elem(IxDyn(&[2]), 3.0);
        let w1 = tape.leaf_tagged(w0.clone(), true, 42);
        let w2 = tape.leaf_tagged(w0, true, 42);
        assert_eq!(w1, w2);
        let y = tape.mul(w1, w2); // y = w^2 elementwise
        let loss = tape.sum_all(y);
        tape.backward(loss);
        let g = tape.grad(w1).unwrap();
        // d(w^2)/dw = 2w = 6
        assert!((g[[0]] - 6.0).abs() < 1e-12);
    }
}
