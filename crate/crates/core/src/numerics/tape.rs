//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for the vector-Jacobian product. Nodes only ever reference earlier
//! nodes, so walking the tape backwards is a valid topological order.

use super::kernels::{self, ConvGeometry, LinearTaps};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Concat0(Vec<Var>),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        // `None` for pointwise convolutions, whose columns are the input itself.
        cols: Option<Vec<T>>,
    },
    AdaptiveAvgPool {
        x: Var,
        rows: Vec<(usize, usize)>,
        cols: Vec<(usize, usize)>,
    },
    Resize {
        x: Var,
        rows: LinearTaps,
        cols: LinearTaps,
    },
    Gap(Var),
    ScaleChannels(Var, Var),
    ScatterRows {
        src: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

/// Recorded computation. Single owner; drop or [`Tape::reset`] between steps.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn dims3(op: &str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!("{op}: expected [C, H, W], got {shape:?}"))),
    }
}

fn dims2(op: &str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [m, n] => Ok((m, n)),
        _ => Err(Error::shape(format!("{op}: expected a matrix, got {shape:?}"))),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Named trainable leaf; see [`Tape::params`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.variable(value);
        self.params.push((name.into(), v));
        v
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn zip(&self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(x);
        Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same length")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Add `b` (length = last extent of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tb.numel();
        if tx.shape().last() != Some(&n) {
            return Err(Error::shape(format!(
                "add_row: bias of {n} values against {:?}",
                tx.shape()
            )));
        }
        let bias = tb.data();
        let data = tx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &c)| v + c))
            .collect();
        let out = Tensor::new(tx.shape(), data)?;
        self.push("add_row", out, Op::AddRow(x, b), &[x, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.map(x, |v| v * c);
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.map(x, |v| v + c);
        self.push("add_scalar", out, Op::AddScalar(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner extents {k} and {k2} differ"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            m,
            k,
            n,
            &mut out,
            false,
        );
        let out = Tensor::new([m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2("transpose", self.shape(x))?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new([n, m], out)?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = dims2("slice_cols", self.shape(x))?;
        if start >= end || end > n {
            return Err(Error::shape(format!(
                "slice_cols: range {start}..{end} outside {n} columns"
            )));
        }
        let src = self.value(x).data();
        let data = (0..m)
            .flat_map(|i| src[i * n + start..i * n + end].iter().copied())
            .collect();
        let out = Tensor::new([m, end - start], data)?;
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols: no inputs".into()))?;
        let (m, _) = dims2("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = dims2("concat_cols", self.shape(p))?;
            if mp != m {
                return Err(Error::shape(format!("concat_cols: {mp} rows vs {m}")));
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new([m, total], data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Concatenate along the leading axis (e.g. channels of `[C, H, W]`).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat: no inputs".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "concat: trailing extents {:?} vs {tail:?}",
                    s.get(1..).unwrap_or(&[])
                )));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat0(parts.to_vec()), parts)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v.max(T::zero()));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| gelu_parts(v).0);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v.abs());
        self.push("abs", out, Op::Abs(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let out = self.map(x, |v| v.max(lo).min(hi));
        self.push("clamp", out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "softmax: axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    /// Normalize over the last axis, then apply `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("layernorm: scalar input"))?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape(format!(
                "layernorm: affine parameters must have {d} values"
            )));
        }
        let eps = T::of(eps);
        let inv_d = T::of(1.0 / d as f64);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push(
            "layernorm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Cross-correlation of `x: [C, H, W]` with `w: [O, C, kh, kw]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c, h, wd) = dims3("conv2d", self.shape(x))?;
        let (o, kc, kh, kw) = match *self.shape(w) {
            [o, kc, kh, kw] => (o, kc, kh, kw),
            ref s => return Err(Error::shape(format!("conv2d: kernel shape {s:?}"))),
        };
        if kc != c {
            return Err(Error::shape(format!(
                "conv2d: kernel expects {kc} channels, input has {c}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!("conv2d: kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d: stride must be positive"));
        }
        let span_h = (h + 2 * pad)
            .checked_sub(kh)
            .ok_or_else(|| Error::shape("conv2d: kernel taller than padded input"))?;
        let span_w = (wd + 2 * pad)
            .checked_sub(kw)
            .ok_or_else(|| Error::shape("conv2d: kernel wider than padded input"))?;
        if span_h % stride != 0 || span_w % stride != 0 {
            return Err(Error::shape(format!(
                "conv2d: stride {stride} does not tile {h}x{wd} with pad {pad}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != o {
                return Err(Error::shape(format!("conv2d: bias must have {o} values")));
            }
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad,
            out_h: span_h / stride + 1,
            out_w: span_w / stride + 1,
        };
        let l = geom.out_h * geom.out_w;
        let cols = (!geom.is_pointwise()).then(|| kernels::im2col(self.value(x).data(), &geom));
        let mut out = vec![T::zero(); o * l];
        {
            let rhs = cols.as_deref().unwrap_or(self.value(x).data());
            kernels::gemm(
                self.value(w).data(),
                false,
                rhs,
                false,
                o,
                geom.patch_len(),
                l,
                &mut out,
                false,
            );
        }
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(l).zip(self.value(b).data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = Tensor::new([o, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            },
            &inputs,
        )
    }

    /// Average-pool `[C, H, W]` onto an `out_h × out_w` grid of adaptive bins.
    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = dims3("adaptive_avg_pool", self.shape(x))?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::shape(format!(
                "adaptive_avg_pool: cannot pool {h}x{w} to {out_h}x{out_w}"
            )));
        }
        let rows = kernels::pool_bins(h, out_h);
        let cols = kernels::pool_bins(w, out_w);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for &(y0, y1) in &rows {
                for &(x0, x1) in &cols {
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for v in &plane[y * w + x0..y * w + x1] {
                            acc += *v;
                        }
                    }
                    out.push(acc / T::of(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        let out = Tensor::new([c, out_h, out_w], out)?;
        self.push("adaptive_avg_pool", out, Op::AdaptiveAvgPool { x, rows, cols }, &[x])
    }

    /// Bilinear resize of `[C, H, W]` to `[C, out_h, out_w]` (half-pixel centers).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = dims3("resize_bilinear", self.shape(x))?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(Error::shape("resize_bilinear: empty extent"));
        }
        let rows = LinearTaps::new(h, out_h);
        let cols = LinearTaps::new(w, out_w);
        let out = kernels::resize_bilinear(self.value(x).data(), c, (h, w), &rows, &cols);
        let out = Tensor::new([c, out_h, out_w], out)?;
        self.push("resize_bilinear", out, Op::Resize { x, rows, cols }, &[x])
    }

    /// Global average pooling `[C, H, W] -> [C]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = dims3("gap", self.shape(x))?;
        if h == 0 || w == 0 {
            return Err(Error::shape("gap: empty spatial extent"));
        }
        let inv = T::of(1.0 / (h * w) as f64);
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new([c], out)?;
        self.push("gap", out, Op::Gap(x), &[x])
    }

    /// Multiply channel `c` of `x: [C, H, W]` by `s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, w) = dims3("scale_channels", self.shape(x))?;
        if self.value(s).numel() != c {
            return Err(Error::shape(format!("scale_channels: need {c} factors")));
        }
        let factors = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .zip(factors)
            .flat_map(|(plane, &f)| plane.iter().map(move |&v| v * f))
            .collect();
        let out = Tensor::new([c, h, w], data)?;
        self.push("scale_channels", out, Op::ScaleChannels(x, s), &[x, s])
    }

    /// Place row `r` of `src` at row `index[r]` of a zero `[rows, cols]` matrix.
    pub fn scatter_rows(&mut self, src: Var, index: Vec<usize>, rows: usize) -> Result<Var> {
        let (k, n) = dims2("scatter_rows", self.shape(src))?;
        if index.len() != k || index.iter().any(|&i| i >= rows) {
            return Err(Error::shape("scatter_rows: bad row index"));
        }
        let data = self.value(src).data();
        let mut out = vec![T::zero(); rows * n];
        for (r, &dst) in index.iter().enumerate() {
            out[dst * n..(dst + 1) * n].copy_from_slice(&data[r * n..(r + 1) * n]);
        }
        let out = Tensor::new([rows, n], out)?;
        self.push("scatter_rows", out, Op::ScatterRows { src, index }, &[src])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::shape("mean: empty tensor"));
        }
        let m = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`. The tape is left intact, so calling
    /// this twice yields identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        let shapes = grads
            .iter()
            .enumerate()
            .map(|(i, _)| self.nodes[i].value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
        f(buf);
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, |d| add_into(d, g));
                self.acc(grads, *b, |d| {
                    for row in g.chunks(d.len()) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c));
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |d| add_into(d, g)),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |d| kernels::gemm(g, false, vb, true, m, n, k, d, true));
                self.acc(grads, *b, |d| kernels::gemm(va, true, g, false, k, m, n, d, true));
            }
            Op::Transpose(x) => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                self.acc(grads, *x, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                let w = out.shape()[1];
                self.acc(grads, *x, |d| {
                    for (i, row) in g.chunks(w).enumerate() {
                        add_into(&mut d[i * n + start..i * n + start + w], row);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.acc(grads, p, |d| {
                        for (i, row) in d.chunks_mut(w).enumerate() {
                            add_into(row, &g[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Concat0(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    self.acc(grads, p, |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Relu(x) => {
                let vx = val(*x);
                self.acc(grads, *x, |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(vx) {
                        if v > T::zero() {
                            *d += g;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                self.acc(grads, *x, |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(vx) {
                        *d += g * gelu_parts(v).1;
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                self.acc(grads, *x, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y * (T::one() - y);
                    }
                });
            }
            Op::Abs(x) => {
                let vx = val(*x);
                self.acc(grads, *x, |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(vx) {
                        if v > T::zero() {
                            *d += g;
                        } else if v < T::zero() {
                            *d -= g;
                        }
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let vx = val(*x);
                self.acc(grads, *x, |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(vx) {
                        if v >= *lo && v <= *hi {
                            *d += g;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                self.acc(grads, *x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot = (0..len).map(|k| g[at(k)] * y[at(k)]).sum::<T>();
                            for k in 0..len {
                                d[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *out.shape().last().expect("rank >= 1");
                let gv = val(*gain);
                self.acc(grads, *gain, |dg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.acc(grads, *bias, |db| {
                    for grow in g.chunks(d) {
                        add_into(db, grow);
                    }
                });
                self.acc(grads, *x, |dx| {
                    let inv_d = T::of(1.0 / d as f64);
                    let mut dh = vec![T::zero(); d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                        }
                        let s1 = dh.iter().copied().sum::<T>();
                        let s2 = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>();
                        let drow = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            drow[j] += inv_std[r] * (dh[j] - (s1 + hrow[j] * s2) * inv_d);
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            } => {
                let o = out.shape()[0];
                let l = geom.out_h * geom.out_w;
                let p = geom.patch_len();
                let cols_data = cols.as_deref().unwrap_or(val(*x));
                let wv = val(*w);
                self.acc(grads, *w, |dw| kernels::gemm(g, false, cols_data, true, o, l, p, dw, true));
                if let Some(b) = bias {
                    self.acc(grads, *b, |db| {
                        for (dbv, row) in db.iter_mut().zip(g.chunks(l)) {
                            *dbv += row.iter().copied().sum::<T>();
                        }
                    });
                }
                self.acc(grads, *x, |dx| {
                    if geom.is_pointwise() {
                        kernels::gemm(wv, true, g, false, p, o, l, dx, true);
                    } else {
                        let mut dcols = vec![T::zero(); p * l];
                        kernels::gemm(wv, true, g, false, p, o, l, &mut dcols, false);
                        kernels::col2im_add(&dcols, geom, dx);
                    }
                });
            }
            Op::AdaptiveAvgPool { x, rows, cols } => {
                let (h, w) = (self.shape(*x)[1], self.shape(*x)[2]);
                let cells = rows.len() * cols.len();
                self.acc(grads, *x, |dx| {
                    for (plane, gplane) in dx.chunks_mut(h * w).zip(g.chunks(cells)) {
                        let mut k = 0;
                        for &(y0, y1) in rows {
                            for &(x0, x1) in cols {
                                let share = gplane[k] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                                for y in y0..y1 {
                                    plane[y * w + x0..y * w + x1]
                                        .iter_mut()
                                        .for_each(|v| *v += share);
                                }
                                k += 1;
                            }
                        }
                    }
                });
            }
            Op::Resize { x, rows, cols } => {
                let s = self.shape(*x);
                let (c, h, w) = (s[0], s[1], s[2]);
                self.acc(grads, *x, |dx| {
                    kernels::resize_bilinear_adjoint(g, c, (h, w), rows, cols, dx)
                });
            }
            Op::Gap(x) => {
                let s = self.shape(*x);
                let hw = s[1] * s[2];
                let inv = T::of(1.0 / hw as f64);
                self.acc(grads, *x, |dx| {
                    for (plane, &gc) in dx.chunks_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|v| *v += gc * inv);
                    }
                });
            }
            Op::ScaleChannels(x, s) => {
                let hw = out.numel() / out.shape()[0];
                let (vx, vs) = (val(*x), val(*s));
                self.acc(grads, *x, |dx| {
                    for ((plane, gplane), &f) in dx.chunks_mut(hw).zip(g.chunks(hw)).zip(vs) {
                        for (d, &gv) in plane.iter_mut().zip(gplane) {
                            *d += gv * f;
                        }
                    }
                });
                self.acc(grads, *s, |ds| {
                    for ((d, gplane), xplane) in ds.iter_mut().zip(g.chunks(hw)).zip(vx.chunks(hw)) {
                        *d += gplane.iter().zip(xplane).map(|(&a, &b)| a * b).sum::<T>();
                    }
                });
            }
            Op::ScatterRows { src, index } => {
                let n = out.shape()[1];
                self.acc(grads, *src, |d| {
                    for (r, &dst) in index.iter().enumerate() {
                        add_into(&mut d[r * n..(r + 1) * n], &g[dst * n..(dst + 1) * n]);
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let share = g[0] / T::of(self.nodes[x.0].value.numel() as f64);
                self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += share));
            }
        }
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

// (value, derivative)
fn gelu_parts<T: Element>(v: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (v + a * v * v * v);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * v * v);
    let y = half * v * (T::one() + t);
    let dy = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
    (y, dy)
}

/// Gradients produced by [`Tape::backward`], kept for leaf nodes only.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf, or `None` if it does not require grad or is
    /// disconnected from the loss.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Like [`Gradients::get`] but zero-filled for disconnected leaves.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()))
    }

    pub(crate) fn take_raw(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0)?.take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let ia = tape.matmul(id, a).unwrap();
        assert_eq!(tape.value(ia).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);

        let z = tape.constant(Tensor::zeros([2, 3]));
        let any = tape.constant(t(&[3, 4], &(0..12).map(|v| v as f64 - 5.5).collect::<Vec<_>>()));
        let zz = tape.matmul(z, any).unwrap();
        assert_eq!(tape.shape(zz), &[2, 4]);
        assert!(tape.value(zz).data().iter().all(|&v| v == 0.0));

        let bad = tape.constant(Tensor::zeros([3, 2]));
        assert!(matches!(tape.matmul(a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[0.0, std::f64::consts::LN_2]));
        let y = tape.softmax(x, 0).unwrap();
        let got = tape.value(y).data().to_vec();
        assert!((got[0] - 1.0 / 3.0).abs() < 1e-15 && (got[1] - 2.0 / 3.0).abs() < 1e-15);

        let raw = [0.3, -1.2, 2.5, 0.0, 0.7, -0.4];
        let x = tape.constant(t(&[2, 3], &raw));
        let shifted = tape.add_scalar(x, 17.0).unwrap();
        let a = tape.softmax(x, 1).unwrap();
        let b = tape.softmax(shifted, 1).unwrap();
        for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::new();
        let img: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(t(&[2, 5, 4], &img));
        let mut delta = vec![0.0; 2 * 2 * 9];
        delta[4] = 1.0; // out 0 <- in 0 center
        delta[(2 + 1) * 9 + 4] = 1.0; // out 1 <- in 1 center
        let k = tape.constant(t(&[2, 2, 3, 3], &delta));
        let y = tape.conv2d(x, k, None, 1, 1).unwrap();
        assert_eq!(tape.value(y).data(), &img[..]);

        let zero = tape.constant(Tensor::zeros([3, 2, 3, 3]));
        let y = tape.conv2d(x, zero, None, 1, 1).unwrap();
        assert_eq!(tape.shape(y), &[3, 5, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let c = tape.constant(Tensor::full([1, 5, 5], 0.7));
        let ones = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let y = tape.conv2d(c, ones, None, 1, 1).unwrap();
        let v = tape.value(y).data();
        assert!((v[2 * 5 + 2] - 9.0 * 0.7).abs() < 1e-12);
        // corners only see four taps
        assert!((v[0] - 4.0 * 0.7).abs() < 1e-12);

        // (5 + 2 - 3) / 3 is not integral
        assert!(matches!(tape.conv2d(c, ones, None, 3, 1), Err(Error::Shape(_))));
        let even = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        assert!(tape.conv2d(c, even, None, 1, 0).is_err());
    }

    #[test]
    fn layernorm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full([2], 1.0));
        let b = tape.constant(Tensor::zeros([2]));
        let x = tape.constant(t(&[2, 2], &[5.0, 5.0, 1.0, 3.0]));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] + 1.0).abs() < 1e-5 && (v[3] - 1.0).abs() < 1e-5);

        let row: Vec<f64> = (0..16).map(|i| ((i * 7919) % 13) as f64 * 0.3 - 1.0).collect();
        let g = tape.constant(Tensor::full([16], 1.0));
        let b = tape.constant(Tensor::zeros([16]));
        let x = tape.constant(t(&[1, 16], &row));
        let y = tape.layernorm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y).data();
        let mean = v.iter().sum::<f64>() / 16.0;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn gap_examples() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 0.5, 0.5, 0.5, 0.5]));
        let y = tape.gap(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5, 0.5]);
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.wrt(&tape, x).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[3], &[1.0, -2.0, 0.5]));
        let unused = tape.variable(t(&[2], &[4.0, 4.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(&tape, x).data(), &[2.0, -4.0, 1.0]);
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(&tape, unused).data(), &[0.0, 0.0]);

        let again = tape.backward(loss).unwrap();
        assert_eq!(again.wrt(&tape, x), grads.wrt(&tape, x));
        assert!(matches!(tape.backward(sq), Err(Error::Usage(_))));
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut tape = Tape::new();
        let w = tape.variable(t(&[2, 1], &[0.5, -1.0]));
        let a = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let ya = tape.matmul(a, w).unwrap();
        let yb = tape.matmul(b, w).unwrap();
        let sa = tape.sum(ya).unwrap();
        let sb = tape.sum(yb).unwrap();
        let total = tape.add(sa, sb).unwrap();
        let g = tape.backward(total).unwrap();
        assert_eq!(g.wrt(&tape, w).data(), &[10.0, 13.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::full([2], 3.0));
        let v = tape.variable(Tensor::full([2], 2.0));
        let p = tape.mul(c, v).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(&tape, v).data(), &[3.0, 3.0]);
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1], f64::MAX));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }
}
