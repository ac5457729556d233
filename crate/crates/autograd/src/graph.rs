//! Dynamic reverse-mode computation graph.
//!
//! A [`Graph`] is an append-only tape. Every op pushes one node whose parents
//! precede it, so reverse insertion order is a valid topological order for
//! the backward sweep. Graphs are rebuilt for every forward pass.

use std::sync::Arc;

use crate::kernels::{axis_split, col2im_add, gemm, im2col};
use crate::params::{ParamId, ParamStore};
use crate::{Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Value(usize);

impl Value {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One term of a [`Graph::sparse_mix`]: `out[row] += weight · src[src_row, block]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixEntry {
    pub out_row: usize,
    pub src_row: usize,
    pub block: usize,
    pub weight: f64,
}

/// Backward rule for ops defined outside this crate.
///
/// Receives the upstream gradient of the op output and the input values, and
/// returns one gradient buffer per input (`None` when the input is treated as
/// a constant).
pub trait CustomBackward: Send + Sync {
    fn backward(&self, grad_out: &[f64], inputs: &[&Tensor]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Scale(Value, f64),
    AddBias(Value, Value),
    Relu(Value),
    Log(Value),
    Exp(Value),
    Matmul(Value, Value),
    Reshape(Value),
    Concat { parts: Vec<Value>, axis: usize },
    GatherRows { src: Value, index: Arc<[usize]> },
    Take { src: Value, index: Arc<[usize]> },
    ScatterAddRows { src: Value, index: Arc<[usize]> },
    Softmax { input: Value, axis: usize },
    LogSoftmax { input: Value, axis: usize },
    Sum(Value),
    Mean(Value),
    Conv2d { input: Value, weight: Value, kernel: usize, cols: Vec<f64> },
    MaxPool2 { input: Value, argmax: Vec<usize> },
    Upsample2(Value),
    SparseMix { src: Value, entries: Arc<[MixEntry]>, width: usize },
    GroupMax { input: Value, argmax: Vec<usize> },
    Custom { inputs: Vec<Value>, rule: Box<dyn CustomBackward> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Value)>,
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Value]) -> Value {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Value(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Value {
        self.nodes.push(Node { value, grad: None, requires_grad: true, op: Op::Leaf });
        Value(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Value {
        self.nodes.push(Node { value, grad: None, requires_grad: false, op: Op::Leaf });
        Value(self.nodes.len() - 1)
    }

    /// Registers a parameter as a differentiable leaf. Registering the same
    /// parameter twice returns the existing node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Value {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.leaf(store.tensor(id).clone());
        self.params.push((id, v));
        v
    }

    /// Makes later [`Graph::param`] calls for `id` return `value` instead of
    /// a copy of the stored tensor.
    pub fn bind_param(&mut self, id: ParamId, value: Value) -> Result<()> {
        if self.params.iter().any(|(p, _)| *p == id) {
            return Err(mismatch("bind_param", format!("parameter {} already registered", id.index())));
        }
        self.params.push((id, value));
        Ok(())
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of every registered parameter; parameters the root does not
    /// depend on receive zeros.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.params
            .iter()
            .map(|&(id, v)| {
                let node = &self.nodes[v.0];
                let data = node.grad.clone().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                (id, Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
            })
            .collect()
    }

    fn same_shape(&self, op: &'static str, a: Value, b: Value) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Value, b: Value, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Value, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Value, factor: f64) -> Value {
        let out = self.map(a, |x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    /// Adds a bias vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Value, bias: Value) -> Result<Value> {
        let last = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [last] {
            return Err(mismatch("add_bias", format!("bias {:?} for input {:?}", self.shape(bias), self.shape(x))));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_exact_mut(last.max(1)) {
            add_into(chunk, &b);
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, a: Value) -> Value {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn log(&mut self, a: Value) -> Value {
        let out = self.map(a, f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Value) -> Value {
        let out = self.map(a, f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    /// `(m × k) · (k × n)`.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{m}, {k}] · [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Value, shape: impl Into<Vec<usize>>) -> Result<Value> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Result<Value> {
        let first = parts.first().ok_or_else(|| mismatch("concat", "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis { op: "concat", axis, rank: base.len() });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Selects rows (slices along axis 0).
    pub fn gather_rows(&mut self, src: Value, index: impl Into<Arc<[usize]>>) -> Result<Value> {
        let index = index.into();
        let t = self.value(src);
        let rows = *t.shape().first().ok_or_else(|| mismatch("gather_rows", "scalar input".into()))?;
        let w = t.row_width();
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in index.iter() {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: i, len: rows });
            }
            data.extend_from_slice(t.row(i));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::GatherRows { src, index }, &[src]))
    }

    /// Selects elements by flat index into a vector.
    pub fn take(&mut self, src: Value, index: impl Into<Arc<[usize]>>) -> Result<Value> {
        let index = index.into();
        let t = self.value(src).data();
        let mut data = Vec::with_capacity(index.len());
        for &i in index.iter() {
            data.push(*t.get(i).ok_or(TensorError::IndexOutOfRange { op: "take", index: i, len: t.len() })?);
        }
        let out = Tensor::vector(data);
        Ok(self.push(out, Op::Take { src, index }, &[src]))
    }

    /// `out[index[i]] += src[i]` over rows, producing `out_rows` rows.
    pub fn scatter_add_rows(&mut self, src: Value, index: impl Into<Arc<[usize]>>, out_rows: usize) -> Result<Value> {
        let index = index.into();
        let t = self.value(src);
        let rows = *t.shape().first().ok_or_else(|| mismatch("scatter_add_rows", "scalar input".into()))?;
        if index.len() != rows {
            return Err(mismatch("scatter_add_rows", format!("{} indices for {rows} rows", index.len())));
        }
        let w = t.row_width();
        let mut data = vec![0.0; out_rows * w];
        for (r, &i) in index.iter().enumerate() {
            if i >= out_rows {
                return Err(TensorError::IndexOutOfRange { op: "scatter_add_rows", index: i, len: out_rows });
            }
            add_into(&mut data[i * w..(i + 1) * w], t.row(r));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = out_rows;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ScatterAddRows { src, index }, &[src]))
    }

    fn softmax_forward(&self, input: Value, axis: usize, log: bool) -> Result<Tensor> {
        let t = self.value(input);
        if axis >= t.rank() {
            return Err(TensorError::InvalidAxis { op: "softmax", axis, rank: t.rank() });
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|j| (x[at(j)] - max).exp()).sum();
                for j in 0..len {
                    out[at(j)] = if log { x[at(j)] - max - z.ln() } else { (x[at(j)] - max).exp() / z };
                }
            }
        }
        Tensor::new(t.shape().to_vec(), out)
    }

    pub fn softmax(&mut self, input: Value, axis: usize) -> Result<Value> {
        let out = self.softmax_forward(input, axis, false)?;
        Ok(self.push(out, Op::Softmax { input, axis }, &[input]))
    }

    pub fn log_softmax(&mut self, input: Value, axis: usize) -> Result<Value> {
        let out = self.softmax_forward(input, axis, true)?;
        Ok(self.push(out, Op::LogSoftmax { input, axis }, &[input]))
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Value) -> Value {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Stride-1 zero-padded convolution of an `h × w × cin` image with a
    /// `k × k × cin × cout` kernel, `k ∈ {1, 3}`.
    pub fn conv2d(&mut self, input: Value, weight: Value) -> Result<Value> {
        let (h, w, cin) = match self.shape(input) {
            &[h, w, c] => (h, w, c),
            s => return Err(mismatch("conv2d", format!("input must be [h, w, c], got {s:?}"))),
        };
        let (k, cout) = match self.shape(weight) {
            &[k1, k2, c, co] if k1 == k2 && (k1 == 1 || k1 == 3) && c == cin => (k1, co),
            s => return Err(mismatch("conv2d", format!("weight {s:?} for input channels {cin}"))),
        };
        let cols = im2col(self.value(input).data(), h, w, cin, k);
        let mut out = vec![0.0; h * w * cout];
        gemm(h * w, k * k * cin, cout, &cols, false, self.value(weight).data(), false, &mut out, 0.0);
        let out = Tensor::new(vec![h, w, cout], out)?;
        Ok(self.push(out, Op::Conv2d { input, weight, kernel: k, cols }, &[input, weight]))
    }

    /// 2×2 max pooling with stride 2 over an `h × w × c` image.
    pub fn max_pool2(&mut self, input: Value) -> Result<Value> {
        let (h, w, c) = match self.shape(input) {
            &[h, w, c] if h % 2 == 0 && w % 2 == 0 => (h, w, c),
            s => return Err(mismatch("max_pool2", format!("need even [h, w, c], got {s:?}"))),
        };
        let x = self.value(input).data();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; oh * ow * c];
        let mut argmax = vec![0; oh * ow * c];
        for y in 0..oh {
            for xx in 0..ow {
                for ch in 0..c {
                    let mut best = (2 * y * w + 2 * xx) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((2 * y + dy) * w + 2 * xx + dx) * c + ch;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    let o = (y * ow + xx) * c + ch;
                    out[o] = x[best];
                    argmax[o] = best;
                }
            }
        }
        let out = Tensor::new(vec![oh, ow, c], out)?;
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, &[input]))
    }

    /// Nearest-neighbour 2× upsampling of an `h × w × c` image.
    pub fn upsample2(&mut self, input: Value) -> Result<Value> {
        let (h, w, c) = match self.shape(input) {
            &[h, w, c] => (h, w, c),
            s => return Err(mismatch("upsample2", format!("input must be [h, w, c], got {s:?}"))),
        };
        let x = self.value(input).data();
        let mut out = vec![0.0; 4 * h * w * c];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let src = ((y / 2) * w + xx / 2) * c;
                let dst = (y * 2 * w + xx) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
        let out = Tensor::new(vec![2 * h, 2 * w, c], out)?;
        Ok(self.push(out, Op::Upsample2(input), &[input]))
    }

    /// Sparse weighted row mixing. `src` is viewed as `rows × (blocks·width)`;
    /// each entry adds `weight · src[src_row, block·width .. (block+1)·width]`
    /// to row `out_row` of the `out_rows × width` result.
    pub fn sparse_mix(
        &mut self,
        src: Value,
        entries: impl Into<Arc<[MixEntry]>>,
        out_rows: usize,
        width: usize,
    ) -> Result<Value> {
        let entries = entries.into();
        let t = self.value(src);
        let rows = *t.shape().first().ok_or_else(|| mismatch("sparse_mix", "scalar input".into()))?;
        let rw = t.row_width();
        if width == 0 || !rw.is_multiple_of(width) {
            return Err(mismatch("sparse_mix", format!("row width {rw} not a multiple of {width}")));
        }
        let blocks = rw / width;
        let mut out = vec![0.0; out_rows * width];
        for e in entries.iter() {
            if e.src_row >= rows {
                return Err(TensorError::IndexOutOfRange { op: "sparse_mix", index: e.src_row, len: rows });
            }
            if e.out_row >= out_rows {
                return Err(TensorError::IndexOutOfRange { op: "sparse_mix", index: e.out_row, len: out_rows });
            }
            if e.block >= blocks {
                return Err(TensorError::IndexOutOfRange { op: "sparse_mix", index: e.block, len: blocks });
            }
            let s = &t.row(e.src_row)[e.block * width..(e.block + 1) * width];
            let o = &mut out[e.out_row * width..(e.out_row + 1) * width];
            for (d, v) in o.iter_mut().zip(s) {
                *d += e.weight * v;
            }
        }
        let out = Tensor::new(vec![out_rows, width], out)?;
        Ok(self.push(out, Op::SparseMix { src, entries, width }, &[src]))
    }

    /// Bilinear sampling of an `h × w × c` raster at continuous sample
    /// coordinates `(u, v)` (column, row; integer values hit sample centres).
    /// Coordinates outside `[0, w-1] × [0, h-1]` are clamped to the border.
    /// Returns the `n × c` samples and the number of clamped coordinates.
    /// Gradients flow to the raster only.
    pub fn bilinear_sample(&mut self, raster: Value, coords: &[(f64, f64)]) -> Result<(Value, usize)> {
        let (h, w, c) = match self.shape(raster) {
            &[h, w, c] if h > 0 && w > 0 => (h, w, c),
            s => return Err(mismatch("bilinear_sample", format!("raster must be nonempty [h, w, c], got {s:?}"))),
        };
        let mut entries = Vec::with_capacity(coords.len() * 4);
        let mut clamped = 0;
        for (n, &(u, v)) in coords.iter().enumerate() {
            let (taps, was_clamped) = bilinear_taps(u, v, w, h);
            clamped += was_clamped as usize;
            for (pix, weight) in taps {
                if weight != 0.0 {
                    entries.push(MixEntry { out_row: n, src_row: pix, block: 0, weight });
                }
            }
        }
        let flat = self.reshape(raster, vec![h * w, c])?;
        let out = self.sparse_mix(flat, entries, coords.len(), c)?;
        Ok((out, clamped))
    }

    /// Max over consecutive groups of `group` rows: `[n·group, d] -> [n, d]`.
    pub fn group_max(&mut self, input: Value, group: usize) -> Result<Value> {
        let (rows, d) = self.value(input).dims2()?;
        if group == 0 || rows % group != 0 {
            return Err(mismatch("group_max", format!("{rows} rows not divisible into groups of {group}")));
        }
        let n = rows / group;
        let x = self.value(input).data();
        let mut out = vec![0.0; n * d];
        let mut argmax = vec![0; n * d];
        for g in 0..n {
            for j in 0..d {
                let mut best = g * group * d + j;
                for r in 1..group {
                    let idx = (g * group + r) * d + j;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out[g * d + j] = x[best];
                argmax[g * d + j] = best;
            }
        }
        let out = Tensor::new(vec![n, d], out)?;
        Ok(self.push(out, Op::GroupMax { input, argmax }, &[input]))
    }

    /// Inserts an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Value], value: Tensor, rule: Box<dyn CustomBackward>) -> Value {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), rule }, inputs)
    }

    /// Accumulates d(root)/d(node) into every node the scalar `root` depends on.
    pub fn backward(&mut self, root: Value) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (p, cg) in contributions {
                let node = &mut self.nodes[p.0];
                match &mut node.grad {
                    Some(acc) => add_into(acc, &cg),
                    None => node.grad = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Value, Vec<f64>)> {
        let mut out = Vec::new();
        let mut emit = |v: Value, grad: Vec<f64>| {
            if self.needs(v) {
                out.push((v, grad));
            }
        };
        let val = |v: Value| self.value(v).data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, g.to_vec());
                emit(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(*a, g.to_vec());
                emit(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    emit(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if self.needs(*b) {
                    emit(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, f) => emit(*a, g.iter().map(|x| x * f).collect()),
            Op::AddBias(x, b) => {
                emit(*x, g.to_vec());
                if self.needs(*b) {
                    let last = self.value(*b).numel();
                    let mut gb = vec![0.0; last];
                    for chunk in g.chunks_exact(last.max(1)) {
                        add_into(&mut gb, chunk);
                    }
                    emit(*b, gb);
                }
            }
            Op::Relu(a) => emit(*a, g.iter().zip(val(*a)).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect()),
            Op::Log(a) => emit(*a, g.iter().zip(val(*a)).map(|(g, x)| g / x).collect()),
            Op::Exp(a) => emit(*a, g.iter().zip(self.nodes[i].value.data()).map(|(g, y)| g * y).collect()),
            Op::Matmul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("rank 2");
                let n = self.value(*b).shape()[1];
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, val(*b), true, &mut ga, 0.0);
                    emit(*a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, val(*a), true, g, false, &mut gb, 0.0);
                    emit(*b, gb);
                }
            }
            Op::Reshape(a) => emit(*a, g.to_vec()),
            Op::Concat { parts, axis } => {
                let shape = self.nodes[i].value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[start..start + len * inner]);
                        }
                        emit(p, gp);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { src, index } => {
                let t = self.value(*src);
                let w = t.row_width();
                let mut gs = vec![0.0; t.numel()];
                for (r, &idx) in index.iter().enumerate() {
                    add_into(&mut gs[idx * w..(idx + 1) * w], &g[r * w..(r + 1) * w]);
                }
                emit(*src, gs);
            }
            Op::Take { src, index } => {
                let mut gs = vec![0.0; self.value(*src).numel()];
                for (r, &idx) in index.iter().enumerate() {
                    gs[idx] += g[r];
                }
                emit(*src, gs);
            }
            Op::ScatterAddRows { src, index } => {
                let w = self.value(*src).row_width();
                let mut gs = Vec::with_capacity(self.value(*src).numel());
                for &idx in index.iter() {
                    gs.extend_from_slice(&g[idx * w..(idx + 1) * w]);
                }
                emit(*src, gs);
            }
            Op::Softmax { input, axis } | Op::LogSoftmax { input, axis } => {
                let log = matches!(self.nodes[i].op, Op::LogSoftmax { .. });
                let y = self.nodes[i].value.data();
                let (outer, len, inner) = axis_split(self.shape(*input), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        if log {
                            let gsum: f64 = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] = g[at(j)] - y[at(j)].exp() * gsum;
                            }
                        } else {
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
                emit(*input, gx);
            }
            Op::Sum(a) => emit(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                emit(*a, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::Conv2d { input, weight, kernel, cols } => {
                let &[h, w, cin] = self.shape(*input) else { unreachable!() };
                let cout = self.shape(*weight)[3];
                let kc = kernel * kernel * cin;
                if self.needs(*weight) {
                    let mut gw = vec![0.0; kc * cout];
                    gemm(kc, h * w, cout, cols, true, g, false, &mut gw, 0.0);
                    emit(*weight, gw);
                }
                if self.needs(*input) {
                    let mut gcols = vec![0.0; h * w * kc];
                    gemm(h * w, cout, kc, g, false, val(*weight), true, &mut gcols, 0.0);
                    let mut gx = vec![0.0; h * w * cin];
                    col2im_add(&gcols, h, w, cin, *kernel, &mut gx);
                    emit(*input, gx);
                }
            }
            Op::MaxPool2 { input, argmax } | Op::GroupMax { input, argmax } => {
                let mut gx = vec![0.0; self.value(*input).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
                emit(*input, gx);
            }
            Op::Upsample2(input) => {
                let &[h, w, c] = self.shape(*input) else { unreachable!() };
                let mut gx = vec![0.0; h * w * c];
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let src = (y * 2 * w + x) * c;
                        let dst = ((y / 2) * w + x / 2) * c;
                        add_into(&mut gx[dst..dst + c], &g[src..src + c]);
                    }
                }
                emit(*input, gx);
            }
            Op::SparseMix { src, entries, width } => {
                let t = self.value(*src);
                let rw = t.row_width();
                let mut gs = vec![0.0; t.numel()];
                for e in entries.iter() {
                    let start = e.src_row * rw + e.block * width;
                    let go = &g[e.out_row * width..(e.out_row + 1) * width];
                    for (d, v) in gs[start..start + width].iter_mut().zip(go) {
                        *d += e.weight * v;
                    }
                }
                emit(*src, gs);
            }
            Op::Custom { inputs, rule } => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                for (v, gv) in inputs.iter().zip(rule.backward(g, &tensors)) {
                    if let Some(gv) = gv {
                        emit(*v, gv);
                    }
                }
            }
        }
        out
    }
}

/// Four bilinear taps `(flat pixel index, weight)` for sample coordinate
/// `(u, v)` on a `w × h` grid, in the order (u0,v0), (u1,v0), (u0,v1), (u1,v1),
/// plus whether the coordinate had to be clamped.
pub fn bilinear_taps(u: f64, v: f64, w: usize, h: usize) -> ([(usize, f64); 4], bool) {
    let clamp = |x: f64, n: usize| -> (f64, bool) {
        let hi = (n - 1) as f64;
        if x.is_nan() || x < 0.0 {
            (0.0, true)
        } else if x > hi {
            (hi, true)
        } else {
            (x, false)
        }
    };
    let (cu, cu_clamped) = clamp(u, w);
    let (cv, cv_clamped) = clamp(v, h);
    let split = |x: f64, n: usize| -> (usize, usize, f64) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let i0 = (x.floor() as usize).min(n - 2);
        (i0, i0 + 1, x - i0 as f64)
    };
    let (u0, u1, fu) = split(cu, w);
    let (v0, v1, fv) = split(cv, h);
    (
        [
            (v0 * w + u0, (1.0 - fu) * (1.0 - fv)),
            (v0 * w + u1, fu * (1.0 - fv)),
            (v1 * w + u0, (1.0 - fu) * fv),
            (v1 * w + u1, fu * fv),
        ],
        cu_clamped || cv_clamped,
    )
}
