use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use super::kernels::{self, ConvGeometry};
use super::{Real, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddChannel(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Softmax(Var, usize),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    AvgPool(Var),
    Bilinear(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    ScatterAddRows(Var, Arc<Vec<usize>>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

/// Reverse-mode gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.by_name.insert(name.into(), grad);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Adds `scale · other` into `self`, inserting missing keys.
    pub fn accumulate(&mut self, other: &Gradients<T>, scale: T) {
        for (name, g) in &other.by_name {
            match self.by_name.get_mut(name) {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + scale * b;
                    }
                }
                None => {
                    self.by_name.insert(name.clone(), g.map(|v| v * scale));
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.by_name
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// A single-use computation record.
///
/// Values are computed eagerly as ops are recorded. Parameters are bound by
/// name and shared across every use within the tape; [`Tape::backward`]
/// consumes the tape and returns gradients for all bound parameters.
pub struct Tape<T: Real> {
    id: u32,
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
    record: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        msg: msg.into(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            record: true,
        }
    }

    /// A tape whose parameters are bound as constants; `backward` is refused.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, grad });
        Var { tape: self.id, index }
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(TensorError::Detached);
        }
        Ok(&self.nodes[v.index as usize])
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index as usize].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index as usize].grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a named leaf. Repeated binds of the same name return the first
    /// variable, so shared parameters accumulate a single gradient.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, self.record);
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        v
    }

    pub fn bound_param(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    // ---- forward ops ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let grad = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), grad))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        let grad = self.needs(&[a, b]);
        Ok(self.push(value, op, grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[..., D] + b[D]`, broadcasting `b` over every leading index.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (&self.node(x)?.value, &self.node(b)?.value);
        let d = *tx.shape().last().unwrap();
        if tb.len() != d {
            return Err(mismatch("add_row", tx.shape(), tb.shape()));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % d])
            .collect();
        let value = Tensor::new(tx.shape(), data)?;
        let grad = self.needs(&[x, b]);
        Ok(self.push(value, Op::AddRow(x, b), grad))
    }

    /// `x[C, ...] + b[C]`, broadcasting `b[c]` over channel `c`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (&self.node(x)?.value, &self.node(b)?.value);
        let c = tx.shape()[0];
        if tb.len() != c {
            return Err(mismatch("add_channel", tx.shape(), tb.shape()));
        }
        let per = tx.len() / c;
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i / per])
            .collect();
        let value = Tensor::new(tx.shape(), data)?;
        let grad = self.needs(&[x, b]);
        Ok(self.push(value, Op::AddChannel(x, b), grad))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.node(x)?.value.map(f);
        let grad = self.needs(&[x]);
        Ok(self.push(value, op, grad))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |v| {
                // Split on sign so neither branch overflows.
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = &self.node(x)?.value;
        if axis >= tx.rank() {
            return Err(TensorError::Axis {
                axis,
                rank: tx.rank(),
            });
        }
        let data = kernels::softmax(tx.data(), tx.shape(), axis);
        let value = Tensor::new(tx.shape(), data)?;
        let grad = self.needs(&[x]);
        Ok(self.push(value, Op::Softmax(x, axis), grad))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.sum_all();
        let grad = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), grad))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let m = t.sum_all() / T::of(t.len() as f64);
        let grad = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), grad))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        if t.rank() != 2 {
            return Err(invalid("transpose", format!("needs rank 2, got {:?}", t.shape())));
        }
        let value = transpose2(t);
        let grad = self.needs(&[x]);
        Ok(self.push(value, Op::Transpose(x), grad))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.node(x)?.value.reshape(shape)?;
        let grad = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), grad))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.node(x)?.value;
        if axis >= t.rank() {
            return Err(TensorError::Axis {
                axis,
                rank: t.rank(),
            });
        }
        if len == 0 || start + len > t.shape()[axis] {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} exceeds axis {axis} of {:?}", start + len, t.shape()),
            ));
        }
        let (outer, n, inner) = kernels::axis_split(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, data)?;
        let grad = self.needs(&[x]);
        Ok(self.push(value, Op::Narrow { x, axis, start }, grad))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.node(*parts.first().ok_or_else(|| invalid("concat", "no inputs"))?)?;
        let base = first.value.shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.node(p)?.value.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.index as usize].value;
                let n = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        let grad = self.needs(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            grad,
        ))
    }

    /// Cross-correlation of `x[C_in×H×W]` with `w[C_out×C_in×k×k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (&self.node(x)?.value, &self.node(w)?.value);
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(mismatch("conv2d", sx, sw));
        }
        let k = sw[2];
        if k % 2 == 0 {
            return Err(invalid("conv2d", format!("kernel size {k} must be odd")));
        }
        let (out_h, out_w) = match (
            ConvGeometry::extent(sx[1], k, stride, pad),
            ConvGeometry::extent(sx[2], k, stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(invalid(
                    "conv2d",
                    format!(
                        "input {sx:?} with kernel {k}, stride {stride}, padding {pad} gives a non-integral output extent"
                    ),
                ))
            }
        };
        let geom = ConvGeometry {
            c_in: sx[0],
            h: sx[1],
            w: sx[2],
            k,
            stride,
            pad,
            out_h,
            out_w,
        };
        let c_out = sw[0];
        let cols = kernels::im2col(tx.data(), &geom);
        let mut out = vec![T::zero(); c_out * geom.cols()];
        kernels::matmul_acc(tw.data(), &cols, &mut out, c_out, geom.rows(), geom.cols());
        let value = Tensor::new(&[c_out, out_h, out_w], out)?;
        let grad = self.needs(&[x, w]);
        Ok(self.push(value, Op::Conv2d { x, w, geom }, grad))
    }

    /// Block-mean pooling of `x[C×H×W]` to `C×out_h×out_w`.
    pub fn avgpool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = &self.node(x)?.value;
        let s = t.shape();
        if s.len() != 3 || out_h == 0 || out_w == 0 || s[1] % out_h != 0 || s[2] % out_w != 0 {
            return Err(invalid(
                "avgpool2d",
                format!("cannot pool {s:?} to {out_h}x{out_w}"),
            ));
        }
        let data = kernels::avgpool(t.data(), s[0], s[1], s[2], out_h, out_w);
        let value = Tensor::new(&[s[0], out_h, out_w], data)?;
        let grad = self.needs(&[x]);
        Ok(self.push(value, Op::AvgPool(x), grad))
    }

    /// Align-corners-false bilinear resampling of `x[C×h×w]`.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = &self.node(x)?.value;
        let s = t.shape();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(invalid(
                "bilinear_resize",
                format!("cannot resize {s:?} to {out_h}x{out_w}"),
            ));
        }
        let data = kernels::bilinear(t.data(), s[0], s[1], s[2], out_h, out_w);
        let value = Tensor::new(&[s[0], out_h, out_w], data)?;
        let grad = self.needs(&[x]);
        Ok(self.push(value, Op::Bilinear(x), grad))
    }

    /// Rows `x[idx[i]]` of a rank-2 tensor.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.node(x)?.value;
        if t.rank() != 2 || idx.is_empty() {
            return Err(invalid("gather_rows", format!("shape {:?}", t.shape())));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(invalid("gather_rows", format!("row {i} out of {n}")));
            }
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(&[idx.len(), c], data)?;
        let grad = self.needs(&[x]);
        Ok(self.push(value, Op::GatherRows(x, Arc::new(idx.to_vec())), grad))
    }

    /// `out[idx[i]] += x[i]` into an `rows×C` zero tensor.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let t = &self.node(x)?.value;
        if t.rank() != 2 || t.shape()[0] != idx.len() || rows == 0 {
            return Err(invalid(
                "scatter_add_rows",
                format!("shape {:?} with {} indices", t.shape(), idx.len()),
            ));
        }
        let c = t.shape()[1];
        let mut data = vec![T::zero(); rows * c];
        for (src, &dst) in idx.iter().enumerate() {
            if dst >= rows {
                return Err(invalid("scatter_add_rows", format!("row {dst} out of {rows}")));
            }
            for j in 0..c {
                data[dst * c + j] = data[dst * c + j] + t.data()[src * c + j];
            }
        }
        let value = Tensor::new(&[rows, c], data)?;
        let grad = self.needs(&[x]);
        Ok(self.push(value, Op::ScatterAddRows(x, Arc::new(idx.to_vec())), grad))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every bound parameter receives an entry; parameters the loss does not
    /// depend on get zeros.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if loss.tape != self.id {
            return Err(TensorError::Detached);
        }
        if !self.record {
            return Err(TensorError::NoGradient);
        }
        let root = &self.nodes[loss.index as usize];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.index as usize + 1];
        grads[loss.index as usize] = Some(Tensor::full(root.value.shape(), T::one()));

        for i in (0..=loss.index as usize).rev() {
            let node = &self.nodes[i];
            if !node.grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for name in &self.param_order {
            let v = self.params[name];
            let grad = grads
                .get(v.index as usize)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(self.nodes[v.index as usize].value.shape()));
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        let idx = v.index as usize;
        if !self.nodes[idx].grad {
            return;
        }
        match &mut grads[idx] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.index as usize].value;
        let wants = |v: Var| self.nodes[v.index as usize].grad;
        let same = |data: Vec<T>, like: &Tensor<T>| Tensor::new(like.shape(), data).unwrap();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::matmul_nt_acc(g.data(), tb.data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, same(ga, ta));
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::matmul_tn_acc(ta.data(), g.data(), &mut gb, m, k, n);
                    self.accumulate(grads, *b, same(gb, tb));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, same(d, ta));
                }
                if wants(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, same(d, tb));
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if wants(*b) {
                    let tb = val(*b);
                    let d = tb.len();
                    let mut gb = vec![T::zero(); d];
                    for (i, &v) in g.data().iter().enumerate() {
                        gb[i % d] = gb[i % d] + v;
                    }
                    self.accumulate(grads, *b, same(gb, tb));
                }
            }
            Op::AddChannel(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if wants(*b) {
                    let tb = val(*b);
                    let c = tb.len();
                    let per = g.len() / c;
                    let gb = (0..c)
                        .map(|ch| g.data()[ch * per..(ch + 1) * per].iter().copied().sum())
                        .collect();
                    self.accumulate(grads, *b, same(gb, tb));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Relu(x) => {
                let tx = val(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, same(d, tx));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                self.accumulate(grads, *x, same(d, y));
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * (T::one() - yv * yv))
                    .collect();
                self.accumulate(grads, *x, same(d, y));
            }
            Op::Abs(x) => {
                let tx = val(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&gv, &xv)| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, same(d, tx));
            }
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let d = kernels::softmax_backward(y.data(), g.data(), y.shape(), *axis);
                self.accumulate(grads, *x, same(d, y));
            }
            Op::Sum(x) => {
                let tx = val(*x);
                self.accumulate(grads, *x, Tensor::full(tx.shape(), g.item()));
            }
            Op::Mean(x) => {
                let tx = val(*x);
                let v = g.item() / T::of(tx.len() as f64);
                self.accumulate(grads, *x, Tensor::full(tx.shape(), v));
            }
            Op::Transpose(x) => self.accumulate(grads, *x, transpose2(g)),
            Op::Reshape(x) => {
                let tx = val(*x);
                self.accumulate(grads, *x, g.reshape(tx.shape()).unwrap());
            }
            Op::Narrow { x, axis, start } => {
                let tx = val(*x);
                let (outer, n, inner) = kernels::axis_split(tx.shape(), *axis);
                let len = g.shape()[*axis];
                let mut d = vec![T::zero(); tx.len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, same(d, tx));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let tp = val(p);
                    let n = tp.shape()[*axis];
                    if wants(p) {
                        let mut d = Vec::with_capacity(tp.len());
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[src..src + n * inner]);
                        }
                        self.accumulate(grads, p, same(d, tp));
                    }
                    offset += n;
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (tx, tw) = (val(*x), val(*w));
                let c_out = tw.shape()[0];
                let cols = kernels::im2col(tx.data(), geom);
                if wants(*w) {
                    let mut gw = vec![T::zero(); tw.len()];
                    kernels::matmul_nt_acc(g.data(), &cols, &mut gw, c_out, geom.cols(), geom.rows());
                    self.accumulate(grads, *w, same(gw, tw));
                }
                if wants(*x) {
                    let mut gcols = vec![T::zero(); geom.rows() * geom.cols()];
                    kernels::matmul_tn_acc(
                        tw.data(),
                        g.data(),
                        &mut gcols,
                        c_out,
                        geom.rows(),
                        geom.cols(),
                    );
                    let mut gx = vec![T::zero(); tx.len()];
                    kernels::col2im_acc(&gcols, geom, &mut gx);
                    self.accumulate(grads, *x, same(gx, tx));
                }
            }
            Op::AvgPool(x) => {
                let tx = val(*x);
                let (s, o) = (tx.shape(), g.shape());
                let d = kernels::avgpool_backward(g.data(), s[0], s[1], s[2], o[1], o[2]);
                self.accumulate(grads, *x, same(d, tx));
            }
            Op::Bilinear(x) => {
                let tx = val(*x);
                let (s, o) = (tx.shape(), g.shape());
                let d = kernels::bilinear_backward(g.data(), s[0], s[1], s[2], o[1], o[2]);
                self.accumulate(grads, *x, same(d, tx));
            }
            Op::GatherRows(x, idx) => {
                let tx = val(*x);
                let c = tx.shape()[1];
                let mut d = vec![T::zero(); tx.len()];
                for (src, &dst) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[dst * c + j] = d[dst * c + j] + g.data()[src * c + j];
                    }
                }
                self.accumulate(grads, *x, same(d, tx));
            }
            Op::ScatterAddRows(x, idx) => {
                let tx = val(*x);
                let c = tx.shape()[1];
                let mut d = Vec::with_capacity(tx.len());
                for &row in idx.iter() {
                    d.extend_from_slice(&g.data()[row * c..(row + 1) * c]);
                }
                self.accumulate(grads, *x, same(d, tx));
            }
        }
    }
}

fn transpose2<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let src = t.data();
    Tensor::from_fn(&[c, r], |i| src[(i % r) * c + i / r])
}
