//! Reverse-mode gradient engine over batched tensors.
//!
//! A [`Tape`] records tensor-valued operations as they are evaluated. Each
//! recorded node stores its value and a vector-Jacobian product closure;
//! [`Tape::backward`] walks the nodes in reverse and accumulates parameter
//! gradients into a [`Gradients`] map keyed by [`ParamId`].
//!
//! Parameters are not copied onto the tape. Operations that read a parameter
//! array borrow it for the lifetime of the tape, so recording never mutates
//! parameters and dropping a tape leaves them untouched.

mod check;
pub mod dual;

pub use check::{finite_diff_check, FdReport, DENOMINATOR_FLOOR};

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                actual: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension (rows of a 2-D view).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of trailing dimensions (columns of a 2-D view).
    pub fn cols(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Identifies one learnable parameter array.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Name and length of one parameter array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeafSpec {
    pub name: String,
    pub len: usize,
}

/// A collection of named, flat parameter arrays that a tape can differentiate.
pub trait ParamSet {
    fn num_leaves(&self) -> usize;
    fn leaf_name(&self, id: ParamId) -> &str;
    fn leaf(&self, id: ParamId) -> &[f64];
    fn leaf_mut(&mut self, id: ParamId) -> &mut [f64];

    fn leaf_specs(&self) -> Vec<LeafSpec> {
        (0..self.num_leaves())
            .map(|i| LeafSpec {
                name: self.leaf_name(ParamId(i)).to_string(),
                len: self.leaf(ParamId(i)).len(),
            })
            .collect()
    }

    /// Name of the first array holding a NaN or infinity.
    fn first_non_finite(&self) -> Option<String> {
        (0..self.num_leaves())
            .map(ParamId)
            .find(|&id| self.leaf(id).iter().any(|x| !x.is_finite()))
            .map(|id| self.leaf_name(id).to_string())
    }
}

/// Gradient accumulators, one per parameter array. Arrays that never received
/// a contribution are stored as `None` and read as zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    specs: Vec<LeafSpec>,
    arrays: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn new(specs: Vec<LeafSpec>) -> Self {
        let arrays = vec![None; specs.len()];
        Gradients { specs, arrays }
    }

    pub fn zeros_like<P: ParamSet + ?Sized>(params: &P) -> Self {
        Self::new(params.leaf_specs())
    }

    pub fn specs(&self) -> &[LeafSpec] {
        &self.specs
    }

    pub fn num_leaves(&self) -> usize {
        self.specs.len()
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.arrays.get(id.0).and_then(|a| a.as_deref())
    }

    pub fn value(&self, id: ParamId, index: usize) -> f64 {
        self.get(id).map_or(0.0, |a| a[index])
    }

    /// Accumulator for `id`, allocated on first use.
    pub fn slot_mut(&mut self, id: ParamId) -> &mut [f64] {
        let len = self.specs[id.0].len;
        self.arrays[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.specs != other.specs {
            return Err(Error::ShapeMismatch {
                expected: self.specs.iter().map(|s| s.len).collect(),
                actual: other.specs.iter().map(|s| s.len).collect(),
            });
        }
        for (i, src) in other.arrays.iter().enumerate() {
            if let Some(src) = src {
                let dst = self.slot_mut(ParamId(i));
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) -> Result<()> {
        let mut scaled = other.clone();
        scaled.scale(scale);
        self.add_assign(&scaled)
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.arrays.iter_mut().flatten() {
            for x in a.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.arrays
            .iter()
            .flatten()
            .flat_map(|a| a.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.arrays
            .iter()
            .flatten()
            .all(|a| a.iter().all(|&x| x == 0.0))
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.arrays
            .iter()
            .enumerate()
            .find(|(_, a)| a.as_ref().is_some_and(|a| a.iter().any(|x| !x.is_finite())))
            .map(|(i, _)| self.specs[i].name.as_str())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type Vjp<'a> = Box<dyn Fn(&[f64], &mut Backprop<'_>) + 'a>;

struct Node<'a> {
    value: Tensor,
    vjp: Option<Vjp<'a>>,
}

/// Mutable view handed to vector-Jacobian closures during [`Tape::backward`].
pub struct Backprop<'t> {
    values: &'t [Node<'t>],
    grads: Vec<Option<Vec<f64>>>,
    leaves: Gradients,
}

impl<'t> Backprop<'t> {
    pub fn value(&self, v: Var) -> &'t Tensor {
        &self.values[v.0].value
    }

    /// Gradient accumulator of an intermediate node, or `None` when the node
    /// does not depend on any parameter.
    pub fn grad_mut(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.values[v.0];
        node.vjp.as_ref()?;
        let len = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    pub fn leaf_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.leaves.slot_mut(id)
    }
}

/// Records batched tensor operations for reverse-mode differentiation.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    specs: Vec<LeafSpec>,
    grad_enabled: bool,
}

impl<'a> Tape<'a> {
    /// A recording tape over the parameter arrays described by `specs`.
    pub fn new(specs: Vec<LeafSpec>) -> Self {
        Tape {
            nodes: Vec::new(),
            specs,
            grad_enabled: true,
        }
    }

    pub fn for_params<P: ParamSet + ?Sized>(params: &P) -> Self {
        Self::new(params.leaf_specs())
    }

    /// A tape that evaluates values only; no closures are stored.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            specs: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(vec![0]))
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].vjp.is_some()
    }

    fn push(&mut self, value: Tensor, vjp: Option<Vjp<'a>>) -> Var {
        let vjp = if self.grad_enabled { vjp } else { None };
        self.nodes.push(Node { value, vjp });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    /// Weighted gather of parameter rows.
    ///
    /// `table` is viewed as rows of `width` entries. Output row `b` is
    /// `sum_j weights[b*k + j] * table[rows[b*k + j]]` where `k = per_output`.
    pub fn gather_rows(
        &mut self,
        leaf: ParamId,
        table: &'a [f64],
        width: usize,
        rows: Vec<usize>,
        weights: Vec<f64>,
        per_output: usize,
    ) -> Result<Var> {
        if rows.len() != weights.len() || per_output == 0 || rows.len() % per_output != 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![rows.len()],
                actual: vec![weights.len(), per_output],
            });
        }
        let n_rows = table.len() / width;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(Error::ShapeMismatch {
                expected: vec![n_rows],
                actual: vec![bad],
            });
        }
        let batch = rows.len() / per_output;
        let mut out = vec![0.0; batch * width];
        for b in 0..batch {
            let dst = &mut out[b * width..(b + 1) * width];
            for j in 0..per_output {
                let e = b * per_output + j;
                let w = weights[e];
                let src = &table[rows[e] * width..(rows[e] + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        let value = Tensor::new(vec![batch, width], out)?;
        let vjp: Vjp<'a> = Box::new(move |g, bp| {
            let acc = bp.leaf_mut(leaf);
            for b in 0..batch {
                let gb = &g[b * width..(b + 1) * width];
                for j in 0..per_output {
                    let e = b * per_output + j;
                    let w = weights[e];
                    let dst = &mut acc[rows[e] * width..(rows[e] + 1) * width];
                    for (d, gi) in dst.iter_mut().zip(gb) {
                        *d += w * gi;
                    }
                }
            }
        });
        Ok(self.push(value, Some(vjp)))
    }

    /// Affine map `y = x W^T + b` with `W` stored row-major as `out x in`.
    pub fn linear(
        &mut self,
        x: Var,
        weight: (ParamId, &'a [f64]),
        bias: (ParamId, &'a [f64]),
    ) -> Result<Var> {
        let (wid, w) = weight;
        let (bid, bvec) = bias;
        let out_dim = bvec.len();
        let xt = self.value(x);
        let (batch, in_dim) = (xt.rows(), xt.cols());
        if w.len() != out_dim * in_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![out_dim, in_dim],
                actual: vec![w.len()],
            });
        }
        let xd = xt.data();
        let mut out = vec![0.0; batch * out_dim];
        for b in 0..batch {
            let xr = &xd[b * in_dim..(b + 1) * in_dim];
            for o in 0..out_dim {
                let wr = &w[o * in_dim..(o + 1) * in_dim];
                let mut acc = bvec[o];
                for (wi, xi) in wr.iter().zip(xr) {
                    acc += wi * xi;
                }
                out[b * out_dim + o] = acc;
            }
        }
        let value = Tensor::new(vec![batch, out_dim], out)?;
        let x_needs = self.requires_grad(x);
        let vjp: Vjp<'a> = Box::new(move |g, bp| {
            {
                let xd = bp.value(x).data();
                let dw = bp.leaf_mut(wid);
                for o in 0..out_dim {
                    let dwr = &mut dw[o * in_dim..(o + 1) * in_dim];
                    for b in 0..batch {
                        let gb = g[b * out_dim + o];
                        if gb == 0.0 {
                            continue;
                        }
                        let xr = &xd[b * in_dim..(b + 1) * in_dim];
                        for (d, xi) in dwr.iter_mut().zip(xr) {
                            *d += gb * xi;
                        }
                    }
                }
            }
            {
                let db = bp.leaf_mut(bid);
                for b in 0..batch {
                    for o in 0..out_dim {
                        db[o] += g[b * out_dim + o];
                    }
                }
            }
            if x_needs {
                if let Some(dx) = bp.grad_mut(x) {
                    for b in 0..batch {
                        let dxr = &mut dx[b * in_dim..(b + 1) * in_dim];
                        for o in 0..out_dim {
                            let gb = g[b * out_dim + o];
                            if gb == 0.0 {
                                continue;
                            }
                            let wr = &w[o * in_dim..(o + 1) * in_dim];
                            for (d, wi) in dxr.iter_mut().zip(wr) {
                                *d += gb * wi;
                            }
                        }
                    }
                }
            }
        });
        Ok(self.push(value, Some(vjp)))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64 + 'a) -> Var {
        let value = self.value(x).map(f);
        let vjp = self.requires_grad(x).then(|| {
            Box::new(move |g: &[f64], bp: &mut Backprop<'_>| {
                let xs = bp.value(x).data();
                if let Some(dx) = bp.grad_mut(x) {
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xs) {
                        *d += gi * df(*xi);
                    }
                }
            }) as Vjp<'a>
        });
        self.push(value, vjp)
    }

    /// `ln(1 + exp(beta x)) / beta`.
    pub fn softplus(&mut self, x: Var, beta: f64) -> Var {
        self.unary(x, move |v| softplus(v, beta), move |v| sigmoid(beta * v))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |v| {
            let s = sigmoid(v);
            s * (1.0 - s)
        })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, move |v| v * s, move |_| s)
    }

    fn check_same(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                expected: sa.to_vec(),
                actual: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.requires_grad(a) || self.requires_grad(b);
        let vjp = needs.then(|| {
            Box::new(move |g: &[f64], bp: &mut Backprop<'_>| {
                let ad = bp.value(a).data();
                let bd = bp.value(b).data();
                if let Some(da) = bp.grad_mut(a) {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(bd) {
                        *d += gi * y;
                    }
                }
                if let Some(db) = bp.grad_mut(b) {
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(ad) {
                        *d += gi * x;
                    }
                }
            }) as Vjp<'a>
        });
        Ok(self.push(value, vjp))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.requires_grad(a) || self.requires_grad(b);
        let vjp = needs.then(|| {
            Box::new(move |g: &[f64], bp: &mut Backprop<'_>| {
                for v in [a, b] {
                    if let Some(dv) = bp.grad_mut(v) {
                        for (d, gi) in dv.iter_mut().zip(g) {
                            *d += gi;
                        }
                    }
                }
            }) as Vjp<'a>
        });
        Ok(self.push(value, vjp))
    }

    /// Adds a constant tensor of the same shape.
    pub fn add_const(&mut self, a: Var, offset: &Tensor) -> Result<Var> {
        let c = self.constant(offset.clone());
        self.add(a, c)
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::ShapeMismatch {
                    expected: vec![rows],
                    actual: vec![self.value(p).rows()],
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let value = Tensor::new(vec![rows, total], out)?;
        let parts = parts.to_vec();
        let needs = parts.iter().any(|&p| self.requires_grad(p));
        let vjp = needs.then(|| {
            Box::new(move |g: &[f64], bp: &mut Backprop<'_>| {
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if let Some(dp) = bp.grad_mut(p) {
                        for r in 0..rows {
                            for c in 0..w {
                                dp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }) as Vjp<'a>
        });
        Ok(self.push(value, vjp))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xt = self.value(x);
        let (rows, cols) = (xt.rows(), xt.cols());
        if start > end || end > cols {
            return Err(Error::ShapeMismatch {
                expected: vec![cols],
                actual: vec![start, end],
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&xt.data()[r * cols + start..r * cols + end]);
        }
        let value = Tensor::new(vec![rows, w], out)?;
        let vjp = self.requires_grad(x).then(|| {
            Box::new(move |g: &[f64], bp: &mut Backprop<'_>| {
                if let Some(dx) = bp.grad_mut(x) {
                    for r in 0..rows {
                        for c in 0..w {
                            dx[r * cols + start + c] += g[r * w + c];
                        }
                    }
                }
            }) as Vjp<'a>
        });
        Ok(self.push(value, vjp))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let vjp = self.requires_grad(x).then(|| {
            Box::new(move |g: &[f64], bp: &mut Backprop<'_>| {
                if let Some(dx) = bp.grad_mut(x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }) as Vjp<'a>
        });
        self.push(Tensor::scalar(s), vjp)
    }

    /// Records an operation whose value was computed by the caller.
    ///
    /// `vjp` receives the output gradient and must accumulate into the
    /// gradients of `inputs` (through [`Backprop::grad_mut`]).
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        vjp: impl Fn(&[f64], &mut Backprop<'_>) + 'a,
    ) -> Var {
        let needs = inputs.iter().any(|&v| self.requires_grad(v));
        let vjp = needs.then(|| Box::new(vjp) as Vjp<'a>);
        self.push(value, vjp)
    }

    /// Propagates `output_grad` from `output` back to every parameter leaf.
    pub fn backward(&self, output: Var, output_grad: &Tensor) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Numerical("backward called on an inference tape".into()));
        }
        let out_shape = self.value(output).shape();
        if out_shape != output_grad.shape() {
            return Err(Error::ShapeMismatch {
                expected: out_shape.to_vec(),
                actual: output_grad.shape().to_vec(),
            });
        }
        let mut bp = Backprop {
            values: &self.nodes,
            grads: vec![None; self.nodes.len()],
            leaves: Gradients::new(self.specs.clone()),
        };
        if self.nodes[output.0].vjp.is_none() {
            return Ok(bp.leaves);
        }
        bp.grads[output.0] = Some(output_grad.data().to_vec());
        for i in (0..=output.0).rev() {
            let Some(g) = bp.grads[i].take() else { continue };
            if let Some(vjp) = &self.nodes[i].vjp {
                vjp(&g, &mut bp);
            }
        }
        Ok(bp.leaves)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64, beta: f64) -> f64 {
    let bx = beta * x;
    if bx > 30.0 {
        x
    } else {
        bx.exp().ln_1p() / beta
    }
}
