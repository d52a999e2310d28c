//! Recorded computation graphs with reverse-mode gradients.
//!
//! A [`Graph`] is a tape: every primitive appends one node holding its value
//! and the information its backward rule needs. Nodes are only ever appended,
//! so insertion order is a topological order and the graph is acyclic by
//! construction. [`Graph::backward`] walks the tape in reverse.
//!
//! Parameters live in a [`ParamStore`]. A graph borrows stores immutably and
//! refers to parameter tensors without copying them; gradients come back as a
//! [`Gradients`] value that is folded into a [`GradBuffer`] once the graph has
//! been dropped. Parameters of a frozen store enter the graph as constants.
//!
//! Shape rules (all operands rank 2):
//!
//! | op | operands | result |
//! |----|----------|--------|
//! | `matmul` | `[m×k]`, `[k×n]` | `[m×n]` |
//! | `add`, `mul` | `[m×n]` and `[m×n]`, `[1×n]` or `[m×1]` | `[m×n]` |
//! | `sub` | `[m×n]`, `[m×n]` | `[m×n]` |
//! | `concat(axis 0)` | `[mᵢ×n]` | `[Σmᵢ×n]` |
//! | `concat(axis 1)` | `[m×nᵢ]` | `[m×Σnᵢ]` |
//! | `slice(axis, start, len)` | `[m×n]` | `[len×n]` / `[m×len]` |
//! | `sigmoid`, `tanh`, `affine`, `dropout` | `[m×n]` | `[m×n]` |
//! | `softmax`, `log_softmax` | `[m×n]` | `[m×n]`, normalized per row |
//! | `logsumexp(axis 0)` / `max_over_axis(axis 0)` | `[m×n]` | `[1×n]` |
//! | `logsumexp(axis 1)` / `max_over_axis(axis 1)` | `[m×n]` | `[m×1]` |
//! | `embedding_lookup` | `[V×d]`, ids | `[len(ids)×d]` |
//! | `gather` | `[m×n]`, `(row, col)` pairs | `[1×len(pairs)]` |
//! | `sum` | `[m×n]` | `[1×1]` |
//! | `unfold(w)` | `[n×c]`, `n ≥ w` | `[(n−w+1)×(w·c)]` |
//! | `pad_rows(b, a)` | `[n×c]` | `[(b+n+a)×c]` |

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_store_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors.
#[derive(Debug)]
pub struct ParamStore<T: Scalar = f64> {
    id: u64,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    lookup: HashMap<String, usize>,
    frozen: bool,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            id: fresh_store_id(),
            names: self.names.clone(),
            values: self.values.clone(),
            trainable: self.trainable.clone(),
            lookup: self.lookup.clone(),
            frozen: self.frozen,
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            id: fresh_store_id(),
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            lookup: HashMap::new(),
            frozen: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        self.add_with(name, value, true)
    }

    pub fn add_with(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let idx = self.values.len();
        self.lookup.insert(name.clone(), idx);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        Ok(ParamId(idx))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    /// Total scalar count over all parameters.
    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    /// Whether gradients flow into this parameter.
    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.frozen && self.trainable[id.0]
    }

    /// Freezes every parameter: graphs see them as constants.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub(crate) fn store_id(&self) -> u64 {
        self.id
    }

    /// Overwrites every value with the one of the same name in `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for i in 0..self.values.len() {
            let src = other
                .by_name(&self.names[i])
                .ok_or_else(|| Error::Invalid(format!("missing parameter `{}`", self.names[i])))?;
            if src.shape() != self.values[i].shape() {
                return Err(Error::shape(
                    "copy_values_from",
                    format!("`{}`: {:?} vs {:?}", self.names[i], src.shape(), self.values[i].shape()),
                ));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}

/// Gradients produced by one [`Graph::backward`] call.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f64> {
    entries: Vec<(u64, ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        self.entries
            .iter()
            .find(|(s, p, _)| *s == store.store_id() && *p == id)
            .map(|(_, _, g)| g)
    }

    /// Number of parameter tensors that received a gradient.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn touches(&self, store: &ParamStore<T>) -> bool {
        self.entries.iter().any(|(s, _, _)| *s == store.store_id())
    }
}

/// Gradient accumulator aligned with one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradBuffer<T: Scalar = f64> {
    store_id: u64,
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> GradBuffer<T> {
    pub fn for_store(store: &ParamStore<T>) -> Self {
        Self {
            store_id: store.store_id(),
            grads: store
                .values
                .iter()
                .map(|v| Tensor::new(v.shape().to_vec(), vec![T::zero(); v.len()]).expect("shape"))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(T::zero()));
    }

    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (s, p, g) in &grads.entries {
            if *s != self.store_id {
                continue;
            }
            for (a, &b) in self.grads[p.0].data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .fold(T::zero(), |acc, g| acc + g.sum_of_squares())
            .sqrt()
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
///
/// Returns the norm measured before clipping.
pub fn clip_gradients<T: Scalar>(
    store: &ParamStore<T>,
    grads: &mut GradBuffer<T>,
    max_norm: T,
) -> Result<T> {
    for id in store.ids() {
        if !grads.get(id).all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter `{}`",
                store.name(id)
            )));
        }
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var),
    Mul(Var, Var, Bcast),
    Affine(Var, T),
    Concat(usize, Vec<Var>),
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp { x: Var, axis: usize },
    Max { x: Var, axis: usize, arg: Vec<usize> },
    Dropout { x: Var, mask: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Gather { x: Var, at: Vec<(usize, usize)> },
    Sum(Var),
    Unfold { x: Var, width: usize },
    PadRows { x: Var, before: usize },
}

enum Value<'p, T: Scalar> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

struct Node<'p, T: Scalar> {
    value: Value<'p, T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<(u64, ParamId)>,
}

/// One recorded forward computation.
pub struct Graph<'p, T: Scalar = f64> {
    nodes: Vec<Node<'p, T>>,
    bound: Option<&'p ParamStore<T>>,
    cache: HashMap<(u64, usize), Var>,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected rank 2, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn bcast_rule(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::Same)
    } else if b == (1, a.1) {
        Ok(Bcast::Row)
    } else if b == (a.0, 1) {
        Ok(Bcast::Col)
    } else {
        Err(Error::shape(
            op,
            format!("cannot combine [{}x{}] with [{}x{}]", a.0, a.1, b.0, b.1),
        ))
    }
}

#[inline]
fn bcast_index(rule: Bcast, cols: usize, i: usize) -> usize {
    match rule {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log Σ exp(xs)`, shifted by the maximum. All `-inf` gives `-inf`.
pub fn logsumexp_slice<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    let s = xs.iter().fold(T::zero(), |acc, &x| acc + (x - m).exp());
    m + s.ln()
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: None,
            cache: HashMap::new(),
        }
    }

    /// Graph whose [`Graph::param`] calls resolve against `store`.
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            bound: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s value with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Parameter from the bound store.
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.bound.expect("graph has no bound parameter store");
        self.param_in(store, id)
    }

    /// Parameter from any store. Repeated calls return the same node.
    pub fn param_in(&mut self, store: &'p ParamStore<T>, id: ParamId) -> Var {
        let key = (store.store_id(), id.0);
        if let Some(&v) = self.cache.get(&key) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(store.get(id)),
            op: Op::Leaf,
            needs_grad: store.is_trainable(id),
            param: Some((store.store_id(), id)),
        });
        let v = Var(self.nodes.len() - 1);
        self.cache.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}x{k}] · [{k2}x{n}]"),
            ));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.g(a) || self.g(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), ng))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, Bcast)> {
        let da = dims2(op, self.value(a))?;
        let db = dims2(op, self.value(b))?;
        let rule = bcast_rule(op, da, db)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<T> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[bcast_index(rule, da.1, i)]))
            .collect();
        Ok((Tensor::matrix(da.0, da.1, out), rule))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rule) = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.g(a) || self.g(b);
        Ok(self.push(t, Op::Add(a, b, rule), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rule) = self.binary("sub", a, b, |x, y| x - y)?;
        if rule != Bcast::Same {
            return Err(Error::shape("sub", "operands must have identical shapes"));
        }
        let ng = self.g(a) || self.g(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rule) = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.g(a) || self.g(b);
        Ok(self.push(t, Op::Mul(a, b, rule), ng))
    }

    /// `scale · x + shift`, element-wise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        let ng = self.g(x);
        self.push(t, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let mut shapes = Vec::with_capacity(parts.len());
        for &p in parts {
            shapes.push(dims2("concat", self.value(p))?);
        }
        let out = match axis {
            0 => {
                let cols = shapes[0].1;
                if shapes.iter().any(|s| s.1 != cols) {
                    return Err(Error::shape("concat", format!("axis 0 with shapes {shapes:?}")));
                }
                let rows = shapes.iter().map(|s| s.0).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::matrix(rows, cols, data)
            }
            1 => {
                let rows = shapes[0].0;
                if shapes.iter().any(|s| s.0 != rows) {
                    return Err(Error::shape("concat", format!("axis 1 with shapes {shapes:?}")));
                }
                let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
                Tensor::hcat(&refs)?
            }
            _ => return Err(Error::shape("concat", format!("axis {axis} out of range"))),
        };
        let ng = parts.iter().any(|&p| self.g(p));
        Ok(self.push(out, Op::Concat(axis, parts.to_vec()), ng))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2("slice", self.value(x))?;
        let extent = match axis {
            0 => m,
            1 => n,
            _ => return Err(Error::shape("slice", format!("axis {axis} out of range"))),
        };
        if len == 0 || start + len > extent {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) outside extent {extent} of [{m}x{n}] on axis {axis}", start + len),
            ));
        }
        let src = self.value(x);
        let out = if axis == 0 {
            Tensor::matrix(len, n, src.data()[start * n..(start + len) * n].to_vec())
        } else {
            let mut data = Vec::with_capacity(m * len);
            for r in 0..m {
                data.extend_from_slice(&src.row(r)[start..start + len]);
            }
            Tensor::matrix(m, len, data)
        };
        let ng = self.g(x);
        Ok(self.push(out, Op::Slice { x, axis, start }, ng))
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        self.slice(x, 0, r, 1)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x).clone().reshaped(vec![rows, cols])?;
        let ng = self.g(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let ng = self.g(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(T::tanh);
        let ng = self.g(x);
        self.push(t, Op::Tanh(x), ng)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2("softmax", self.value(x))?;
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = src.row(r);
            let lse = logsumexp_slice(row);
            out.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let ng = self.g(x);
        Ok(self.push(Tensor::matrix(m, n, out), Op::Softmax(x), ng))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2("log_softmax", self.value(x))?;
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = src.row(r);
            let lse = logsumexp_slice(row);
            out.extend(row.iter().map(|&v| v - lse));
        }
        let ng = self.g(x);
        Ok(self.push(Tensor::matrix(m, n, out), Op::LogSoftmax(x), ng))
    }

    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = dims2("logsumexp", self.value(x))?;
        let src = self.value(x);
        let out = match axis {
            0 => {
                let mut col = vec![T::zero(); m];
                let data = (0..n)
                    .map(|c| {
                        for r in 0..m {
                            col[r] = src.at(r, c);
                        }
                        logsumexp_slice(&col)
                    })
                    .collect();
                Tensor::matrix(1, n, data)
            }
            1 => Tensor::matrix(m, 1, (0..m).map(|r| logsumexp_slice(src.row(r))).collect()),
            _ => return Err(Error::shape("logsumexp", format!("axis {axis} out of range"))),
        };
        let ng = self.g(x);
        Ok(self.push(out, Op::LogSumExp { x, axis }, ng))
    }

    /// Maximum along `axis`; ties resolve to the lowest index.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = dims2("max_over_axis", self.value(x))?;
        let src = self.value(x);
        let (out, arg) = match axis {
            0 => {
                let mut vals = Vec::with_capacity(n);
                let mut arg = Vec::with_capacity(n);
                for c in 0..n {
                    let mut best = 0;
                    for r in 1..m {
                        if src.at(r, c) > src.at(best, c) {
                            best = r;
                        }
                    }
                    vals.push(src.at(best, c));
                    arg.push(best);
                }
                (Tensor::matrix(1, n, vals), arg)
            }
            1 => {
                let mut vals = Vec::with_capacity(m);
                let mut arg = Vec::with_capacity(m);
                for r in 0..m {
                    let row = src.row(r);
                    let mut best = 0;
                    for c in 1..n {
                        if row[c] > row[best] {
                            best = c;
                        }
                    }
                    vals.push(row[best]);
                    arg.push(best);
                }
                (Tensor::matrix(m, 1, vals), arg)
            }
            _ => return Err(Error::shape("max_over_axis", format!("axis {axis} out of range"))),
        };
        let ng = self.g(x);
        Ok(self.push(out, Op::Max { x, axis, arg }, ng))
    }

    /// Multiplies by a precomputed mask (already carrying the inverted
    /// `1/keep` scaling).
    pub fn dropout_mask_apply(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let (m, n) = dims2("dropout_mask_apply", self.value(x))?;
        if mask.len() != m * n {
            return Err(Error::shape(
                "dropout_mask_apply",
                format!("mask of {} for [{m}x{n}]", mask.len()),
            ));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&a, &b)| a * b)
            .collect();
        let ng = self.g(x);
        Ok(self.push(Tensor::matrix(m, n, data), Op::Dropout { x, mask }, ng))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2("embedding_lookup", self.value(table))?;
        if ids.is_empty() {
            return Err(Error::shape("embedding_lookup", "empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape(
                "embedding_lookup",
                format!("id {bad} outside table of {v} rows"),
            ));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(src.row(i));
        }
        let ng = self.g(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, data),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Picks the listed `(row, col)` elements into a `[1 × k]` row.
    pub fn gather(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = dims2("gather", self.value(x))?;
        if at.is_empty() {
            return Err(Error::shape("gather", "empty index list"));
        }
        if let Some(&(r, c)) = at.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(Error::shape("gather", format!("({r},{c}) outside [{m}x{n}]")));
        }
        let src = self.value(x);
        let data = at.iter().map(|&(r, c)| src.at(r, c)).collect();
        let ng = self.g(x);
        Ok(self.push(
            Tensor::matrix(1, at.len(), data),
            Op::Gather { x, at: at.to_vec() },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.g(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Sliding windows of `width` consecutive rows, each flattened into one
    /// output row.
    pub fn unfold(&mut self, x: Var, width: usize) -> Result<Var> {
        let (n, c) = dims2("unfold", self.value(x))?;
        if width == 0 || n < width {
            return Err(Error::shape("unfold", format!("width {width} over {n} rows")));
        }
        let src = self.value(x).data();
        let windows = n - width + 1;
        let mut data = Vec::with_capacity(windows * width * c);
        for i in 0..windows {
            data.extend_from_slice(&src[i * c..(i + width) * c]);
        }
        let ng = self.g(x);
        Ok(self.push(
            Tensor::matrix(windows, width * c, data),
            Op::Unfold { x, width },
            ng,
        ))
    }

    /// Adds zero rows above and below.
    pub fn pad_rows(&mut self, x: Var, before: usize, after: usize) -> Result<Var> {
        let (n, c) = dims2("pad_rows", self.value(x))?;
        if before == 0 && after == 0 {
            return Ok(x);
        }
        let mut data = vec![T::zero(); before * c];
        data.extend_from_slice(self.value(x).data());
        data.extend(std::iter::repeat_n(T::zero(), after * c));
        let ng = self.g(x);
        Ok(self.push(
            Tensor::matrix(before + n + after, c, data),
            Op::PadRows { x, before },
            ng,
        ))
    }

    /// Reverse pass from a `[1×1]` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lt.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some((sid, pid)) = node.param {
                let shape = self.value(Var(i)).shape().to_vec();
                out.push((sid, pid, Tensor::new(shape, g).expect("grad shape")));
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(Gradients { entries: out })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = G · Bᵀ
                    let bv = self.value(*b).data();
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            let mut s = T::zero();
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            ga[r * k + kk] += s;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = Aᵀ · G
                    let av = self.value(*a).data();
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let s = av[r * k + kk];
                            if s == T::zero() {
                                continue;
                            }
                            let dst = &mut gb[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                dst[j] += s * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b, rule) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                let cols = out.cols();
                if let Some(gb) = self.acc(grads, *b) {
                    for (idx, &y) in g.iter().enumerate() {
                        gb[bcast_index(*rule, cols, idx)] += y;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b, rule) => {
                let cols = out.cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for (idx, &y) in g.iter().enumerate() {
                        ga[idx] += y * bv[bcast_index(*rule, cols, idx)];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (idx, &y) in g.iter().enumerate() {
                        gb[bcast_index(*rule, cols, idx)] += y * av[idx];
                    }
                }
            }
            Op::Affine(x, s) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &y)| *a += *s * y);
                }
            }
            Op::Concat(axis, parts) => {
                let cols = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = (self.value(p).rows(), self.value(p).cols());
                    if let Some(gp) = self.acc(grads, p) {
                        if *axis == 0 {
                            let base = offset * cols;
                            gp.iter_mut()
                                .zip(&g[base..base + pr * pc])
                                .for_each(|(a, &y)| *a += y);
                        } else {
                            for r in 0..pr {
                                let src = &g[r * cols + offset..r * cols + offset + pc];
                                gp[r * pc..(r + 1) * pc]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(a, &y)| *a += y);
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { x, axis, start } => {
                let xc = self.value(*x).cols();
                let (or, oc) = (out.rows(), out.cols());
                if let Some(gx) = self.acc(grads, *x) {
                    if *axis == 0 {
                        let base = start * xc;
                        gx[base..base + or * oc]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(a, &y)| *a += y);
                    } else {
                        for r in 0..or {
                            gx[r * xc + start..r * xc + start + oc]
                                .iter_mut()
                                .zip(&g[r * oc..(r + 1) * oc])
                                .for_each(|(a, &y)| *a += y);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &y)| *a += y);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &y), &s) in gx.iter_mut().zip(g).zip(out.data()) {
                        *a += y * s * (T::one() - s);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &y), &t) in gx.iter_mut().zip(g).zip(out.data()) {
                        *a += y * (T::one() - t * t);
                    }
                }
            }
            Op::Softmax(x) => {
                let n = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..out.rows() {
                        let yr = out.row(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        for c in 0..n {
                            gx[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..out.rows() {
                        let yr = out.row(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let total = gr.iter().fold(T::zero(), |s, &b| s + b);
                        for c in 0..n {
                            gx[r * n + c] += gr[c] - yr[c].exp() * total;
                        }
                    }
                }
            }
            Op::LogSumExp { x, axis } => {
                let xt = self.value(*x);
                let (m, n) = (xt.rows(), xt.cols());
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..m {
                        for c in 0..n {
                            let o = if *axis == 0 { c } else { r };
                            let lse = out.data()[o];
                            if lse == T::neg_infinity() {
                                continue;
                            }
                            gx[r * n + c] += g[o] * (xt.at(r, c) - lse).exp();
                        }
                    }
                }
            }
            Op::Max { x, axis, arg } => {
                let n = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &a) in arg.iter().enumerate() {
                        let idx = if *axis == 0 { a * n + o } else { o * n + a };
                        gx[idx] += g[o];
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, &y), &k) in gx.iter_mut().zip(g).zip(mask) {
                        *a += y * k;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, &y)| *a += y);
                    }
                }
            }
            Op::Gather { x, at } => {
                let n = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, &(r, c)) in at.iter().enumerate() {
                        gx[r * n + c] += g[k];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Unfold { x, width } => {
                let c = self.value(*x).cols();
                let w = width * c;
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..out.rows() {
                        gx[i * c..i * c + w]
                            .iter_mut()
                            .zip(&g[i * w..(i + 1) * w])
                            .for_each(|(a, &y)| *a += y);
                    }
                }
            }
            Op::PadRows { x, before } => {
                let c = out.cols();
                let len = self.value(*x).len();
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut()
                        .zip(&g[before * c..before * c + len])
                        .for_each(|(a, &y)| *a += y);
                }
            }
        }
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for r in 0..m {
        let dst = &mut out[r * n..(r + 1) * n];
        for kk in 0..k {
            let s = a[r * k + kk];
            if s == T::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                dst[j] += s * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(xs: &[f64]) -> Tensor<f64> {
        Tensor::row_vector(xs.to_vec())
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(row(&[0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn logsumexp_ignores_masked_entry() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(row(&[f64::NEG_INFINITY, 0.0]));
        let y = g.logsumexp(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn logsumexp_large_inputs_do_not_overflow() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(row(&[1000.0, 1000.0]));
        let y = g.logsumexp(x, 1).unwrap();
        assert!((g.value(y).data()[0] - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn concat_shape() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 5));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), (2, 8));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2x3]"), "{err}");
        let c = g.constant(Tensor::zeros(3, 2));
        assert!(g.add(a, c).is_err());
        assert!(g.concat(&[a, c], 1).is_err());
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        // loss = sum(x · W) with x fixed → dW[i, j] = x[i]
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::matrix(3, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6])).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(row(&[1.0, 2.0, 3.0]));
        let wv = g.param(w);
        let y = g.matmul(x, wv).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        let gw = grads.get(&store, w).unwrap();
        assert_eq!(gw.data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(1, 2));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn frozen_store_receives_no_gradient() {
        let mut frozen = ParamStore::<f64>::new();
        let w = frozen.add("w", Tensor::filled(2, 2, 0.5)).unwrap();
        frozen.freeze();
        let mut live = ParamStore::<f64>::new();
        let v = live.add("v", Tensor::filled(2, 1, 0.5)).unwrap();
        let mut g = Graph::with_params(&live);
        let x = g.constant(row(&[1.0, -1.0]));
        let wv = g.param_in(&frozen, w);
        let h = g.matmul(x, wv).unwrap();
        let vv = g.param(v);
        let y = g.matmul(h, vv).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert!(!grads.touches(&frozen));
        assert!(grads.get(&live, v).is_some());
    }

    #[test]
    fn clip_examples() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("p", Tensor::zeros(1, 2)).unwrap();
        let mut buf = GradBuffer::for_store(&store);

        buf.get_mut(p).data_mut().copy_from_slice(&[3.0, 4.0]);
        assert_eq!(clip_gradients(&store, &mut buf, 5.0).unwrap(), 5.0);
        assert_eq!(buf.get(p).data(), &[3.0, 4.0]);

        buf.get_mut(p).data_mut().copy_from_slice(&[6.0, 8.0]);
        assert_eq!(clip_gradients(&store, &mut buf, 5.0).unwrap(), 10.0);
        assert_eq!(buf.get(p).data(), &[3.0, 4.0]);

        buf.zero();
        assert_eq!(clip_gradients(&store, &mut buf, 5.0).unwrap(), 0.0);
        assert_eq!(buf.get(p).data(), &[0.0, 0.0]);

        buf.get_mut(p).data_mut()[0] = f64::NAN;
        let err = clip_gradients(&store, &mut buf, 5.0).unwrap_err().to_string();
        assert!(err.contains("`p`"), "{err}");
    }
}
