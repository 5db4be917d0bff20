//! Reverse-mode differentiation tape.
//!
//! Operations append nodes in execution order; [`Tape::backward`] replays the
//! recorded steps in reverse and accumulates gradients into every reachable
//! [`Param`] leaf. A tape built with [`Tape::no_grad`] records values only,
//! which is what the forward benchmarks run on.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(usize);

/// Trainable parameter: a tensor plus its accumulated gradient.
///
/// Cloning shares the underlying cell, so the same parameter can be bound
/// into many forward passes; [`Param::detached_copy`] makes an independent
/// one (used for momentum encoders).
#[derive(Clone)]
pub struct Param<E: Element> {
    inner: Rc<RefCell<ParamInner<E>>>,
}

struct ParamInner<E: Element> {
    name: String,
    value: Tensor<E>,
    grad: Option<Vec<E>>,
}

impl<E: Element> Param<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        Self {
            inner: Rc::new(RefCell::new(ParamInner {
                name: name.into(),
                value,
                grad: None,
            })),
        }
    }

    pub fn name(&self) -> String {
        self.inner.borrow().name.clone()
    }

    pub fn value(&self) -> Tensor<E> {
        self.inner.borrow().value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().value.shape().to_vec()
    }

    pub fn set_value(&self, value: Tensor<E>) {
        self.inner.borrow_mut().value = value;
    }

    /// Applies `f` to the parameter data in place.
    pub fn update(&self, f: impl FnOnce(&mut [E])) {
        f(self.inner.borrow_mut().value.data_mut());
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub fn accumulate_grad(&self, g: &[E]) {
        let mut inner = self.inner.borrow_mut();
        match &mut inner.grad {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }

    /// Independent copy with the same name and value, no gradient.
    pub fn detached_copy(&self) -> Self {
        let inner = self.inner.borrow();
        Param::new(inner.name.clone(), inner.value.clone())
    }
}

type BackFn<E> = Box<dyn Fn(&Tensor<E>, &[E], &[Tensor<E>]) -> Vec<Option<Vec<E>>>>;

struct BackStep<E: Element> {
    inputs: Vec<Val>,
    back: BackFn<E>,
}

struct Node<E: Element> {
    value: Tensor<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
    step: Option<BackStep<E>>,
    sink: Option<Param<E>>,
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    grad_enabled: bool,
    /// 2 × multiply-accumulates executed by matmul nodes so far.
    matmul_flops: u64,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            matmul_flops: 0,
        }
    }

    /// Forward-only tape: no backward steps are recorded.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
            matmul_flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// FLOPs (2 × MACs) spent in matmul since tape creation. Element-wise ops
    /// are deliberately not counted; this instruments the dominant cost only.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    pub fn value(&self, v: Val) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Val) -> Option<Tensor<E>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor<E>, step: Option<BackStep<E>>, sink: Option<Param<E>>) -> Val {
        let requires_grad = step.is_some() || sink.is_some();
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            step,
            sink,
        });
        Val(self.nodes.len() - 1)
    }

    fn wants_grad(&self, inputs: &[Val]) -> bool {
        self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn leaf(&mut self, value: Tensor<E>) -> Val {
        self.push(value, None, None)
    }

    /// Trainable leaf; backward accumulates into the parameter.
    pub fn param(&mut self, p: &Param<E>) -> Val {
        let sink = if self.grad_enabled {
            Some(p.clone())
        } else {
            None
        };
        self.push(p.value(), None, sink)
    }

    fn dims2(&self, v: Val, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::BadShape {
                op,
                shape: s.to_vec(),
                detail: "expected a 2-D tensor".into(),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![E::zero(); m * n];
        E::gemm_acc(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        self.matmul_flops += 2 * (m * k * n) as u64;
        let value = Tensor::new(vec![m, n], out)?;
        let step = self.wants_grad(&[a, b]).then(|| BackStep {
            inputs: vec![a, b],
            back: Box::new(move |_out, g, ins| {
                let (av, bv) = (&ins[0], &ins[1]);
                // dA = dC · Bᵀ
                let bt = transpose_data(bv.data(), k, n);
                let mut da = vec![E::zero(); m * k];
                E::gemm_acc(m, n, k, g, &bt, &mut da);
                // dB = Aᵀ · dC
                let at = transpose_data(av.data(), m, k);
                let mut db = vec![E::zero(); k * n];
                E::gemm_acc(k, m, n, &at, g, &mut db);
                vec![Some(da), Some(db)]
            }),
        });
        Ok(self.push(value, step, None))
    }

    pub fn transpose(&mut self, x: Val) -> Result<Val> {
        let (r, c) = self.dims2(x, "transpose")?;
        let value = Tensor::new(vec![c, r], transpose_data(self.value(x).data(), r, c))?;
        let step = self.wants_grad(&[x]).then(|| BackStep {
            inputs: vec![x],
            back: Box::new(move |_out, g, _ins| vec![Some(transpose_data(g, c, r))]),
        });
        Ok(self.push(value, step, None))
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let step = self.wants_grad(&[a, b]).then(|| BackStep {
            inputs: vec![a, b],
            back: Box::new(|_out, g, _ins| vec![Some(g.to_vec()), Some(g.to_vec())]),
        });
        Ok(self.push(value, step, None))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let step = self.wants_grad(&[a, b]).then(|| BackStep {
            inputs: vec![a, b],
            back: Box::new(|_out, g, ins| {
                vec![
                    Some(zip_map(g, ins[1].data(), |gi, y| gi * y)),
                    Some(zip_map(g, ins[0].data(), |gi, x| gi * x)),
                ]
            }),
        });
        Ok(self.push(value, step, None))
    }

    pub fn scale(&mut self, x: Val, s: f64) -> Val {
        let sc = E::from_real(s);
        let data = self.value(x).data().iter().map(|&v| v * sc).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        let step = self.wants_grad(&[x]).then(|| BackStep {
            inputs: vec![x],
            back: Box::new(move |_out, g, _ins| {
                vec![Some(g.iter().map(|&v| v * sc).collect())]
            }),
        });
        self.push(value, step, None)
    }

    /// Adds a `[cols]` bias row to every row of a 2-D tensor.
    pub fn add_bias(&mut self, x: Val, bias: Val) -> Result<Val> {
        let (r, c) = self.dims2(x, "add_bias")?;
        let bshape = self.value(bias).shape().to_vec();
        if bshape != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: vec![r, c],
                rhs: bshape,
            });
        }
        let bd = self.value(bias).data().to_vec();
        let data: Vec<E> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % c])
            .collect();
        let value = Tensor::new(vec![r, c], data)?;
        let step = self.wants_grad(&[x, bias]).then(|| BackStep {
            inputs: vec![x, bias],
            back: Box::new(move |_out, g, _ins| {
                let mut db = vec![E::zero(); c];
                for (i, &gi) in g.iter().enumerate() {
                    db[i % c] = db[i % c] + gi;
                }
                vec![Some(g.to_vec()), Some(db)]
            }),
        });
        Ok(self.push(value, step, None))
    }

    /// Numerically stable per-row softmax (max subtraction).
    pub fn softmax_rows(&mut self, x: Val) -> Val {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![E::zero(); r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                data[i * c + j] = e;
                sum = sum + e;
            }
            for j in 0..c {
                data[i * c + j] = data[i * c + j] / sum;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let step = self.wants_grad(&[x]).then(|| BackStep {
            inputs: vec![x],
            back: Box::new(move |out, g, _ins| {
                let y = out.data();
                let mut dx = vec![E::zero(); y.len()];
                for i in 0..r {
                    let mut dot = E::zero();
                    for j in 0..c {
                        dot = dot + g[i * c + j] * y[i * c + j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                    }
                }
                vec![Some(dx)]
            }),
        });
        self.push(value, step, None)
    }

    /// Per-row standardization followed by the affine `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Val, gain: Val, bias: Val, eps: f64) -> Result<Val> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if c < 2 {
            return Err(Error::BadShape {
                op: "layer_norm",
                shape: t.shape().to_vec(),
                detail: "normalized width must be >= 2".into(),
            });
        }
        for (v, nm) in [(gain, "gain"), (bias, "bias")] {
            if self.value(v).shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: if nm == "gain" {
                        "layer_norm gain"
                    } else {
                        "layer_norm bias"
                    },
                    lhs: vec![c],
                    rhs: self.value(v).shape().to_vec(),
                });
            }
        }
        let epse = E::from_real(eps);
        let cn = E::from_real(c as f64);
        let gd = self.value(gain).data().to_vec();
        let bd = self.value(bias).data().to_vec();
        let xd = self.value(x).data();
        let mut xhat = vec![E::zero(); r * c];
        let mut inv_sigma = vec![E::zero(); r];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().fold(E::zero(), |a, &b| a + b) / cn;
            let var = row
                .iter()
                .fold(E::zero(), |a, &b| a + (b - mean) * (b - mean))
                / cn;
            let inv = (var + epse).sqrt().recip();
            inv_sigma[i] = inv;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * inv;
            }
        }
        let data: Vec<E> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| gd[i % c] * h + bd[i % c])
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let step = self.wants_grad(&[x, gain, bias]).then(|| {
            let gd = gd.clone();
            BackStep {
                inputs: vec![x, gain, bias],
                back: Box::new(move |_out, g, _ins| {
                    let mut dx = vec![E::zero(); r * c];
                    let mut dgain = vec![E::zero(); c];
                    let mut dbias = vec![E::zero(); c];
                    for i in 0..r {
                        let mut mean_dh = E::zero();
                        let mut mean_dh_h = E::zero();
                        for j in 0..c {
                            let h = xhat[i * c + j];
                            let gi = g[i * c + j];
                            dgain[j] = dgain[j] + gi * h;
                            dbias[j] = dbias[j] + gi;
                            let dh = gi * gd[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * h;
                        }
                        mean_dh = mean_dh / cn;
                        mean_dh_h = mean_dh_h / cn;
                        for j in 0..c {
                            let h = xhat[i * c + j];
                            let dh = g[i * c + j] * gd[j];
                            dx[i * c + j] = inv_sigma[i] * (dh - mean_dh - h * mean_dh_h);
                        }
                    }
                    vec![Some(dx), Some(dgain), Some(dbias)]
                }),
            }
        });
        Ok(self.push(value, step, None))
    }

    /// GELU (tanh approximation).
    pub fn gelu(&mut self, x: Val) -> Val {
        let c0 = E::from_real((2.0 / std::f64::consts::PI).sqrt());
        let c1 = E::from_real(0.044715);
        let half = E::from_real(0.5);
        let one = E::one();
        let three = E::from_real(3.0);
        let data: Vec<E> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                let u = c0 * (v + c1 * v * v * v);
                half * v * (one + u.tanh())
            })
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        let step = self.wants_grad(&[x]).then(|| BackStep {
            inputs: vec![x],
            back: Box::new(move |_out, g, ins| {
                let dx = ins[0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        let u = c0 * (v + c1 * v * v * v);
                        let t = u.tanh();
                        let du = c0 * (one + three * c1 * v * v);
                        gi * (half * (one + t) + half * v * (one - t * t) * du)
                    })
                    .collect();
                vec![Some(dx)]
            }),
        });
        self.push(value, step, None)
    }

    /// Mean negative log-likelihood over non-ignored rows.
    pub fn cross_entropy(
        &mut self,
        logits: Val,
        targets: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<Val> {
        let (r, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != r {
            return Err(Error::Contract(format!(
                "cross_entropy: {} logit rows but {} targets",
                r,
                targets.len()
            )));
        }
        let counted: Vec<usize> = (0..r)
            .filter(|&i| Some(targets[i]) != ignore_index)
            .collect();
        if counted.is_empty() {
            return Err(Error::EmptyBatch(
                "cross_entropy: every row is ignored".into(),
            ));
        }
        for &i in &counted {
            if targets[i] >= v {
                return Err(Error::Input(format!(
                    "cross_entropy: target {} out of range for {} classes",
                    targets[i], v
                )));
            }
        }
        let xd = self.value(logits).data();
        let count = E::from_real(counted.len() as f64);
        // softmax probabilities are kept for the backward rule
        let mut probs = vec![E::zero(); r * v];
        let mut loss = E::zero();
        for &i in &counted {
            let row = &xd[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[i * v + j] = e;
                sum = sum + e;
            }
            for j in 0..v {
                probs[i * v + j] = probs[i * v + j] / sum;
            }
            loss = loss - (row[targets[i]] - max - sum.ln());
        }
        loss = loss / count;
        let value = Tensor::scalar(loss);
        let step = self.wants_grad(&[logits]).then(|| {
            let targets = targets.to_vec();
            let counted = counted.clone();
            BackStep {
                inputs: vec![logits],
                back: Box::new(move |_out, g, _ins| {
                    let gs = g[0] / count;
                    let mut dx = vec![E::zero(); r * v];
                    for &i in &counted {
                        for j in 0..v {
                            let indicator = if j == targets[i] { E::one() } else { E::zero() };
                            dx[i * v + j] = gs * (probs[i * v + j] - indicator);
                        }
                    }
                    vec![Some(dx)]
                }),
            }
        });
        Ok(self.push(value, step, None))
    }

    pub fn concat_rows(&mut self, a: Val, b: Val) -> Result<Val> {
        self.concat_rows_many(&[a, b])
    }

    pub fn concat_rows_many(&mut self, parts: &[Val]) -> Result<Val> {
        assert!(!parts.is_empty());
        let c = self.dims2(parts[0], "concat_rows")?.1;
        let mut total_rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total_rows += r;
        }
        let mut data = Vec::with_capacity(total_rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![total_rows, c], data)?;
        let row_counts: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[0]).collect();
        let step = self.wants_grad(parts).then(|| BackStep {
            inputs: parts.to_vec(),
            back: Box::new(move |_out, g, _ins| {
                let mut offset = 0;
                row_counts
                    .iter()
                    .map(|&r| {
                        let slice = g[offset * c..(offset + r) * c].to_vec();
                        offset += r;
                        Some(slice)
                    })
                    .collect()
            }),
        });
        Ok(self.push(value, step, None))
    }

    pub fn slice_rows(&mut self, x: Val, start: usize, end: usize) -> Result<Val> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start >= end || end > r {
            return Err(Error::Contract(format!(
                "slice_rows: range {start}..{end} out of {r} rows"
            )));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let value = Tensor::new(vec![end - start, c], data)?;
        let step = self.wants_grad(&[x]).then(|| BackStep {
            inputs: vec![x],
            back: Box::new(move |_out, g, _ins| {
                let mut dx = vec![E::zero(); r * c];
                dx[start * c..end * c].copy_from_slice(g);
                vec![Some(dx)]
            }),
        });
        Ok(self.push(value, step, None))
    }

    pub fn slice_cols(&mut self, x: Val, start: usize, end: usize) -> Result<Val> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start >= end || end > c {
            return Err(Error::Contract(format!(
                "slice_cols: range {start}..{end} out of {c} cols"
            )));
        }
        let w = end - start;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&xd[i * c + start..i * c + end]);
        }
        let value = Tensor::new(vec![r, w], data)?;
        let step = self.wants_grad(&[x]).then(|| BackStep {
            inputs: vec![x],
            back: Box::new(move |_out, g, _ins| {
                let mut dx = vec![E::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![Some(dx)]
            }),
        });
        Ok(self.push(value, step, None))
    }

    pub fn concat_cols(&mut self, parts: &[Val]) -> Result<Val> {
        assert!(!parts.is_empty());
        let r = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        let step = self.wants_grad(parts).then(|| {
            let widths = widths.clone();
            BackStep {
                inputs: parts.to_vec(),
                back: Box::new(move |_out, g, _ins| {
                    let mut outs: Vec<Vec<E>> =
                        widths.iter().map(|&w| Vec::with_capacity(r * w)).collect();
                    for i in 0..r {
                        let mut offset = 0;
                        for (pi, &w) in widths.iter().enumerate() {
                            outs[pi]
                                .extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                            offset += w;
                        }
                    }
                    outs.into_iter().map(Some).collect()
                }),
            }
        });
        Ok(self.push(value, step, None))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Val, ids: &[usize]) -> Result<Val> {
        let (v, c) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows: empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Input(format!(
                "gather_rows: id {bad} out of vocabulary (size {v})"
            )));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            data.extend_from_slice(&td[id * c..(id + 1) * c]);
        }
        let value = Tensor::new(vec![ids.len(), c], data)?;
        let step = self.wants_grad(&[table]).then(|| {
            let ids = ids.to_vec();
            BackStep {
                inputs: vec![table],
                back: Box::new(move |_out, g, _ins| {
                    let mut dt = vec![E::zero(); v * c];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            dt[id * c + j] = dt[id * c + j] + g[i * c + j];
                        }
                    }
                    vec![Some(dt)]
                }),
            }
        });
        Ok(self.push(value, step, None))
    }

    pub fn sum(&mut self, x: Val) -> Val {
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(E::zero(), |a, &b| a + b);
        let n = self.value(x).numel();
        let value = Tensor::scalar(total);
        let step = self.wants_grad(&[x]).then(|| BackStep {
            inputs: vec![x],
            back: Box::new(move |_out, g, _ins| vec![Some(vec![g[0]; n])]),
        });
        self.push(value, step, None)
    }

    pub fn mean(&mut self, x: Val) -> Val {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// L2-normalizes each row; `eps` keeps the zero row finite.
    pub fn unit_rows(&mut self, x: Val, eps: f64) -> Result<Val> {
        let (r, c) = self.dims2(x, "unit_rows")?;
        let epse = E::from_real(eps);
        let xd = self.value(x).data();
        let mut norms = vec![E::zero(); r];
        let mut data = vec![E::zero(); r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let n = (row.iter().fold(E::zero(), |a, &b| a + b * b) + epse * epse).sqrt();
            norms[i] = n;
            for j in 0..c {
                data[i * c + j] = row[j] / n;
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        let step = self.wants_grad(&[x]).then(|| BackStep {
            inputs: vec![x],
            back: Box::new(move |out, g, _ins| {
                let y = out.data();
                let mut dx = vec![E::zero(); r * c];
                for i in 0..r {
                    let mut dot = E::zero();
                    for j in 0..c {
                        dot = dot + g[i * c + j] * y[i * c + j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = (g[i * c + j] - y[i * c + j] * dot) / norms[i];
                    }
                }
                vec![Some(dx)]
            }),
        });
        Ok(self.push(value, step, None))
    }

    /// Detached copy of a recorded value: same data, no gradient path.
    pub fn detach(&mut self, x: Val) -> Val {
        let value = self.value(x).clone();
        self.leaf(value)
    }

    /// Replays recorded operations in reverse and accumulates gradients into
    /// every reachable parameter leaf.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            // nothing reachable wants a gradient
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![E::one()]);
        for i in (0..=loss.0).rev() {
            let (lo, hi) = self.nodes.split_at_mut(i);
            let node = &hi[0];
            if !node.requires_grad || node.grad.is_none() {
                continue;
            }
            let Some(step) = node.step.as_ref() else {
                continue;
            };
            let grad = node.grad.as_ref().expect("checked above");
            let in_vals: Vec<Tensor<E>> =
                step.inputs.iter().map(|v| lo[v.0].value.clone()).collect();
            let contribs = (step.back)(&node.value, grad, &in_vals);
            debug_assert_eq!(contribs.len(), step.inputs.len());
            for (val, contrib) in step.inputs.iter().zip(contribs) {
                let target = &mut lo[val.0];
                if !target.requires_grad {
                    continue;
                }
                let Some(c) = contrib else { continue };
                debug_assert_eq!(c.len(), target.value.numel());
                match &mut target.grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(c) {
                            *a = *a + b;
                        }
                    }
                    None => target.grad = Some(c),
                }
            }
        }
        for node in &self.nodes {
            if let (Some(p), Some(g)) = (&node.sink, &node.grad) {
                p.accumulate_grad(g);
            }
        }
        Ok(())
    }
}

pub(crate) fn transpose_data<E: Element>(data: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

fn zip_map<E: Element>(a: &[E], b: &[E], f: impl Fn(E, E) -> E) -> Vec<E> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
