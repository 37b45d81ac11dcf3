use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{split_axis, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Mean { input: Var, axis: usize },
    Max { input: Var, axis: usize, argmax: Vec<usize> },
    Sum(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv1d { x: Var, w: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and replays it backwards.
///
/// Operations are appended in evaluation order, so recording order is a
/// topological order and [`Tape::backward`] walks it in exact reverse.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    big.len() >= small.len() && big[big.len() - small.len()..] == *small
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            bound: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::Tape("variable belongs to a different tape".into()));
        }
        Ok(&self.nodes[v.idx])
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient can be read back with [`Tape::grad`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter to this tape. Binding the same parameter
    /// twice returns the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<(Tensor, Vec<Var>)> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let shape = if is_suffix(bv.shape(), av.shape()) {
            av.shape().to_vec()
        } else if is_suffix(av.shape(), bv.shape()) {
            bv.shape().to_vec()
        } else {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        };
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let (na, nb) = (ad.len(), bd.len());
        let data = (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect();
        Ok((Tensor { shape, data }, vec![a, b]))
    }

    /// Elementwise sum; the smaller operand's shape must be a suffix of
    /// the larger one's and is repeated over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ins) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&ins);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ins) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&ins);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ins) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&ins);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let av = &self.node(a)?.value;
        let t = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|x| x * factor).collect(),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Scale(a, factor), rg))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Result<Var> {
        let av = &self.node(a)?.value;
        let t = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|x| x + offset).collect(),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::AddScalar(a), rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.node(a)?.value;
        if av.shape().len() != 2 {
            return Err(Error::shape("transpose", av.shape(), &[]));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let t = Tensor {
            shape: vec![c, r],
            data: transpose_raw(av.data(), r, c),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.node(a)?.value.clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.node(v)?.value.shape().to_vec(),
            None => return Err(Error::InvalidArgument("concat of zero tensors".into())),
        };
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.node(v)?.value.shape();
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let val = &self.nodes[v.idx].value;
                let len = val.shape()[axis] * inner;
                data.extend_from_slice(&val.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = &self.node(a)?.value;
        let s = av.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape("slice", s, &[axis, start, len]));
        }
        let (outer, alen, inner) = split_axis(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor { shape, data },
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    fn reduced_shape(s: &[usize], axis: usize) -> Vec<usize> {
        s.iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect()
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = &self.node(a)?.value;
        let s = av.shape();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::shape("mean", s, &[axis]));
        }
        let (outer, alen, inner) = split_axis(s, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..alen {
                let row = &av.data()[(o * alen + j) * inner..(o * alen + j + 1) * inner];
                add_into(&mut data[o * inner..(o + 1) * inner], row);
            }
        }
        data.iter_mut().for_each(|v| *v /= alen as f64);
        let shape = Self::reduced_shape(s, axis);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::Mean { input: a, axis }, rg))
    }

    /// Max over `axis`. The gradient flows to the first maximal entry.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = &self.node(a)?.value;
        let s = av.shape();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::shape("max", s, &[axis]));
        }
        let (outer, alen, inner) = split_axis(s, axis);
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for j in 0..alen {
                for i in 0..inner {
                    let x = av.data()[(o * alen + j) * inner + i];
                    if x > data[o * inner + i] {
                        data[o * inner + i] = x;
                        argmax[o * inner + i] = j;
                    }
                }
            }
        }
        let shape = Self::reduced_shape(s, axis);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor { shape, data },
            Op::Max {
                input: a,
                axis,
                argmax,
            },
            rg,
        ))
    }

    /// Sum of all entries as a shape-`[]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.node(a)?.value.data().iter().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let av = &self.node(a)?.value;
        let t = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, op, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Softmax over the last axis with an optional additive mask.
    ///
    /// Mask entries must be `0.0` or `f64::NEG_INFINITY`, and the mask
    /// shape must be a suffix of the input shape. Masked slots get weight
    /// exactly zero; the row max is taken over unmasked entries only, so
    /// `-inf` is never exponentiated. A fully masked row is all zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let av = &self.node(a)?.value;
        let s = av.shape();
        if s.is_empty() {
            return Err(Error::shape("softmax", s, &[]));
        }
        if let Some(m) = mask {
            if !is_suffix(m.shape(), s) || m.shape().is_empty() {
                return Err(Error::shape("softmax", s, m.shape()));
            }
            if m.data().iter().any(|&b| b != 0.0 && b != f64::NEG_INFINITY) {
                return Err(Error::InvalidArgument(
                    "softmax mask entries must be 0 or -inf".into(),
                ));
            }
        }
        let cols = s[s.len() - 1];
        let mut data = av.data().to_vec();
        let mdata = mask.map(Tensor::data);
        for (r, row) in data.chunks_mut(cols.max(1)).enumerate() {
            let masked = |j: usize| match mdata {
                Some(m) => m[(r * cols + j) % m.len()] == f64::NEG_INFINITY,
                None => false,
            };
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if !masked(j) && x > max {
                    max = x;
                }
            }
            if max == f64::NEG_INFINITY {
                row.iter_mut().for_each(|x| *x = 0.0);
                continue;
            }
            let mut total = 0.0;
            for (j, x) in row.iter_mut().enumerate() {
                *x = if masked(j) { 0.0 } else { (*x - max).exp() };
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        let t = Tensor {
            shape: s.to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`
    /// (`gamma`, `beta` shaped like the last axis). Uses eps = 1e-5.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (gv, bv) = (&self.node(gamma)?.value, &self.node(beta)?.value);
        let s = xv.shape();
        let c = *s.last().ok_or_else(|| Error::shape("layer_norm", s, &[]))?;
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape("layer_norm", s, gv.shape()));
        }
        let rows = xv.numel() / c.max(1);
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor {
            shape: s.to_vec(),
            data: out,
        };
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// One-dimensional convolution, stride 1, zero padding `(k - 1) / 2`.
    ///
    /// `x: [c_in, len]`, `w: [c_out, c_in, k]` with odd `k`, `b: [c_out]`;
    /// output `[c_out, len]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (
            &self.node(x)?.value,
            &self.node(w)?.value,
            &self.node(b)?.value,
        );
        let (sx, sw) = (xv.shape(), wv.shape());
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] || sw[2] % 2 == 0 {
            return Err(Error::shape("conv1d", sx, sw));
        }
        let (cin, len, cout, k) = (sx[0], sx[1], sw[0], sw[2]);
        if bv.shape() != [cout] {
            return Err(Error::shape("conv1d", sw, bv.shape()));
        }
        let pad = (k - 1) / 2;
        let mut out = vec![0.0; cout * len];
        for o in 0..cout {
            for p in 0..len {
                let mut acc = bv.data()[o];
                for c in 0..cin {
                    for j in 0..k {
                        let src = p + j;
                        if src < pad || src - pad >= len {
                            continue;
                        }
                        acc += wv.data()[(o * cin + c) * k + j] * xv.data()[c * len + src - pad];
                    }
                }
                out[o * len + p] = acc;
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor {
                shape: vec![cout, len],
                data: out,
            },
            Op::Conv1d { x, w, b },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// natural log, computed through log-sum-exp. `logits: [n, m]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = &self.node(logits)?.value;
        let s = lv.shape();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape("cross_entropy", s, &[labels.len()]));
        }
        let (n, m) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {m} classes"
            )));
        }
        let mut probs = vec![0.0; n * m];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &lv.data()[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[label];
            for j in 0..m {
                probs[i * m + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) back through the tape and adds the
    /// gradients of bound parameters into `store`.
    ///
    /// Store gradients accumulate across calls; zero them between steps.
    /// Tape-local gradients (see [`Tape::grad`]) are recomputed from
    /// scratch on each call.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = &self.node(loss)?.value;
        if lv.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.idx] = Some(vec![1.0]);

        for i in (0..=loss.idx).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (&pid, &v) in &self.bound {
            if let Some(g) = &grads[v.idx] {
                store.accumulate_grad(pid, g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$ga:ident| $body:expr) => {
                if let Some($ga) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| &nodes[v.idx].value;
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                with_grad!(*a, |ga| {
                    let n = ga.len();
                    g.iter().enumerate().for_each(|(j, x)| ga[j % n] += x);
                });
                with_grad!(*b, |gb| {
                    let n = gb.len();
                    g.iter().enumerate().for_each(|(j, x)| gb[j % n] += sign * x);
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let (na, nb) = (ad.len(), bd.len());
                with_grad!(*a, |ga| {
                    g.iter().enumerate().for_each(|(j, x)| ga[j % na] += x * bd[j % nb]);
                });
                with_grad!(*b, |gb| {
                    g.iter().enumerate().for_each(|(j, x)| gb[j % nb] += x * ad[j % na]);
                });
            }
            Op::Scale(a, f) => with_grad!(*a, |ga| {
                ga.iter_mut().zip(g).for_each(|(d, x)| *d += f * x);
            }),
            Op::AddScalar(a) | Op::Reshape(a) => with_grad!(*a, |ga| add_into(ga, g)),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                with_grad!(*a, |ga| {
                    // g [m,n] x b^T [n,k]
                    for r in 0..m {
                        for c in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[r * n + j] * bv.data()[c * n + j];
                            }
                            ga[r * k + c] += acc;
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    // a^T [k,m] x g [m,n]
                    for r in 0..m {
                        for c in 0..k {
                            let x = av.data()[r * k + c];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[c * n + j] += x * g[r * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => with_grad!(*a, |ga| {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                add_into(ga, &transpose_raw(g, r, c));
            }),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = val(v).shape()[*axis];
                    with_grad!(v, |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            add_into(
                                &mut gv[o * len * inner..(o + 1) * len * inner],
                                &g[src..src + len * inner],
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => with_grad!(*input, |ga| {
                let (outer, alen, inner) = split_axis(val(*input).shape(), *axis);
                let len = out.shape()[*axis];
                for o in 0..outer {
                    let dst = (o * alen + start) * inner;
                    add_into(
                        &mut ga[dst..dst + len * inner],
                        &g[o * len * inner..(o + 1) * len * inner],
                    );
                }
            }),
            Op::Mean { input, axis } => with_grad!(*input, |ga| {
                let (outer, alen, inner) = split_axis(val(*input).shape(), *axis);
                for o in 0..outer {
                    for j in 0..alen {
                        for k in 0..inner {
                            ga[(o * alen + j) * inner + k] += g[o * inner + k] / alen as f64;
                        }
                    }
                }
            }),
            Op::Max {
                input,
                axis,
                argmax,
            } => with_grad!(*input, |ga| {
                let (outer, alen, inner) = split_axis(val(*input).shape(), *axis);
                for o in 0..outer {
                    for k in 0..inner {
                        let j = argmax[o * inner + k];
                        ga[(o * alen + j) * inner + k] += g[o * inner + k];
                    }
                }
            }),
            Op::Sum(a) => with_grad!(*a, |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::Relu(a) => with_grad!(*a, |ga| {
                let x = val(*a).data();
                for j in 0..ga.len() {
                    if x[j] > 0.0 {
                        ga[j] += g[j];
                    }
                }
            }),
            Op::Gelu(a) => with_grad!(*a, |ga| {
                let x = val(*a).data();
                for j in 0..ga.len() {
                    let u = x[j];
                    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u);
                    ga[j] += g[j] * d;
                }
            }),
            Op::Sigmoid(a) => with_grad!(*a, |ga| {
                let y = out.data();
                for j in 0..ga.len() {
                    ga[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }),
            Op::Softmax(a) => with_grad!(*a, |ga| {
                let y = out.data();
                let cols = *out.shape().last().unwrap();
                for r in 0..y.len() / cols.max(1) {
                    let (ys, gs) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        ga[r * cols + j] += ys[j] * (gs[j] - dot);
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = val(*gamma).numel();
                let rows = inv_std.len();
                let gam = val(*gamma).data();
                with_grad!(*gamma, |gg| {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                with_grad!(*beta, |gb| {
                    for r in 0..rows {
                        add_into(gb, &g[r * c..(r + 1) * c]);
                    }
                });
                with_grad!(*x, |gx| {
                    for r in 0..rows {
                        let dxhat: Vec<f64> = (0..c).map(|j| g[r * c + j] * gam[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat
                            .iter()
                            .zip(&xhat[r * c..(r + 1) * c])
                            .map(|(a, b)| a * b)
                            .sum();
                        for j in 0..c {
                            gx[r * c + j] += inv_std[r] / c as f64
                                * (c as f64 * dxhat[j] - s1 - xhat[r * c + j] * s2);
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (cin, len) = (xv.shape()[0], xv.shape()[1]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let pad = (k - 1) / 2;
                let taps = |p: usize, j: usize| {
                    let src = p + j;
                    (src >= pad && src - pad < len).then(|| src - pad)
                };
                with_grad!(*b, |gb| {
                    for o in 0..cout {
                        gb[o] += g[o * len..(o + 1) * len].iter().sum::<f64>();
                    }
                });
                with_grad!(*w, |gw| {
                    for o in 0..cout {
                        for c in 0..cin {
                            for j in 0..k {
                                let mut acc = 0.0;
                                for p in 0..len {
                                    if let Some(s) = taps(p, j) {
                                        acc += g[o * len + p] * xv.data()[c * len + s];
                                    }
                                }
                                gw[(o * cin + c) * k + j] += acc;
                            }
                        }
                    }
                });
                with_grad!(*x, |gx| {
                    for o in 0..cout {
                        for c in 0..cin {
                            for j in 0..k {
                                let wt = wv.data()[(o * cin + c) * k + j];
                                for p in 0..len {
                                    if let Some(s) = taps(p, j) {
                                        gx[c * len + s] += g[o * len + p] * wt;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => with_grad!(*logits, |gl| {
                let n = labels.len();
                let m = probs.len() / n;
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..m {
                        let y = if j == label { 1.0 } else { 0.0 };
                        gl[r * m + j] += g[0] * (probs[r * m + j] - y) / n as f64;
                    }
                }
            }),
        }
    }
}

fn grad_slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.idx];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.idx].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..k {
            let x = a[r * k + c];
            if x == 0.0 {
                continue;
            }
            let brow = &b[c * n..(c + 1) * n];
            for (o, y) in out[r * n..(r + 1) * n].iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
