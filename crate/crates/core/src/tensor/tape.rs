//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value and the inputs
//! its backward rule needs. [`Tape::backward`] walks the nodes once in
//! reverse order.

use super::gemm::gemm;
use super::param::{GradMap, ParamId, ParamStore};
use super::{Tensor, LOG_FLOOR};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    Ln(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis0(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    MixColumns {
        h: Var,
        z: Var,
        rows: Option<Vec<usize>>,
        classes: usize,
    },
    Standardize {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Aggregate {
        x: Var,
        neighbors: Vec<usize>,
        weights: Vec<f64>,
        k: usize,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    StraightThrough {
        probs: Var,
        selected: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by [`Tape::standardize_batch`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn expect_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest `|x|` over all rectifier inputs recorded so far: the distance
    /// to the nearest point where the composition is not differentiable.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.nodes[x.0].value.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn var(&mut self, value: Tensor) -> Result<Var> {
        check_finite("leaf", &value)?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        check_finite("constant", &value)?;
        Ok(self.push(value, Op::Leaf, false))
    }

    /// Copies a parameter onto the tape; its gradient is reported under `id`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let value = store.value(id).clone();
        check_finite("parameter", &value)?;
        Ok(self.push(value, Op::Param(id), true))
    }

    /// Value copy of `v` with no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds the vector `b` to every row of the 2-D `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, p) = expect_2d("add_bias", self.value(x))?;
        if self.shape(b) != [p] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(p) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        check_finite("softmax", input)?;
        let c = input.cols();
        let mut out = input.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// `ln(max(x, 1e-12))`.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        if input.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "ln" });
        }
        let out = input.map(|v| v.max(LOG_FLOOR).ln());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Ln(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean over rows: n×p → [p].
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let (n, p) = expect_2d("mean_axis0", self.value(x))?;
        let mut out = vec![0.0; p];
        for row in self.value(x).data().chunks(p.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::MeanAxis0(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (n0, p0) = expect_2d("concat", self.value(first))?;
        for &v in inputs {
            let (n, p) = expect_2d("concat", self.value(v))?;
            let ok = match axis {
                0 => p == p0,
                1 => n == n0,
                _ => false,
            };
            if !ok {
                return Err(Error::shape("concat", self.shape(first), self.shape(v)));
            }
        }
        let out = if axis == 0 {
            let mut data = Vec::new();
            let mut n = 0;
            for &v in inputs {
                data.extend_from_slice(self.value(v).data());
                n += self.value(v).rows();
            }
            Tensor::new(vec![n, p0], data)?
        } else {
            let total: usize = inputs.iter().map(|&v| self.value(v).cols()).sum();
            let mut data = Vec::with_capacity(n0 * total);
            for i in 0..n0 {
                for &v in inputs {
                    data.extend_from_slice(self.value(v).row(i));
                }
            }
            Tensor::new(vec![n0, total], data)?
        };
        let rg = self.rg(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Weighted combination of column blocks.
    ///
    /// `h` is n×(C·F), read as C blocks of width F per row; `z` is r×C.
    /// Output row `r` is `Σ_c z[r,c] · h[rows[r], block c]`. With a one-hot
    /// `z` this selects a single block. `rows` defaults to the identity.
    pub fn mix_columns(&mut self, h: Var, z: Var, rows: Option<Vec<usize>>) -> Result<Var> {
        let (n, cf) = expect_2d("mix_columns", self.value(h))?;
        let (r, c) = expect_2d("mix_columns", self.value(z))?;
        if c == 0 || cf % c != 0 {
            return Err(Error::shape("mix_columns", self.shape(h), self.shape(z)));
        }
        match &rows {
            Some(idx) => {
                if idx.len() != r || idx.iter().any(|&i| i >= n) {
                    return Err(Error::shape("mix_columns", self.shape(h), &[idx.len()]));
                }
            }
            None => {
                if r != n {
                    return Err(Error::shape("mix_columns", self.shape(h), self.shape(z)));
                }
            }
        }
        let f = cf / c;
        let hv = self.value(h).data();
        let zv = self.value(z).data();
        let mut out = vec![0.0; r * f];
        for row in 0..r {
            let src = rows.as_ref().map_or(row, |idx| idx[row]);
            let hrow = &hv[src * cf..(src + 1) * cf];
            let orow = &mut out[row * f..(row + 1) * f];
            for k in 0..c {
                let w = zv[row * c + k];
                if w == 0.0 {
                    continue;
                }
                for (o, hvv) in orow.iter_mut().zip(&hrow[k * f..(k + 1) * f]) {
                    *o += w * hvv;
                }
            }
        }
        let rg = self.rg(&[h, z]);
        Ok(self.push(
            Tensor::new(vec![r, f], out)?,
            Op::MixColumns {
                h,
                z,
                rows,
                classes: c,
            },
            rg,
        ))
    }

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let (n, p) = expect_2d(op, self.value(x))?;
        if self.shape(gamma) != [p] || self.shape(beta) != [p] {
            return Err(Error::shape(op, self.shape(x), self.shape(gamma)));
        }
        Ok((n, p))
    }

    fn standardize_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch: bool,
    ) -> Result<Var> {
        let p = mean.len();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, (xr, hr)) in xv.chunks(p).zip(xhat.chunks_mut(p)).enumerate() {
            for j in 0..p {
                hr[j] = (xr[j] - mean[j]) * inv_std[j];
                out[i * p + j] = g[j] * hr[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Standardize {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            },
            rg,
        ))
    }

    /// Per-feature standardization with statistics of the rows of `x`,
    /// followed by the affine map `gamma * xhat + beta`.
    pub fn standardize_batch(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, p) = self.check_affine("standardize", x, gamma, beta)?;
        if n == 0 {
            return Err(Error::Contract("standardize over zero rows".into()));
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; p];
        for row in xv.chunks(p) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; p];
        for row in xv.chunks(p) {
            for j in 0..p {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let out = self.standardize_with(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Standardization with externally supplied (running) statistics.
    pub fn standardize_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, p) = self.check_affine("standardize", x, gamma, beta)?;
        if mean.len() != p || var.len() != p {
            return Err(Error::shape("standardize", self.shape(x), &[mean.len()]));
        }
        self.standardize_with(x, gamma, beta, mean, var, eps, false)
    }

    /// `out[i] = Σ_k weights[i,k] · x[neighbors[i,k]]` with `k` entries per row.
    pub fn aggregate(&mut self, x: Var, neighbors: &[usize], weights: &[f64], k: usize) -> Result<Var> {
        let (n, p) = expect_2d("aggregate", self.value(x))?;
        if neighbors.len() != n * k || weights.len() != n * k || neighbors.iter().any(|&j| j >= n) {
            return Err(Error::shape("aggregate", self.shape(x), &[neighbors.len(), k]));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let orow = &mut out[i * p..(i + 1) * p];
            for s in 0..k {
                let j = neighbors[i * k + s];
                let w = weights[i * k + s];
                for (o, v) in orow.iter_mut().zip(&xv[j * p..(j + 1) * p]) {
                    *o += w * v;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, p], out)?,
            Op::Aggregate {
                x,
                neighbors: neighbors.to_vec(),
                weights: weights.to_vec(),
                k,
            },
            rg,
        ))
    }

    /// `out[r] = x[r, idx[r]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = expect_2d("pick", self.value(x))?;
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(Error::shape("pick", self.shape(x), &[idx.len()]));
        }
        let xv = self.value(x);
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| xv.at(i, j)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::Pick { x, idx: idx.to_vec() }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, p) = expect_2d("gather_rows", self.value(x))?;
        if idx.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather_rows", self.shape(x), &[idx.len()]));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * p);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), p], data)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        ))
    }

    /// One-hot rows at `selected` whose backward routes the gradient of the
    /// selected entry into `probs` at the same position and nowhere else.
    pub fn straight_through(&mut self, probs: Var, selected: &[usize]) -> Result<Var> {
        let (r, c) = expect_2d("straight_through", self.value(probs))?;
        if selected.len() != r || selected.iter().any(|&j| j >= c) {
            return Err(Error::shape("straight_through", self.shape(probs), &[selected.len()]));
        }
        let mut out = Tensor::zeros(&[r, c]);
        for (i, &j) in selected.iter().enumerate() {
            out.data_mut()[i * c + j] = 1.0;
        }
        let rg = self.rg(&[probs]);
        Ok(self.push(
            out,
            Op::StraightThrough {
                probs,
                selected: selected.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::MissingTape(
                "backward called before any forward pass was recorded".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param(_) => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(node, &g, &mut grads);
        }

        let mut leaves = Vec::new();
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let param = match self.nodes[idx].op {
                    Op::Param(id) => Some(id),
                    _ => None,
                };
                leaves.push((Var(idx), param, g));
            }
        }
        Ok(Gradients { leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, &mut ga, 0.0);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga).unwrap());
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, &mut gb, 0.0);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d).unwrap());
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), d).unwrap());
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*b) {
                    let p = g.cols();
                    let mut gb = vec![0.0; p];
                    for row in g.data().chunks(p) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::vector(gb));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::Softmax(x) => {
                let c = y.cols().max(1);
                let mut d = vec![0.0; y.numel()];
                for ((dr, yr), gr) in d.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::Ln(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, &v)| if v > LOG_FLOOR { gv / v } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::Sum(x) => {
                let s = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(&s, g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let s = g.item() / xv.numel() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), s));
            }
            Op::MeanAxis0(x) => {
                let xv = self.value(*x);
                let n = xv.rows();
                let mut d = Vec::with_capacity(xv.numel());
                for _ in 0..n {
                    d.extend(g.data().iter().map(|v| v / n as f64));
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::Reshape(x) => {
                let s = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(s).unwrap());
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &v in inputs {
                        let n = self.value(v).numel();
                        let part = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        let s = self.shape(v).to_vec();
                        self.accumulate(grads, v, Tensor::new(s, part).unwrap());
                    }
                } else {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut col = 0;
                    for &v in inputs {
                        let p = self.value(v).cols();
                        let mut part = Vec::with_capacity(rows * p);
                        for i in 0..rows {
                            part.extend_from_slice(&g.data()[i * total + col..i * total + col + p]);
                        }
                        col += p;
                        let s = self.shape(v).to_vec();
                        self.accumulate(grads, v, Tensor::new(s, part).unwrap());
                    }
                }
            }
            Op::MixColumns { h, z, rows, classes } => {
                let hv = self.value(*h);
                let zv = self.value(*z);
                let c = *classes;
                let cf = hv.cols();
                let f = cf / c;
                let r = zv.rows();
                let need_h = self.requires_grad(*h);
                let need_z = self.requires_grad(*z);
                let mut gh = if need_h { vec![0.0; hv.numel()] } else { Vec::new() };
                let mut gz = if need_z { vec![0.0; zv.numel()] } else { Vec::new() };
                for row in 0..r {
                    let src = rows.as_ref().map_or(row, |idx| idx[row]);
                    let grow = &g.data()[row * f..(row + 1) * f];
                    for k in 0..c {
                        if need_h {
                            let w = zv.data()[row * c + k];
                            if w != 0.0 {
                                let block = &mut gh[src * cf + k * f..src * cf + (k + 1) * f];
                                for (o, gv) in block.iter_mut().zip(grow) {
                                    *o += w * gv;
                                }
                            }
                        }
                        if need_z {
                            let block = &hv.data()[src * cf + k * f..src * cf + (k + 1) * f];
                            gz[row * c + k] = block.iter().zip(grow).map(|(a, b)| a * b).sum();
                        }
                    }
                }
                if need_h {
                    self.accumulate(grads, *h, Tensor::new(hv.shape().to_vec(), gh).unwrap());
                }
                if need_z {
                    self.accumulate(grads, *z, Tensor::new(zv.shape().to_vec(), gz).unwrap());
                }
            }
            Op::Standardize {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let p = inv_std.len();
                let n = g.rows();
                let gam = self.value(*gamma).data();
                let mut ggamma = vec![0.0; p];
                let mut gbeta = vec![0.0; p];
                for (gr, hr) in g.data().chunks(p).zip(xhat.chunks(p)) {
                    for j in 0..p {
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                }
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; n * p];
                    if *batch {
                        // d xhat = g * gamma; dx = inv/n * (n dxhat - Σ dxhat - xhat Σ dxhat·xhat)
                        let mut sum_d = vec![0.0; p];
                        let mut sum_dh = vec![0.0; p];
                        for (gr, hr) in g.data().chunks(p).zip(xhat.chunks(p)) {
                            for j in 0..p {
                                let d = gr[j] * gam[j];
                                sum_d[j] += d;
                                sum_dh[j] += d * hr[j];
                            }
                        }
                        let nf = n as f64;
                        for i in 0..n {
                            for j in 0..p {
                                let d = g.data()[i * p + j] * gam[j];
                                gx[i * p + j] = inv_std[j] / nf
                                    * (nf * d - sum_d[j] - xhat[i * p + j] * sum_dh[j]);
                            }
                        }
                    } else {
                        for i in 0..n {
                            for j in 0..p {
                                gx[i * p + j] = g.data()[i * p + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    let s = self.shape(*x).to_vec();
                    self.accumulate(grads, *x, Tensor::new(s, gx).unwrap());
                }
                self.accumulate(grads, *gamma, Tensor::vector(ggamma));
                self.accumulate(grads, *beta, Tensor::vector(gbeta));
            }
            Op::Aggregate {
                x,
                neighbors,
                weights,
                k,
            } => {
                let xv = self.value(*x);
                let p = xv.cols();
                let n = xv.rows();
                let mut gx = vec![0.0; n * p];
                for i in 0..n {
                    let grow = &g.data()[i * p..(i + 1) * p];
                    for s in 0..*k {
                        let j = neighbors[i * k + s];
                        let w = weights[i * k + s];
                        for (o, gv) in gx[j * p..(j + 1) * p].iter_mut().zip(grow) {
                            *o += w * gv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            }
            Op::Pick { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = vec![0.0; xv.numel()];
                for (i, &j) in idx.iter().enumerate() {
                    gx[i * c + j] += g.data()[i];
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let p = xv.cols();
                let mut gx = vec![0.0; xv.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for (o, gv) in gx[i * p..(i + 1) * p].iter_mut().zip(&g.data()[r * p..(r + 1) * p]) {
                        *o += gv;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            }
            Op::StraightThrough { probs, selected } => {
                let c = y.cols();
                let mut gp = vec![0.0; y.numel()];
                for (i, &j) in selected.iter().enumerate() {
                    gp[i * c + j] = g.data()[i * c + j];
                }
                self.accumulate(grads, *probs, Tensor::new(y.shape().to_vec(), gp).unwrap());
            }
        }
    }
}

/// Leaf gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<(Var, Option<ParamId>, Tensor)>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Tape::var`] or [`Tape::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(l, _, _)| *l == v).map(|(_, _, g)| g)
    }

    /// Gradients for every parameter of `store`; parameters that did not
    /// take part in the pass get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> GradMap {
        let mut out = store.zero_grads();
        for (_, id, g) in &self.leaves {
            if let Some(id) = id {
                out.get_mut(*id).add_assign(g);
            }
        }
        out
    }
}
