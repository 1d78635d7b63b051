use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};
use crate::graph_builder::{Adjacency, PixelMap};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Hadamard(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean { x: Var, axis: usize },
    Max { x: Var, axis: usize, argmax: Vec<usize> },
    MulRows { x: Var, gate: Var },
    MulCols { x: Var, gate: Var },
    ConcatCols(Var, Var),
    Reshape(Var),
    Pick { x: Var, index: usize },
    NeighborMean { x: Var, adjacency: Arc<Adjacency> },
    WindowMax { x: Var, argmax: Vec<usize> },
    AbsSum(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    retain: bool,
}

/// Records operations in execution order so they can be replayed backwards.
///
/// Node order is a topological order by construction. A tape is owned by one
/// forward/backward pass; [`Tape::backward`] consumes it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf and every
/// node marked with [`Tape::retain_grad`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Records a leaf. It takes part in differentiation iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
            retain: needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Shorthand for a trainable leaf.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Reports the gradient of an intermediate value after backward.
    pub fn retain_grad(&mut self, var: Var) {
        self.nodes[var.0].retain = true;
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::Integrity(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            retain: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `x W + b` with `x: n x k`, `W: k x m`, `b: m`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, k) = (xv.rows(), xv.cols());
        if wv.rank() != 2 || wv.rows() != k {
            return Err(shape_err("affine inner dims", xv.shape(), wv.shape()));
        }
        let m = wv.cols();
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(shape_err("affine bias", bv.shape(), &[m]));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv.data());
            }
        }
        let (xd, wd) = (xv.data(), wv.data());
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for kk in 0..k {
                let a = xd[i * k + kk];
                if a == 0.0 {
                    continue;
                }
                let w_row = &wd[kk * m..(kk + 1) * m];
                for (o, &wv) in out_row.iter_mut().zip(w_row) {
                    *o += a * wv;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(vec![n, m], out)?, Op::Affine { x, w, b }, needs)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())?;
        let needs = self.needs(x);
        self.push(out, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary(x, |v| v * factor, Op::Scale(x, factor))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op_name(&op), av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, op, needs)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Hadamard(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<(usize, usize)> {
        let xv = self.value(x);
        if axis > 1 || xv.rank() > 2 {
            return Err(Error::InvalidInput(format!(
                "axis {axis} invalid for shape {:?}",
                xv.shape()
            )));
        }
        let (n, d) = (xv.rows(), xv.cols());
        if (axis == 0 && n == 0) || (axis == 1 && d == 0) {
            return Err(Error::InvalidInput("reduction over an empty axis".into()));
        }
        Ok((n, d))
    }

    /// Mean over rows (`axis = 0`, gives `1 x d`) or columns (`axis = 1`, gives `n x 1`).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (n, d) = self.check_axis(x, axis)?;
        let xd = self.value(x).data();
        let out = if axis == 0 {
            let mut acc = vec![0.0; d];
            for row in xd.chunks(d) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= n as f64);
            Tensor::new(vec![1, d], acc)?
        } else {
            let means = xd.chunks(d).map(|row| row.iter().sum::<f64>() / d as f64).collect();
            Tensor::new(vec![n, 1], means)?
        };
        let needs = self.needs(x);
        self.push(out, Op::Mean { x, axis }, needs)
    }

    /// Max along an axis plus argmax positions (first occurrence wins ties).
    pub fn max(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let (n, d) = self.check_axis(x, axis)?;
        let xd = self.value(x).data();
        let (out, argmax) = if axis == 0 {
            let mut best: Vec<f64> = xd[..d].to_vec();
            let mut arg = vec![0usize; d];
            for (i, row) in xd.chunks(d).enumerate().skip(1) {
                for c in 0..d {
                    if row[c] > best[c] {
                        best[c] = row[c];
                        arg[c] = i;
                    }
                }
            }
            (Tensor::new(vec![1, d], best)?, arg)
        } else {
            let mut best = Vec::with_capacity(n);
            let mut arg = Vec::with_capacity(n);
            for row in xd.chunks(d) {
                let (j, v) = first_max(row);
                best.push(v);
                arg.push(j);
            }
            (Tensor::new(vec![n, 1], best)?, arg)
        };
        let needs = self.needs(x);
        let var = self.push(out, Op::Max { x, axis, argmax: argmax.clone() }, needs)?;
        Ok((var, argmax))
    }

    /// `x[i, c] * gate[c]` with `gate` of length `d`.
    pub fn mul_rows(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gate));
        let d = xv.cols();
        if gv.len() != d {
            return Err(shape_err("row gate", xv.shape(), gv.shape()));
        }
        let g = gv.data();
        let data = xv
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(g).map(|(a, b)| a * b))
            .collect();
        let out = Tensor::new(vec![xv.rows(), d], data)?;
        let needs = self.needs(x) || self.needs(gate);
        self.push(out, Op::MulRows { x, gate }, needs)
    }

    /// `x[i, c] * gate[i]` with `gate` of length `n`.
    pub fn mul_cols(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gate));
        let (n, d) = (xv.rows(), xv.cols());
        if gv.len() != n {
            return Err(shape_err("column gate", xv.shape(), gv.shape()));
        }
        let data = xv
            .data()
            .chunks(d)
            .zip(gv.data())
            .flat_map(|(row, &s)| row.iter().map(move |a| a * s))
            .collect();
        let out = Tensor::new(vec![n, d], data)?;
        let needs = self.needs(x) || self.needs(gate);
        self.push(out, Op::MulCols { x, gate }, needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(shape_err("concat rows", av.shape(), bv.shape()));
        }
        let (da, db) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks(da.max(1)).zip(bv.data().chunks(db.max(1))) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let out = Tensor::new(vec![av.rows(), da + db], data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::ConcatCols(a, b), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = Tensor::new(shape, self.value(x).data().to_vec())?;
        let needs = self.needs(x);
        self.push(out, Op::Reshape(x), needs)
    }

    /// Scalar view of one element.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        let v = *xv.data().get(index).ok_or_else(|| {
            Error::InvalidInput(format!("index {index} out of range for {:?}", xv.shape()))
        })?;
        let needs = self.needs(x);
        self.push(Tensor::scalar(v), Op::Pick { x, index }, needs)
    }

    /// Mean of each vertex's row over its closed neighborhood `N(i) ∪ {i}`.
    pub fn neighbor_mean(&mut self, x: Var, adjacency: &Arc<Adjacency>) -> Result<Var> {
        let xv = self.value(x);
        let n = adjacency.num_vertices();
        if xv.rows() != n || xv.rank() != 2 {
            return Err(shape_err("neighbor mean rows", xv.shape(), &[n]));
        }
        let d = xv.cols();
        let xd = xv.data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &mut out[i * d..(i + 1) * d];
            row.copy_from_slice(&xd[i * d..(i + 1) * d]);
            let nbrs = adjacency.neighbors(i);
            for &j in nbrs {
                for (o, v) in row.iter_mut().zip(&xd[j * d..(j + 1) * d]) {
                    *o += v;
                }
            }
            let inv = 1.0 / (nbrs.len() + 1) as f64;
            row.iter_mut().for_each(|o| *o *= inv);
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(vec![n, d], out)?,
            Op::NeighborMean {
                x,
                adjacency: Arc::clone(adjacency),
            },
            needs,
        )
    }

    /// Per-channel max over each window of a coarse grid.
    ///
    /// `pool` describes the coarse grid; `x` lives on its parent grid. The
    /// returned argmax holds, per `(coarse vertex, channel)`, the parent vertex
    /// that won (first in row-major order on ties).
    pub fn window_max(&mut self, x: Var, pool: &PixelMap) -> Result<(Var, Vec<usize>)> {
        let xv = self.value(x);
        let parent_n = pool.parent_height * pool.parent_width;
        if xv.rank() != 2 || xv.rows() != parent_n {
            return Err(shape_err("window max rows", xv.shape(), &[parent_n]));
        }
        if pool.stride == 0 {
            return Err(Error::InvalidInput("pool window size must be >= 1".into()));
        }
        let d = xv.cols();
        let xd = xv.data();
        let m = pool.num_vertices();
        let mut out = vec![f64::NEG_INFINITY; m * d];
        let mut argmax = vec![usize::MAX; m * d];
        for v in 0..m {
            let (rows, cols) = pool.parent_window(v);
            let best = &mut out[v * d..(v + 1) * d];
            let arg = &mut argmax[v * d..(v + 1) * d];
            for r in rows {
                for c in cols.clone() {
                    let u = r * pool.parent_width + c;
                    for (ch, &val) in xd[u * d..(u + 1) * d].iter().enumerate() {
                        if arg[ch] == usize::MAX || val > best[ch] {
                            best[ch] = val;
                            arg[ch] = u;
                        }
                    }
                }
            }
        }
        let needs = self.needs(x);
        let var = self.push(
            Tensor::new(vec![m, d], out)?,
            Op::WindowMax {
                x,
                argmax: argmax.clone(),
            },
            needs,
        )?;
        Ok((var, argmax))
    }

    /// `Σ |x|`; the subgradient at exactly zero is zero.
    pub fn abs_sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().map(|v| v.abs()).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::AbsSum(x), needs)
    }

    /// `-log softmax(logits)[target]`, stabilized by max subtraction.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        if target >= lv.len() {
            return Err(Error::InvalidInput(format!(
                "class index {target} out of range for {} classes",
                lv.len()
            )));
        }
        let probs = softmax(lv.data());
        let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + lv.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = log_norm - lv.data()[target];
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            needs,
        )
    }

    /// Reverse pass from a scalar `loss`, consuming the tape.
    ///
    /// Gradients accumulate by summation across fan-out.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Tape { nodes } = self;
        if loss.0 >= nodes.len() {
            return Err(Error::InvalidInput("loss is not on this tape".into()));
        }
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "loss must be scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            backprop(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = nodes
            .into_iter()
            .zip(grads)
            .map(|(node, g)| match g {
                Some(g) if node.retain && node.needs_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad matches shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], var: Var, contribution: impl FnOnce(&mut [f64])) {
    if !nodes[var.0].needs_grad {
        return;
    }
    let slot = grads[var.0].get_or_insert_with(|| vec![0.0; nodes[var.0].value.len()]);
    contribution(slot);
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Affine { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
            let (xd, wd) = (xv.data(), wv.data());
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..n {
                    let g_row = &g[i * m..(i + 1) * m];
                    for kk in 0..k {
                        let w_row = &wd[kk * m..(kk + 1) * m];
                        gx[i * k + kk] += g_row.iter().zip(w_row).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            });
            accumulate(nodes, grads, *w, |gw| {
                for i in 0..n {
                    let g_row = &g[i * m..(i + 1) * m];
                    for kk in 0..k {
                        let a = xd[i * k + kk];
                        if a == 0.0 {
                            continue;
                        }
                        for (o, gv) in gw[kk * m..(kk + 1) * m].iter_mut().zip(g_row) {
                            *o += a * gv;
                        }
                    }
                }
            });
            if let Some(b) = b {
                accumulate(nodes, grads, *b, |gb| {
                    for g_row in g.chunks(m) {
                        for (o, gv) in gb.iter_mut().zip(g_row) {
                            *o += gv;
                        }
                    }
                });
            }
        }
        Op::Relu(x) => {
            let xd = val(*x).data();
            accumulate(nodes, grads, *x, |gx| {
                for ((o, gv), v) in gx.iter_mut().zip(g).zip(xd) {
                    if *v > 0.0 {
                        *o += gv;
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let yd = node.value.data();
            accumulate(nodes, grads, *x, |gx| {
                for ((o, gv), y) in gx.iter_mut().zip(g).zip(yd) {
                    *o += gv * y * (1.0 - y);
                }
            });
        }
        Op::Hadamard(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, |ga| {
                for ((o, gv), y) in ga.iter_mut().zip(g).zip(bd) {
                    *o += gv * y;
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for ((o, gv), y) in gb.iter_mut().zip(g).zip(ad) {
                    *o += gv * y;
                }
            });
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                accumulate(nodes, grads, v, |gv| {
                    gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                });
            }
        }
        Op::Scale(x, f) => {
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(o, v)| *o += v * f);
            });
        }
        Op::Sum(x) => {
            accumulate(nodes, grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g[0]));
        }
        Op::Mean { x, axis } => {
            let (n, d) = (val(*x).rows(), val(*x).cols());
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..n {
                    for c in 0..d {
                        gx[i * d + c] += if *axis == 0 {
                            g[c] / n as f64
                        } else {
                            g[i] / d as f64
                        };
                    }
                }
            });
        }
        Op::Max { x, axis, argmax } => {
            let d = val(*x).cols();
            accumulate(nodes, grads, *x, |gx| {
                for (pos, &a) in argmax.iter().enumerate() {
                    let idx = if *axis == 0 { a * d + pos } else { pos * d + a };
                    gx[idx] += g[pos];
                }
            });
        }
        Op::MulRows { x, gate } => {
            let (xd, gd) = (val(*x).data(), val(*gate).data());
            let d = gd.len();
            accumulate(nodes, grads, *x, |gx| {
                for (i, o) in gx.iter_mut().enumerate() {
                    *o += g[i] * gd[i % d];
                }
            });
            accumulate(nodes, grads, *gate, |gg| {
                for (i, (gv, xv)) in g.iter().zip(xd).enumerate() {
                    gg[i % d] += gv * xv;
                }
            });
        }
        Op::MulCols { x, gate } => {
            let (xd, gd) = (val(*x).data(), val(*gate).data());
            let d = val(*x).cols();
            accumulate(nodes, grads, *x, |gx| {
                for (i, o) in gx.iter_mut().enumerate() {
                    *o += g[i] * gd[i / d];
                }
            });
            accumulate(nodes, grads, *gate, |gg| {
                for (i, (gv, xv)) in g.iter().zip(xd).enumerate() {
                    gg[i / d] += gv * xv;
                }
            });
        }
        Op::ConcatCols(a, b) => {
            let (da, db) = (val(*a).cols(), val(*b).cols());
            let width = da + db;
            accumulate(nodes, grads, *a, |ga| {
                for (i, o) in ga.iter_mut().enumerate() {
                    *o += g[(i / da) * width + i % da];
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for (i, o) in gb.iter_mut().enumerate() {
                    *o += g[(i / db) * width + da + i % db];
                }
            });
        }
        Op::Reshape(x) => {
            accumulate(nodes, grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
            });
        }
        Op::Pick { x, index } => {
            accumulate(nodes, grads, *x, |gx| gx[*index] += g[0]);
        }
        Op::NeighborMean { x, adjacency } => {
            let d = val(*x).cols();
            accumulate(nodes, grads, *x, |gx| {
                for i in 0..adjacency.num_vertices() {
                    let nbrs = adjacency.neighbors(i);
                    let inv = 1.0 / (nbrs.len() + 1) as f64;
                    let g_row = &g[i * d..(i + 1) * d];
                    for &j in nbrs.iter().chain(std::iter::once(&i)) {
                        for (o, gv) in gx[j * d..(j + 1) * d].iter_mut().zip(g_row) {
                            *o += gv * inv;
                        }
                    }
                }
            });
        }
        Op::WindowMax { x, argmax } => {
            let d = val(*x).cols();
            accumulate(nodes, grads, *x, |gx| {
                for (pos, &winner) in argmax.iter().enumerate() {
                    gx[winner * d + pos % d] += g[pos];
                }
            });
        }
        Op::AbsSum(x) => {
            let xd = val(*x).data();
            accumulate(nodes, grads, *x, |gx| {
                for (o, v) in gx.iter_mut().zip(xd) {
                    if *v > 0.0 {
                        *o += g[0];
                    } else if *v < 0.0 {
                        *o -= g[0];
                    }
                }
            });
        }
        Op::CrossEntropy { logits, target, probs } => {
            accumulate(nodes, grads, *logits, |gl| {
                for (c, (o, p)) in gl.iter_mut().zip(probs).enumerate() {
                    let onehot = if c == *target { 1.0 } else { 0.0 };
                    *o += g[0] * (p - onehot);
                }
            });
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Affine { .. } => "affine",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Hadamard(..) => "hadamard",
        Op::Add(..) => "add",
        Op::Scale(..) => "scale",
        Op::Sum(_) => "sum",
        Op::Mean { .. } => "mean",
        Op::Max { .. } => "max",
        Op::MulRows { .. } => "mul_rows",
        Op::MulCols { .. } => "mul_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::Reshape(_) => "reshape",
        Op::Pick { .. } => "pick",
        Op::NeighborMean { .. } => "neighbor_mean",
        Op::WindowMax { .. } => "window_max",
        Op::AbsSum(_) => "abs_sum",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn first_max(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let z = tape.leaf(Tensor::zeros(&[3, 2]));
        let b = tape.leaf(t(&[2], &[0.5, -1.5]));
        let y = tape.affine(z, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn affine_matches_naive_product() {
        let xs = [0.3, -1.2, 0.7, 2.0, -0.4, 0.9];
        let ws = [0.1, 0.2, -0.3, 0.4, -0.5, 0.6, 0.7, -0.8];
        let bs = [0.01, 0.02, 0.03, 0.04];
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3, 2], &xs));
        let w = tape.leaf(t(&[2, 4], &ws));
        let b = tape.leaf(t(&[4], &bs));
        let y = tape.affine(x, w, Some(b)).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = bs[j];
                for k in 0..2 {
                    acc += xs[i * 2 + k] * ws[k * 4 + j];
                }
                assert!((tape.value(y).get(i, j) - acc).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn affine_shape_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let w = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.affine(x, w, None), Err(Error::Shape(_))));
        let w = tape.leaf(Tensor::zeros(&[3, 2]));
        let b = tape.leaf(Tensor::zeros(&[3]));
        assert!(matches!(tape.affine(x, w, Some(b)), Err(Error::Shape(_))));
    }

    #[test]
    fn pointwise_definitions() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.leaf(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        let y = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.hadamard(x, y), Err(Error::Shape(_))));
        assert!(matches!(tape.add(x, y), Err(Error::Shape(_))));
    }

    #[test]
    fn max_ties_pick_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3], &[3.0, 1.0, 3.0]));
        let (m, arg) = tape.max(x, 1).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0]);
        assert_eq!(arg, vec![0]);
        let (m, arg) = tape.max(x, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 1.0, 3.0]);
        assert_eq!(arg, vec![0, 0, 0]);
    }

    #[test]
    fn mean_of_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[4, 3], 2.5));
        let m0 = tape.mean(x, 0).unwrap();
        let m1 = tape.mean(x, 1).unwrap();
        assert_eq!(tape.value(m0).data(), &[2.5; 3]);
        assert_eq!(tape.value(m1).data(), &[2.5; 4]);
        assert!(matches!(tape.mean(x, 2), Err(Error::InvalidInput(_))));
        let empty = tape.leaf(Tensor::zeros(&[0, 3]));
        assert!(matches!(tape.mean(empty, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn sum_and_square_gradients() {
        let data = [0.5, -1.0, 2.0, 3.0, 0.0, -0.25];
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &data));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &data));
        let sq = tape.hadamard(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn backward_requires_scalar_and_skips_detached() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::filled(&[2], 1.0));
        let c = tape.leaf(Tensor::filled(&[2], 3.0));
        let y = tape.hadamard(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
        assert!(g.get(c).is_none());

        let mut tape = Tape::new();
        let x = tape.param(Tensor::filled(&[2], 1.0));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 1.0]));
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn abs_sum_subgradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-2.0, 0.0, 0.5]));
        let y = tape.abs_sum(x).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 2.5);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::new();
        let l = tape.param(Tensor::zeros(&[1, 10]));
        let ce = tape.cross_entropy(l, 3).unwrap();
        assert!((tape.value(ce).item().unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!(matches!(tape.cross_entropy(l, 10), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn retained_intermediate_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let h = tape.scale(x, 3.0).unwrap();
        tape.retain_grad(h);
        let sq = tape.hadamard(h, h).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(h).unwrap().data(), &[6.0, 12.0]);
        assert_eq!(g.get(x).unwrap().data(), &[18.0, 36.0]);
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_values_trip_integrity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[2], f64::MAX));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::Integrity(_))));
    }
}
