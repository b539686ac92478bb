//! Reverse-mode recording of tensor operations.
//!
//! Every operation appends one node whose inputs are earlier nodes, so the
//! node vector is always a valid topological order and `backward` is a single
//! reverse sweep.

use super::tensor::{check_finite, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
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
    Linear { x: usize, w: usize, b: Option<usize> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Ln(usize),
    ClampMin(usize, f64),
    Square(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    ColMean(usize),
    ColVar { x: usize, unbiased: bool },
    RowNorm(usize),
    ConcatCols(usize, usize),
    MulConst(usize, Vec<f64>),
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

impl Node {
    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[usize], name: &str) -> Result<Var> {
        check_finite(&value, name)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf_raw(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        check_finite(&value, "leaf")?;
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a tensor; gradients are tracked iff the tensor requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.values().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor without gradient tracking regardless of its flag.
    pub fn frozen(&mut self, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].requires_grad = false;
        v
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("constant {shape:?} with {} values", values.len())));
        }
        self.leaf_raw(shape, values, false)
    }

    /// A leaf that gradients flow into.
    pub fn variable(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("variable {shape:?} with {} values", values.len())));
        }
        self.leaf_raw(shape, values, true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::shape(format!("{what} expects a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, name: &str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| f(x)).collect();
        let shape = n.shape.clone();
        self.push(shape, value, op, &[a.0], name)
    }

    /// `x · wᵀ + b` for `x` of shape `(n, in)`, `w` of shape `(out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, k) = self.dims2(x, "linear input")?;
        let (out, k2) = self.dims2(w, "linear weight")?;
        if k != k2 {
            return Err(Error::shape(format!("linear: input width {k}, weight expects {k2}")));
        }
        if let Some(b) = b {
            if self.nodes[b.0].value.len() != out {
                return Err(Error::shape(format!("linear bias length {} vs {out}", self.nodes[b.0].value.len())));
            }
        }
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let mut y = vec![0.0; n * out];
        for i in 0..n {
            let xr = &xv[i * k..(i + 1) * k];
            for o in 0..out {
                let wr = &wv[o * k..(o + 1) * k];
                y[i * out + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value;
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(bv).for_each(|(a, b)| *a += b);
            }
        }
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        self.push(vec![n, out], y, Op::Linear { x: x.0, w: w.0, b: b.map(|b| b.0) }, &inputs, "linear")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x + y).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Add(a.0, b.0), &[a.0, b.0], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x - y).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Sub(a.0, b.0), &[a.0, b.0], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x * y).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, Op::Mul(a.0, b.0), &[a.0, b.0], "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::Scale(a.0, s), "scale", |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a.0), "add_scalar", |x| x + s)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a.0), "relu", |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.map(a, Op::LeakyRelu(a.0, slope), "leaky_relu", |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a.0), "sigmoid", |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Ln(a.0), "ln", f64::ln)
    }

    /// `max(x, c)`; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::ClampMin(a.0, c), "clamp_min", |x| x.max(c))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Square(a.0), "square", |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Abs(a.0), "abs", f64::abs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a.0), &[a.0], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = &self.nodes[a.0];
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(a.0), &[a.0], "mean")
    }

    /// Sum over columns: `(n, p) -> (n)`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (n, p) = self.dims2(a, "row_sum")?;
        let v = &self.nodes[a.0].value;
        let out = (0..n).map(|i| v[i * p..(i + 1) * p].iter().sum()).collect();
        self.push(vec![n], out, Op::RowSum(a.0), &[a.0], "row_sum")
    }

    /// Mean over rows: `(n, p) -> (p)`.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let (n, p) = self.dims2(a, "col_mean")?;
        let out = col_means(&self.nodes[a.0].value, n, p);
        self.push(vec![p], out, Op::ColMean(a.0), &[a.0], "col_mean")
    }

    /// Per-column variance over rows: `(n, p) -> (p)`.
    pub fn col_var(&mut self, a: Var, unbiased: bool) -> Result<Var> {
        let (n, p) = self.dims2(a, "col_var")?;
        let denom = if unbiased { n as f64 - 1.0 } else { n as f64 };
        if denom <= 0.0 {
            return Err(Error::invalid(format!("variance over {n} rows is undefined")));
        }
        let out = col_vars(&self.nodes[a.0].value, n, p, unbiased);
        self.push(vec![p], out, Op::ColVar { x: a.0, unbiased }, &[a.0], "col_var")
    }

    /// Euclidean norm of each row: `(n, p) -> (n)`. The subgradient at 0 is 0.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let (n, p) = self.dims2(a, "row_norm")?;
        let v = &self.nodes[a.0].value;
        let out = (0..n)
            .map(|i| v[i * p..(i + 1) * p].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.push(vec![n], out, Op::RowNorm(a.0), &[a.0], "row_norm")
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.dims2(a, "concat_cols")?;
        let (n2, q) = self.dims2(b, "concat_cols")?;
        if n != n2 {
            return Err(Error::shape(format!("concat_cols: {n} rows vs {n2}")));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&av[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv[i * q..(i + 1) * q]);
        }
        self.push(vec![n, p + q], out, Op::ConcatCols(a.0, b.0), &[a.0, b.0], "concat_cols")
    }

    /// Elementwise product with a constant of the same length (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.nodes[a.0].value.len() {
            return Err(Error::shape("mul_const length"));
        }
        let n = &self.nodes[a.0];
        let value = n.value.iter().zip(&c).map(|(x, m)| x * m).collect();
        let shape = n.shape.clone();
        self.push(shape, value, Op::MulConst(a.0, c), &[a.0], "mul_const")
    }

    /// Batch normalization with batch statistics (biased variance).
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, p) = self.dims2(x, "batch_norm")?;
        self.check_affine(gamma, beta, p, "batch_norm")?;
        let xv = &self.nodes[x.0].value;
        let mean = col_means(xv, n, p);
        let var = col_vars(xv, n, p, false);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * p];
        for i in 0..n {
            for j in 0..p {
                xhat[i * p + j] = (xv[i * p + j] - mean[j]) * inv_std[j];
            }
        }
        let out = affine_cols(&xhat, &self.nodes[gamma.0].value, &self.nodes[beta.0].value, p);
        self.push(
            vec![n, p],
            out,
            Op::BatchNormTrain { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std },
            &[x.0, gamma.0, beta.0],
            "batch_norm_train",
        )
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (n, p) = self.dims2(x, "batch_norm")?;
        self.check_affine(gamma, beta, p, "batch_norm")?;
        if mean.len() != p || var.len() != p {
            return Err(Error::shape("batch_norm running statistics length"));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = &self.nodes[x.0].value;
        let mut xhat = vec![0.0; n * p];
        for i in 0..n {
            for j in 0..p {
                xhat[i * p + j] = (xv[i * p + j] - mean[j]) * inv_std[j];
            }
        }
        let out = affine_cols(&xhat, &self.nodes[gamma.0].value, &self.nodes[beta.0].value, p);
        self.push(
            vec![n, p],
            out,
            Op::BatchNormEval { x: x.0, gamma: gamma.0, beta: beta.0, mean: mean.to_vec(), inv_std },
            &[x.0, gamma.0, beta.0],
            "batch_norm_eval",
        )
    }

    /// Per-row normalization followed by a per-column affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, p) = self.dims2(x, "layer_norm")?;
        self.check_affine(gamma, beta, p, "layer_norm")?;
        let xv = &self.nodes[x.0].value;
        let mut xhat = vec![0.0; n * p];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let r = &xv[i * p..(i + 1) * p];
            let m = r.iter().sum::<f64>() / p as f64;
            let v = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / p as f64;
            let s = 1.0 / (v + eps).sqrt();
            inv_std[i] = s;
            for j in 0..p {
                xhat[i * p + j] = (r[j] - m) * s;
            }
        }
        let out = affine_cols(&xhat, &self.nodes[gamma.0].value, &self.nodes[beta.0].value, p);
        self.push(
            vec![n, p],
            out,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std },
            &[x.0, gamma.0, beta.0],
            "layer_norm",
        )
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let (am, mx) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
            let rest: f64 = row.iter().enumerate().filter(|(j, _)| *j != am).map(|(_, v)| (v - mx).exp()).sum();
            let log_norm = rest.ln_1p();
            let lse = mx + log_norm;
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss += (mx - row[labels[i]]) + log_norm;
        }
        loss /= n as f64;
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs },
            &[logits.0],
            "cross_entropy",
        )
    }

    fn check_affine(&self, gamma: Var, beta: Var, p: usize, what: &str) -> Result<()> {
        if self.nodes[gamma.0].value.len() != p || self.nodes[beta.0].value.len() != p {
            return Err(Error::shape(format!("{what}: affine parameters must have length {p}")));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`. Previous gradients on this tape
    /// are discarded; parameter tensors accumulate via [`Tape::accumulate_into`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        let mut send = |i: usize, gi: Vec<f64>| {
            if nodes[i].requires_grad {
                add_into(&mut grads[i], gi);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xn = &nodes[*x];
                let (n, k) = (xn.rows(), xn.cols());
                let out = node.cols();
                let wv = &nodes[*w].value;
                if wants(*x) {
                    let mut dx = vec![0.0; n * k];
                    for i in 0..n {
                        let dxr = &mut dx[i * k..(i + 1) * k];
                        for o in 0..out {
                            let go = g[i * out + o];
                            if go != 0.0 {
                                let wr = &wv[o * k..(o + 1) * k];
                                dxr.iter_mut().zip(wr).for_each(|(d, w)| *d += go * w);
                            }
                        }
                    }
                    send(*x, dx);
                }
                if wants(*w) {
                    let xv = &xn.value;
                    let mut dw = vec![0.0; out * k];
                    for i in 0..n {
                        let xr = &xv[i * k..(i + 1) * k];
                        for o in 0..out {
                            let go = g[i * out + o];
                            if go != 0.0 {
                                let dwr = &mut dw[o * k..(o + 1) * k];
                                dwr.iter_mut().zip(xr).for_each(|(d, x)| *d += go * x);
                            }
                        }
                    }
                    send(*w, dw);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        send(*b, col_sums(g, n, out));
                    }
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let av = &nodes[*a].value;
                let bv = &nodes[*b].value;
                if wants(*a) {
                    send(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if wants(*b) {
                    send(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::Relu(a) => {
                let av = &nodes[*a].value;
                send(*a, g.iter().zip(av).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::LeakyRelu(a, slope) => {
                let av = &nodes[*a].value;
                send(*a, g.iter().zip(av).map(|(g, x)| if *x > 0.0 { *g } else { g * slope }).collect());
            }
            Op::Sigmoid(a) => {
                send(*a, g.iter().zip(&node.value).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            Op::Ln(a) => {
                let av = &nodes[*a].value;
                send(*a, g.iter().zip(av).map(|(g, x)| g / x).collect());
            }
            Op::ClampMin(a, c) => {
                let av = &nodes[*a].value;
                send(*a, g.iter().zip(av).map(|(g, x)| if x > c { *g } else { 0.0 }).collect());
            }
            Op::Square(a) => {
                let av = &nodes[*a].value;
                send(*a, g.iter().zip(av).map(|(g, x)| 2.0 * g * x).collect());
            }
            Op::Abs(a) => {
                let av = &nodes[*a].value;
                send(*a, g.iter().zip(av).map(|(g, x)| g * sign(*x)).collect());
            }
            Op::Sum(a) => send(*a, vec![g[0]; nodes[*a].value.len()]),
            Op::Mean(a) => {
                let n = nodes[*a].value.len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::RowSum(a) => {
                let p = nodes[*a].cols();
                send(*a, g.iter().flat_map(|&gi| std::iter::repeat_n(gi, p)).collect());
            }
            Op::ColMean(a) => {
                let an = &nodes[*a];
                let (n, p) = (an.rows(), an.cols());
                let mut d = vec![0.0; n * p];
                for row in d.chunks_mut(p) {
                    row.iter_mut().zip(g).for_each(|(d, g)| *d = g / n as f64);
                }
                send(*a, d);
            }
            Op::ColVar { x, unbiased } => {
                let xn = &nodes[*x];
                let (n, p) = (xn.rows(), xn.cols());
                let mean = col_means(&xn.value, n, p);
                let denom = if *unbiased { n as f64 - 1.0 } else { n as f64 };
                let mut d = vec![0.0; n * p];
                for i in 0..n {
                    for j in 0..p {
                        d[i * p + j] = g[j] * 2.0 * (xn.value[i * p + j] - mean[j]) / denom;
                    }
                }
                send(*x, d);
            }
            Op::RowNorm(a) => {
                let an = &nodes[*a];
                let p = an.cols();
                let mut d = vec![0.0; an.value.len()];
                for (i, (gi, norm)) in g.iter().zip(&node.value).enumerate() {
                    if *norm > 0.0 {
                        for j in 0..p {
                            d[i * p + j] = gi * an.value[i * p + j] / norm;
                        }
                    }
                }
                send(*a, d);
            }
            Op::ConcatCols(a, b) => {
                let p = nodes[*a].cols();
                let q = nodes[*b].cols();
                let n = node.rows();
                if wants(*a) {
                    send(*a, (0..n).flat_map(|i| g[i * (p + q)..i * (p + q) + p].to_vec()).collect());
                }
                if wants(*b) {
                    send(*b, (0..n).flat_map(|i| g[i * (p + q) + p..(i + 1) * (p + q)].to_vec()).collect());
                }
            }
            Op::MulConst(a, c) => send(*a, g.iter().zip(c).map(|(g, c)| g * c).collect()),
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                let (n, p) = (node.rows(), node.cols());
                let gv = &nodes[*gamma].value;
                if wants(*gamma) {
                    send(*gamma, col_dot(g, xhat, n, p));
                }
                if wants(*beta) {
                    send(*beta, col_sums(g, n, p));
                }
                if wants(*x) {
                    let dxhat: Vec<f64> = g.iter().enumerate().map(|(i, g)| g * gv[i % p]).collect();
                    let sum_d = col_sums(&dxhat, n, p);
                    let sum_dx = col_dot(&dxhat, xhat, n, p);
                    let nf = n as f64;
                    let mut dx = vec![0.0; n * p];
                    for i in 0..n {
                        for j in 0..p {
                            let k = i * p + j;
                            dx[k] = inv_std[j] / nf * (nf * dxhat[k] - sum_d[j] - xhat[k] * sum_dx[j]);
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let (n, p) = (node.rows(), node.cols());
                let gv = &nodes[*gamma].value;
                if wants(*gamma) {
                    let xv = &nodes[*x].value;
                    let xhat: Vec<f64> = xv.iter().enumerate().map(|(k, v)| (v - mean[k % p]) * inv_std[k % p]).collect();
                    send(*gamma, col_dot(g, &xhat, n, p));
                }
                if wants(*beta) {
                    send(*beta, col_sums(g, n, p));
                }
                if wants(*x) {
                    send(*x, g.iter().enumerate().map(|(k, g)| g * gv[k % p] * inv_std[k % p]).collect());
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, p) = (node.rows(), node.cols());
                let gv = &nodes[*gamma].value;
                if wants(*gamma) {
                    send(*gamma, col_dot(g, xhat, n, p));
                }
                if wants(*beta) {
                    send(*beta, col_sums(g, n, p));
                }
                if wants(*x) {
                    let pf = p as f64;
                    let mut dx = vec![0.0; n * p];
                    for i in 0..n {
                        let r = i * p..(i + 1) * p;
                        let dxhat: Vec<f64> = g[r.clone()].iter().zip(gv).map(|(g, w)| g * w).collect();
                        let sd: f64 = dxhat.iter().sum();
                        let sdx: f64 = dxhat.iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in 0..p {
                            dx[i * p + j] = inv_std[i] / pf * (pf * dxhat[j] - sd - xhat[i * p + j] * sdx);
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = nodes[*logits].cols();
                let n = labels.len() as f64;
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * c + y] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= g[0] / n);
                send(*logits, d);
            }
        }
    }

    /// Adds the gradient recorded for `v` into `t`'s gradient buffer.
    /// A tracked node that received no gradient contributes zeros.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None if self.nodes[v.0].requires_grad => t.accumulate_grad(&vec![0.0; t.numel()]),
            None => Ok(()),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn col_means(v: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut m = col_sums(v, n, p);
    m.iter_mut().for_each(|x| *x /= n as f64);
    m
}

pub(crate) fn col_vars(v: &[f64], n: usize, p: usize, unbiased: bool) -> Vec<f64> {
    let m = col_means(v, n, p);
    let mut s = vec![0.0; p];
    for row in v.chunks(p) {
        for j in 0..p {
            let d = row[j] - m[j];
            s[j] += d * d;
        }
    }
    let denom = if unbiased { n as f64 - 1.0 } else { n as f64 };
    s.iter_mut().for_each(|x| *x /= denom);
    s
}

fn col_sums(v: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut s = vec![0.0; p];
    for row in v.chunks(p).take(n) {
        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    s
}

fn col_dot(a: &[f64], b: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut s = vec![0.0; p];
    for i in 0..n {
        for j in 0..p {
            s[j] += a[i * p + j] * b[i * p + j];
        }
    }
    s
}

fn affine_cols(xhat: &[f64], gamma: &[f64], beta: &[f64], p: usize) -> Vec<f64> {
    xhat.iter().enumerate().map(|(k, v)| v * gamma[k % p] + beta[k % p]).collect()
}
