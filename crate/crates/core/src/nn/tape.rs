use rand::Rng;

use super::linalg::{gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::volume::Volume;
use crate::wavelet;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
    },
    SigmoidCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    L2Penalty {
        w: Var,
        lambda: f64,
    },
    ScaleBands {
        x: Var,
        gate: Var,
    },
    BandMean(Var),
    Haar(Var),
    ConcatLast(Var, Var),
    SelectStep {
        x: Var,
        step: usize,
    },
    StackSteps(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Operations in execution order. Every node is pushed after the nodes it
/// reads, so a reverse sweep is a valid topological traversal.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `tensor.grad`; untouched vars add 0.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![0.0; tensor.len()]),
        }
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::ShapeMismatch(format!(
            "{what} expects a matrix, got shape {shape:?}"
        ))),
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [b, r, c, ch] => Ok((*b, *r, *c, *ch)),
        _ => Err(Error::ShapeMismatch(format!(
            "{what} expects [batch, rows, cols, channels], got {shape:?}"
        ))),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Records a tensor as an input. Gradients flow to it when the tensor
    /// requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, n) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.shape(x), "transpose")?;
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), tracked))
    }

    /// Adds a length-n bias to every row of an m×n matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "add_bias")?;
        if self.value(bias).len() != n {
            return Err(Error::ShapeMismatch(format!(
                "bias of length {} for {m}x{n}",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let tracked = self.tracked(&[x, bias]);
        Ok(self.push(vec![m, n], out, Op::AddBias(x, bias), tracked))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let tracked = self.tracked(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, factor), tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let tracked = self.tracked(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let tracked = self.tracked(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(vec![], vec![s], Op::Sum(x), tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, out, Op::Reshape(x), tracked))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (batch, classes) = dims2(self.shape(logits), "softmax_cross_entropy")?;
        if targets.len() != batch {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for batch of {batch}",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::TargetOutOfRange { target: t, classes });
        }
        let mut probs = Vec::with_capacity(batch * classes);
        let mut total = 0.0;
        for (row, &t) in self.value(logits).chunks_exact(classes).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            // log(z) - (x_t - max), written so a dominant true logit keeps
            // its tiny loss instead of cancelling to zero.
            let others: f64 = exps
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != t)
                .map(|(_, e)| e)
                .sum();
            total += (others / exps[t]).ln_1p();
            probs.extend(exps.iter().map(|e| e / z));
        }
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            vec![],
            vec![total / batch as f64],
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            tracked,
        ))
    }

    /// One-vs-rest sigmoid cross-entropy summed over classes, averaged over
    /// the batch.
    pub fn sigmoid_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (batch, classes) = dims2(self.shape(logits), "sigmoid_cross_entropy")?;
        if targets.len() != batch {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for batch of {batch}",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::TargetOutOfRange { target: t, classes });
        }
        let mut total = 0.0;
        for (row, &t) in self.value(logits).chunks_exact(classes).zip(targets) {
            for (k, &z) in row.iter().enumerate() {
                total += if k == t { softplus(-z) } else { softplus(z) };
            }
        }
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            vec![],
            vec![total / batch as f64],
            Op::SigmoidCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            tracked,
        ))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, tracked))
    }

    /// `lambda · Σ w²`
    pub fn l2_penalty(&mut self, w: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("negative l2 coefficient {lambda}")));
        }
        let s: f64 = self.value(w).iter().map(|v| v * v).sum();
        let tracked = self.tracked(&[w]);
        Ok(self.push(vec![], vec![lambda * s], Op::L2Penalty { w, lambda }, tracked))
    }

    /// Multiplies band `j` of every pixel of sample `b` by `gate[b, j]`.
    pub fn scale_bands(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (batch, rows, cols, ch) = dims4(self.shape(x), "scale_bands")?;
        if self.shape(gate) != [batch, ch] {
            return Err(Error::ShapeMismatch(format!(
                "gate {:?} for volume {:?}",
                self.shape(gate),
                self.shape(x)
            )));
        }
        let g = self.value(gate);
        let per = rows * cols * ch;
        let out = self
            .value(x)
            .chunks_exact(per)
            .zip(g.chunks_exact(ch))
            .flat_map(|(sample, gs)| {
                sample
                    .chunks_exact(ch)
                    .flat_map(move |px| px.iter().zip(gs).map(|(v, g)| v * g))
            })
            .collect();
        let tracked = self.tracked(&[x, gate]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::ScaleBands { x, gate },
            tracked,
        ))
    }

    /// Per-sample mean spectrum: `[batch, rows, cols, ch] -> [batch, ch]`.
    pub fn band_mean(&mut self, x: Var) -> Result<Var> {
        let (batch, rows, cols, ch) = dims4(self.shape(x), "band_mean")?;
        let pixels = rows * cols;
        let mut out = vec![0.0; batch * ch];
        for (b, sample) in self.value(x).chunks_exact(pixels * ch).enumerate() {
            for px in sample.chunks_exact(ch) {
                for (o, v) in out[b * ch..(b + 1) * ch].iter_mut().zip(px) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= pixels as f64);
        let tracked = self.tracked(&[x]);
        Ok(self.push(vec![batch, ch], out, Op::BandMean(x), tracked))
    }

    /// Per-sample, per-band Haar level:
    /// `[batch, P, P, C] -> [batch, P/2, P/2, 4C]` ordered `[ll, lh, hl, hh]`.
    pub fn haar(&mut self, x: Var) -> Result<Var> {
        let (batch, rows, cols, ch) = dims4(self.shape(x), "haar")?;
        if rows % 2 != 0 || cols % 2 != 0 {
            return Err(Error::OddDimension { rows, cols });
        }
        let per = rows * cols * ch;
        let mut out = Vec::with_capacity(batch * per);
        for sample in self.value(x).chunks_exact(per) {
            let vol = Volume::from_vec(rows, cols, ch, sample.to_vec());
            out.extend(wavelet::dwt2_volume(&vol)?.data);
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            vec![batch, rows / 2, cols / 2, 4 * ch],
            out,
            Op::Haar(x),
            tracked,
        ))
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::ShapeMismatch(format!("concat {sa:?} with {sb:?}")));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let out = self
            .value(a)
            .chunks_exact(ca)
            .zip(self.value(b).chunks_exact(cb))
            .flat_map(|(x, y)| x.iter().chain(y).copied())
            .collect();
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(shape, out, Op::ConcatLast(a, b), tracked))
    }

    /// `[batch, steps, d] -> [batch, d]` at one step.
    pub fn select_step(&mut self, x: Var, step: usize) -> Result<Var> {
        let (batch, steps, d) = match self.shape(x) {
            [b, s, d] => (*b, *s, *d),
            other => {
                return Err(Error::ShapeMismatch(format!(
                    "select_step expects [batch, steps, d], got {other:?}"
                )))
            }
        };
        if step >= steps {
            return Err(Error::ShapeMismatch(format!("step {step} of {steps}")));
        }
        let v = self.value(x);
        let out = (0..batch)
            .flat_map(|b| v[(b * steps + step) * d..(b * steps + step + 1) * d].iter().copied())
            .collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(vec![batch, d], out, Op::SelectStep { x, step }, tracked))
    }

    /// Stacks `[batch, d]` steps into `[batch, steps, d]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let first = *steps
            .first()
            .ok_or_else(|| Error::ShapeMismatch("stack of zero steps".into()))?;
        let (batch, d) = dims2(self.shape(first), "stack_steps")?;
        for s in steps {
            if self.shape(*s) != [batch, d] {
                return Err(Error::ShapeMismatch("stack_steps: ragged steps".into()));
            }
        }
        let mut out = vec![0.0; batch * steps.len() * d];
        for (t, s) in steps.iter().enumerate() {
            for (b, row) in self.value(*s).chunks_exact(d).enumerate() {
                let at = (b * steps.len() + t) * d;
                out[at..at + d].copy_from_slice(row);
            }
        }
        let tracked = self.tracked(steps);
        Ok(self.push(
            vec![batch, steps.len(), d],
            out,
            Op::StackSteps(steps.to_vec()),
            tracked,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 || shape.iter().any(|&d| d != 1) {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: &mut dyn FnMut(&mut [f64])| {
            if !self.node(v).tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
            delta(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |s| gemm_nt(g, bv, s, m, n, k));
                acc(*b, &mut |s| gemm_tn(av, g, s, m, k, n));
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc(*x, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).len();
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                acc(*bias, &mut |s| {
                    for row in g.chunks_exact(n) {
                        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(a, b)| *a += f * b)),
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if xv[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|a| *a += g[0])),
            Op::Reshape(x) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |s| {
                    for (b, &t) in targets.iter().enumerate() {
                        for k in 0..classes {
                            let onehot = if k == t { 1.0 } else { 0.0 };
                            s[b * classes + k] += scale * (probs[b * classes + k] - onehot);
                        }
                    }
                });
            }
            Op::SigmoidCrossEntropy { logits, targets } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / targets.len() as f64;
                let z = self.value(*logits);
                acc(*logits, &mut |s| {
                    for (b, &t) in targets.iter().enumerate() {
                        for k in 0..classes {
                            let i = b * classes + k;
                            let onehot = if k == t { 1.0 } else { 0.0 };
                            s[i] += scale * (sigmoid(z[i]) - onehot);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * mask[i];
                }
            }),
            Op::L2Penalty { w, lambda } => {
                let wv = self.value(*w);
                acc(*w, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[0] * 2.0 * lambda * wv[i];
                    }
                });
            }
            Op::ScaleBands { x, gate } => {
                let ch = *self.shape(*x).last().unwrap();
                let per = self.value(*x).len() / self.shape(*x)[0];
                let (xv, gv) = (self.value(*x), self.value(*gate));
                acc(*x, &mut |s| {
                    for (i, si) in s.iter_mut().enumerate() {
                        *si += g[i] * gv[(i / per) * ch + i % ch];
                    }
                });
                acc(*gate, &mut |s| {
                    for i in 0..xv.len() {
                        s[(i / per) * ch + i % ch] += g[i] * xv[i];
                    }
                });
            }
            Op::BandMean(x) => {
                let shape = self.shape(*x);
                let (ch, pixels) = (shape[3], shape[1] * shape[2]);
                let per = pixels * ch;
                acc(*x, &mut |s| {
                    for (i, si) in s.iter_mut().enumerate() {
                        *si += g[(i / per) * ch + i % ch] / pixels as f64;
                    }
                });
            }
            Op::Haar(x) => {
                let (rows, cols) = (node.shape[1], node.shape[2]);
                let ch = node.shape[3];
                let per = rows * cols * ch;
                acc(*x, &mut |s| {
                    for (b, gs) in g.chunks_exact(per).enumerate() {
                        let vol = Volume::from_vec(rows, cols, ch, gs.to_vec());
                        let back = wavelet::idwt2_volume(&vol).expect("subband grad shape");
                        for (a, v) in s[b * per..(b + 1) * per].iter_mut().zip(back.data) {
                            *a += v;
                        }
                    }
                });
            }
            Op::ConcatLast(a, b) => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                acc(*a, &mut |s| {
                    for (dst, src) in s.chunks_exact_mut(ca).zip(g.chunks_exact(ca + cb)) {
                        dst.iter_mut().zip(&src[..ca]).for_each(|(x, y)| *x += y);
                    }
                });
                acc(*b, &mut |s| {
                    for (dst, src) in s.chunks_exact_mut(cb).zip(g.chunks_exact(ca + cb)) {
                        dst.iter_mut().zip(&src[ca..]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::SelectStep { x, step } => {
                let (steps, d) = (self.shape(*x)[1], self.shape(*x)[2]);
                acc(*x, &mut |s| {
                    for (b, row) in g.chunks_exact(d).enumerate() {
                        let at = (b * steps + step) * d;
                        s[at..at + d].iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::StackSteps(steps) => {
                let (t_total, d) = (node.shape[1], node.shape[2]);
                for (t, v) in steps.iter().enumerate() {
                    acc(*v, &mut |s| {
                        for (b, dst) in s.chunks_exact_mut(d).enumerate() {
                            let at = (b * t_total + t) * d;
                            dst.iter_mut().zip(&g[at..at + d]).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap().with_grad()
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central differences of `f` at `x`, compared with the tape gradient.
    fn check_gradient(x: &Tensor, f: impl Fn(&mut Tape, Var) -> Var, h: f64, rel: f64) {
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let out = f(&mut tape, v);
        let grads = tape.backward(out).unwrap();
        let analytic = grads.get(v).unwrap().to_vec();
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut shifted = x.clone();
                shifted.data_mut()[i] += delta;
                let mut t = Tape::new();
                let sv = t.leaf(&shifted);
                let o = f(&mut t, sv);
                t.scalar_value(o)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                (fd - analytic[i]).abs() / denom < rel,
                "index {i}: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::new();
        let i2 = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let a = t.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = t.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let d = t.matmul(a, b).unwrap();
        assert_eq!(t.value(d), &[11.0]);
        assert!(matches!(t.matmul(a, a), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = param(&[3, 4], random(&mut rng, 12));
        let b = Tensor::new(vec![4, 2], random(&mut rng, 8)).unwrap();
        let bc = b.clone();
        check_gradient(
            &a,
            move |t, v| {
                let bv = t.leaf(&bc);
                let p = t.matmul(v, bv).unwrap();
                t.sum(p)
            },
            1e-5,
            1e-6,
        );
        let ac = a.clone();
        check_gradient(
            &b.with_grad(),
            move |t, v| {
                let av = t.leaf(&ac);
                let p = t.matmul(av, v).unwrap();
                t.sum(p)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn sigmoid_values_and_slope() {
        let mut t = Tape::new();
        let x = t
            .constant(vec![4], vec![0.0, 3.0, -3.0, 40.0])
            .unwrap();
        let y = t.sigmoid(x);
        assert_eq!(t.value(y)[0], 0.5);
        assert!((t.value(y)[1] + t.value(y)[2] - 1.0).abs() < 1e-12);

        let x0 = param(&[1], vec![0.0]);
        let mut t = Tape::new();
        let v = t.leaf(&x0);
        let y = t.sigmoid(v);
        let s = t.sum(y);
        assert!((t.backward(s).unwrap().get(v).unwrap()[0] - 0.25).abs() < 1e-12);
        check_gradient(&x0, |t, v| { let y = t.sigmoid(v); t.sum(y) }, 1e-5, 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check_gradient(&param(&[6], random(&mut rng, 6)), |t, v| { let y = t.sigmoid(v); t.sum(y) }, 1e-5, 1e-6);
    }

    #[test]
    fn relu_values_and_mask() {
        let mut t = Tape::new();
        let x = t.constant(vec![3], vec![-1.0, 2.0, 0.0]).unwrap();
        let y = t.relu(x);
        assert_eq!(t.value(y), &[0.0, 2.0, 0.0]);
        let yy = t.relu(y);
        assert_eq!(t.value(yy), t.value(y));

        let w = param(&[5], vec![-1.5, -0.2, 0.3, 1.1, 2.0]);
        let mut t = Tape::new();
        let v = t.leaf(&w);
        let y = t.relu(v);
        let s = t.sum(y);
        assert_eq!(t.backward(s).unwrap().get(v).unwrap(), &[0.0, 0.0, 1.0, 1.0, 1.0]);
        check_gradient(&w, |t, v| { let y = t.relu(v); t.sum(y) }, 1e-5, 1e-8);
        // Subgradient at 0 is 0.
        let z = param(&[1], vec![0.0]);
        let mut t = Tape::new();
        let v = t.leaf(&z);
        let y = t.relu(v);
        let s = t.sum(y);
        assert_eq!(t.backward(s).unwrap().get(v).unwrap(), &[0.0]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut t = Tape::new();
        let z = t.constant(vec![1, 4], vec![0.0; 4]).unwrap();
        let l = t.softmax_cross_entropy(z, &[2]).unwrap();
        assert!((t.scalar_value(l) - 4f64.ln()).abs() < 1e-12);

        let z = t.constant(vec![1, 3], vec![50.0, 0.0, 0.0]).unwrap();
        let l = t.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(t.scalar_value(l) < 1e-20);
        assert!(t.scalar_value(l) >= 0.0);

        assert!(matches!(
            t.softmax_cross_entropy(z, &[3]),
            Err(Error::TargetOutOfRange { target: 3, classes: 3 })
        ));
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = param(&[5, 3], random(&mut rng, 15));
        let targets = [0usize, 2, 1, 1, 0];
        check_gradient(&z, move |t, v| t.softmax_cross_entropy(v, &targets).unwrap(), 1e-5, 1e-6);
        check_gradient(&z, move |t, v| t.sigmoid_cross_entropy(v, &targets).unwrap(), 1e-5, 1e-6);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let x = t.constant(vec![1000], vec![1.0; 1000]).unwrap();
        assert_eq!(t.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(t.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        let y = t.dropout(x, 0.3, true, &mut rng).unwrap();
        let keep = 1.0 / 0.7;
        assert!(t.value(y).iter().all(|&v| v == 0.0 || (v - keep).abs() < 1e-12));
        assert!(t.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::new();
        let x = t.constant(vec![1_000_000], vec![1.0; 1_000_000]).unwrap();
        let y = t.dropout(x, 0.1, true, &mut rng).unwrap();
        let mean = t.value(y).iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01);
    }

    #[test]
    fn l2_penalty_value_and_gradient() {
        let w = param(&[2], vec![3.0, 4.0]);
        let mut t = Tape::new();
        let v = t.leaf(&w);
        let p = t.l2_penalty(v, 0.01).unwrap();
        assert!((t.scalar_value(p) - 0.25).abs() < 1e-15);
        let g = t.backward(p).unwrap();
        assert!((g.get(v).unwrap()[0] - 0.06).abs() < 1e-15);

        let mut t = Tape::new();
        let v = t.leaf(&w);
        let p = t.l2_penalty(v, 0.0).unwrap();
        assert_eq!(t.scalar_value(p), 0.0);
        assert_eq!(t.backward(p).unwrap().get(v).unwrap(), &[0.0, 0.0]);

        check_gradient(&w, |t, v| t.l2_penalty(v, 0.01).unwrap(), 1e-5, 1e-8);
    }

    #[test]
    fn backward_basics() {
        let w = param(&[3], vec![1.0, 2.0, 3.0]);
        let mut t = Tape::new();
        let v = t.leaf(&w);
        let s = t.sum(v);
        assert_eq!(t.backward(s).unwrap().get(v).unwrap(), &[1.0, 1.0, 1.0]);

        let sq = t.mul(v, v).unwrap();
        let s = t.sum(sq);
        assert_eq!(t.backward(s).unwrap().get(v).unwrap(), &[2.0, 4.0, 6.0]);
        assert!(matches!(t.backward(sq), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn accumulation_doubles() {
        let mut w = param(&[3], vec![1.0, -2.0, 0.5]);
        let mut t = Tape::new();
        let v = t.leaf(&w);
        let sq = t.mul(v, v).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        g.accumulate_into(v, &mut w).unwrap();
        let once = w.grad().unwrap().to_vec();
        g.accumulate_into(v, &mut w).unwrap();
        let twice = w.grad().unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = param(&[2, 4, 4, 3], random(&mut rng, 96));
        let weights = Tensor::new(vec![2, 2, 2, 12], random(&mut rng, 96)).unwrap();
        let gate = Tensor::new(vec![2, 3], random(&mut rng, 6)).unwrap();
        let (w2, g2) = (weights.clone(), gate.clone());
        check_gradient(
            &x,
            move |t, v| {
                let g = t.leaf(&g2);
                let scaled = t.scale_bands(v, g).unwrap();
                let m = t.band_mean(v).unwrap();
                let mg = t.mul(m, g).unwrap();
                let mg = t.sum(mg);
                let h = t.haar(scaled).unwrap();
                let w = t.leaf(&w2);
                let hw = t.mul(h, w).unwrap();
                let s = t.sum(hw);
                t.add(s, mg).unwrap()
            },
            1e-5,
            1e-6,
        );
        let xc = x.clone();
        check_gradient(
            &gate.with_grad(),
            move |t, g| {
                let v = t.leaf(&xc);
                let scaled = t.scale_bands(v, g).unwrap();
                let sq = t.mul(scaled, scaled).unwrap();
                t.sum(sq)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn sequence_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = param(&[2, 3, 4], random(&mut rng, 24));
        let other = Tensor::new(vec![2, 3, 2], random(&mut rng, 12)).unwrap();
        let w = Tensor::new(vec![3, 6], random(&mut rng, 18)).unwrap();
        check_gradient(
            &x,
            move |t, v| {
                let o = t.leaf(&other);
                let cat = t.concat_last(v, o).unwrap();
                let steps: Vec<Var> = (0..3).map(|s| t.select_step(cat, s).unwrap()).collect();
                let rev: Vec<Var> = steps.iter().rev().copied().collect();
                let stacked = t.stack_steps(&rev).unwrap();
                let flat = t.reshape(stacked, vec![6, 6]).unwrap();
                let wt = t.leaf(&w);
                let wt = t.transpose(wt).unwrap();
                let p = t.matmul(flat, wt).unwrap();
                let p = t.relu(p);
                let sq = t.mul(p, p).unwrap();
                let s = t.sum(sq);
                t.scale(s, 0.5)
            },
            1e-5,
            1e-6,
        );
        let b = param(&[4], random(&mut rng, 4));
        let m = Tensor::new(vec![3, 4], random(&mut rng, 12)).unwrap();
        check_gradient(
            &b,
            move |t, v| {
                let mv = t.leaf(&m);
                let y = t.add_bias(mv, v).unwrap();
                let y = t.sigmoid(y);
                t.sum(y)
            },
            1e-5,
            1e-6,
        );
    }
}
