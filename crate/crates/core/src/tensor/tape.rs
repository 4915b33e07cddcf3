//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is an arena of nodes (tensor values) plus the ordered list of
//! ops that produced them. Ops only ever append nodes, so node indices are
//! already a topological order and `backward` is one reverse sweep. Tapes are
//! single-threaded and rebuilt for every forward pass; parameters live
//! outside as plain tensors and are lifted on with [`Tape::param`].

use super::{ActKind, Aggregation, Tensor};
use crate::{Error, Result};

/// Handle to a node on a tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-feature batch statistics computed by a training-mode batchnorm op,
/// handed back so the owning layer can update its running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Matmul { a: usize, b: usize, out: usize },
    /// out = x · w', with w stored row-per-output-neuron.
    Linear { x: usize, w: usize, out: usize },
    Add { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    AddBias { y: usize, b: usize, out: usize },
    Activate { x: usize, out: usize, kind: ActKind },
    ConcatLast { a: usize, b: usize, out: usize },
    Reduce { x: usize, out: usize, mode: Aggregation },
    Slice { v: usize, out: usize, start: usize },
    Affine { x: usize, out: usize, mul: f64 },
    /// Elementwise max; on ties the gradient routes to `b`.
    Maximum { a: usize, b: usize, out: usize },
    SumAll { x: usize, out: usize },
    SoftmaxCrossEntropy { logits: usize, out: usize, probs: Vec<f64>, labels: Vec<usize> },
    BatchNormTrain { x: usize, gamma: usize, beta: usize, out: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: usize, gamma: usize, beta: usize, out: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
}

#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    tracked: Vec<bool>,
    ops: Vec<Op>,
    grads: Option<Vec<Vec<f64>>>,
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn push(&mut self, value: Tensor, tracked: bool) -> Var {
        self.vals.push(value);
        self.tracked.push(tracked);
        Var(self.vals.len() - 1)
    }

    /// Lifts a tensor as a non-differentiated input.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), false)
    }

    /// Lifts a tensor as a parameter; `backward` fills its gradient buffer.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    /// Gradient of the last `backward` target with respect to `v`. `None`
    /// until `backward` has run, and for nodes outside the tracked closure.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if !self.tracked[v.0] {
            return None;
        }
        self.grads.as_ref().map(|g| g[v.0].as_slice())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.value(v).shape().to_vec(), g.to_vec()).unwrap())
    }

    fn flows(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.tracked[i])
    }

    /// Matrix product of two rank-2 tensors, `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(format!(
                "matmul of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let av = ta.data()[i * k + kk];
                if av != 0.0 {
                    let brow = &tb.data()[kk * n..(kk + 1) * n];
                    for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let tracked = self.flows(&[a.0, b.0]);
        let v = self.push(Tensor::new(vec![m, n], out)?, tracked);
        self.ops.push(Op::Matmul { a: a.0, b: b.0, out: v.0 });
        Ok(v)
    }

    /// `x [batch,n]` against a weight matrix `w [m,n]` (one row per output
    /// neuron), producing `[batch,m]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (&self.vals[x.0], &self.vals[w.0]);
        if tx.rank() != 2 || tw.rank() != 2 || tx.shape()[1] != tw.shape()[1] {
            return Err(Error::dim(format!(
                "linear of {:?} and weights {:?}",
                tx.shape(),
                tw.shape()
            )));
        }
        let (bsz, n, m) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        let mut out = vec![0.0; bsz * m];
        for i in 0..bsz {
            let xrow = tx.row(i);
            for j in 0..m {
                let wrow = &tw.data()[j * n..(j + 1) * n];
                out[i * m + j] = xrow.iter().zip(wrow).map(|(a, b)| a * b).sum();
            }
        }
        let tracked = self.flows(&[x.0, w.0]);
        let v = self.push(Tensor::new(vec![bsz, m], out)?, tracked);
        self.ops.push(Op::Linear { x: x.0, w: w.0, out: v.0 });
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "mul")
    }

    fn elementwise_pair(&mut self, a: Var, b: Var, which: &'static str) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "{which} of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = match which {
            "add" => ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect(),
            _ => ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
        };
        let shape = ta.shape().to_vec();
        let tracked = self.flows(&[a.0, b.0]);
        let v = self.push(Tensor::new(shape, data)?, tracked);
        self.ops.push(match which {
            "add" => Op::Add { a: a.0, b: b.0, out: v.0 },
            _ => Op::Mul { a: a.0, b: b.0, out: v.0 },
        });
        Ok(v)
    }

    /// Adds a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_bias(&mut self, y: Var, b: Var) -> Result<Var> {
        let (ty, tb) = (&self.vals[y.0], &self.vals[b.0]);
        if ty.rank() != 2 || tb.rank() != 1 || ty.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(format!(
                "add_bias of {:?} and {:?}",
                ty.shape(),
                tb.shape()
            )));
        }
        let (bsz, m) = (ty.shape()[0], ty.shape()[1]);
        let mut data = ty.data().to_vec();
        for i in 0..bsz {
            axpy(&mut data[i * m..(i + 1) * m], tb.data());
        }
        let tracked = self.flows(&[y.0, b.0]);
        let v = self.push(Tensor::new(vec![bsz, m], data)?, tracked);
        self.ops.push(Op::AddBias { y: y.0, b: b.0, out: v.0 });
        Ok(v)
    }

    pub fn activate(&mut self, x: Var, kind: ActKind) -> Var {
        let tx = &self.vals[x.0];
        let data: Vec<f64> = tx.data().iter().map(|&v| kind.apply(v)).collect();
        let shape = tx.shape().to_vec();
        let tracked = self.tracked[x.0];
        let v = self.push(Tensor::new(shape, data).unwrap(), tracked);
        self.ops.push(Op::Activate { x: x.0, out: v.0, kind });
        v
    }

    /// Concatenates along the trailing axis. Rank-2 inputs must share a row
    /// count; rank-1 inputs concatenate end to end.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.rank() != tb.rank() {
            return Err(Error::dim("concat_last of mixed ranks".to_string()));
        }
        let out = if ta.rank() == 2 {
            if ta.shape()[0] != tb.shape()[0] {
                return Err(Error::dim(format!(
                    "concat_last rows differ: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
            let (rows, k1, k2) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let mut data = Vec::with_capacity(rows * (k1 + k2));
            for i in 0..rows {
                data.extend_from_slice(ta.row(i));
                data.extend_from_slice(tb.row(i));
            }
            Tensor::new(vec![rows, k1 + k2], data)?
        } else {
            let mut data = ta.data().to_vec();
            data.extend_from_slice(tb.data());
            Tensor::vector(data)
        };
        let tracked = self.flows(&[a.0, b.0]);
        let v = self.push(out, tracked);
        self.ops.push(Op::ConcatLast { a: a.0, b: b.0, out: v.0 });
        Ok(v)
    }

    /// Sum or mean over the trailing axis: `[batch,k] -> [batch,1]`,
    /// `[k] -> [1]`.
    pub fn reduce(&mut self, x: Var, mode: Aggregation) -> Var {
        let tx = &self.vals[x.0];
        let out = if tx.rank() == 2 {
            let rows = tx.shape()[0];
            let data: Vec<f64> = (0..rows).map(|i| mode.apply(tx.row(i))).collect();
            Tensor::new(vec![rows, 1], data).unwrap()
        } else {
            Tensor::scalar(mode.apply(tx.data()))
        };
        let tracked = self.tracked[x.0];
        let v = self.push(out, tracked);
        self.ops.push(Op::Reduce { x: x.0, out: v.0, mode });
        v
    }

    /// Contiguous slice of a rank-1 tensor, `v[start..end]`.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = &self.vals[x.0];
        if tx.rank() != 1 || start >= end || end > tx.len() {
            return Err(Error::dim(format!(
                "slice {start}..{end} of rank-{} length {}",
                tx.rank(),
                tx.len()
            )));
        }
        let data = tx.data()[start..end].to_vec();
        let tracked = self.tracked[x.0];
        let v = self.push(Tensor::vector(data), tracked);
        self.ops.push(Op::Slice { v: x.0, out: v.0, start });
        Ok(v)
    }

    /// `mul * x + add`, elementwise with scalar constants.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let tx = &self.vals[x.0];
        let data: Vec<f64> = tx.data().iter().map(|&v| mul * v + add).collect();
        let shape = tx.shape().to_vec();
        let tracked = self.tracked[x.0];
        let v = self.push(Tensor::new(shape, data).unwrap(), tracked);
        self.ops.push(Op::Affine { x: x.0, out: v.0, mul });
        v
    }

    /// Elementwise maximum. On exact ties the value and the gradient both
    /// come from `b`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "maximum of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| if x > y { x } else { y })
            .collect();
        let shape = ta.shape().to_vec();
        let tracked = self.flows(&[a.0, b.0]);
        let v = self.push(Tensor::new(shape, data)?, tracked);
        self.ops.push(Op::Maximum { a: a.0, b: b.0, out: v.0 });
        Ok(v)
    }

    /// Sum of every element, producing a `[1]` scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.vals[x.0].data().iter().sum();
        let tracked = self.tracked[x.0];
        let v = self.push(Tensor::scalar(s), tracked);
        self.ops.push(Op::SumAll { x: x.0, out: v.0 });
        v
    }

    /// Mean cross-entropy of row-wise softmax against integer labels,
    /// stabilized by max subtraction. Labels must index into the class axis.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = &self.vals[logits.0];
        if tl.rank() != 2 {
            return Err(Error::dim("softmax_cross_entropy wants rank-2 logits".to_string()));
        }
        let (bsz, classes) = (tl.shape()[0], tl.shape()[1]);
        if labels.len() != bsz {
            return Err(Error::dim(format!(
                "{} labels for batch of {bsz}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = vec![0.0; bsz * classes];
        let mut loss = 0.0;
        for i in 0..bsz {
            let row = tl.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[i * classes..(i + 1) * classes].iter_mut().zip(row) {
                *p = (v - mx).exp();
                z += *p;
            }
            for p in &mut probs[i * classes..(i + 1) * classes] {
                *p /= z;
            }
            loss += z.ln() + mx - row[labels[i]];
        }
        loss /= bsz as f64;
        let tracked = self.tracked[logits.0];
        let v = self.push(Tensor::scalar(loss), tracked);
        self.ops.push(Op::SoftmaxCrossEntropy {
            logits: logits.0,
            out: v.0,
            probs,
            labels: labels.to_vec(),
        });
        Ok(v)
    }

    /// Batch normalization over the batch axis using this batch's own
    /// statistics (biased variance). Needs at least two rows. Returns the
    /// batch statistics so the caller can maintain running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let tx = &self.vals[x.0];
        if tx.rank() != 2 {
            return Err(Error::dim("batchnorm wants rank-2 input".to_string()));
        }
        let (bsz, m) = (tx.shape()[0], tx.shape()[1]);
        if bsz < 2 {
            return Err(Error::usage(
                "batchnorm training needs a batch of at least 2".to_string(),
            ));
        }
        self.check_bn_params(gamma, beta, m)?;
        let mut mean = vec![0.0; m];
        for i in 0..bsz {
            axpy(&mut mean, tx.row(i));
        }
        for v in &mut mean {
            *v /= bsz as f64;
        }
        let mut var = vec![0.0; m];
        for i in 0..bsz {
            for (j, &v) in tx.row(i).iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= bsz as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&s| 1.0 / (s + eps).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let v = self.bn_node(x, gamma, beta, &mean, &inv_std, true)?;
        Ok((v, stats))
    }

    /// Batchnorm with fixed (running) statistics; the statistics are treated
    /// as constants by backward.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let tx = &self.vals[x.0];
        if tx.rank() != 2 {
            return Err(Error::dim("batchnorm wants rank-2 input".to_string()));
        }
        let m = tx.shape()[1];
        self.check_bn_params(gamma, beta, m)?;
        if mean.len() != m || var.len() != m {
            return Err(Error::dim("batchnorm running stats length mismatch".to_string()));
        }
        let inv_std: Vec<f64> = var.iter().map(|&s| 1.0 / (s + eps).sqrt()).collect();
        self.bn_node(x, gamma, beta, mean, &inv_std, false)
    }

    fn check_bn_params(&self, gamma: Var, beta: Var, m: usize) -> Result<()> {
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let t = &self.vals[p.0];
            if t.rank() != 1 || t.len() != m {
                return Err(Error::dim(format!(
                    "batchnorm {name} has shape {:?}, want [{m}]",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    fn bn_node(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        training: bool,
    ) -> Result<Var> {
        let tx = &self.vals[x.0];
        let (bsz, m) = (tx.shape()[0], tx.shape()[1]);
        let g = self.vals[gamma.0].data().to_vec();
        let bt = self.vals[beta.0].data().to_vec();
        let mut xhat = vec![0.0; bsz * m];
        let mut out = vec![0.0; bsz * m];
        for i in 0..bsz {
            for j in 0..m {
                let h = (self.vals[x.0].data()[i * m + j] - mean[j]) * inv_std[j];
                xhat[i * m + j] = h;
                out[i * m + j] = g[j] * h + bt[j];
            }
        }
        let tracked = self.flows(&[x.0, gamma.0, beta.0]);
        let v = self.push(Tensor::new(vec![bsz, m], out)?, tracked);
        let inv_std = inv_std.to_vec();
        self.ops.push(if training {
            Op::BatchNormTrain { x: x.0, gamma: gamma.0, beta: beta.0, out: v.0, xhat, inv_std }
        } else {
            Op::BatchNormEval { x: x.0, gamma: gamma.0, beta: beta.0, out: v.0, xhat, inv_std }
        });
        Ok(v)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate into buffers
    /// reachable afterwards through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.vals[loss.0].len() != 1 {
            return Err(Error::usage(format!(
                "backward target must be scalar, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        let mut grads: Vec<Vec<f64>> = self.vals.iter().map(|t| vec![0.0; t.len()]).collect();
        grads[loss.0][0] = 1.0;

        for op in self.ops.iter().rev() {
            match op {
                Op::Matmul { a, b, out } => {
                    let g = std::mem::take(&mut grads[*out]);
                    let (ta, tb) = (&self.vals[*a], &self.vals[*b]);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * tb.data()[kk * n + j];
                            }
                            grads[*a][i * k + kk] += s;
                        }
                    }
                    for kk in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += ta.data()[i * k + kk] * g[i * n + j];
                            }
                            grads[*b][kk * n + j] += s;
                        }
                    }
                    grads[*out] = g;
                }
                Op::Linear { x, w, out } => {
                    let g = std::mem::take(&mut grads[*out]);
                    let (tx, tw) = (&self.vals[*x], &self.vals[*w]);
                    let (bsz, n, m) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
                    for i in 0..bsz {
                        for k in 0..n {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g[i * m + j] * tw.data()[j * n + k];
                            }
                            grads[*x][i * n + k] += s;
                        }
                    }
                    for j in 0..m {
                        for k in 0..n {
                            let mut s = 0.0;
                            for i in 0..bsz {
                                s += g[i * m + j] * tx.data()[i * n + k];
                            }
                            grads[*w][j * n + k] += s;
                        }
                    }
                    grads[*out] = g;
                }
                Op::Add { a, b, out } => {
                    let g = std::mem::take(&mut grads[*out]);
                    axpy(&mut grads[*a], &g);
                    axpy(&mut grads[*b], &g);
                    grads[*out] = g;
                }
                Op::Mul { a, b, out } => {
                    let g = std::mem::take(&mut grads[*out]);
                    for (i, &gv) in g.iter().enumerate() {
                        grads[*a][i] += gv * self.vals[*b].data()[i];
                        grads[*b][i] += gv * self.vals[*a].data()[i];
                    }
                    grads[*out] = g;
                }
                Op::AddBias { y, b, out } => {
                    let g = std::mem::take(&mut grads[*out]);
                    axpy(&mut grads[*y], &g);
                    let m = self.vals[*b].len();
                    for (i, &gv) in g.iter().enumerate() {
                        grads[*b][i % m] += gv;
                    }
                    grads[*out] = g;
                }
                Op::Activate { x, out, kind } => {
                    let g = std::mem::take(&mut grads[*out]);
                    for (i, &gv) in g.iter().enumerate() {
                        grads[*x][i] += gv * kind.deriv(self.vals[*x].data()[i]);
                    }
                    grads[*out] = g;
                }
                Op::ConcatLast { a, b, out } => {
                    let g = std::mem::take(&mut grads[*out]);
                    let (ta, tb) = (&self.vals[*a], &self.vals[*b]);
                    if ta.rank() == 2 {
                        let (rows, k1, k2) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                        let k = k1 + k2;
                        for i in 0..rows {
                            axpy(
                                &mut grads[*a][i * k1..(i + 1) * k1],
                                &g[i * k..i * k + k1],
                            );
                            axpy(
                                &mut grads[*b][i * k2..(i + 1) * k2],
                                &g[i * k + k1..(i + 1) * k],
                            );
                        }
                    } else {
                        let k1 = ta.len();
                        axpy(&mut grads[*a], &g[..k1]);
                        axpy(&mut grads[*b], &g[k1..]);
                    }
                    grads[*out] = g;
                }
                Op::Reduce { x, out, mode } => {
                    let g = std::mem::take(&mut grads[*out]);
                    let tx = &self.vals[*x];
                    let k = tx.cols();
                    let w = match mode {
                        Aggregation::Sum => 1.0,
                        Aggregation::Mean => 1.0 / k as f64,
                    };
                    for (i, gx) in grads[*x].iter_mut().enumerate() {
                        *gx += g[i / k] * w;
                    }
                    grads[*out] = g;
                }
                Op::Slice { v, out, start } => {
                    let g = std::mem::take(&mut grads[*out]);
                    axpy(&mut grads[*v][*start..*start + g.len()], &g);
                    grads[*out] = g;
                }
                Op::Affine { x, out, mul } => {
                    let g = std::mem::take(&mut grads[*out]);
                    for (gx, &gv) in grads[*x].iter_mut().zip(&g) {
                        *gx += mul * gv;
                    }
                    grads[*out] = g;
                }
                Op::Maximum { a, b, out } => {
                    let g = std::mem::take(&mut grads[*out]);
                    for (i, &gv) in g.iter().enumerate() {
                        if self.vals[*a].data()[i] > self.vals[*b].data()[i] {
                            grads[*a][i] += gv;
                        } else {
                            grads[*b][i] += gv;
                        }
                    }
                    grads[*out] = g;
                }
                Op::SumAll { x, out } => {
                    let g = grads[*out][0];
                    for gx in grads[*x].iter_mut() {
                        *gx += g;
                    }
                }
                Op::SoftmaxCrossEntropy { logits, out, probs, labels } => {
                    let g = grads[*out][0];
                    let bsz = labels.len();
                    let classes = probs.len() / bsz;
                    let scale = g / bsz as f64;
                    for i in 0..bsz {
                        for j in 0..classes {
                            let ind = if labels[i] == j { 1.0 } else { 0.0 };
                            grads[*logits][i * classes + j] +=
                                scale * (probs[i * classes + j] - ind);
                        }
                    }
                }
                Op::BatchNormTrain { x, gamma, beta, out, xhat, inv_std } => {
                    let g = std::mem::take(&mut grads[*out]);
                    let m = inv_std.len();
                    let bsz = g.len() / m;
                    let gam = self.vals[*gamma].data();
                    let mut t1 = vec![0.0; m];
                    let mut t2 = vec![0.0; m];
                    for i in 0..bsz {
                        for j in 0..m {
                            let gv = g[i * m + j];
                            grads[*beta][j] += gv;
                            grads[*gamma][j] += gv * xhat[i * m + j];
                            let dxh = gv * gam[j];
                            t1[j] += dxh;
                            t2[j] += dxh * xhat[i * m + j];
                        }
                    }
                    let nf = bsz as f64;
                    for i in 0..bsz {
                        for j in 0..m {
                            let dxh = g[i * m + j] * gam[j];
                            grads[*x][i * m + j] +=
                                inv_std[j] / nf * (nf * dxh - t1[j] - xhat[i * m + j] * t2[j]);
                        }
                    }
                    grads[*out] = g;
                }
                Op::BatchNormEval { x, gamma, beta, out, xhat, inv_std } => {
                    let g = std::mem::take(&mut grads[*out]);
                    let m = inv_std.len();
                    let bsz = g.len() / m;
                    let gam = self.vals[*gamma].data();
                    for i in 0..bsz {
                        for j in 0..m {
                            let gv = g[i * m + j];
                            grads[*beta][j] += gv;
                            grads[*gamma][j] += gv * xhat[i * m + j];
                            grads[*x][i * m + j] += gv * gam[j] * inv_std[j];
                        }
                    }
                    grads[*out] = g;
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::matrix(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_value() {
        let mut tape = Tape::new();
        let a = tape.input(&t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.input(&t2(&[&[1.0], &[1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        assert_eq!(tape.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dim_error() {
        let mut tape = Tape::new();
        let a = tape.input(&t2(&[&[1.0, 2.0]]));
        let b = tape.input(&t2(&[&[1.0, 2.0]]));
        assert!(matches!(tape.matmul(a, b), Err(crate::Error::Dim(_))));
    }

    #[test]
    fn matmul_backward_rules() {
        // loss = sum(a @ b), a = [[1,2],[3,4]], b = [[5],[6]].
        // d loss / d a = ones @ b' = [[5,6],[5,6]]; d loss / d b = a' @ ones = [[4],[6]].
        let mut tape = Tape::new();
        let a = tape.param(&t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.param(&t2(&[&[5.0], &[6.0]]));
        let c = tape.matmul(a, b).unwrap();
        let l = tape.sum_all(c);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn linear_matches_matmul_against_transpose() {
        let mut tape = Tape::new();
        let x = tape.input(&t2(&[&[1.0, 2.0, 3.0]]));
        let w = tape.input(&t2(&[&[1.0, 0.0, -1.0], &[0.5, 0.5, 0.5]]));
        let y = tape.linear(x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[-2.0, 3.0]);
    }

    #[test]
    fn add_bias_value_and_backward() {
        let mut tape = Tape::new();
        let y = tape.input(&t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.param(&Tensor::vector(vec![10.0, 20.0]));
        let z = tape.add_bias(y, b).unwrap();
        assert_eq!(tape.value(z).data(), &[11.0, 22.0, 13.0, 24.0]);
        let l = tape.sum_all(z);
        tape.backward(l).unwrap();
        // Bias gradient sums over the batch axis.
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn relu_kills_gradient_on_dead_units() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.activate(x, ActKind::Relu);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        // Subgradient at exactly 0 is 0, so only the live unit passes.
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_then_backward_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(&t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.param(&t2(&[&[9.0], &[8.0]]));
        let c = tape.concat_last(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        // Weight the concatenated entries so each slot gets a unique gradient.
        let w = tape.input(&t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let p = tape.mul(c, w).unwrap();
        let l = tape.sum_all(p);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(tape.grad(b).unwrap(), &[3.0, 6.0]);
    }

    #[test]
    fn reduce_sum_and_mean() {
        let mut tape = Tape::new();
        let x = tape.param(&t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let s = tape.reduce(x, Aggregation::Sum);
        assert_eq!(tape.value(s).data(), &[6.0, 15.0]);
        assert_eq!(tape.value(s).shape(), &[2, 1]);
        let m = tape.reduce(x, Aggregation::Mean);
        assert_eq!(tape.value(m).data(), &[2.0, 5.0]);
        let l = tape.sum_all(m);
        tape.backward(l).unwrap();
        // Mean broadcasts 1/k back to every element.
        for &g in tape.grad(x).unwrap() {
            assert!((g - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn reduce_on_vectors() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::vector(vec![1.0, 3.0]));
        let s = tape.reduce(x, Aggregation::Mean);
        assert_eq!(tape.value(s).data(), &[2.0]);
        assert_eq!(tape.value(s).shape(), &[1]);
    }

    #[test]
    fn slice_backward_scatters() {
        let mut tape = Tape::new();
        let v = tape.param(&Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let s = tape.slice(v, 1, 3).unwrap();
        assert_eq!(tape.value(s).data(), &[2.0, 3.0]);
        let l = tape.sum_all(s);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn maximum_ties_route_to_second_argument() {
        let mut tape = Tape::new();
        let a = tape.param(&Tensor::vector(vec![1.0, 5.0, 2.0]));
        let b = tape.param(&Tensor::vector(vec![1.0, 3.0, 4.0]));
        let m = tape.maximum(a, b).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 5.0, 4.0]);
        let l = tape.sum_all(m);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 1.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        // Two equal logits give softmax (1/2, 1/2) and loss ln 2.
        let mut tape = Tape::new();
        let x = tape.input(&t2(&[&[0.0, 0.0]]));
        let l = tape.softmax_cross_entropy(x, &[0]).unwrap();
        assert!((tape.value(l).data()[0] - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_known_value() {
        // logits (1,2,3), label 2: loss = ln(1 + e^-1 + e^-2) = 0.40760596...
        let mut tape = Tape::new();
        let x = tape.input(&t2(&[&[1.0, 2.0, 3.0]]));
        let l = tape.softmax_cross_entropy(x, &[2]).unwrap();
        assert!((tape.value(l).data()[0] - 0.407605964444).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_is_shift_invariant() {
        let mut tape = Tape::new();
        let a = tape.input(&t2(&[&[1.0, 2.0, 3.0]]));
        let b = tape.input(&t2(&[&[1001.0, 1002.0, 1003.0]]));
        let la = tape.softmax_cross_entropy(a, &[2]).unwrap();
        let lb = tape.softmax_cross_entropy(b, &[2]).unwrap();
        let (va, vb) = (tape.value(la).data()[0], tape.value(lb).data()[0]);
        assert!((va - vb).abs() < 1e-12);
        assert!(va.is_finite());
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::new();
        let x = tape.input(&t2(&[&[0.0, 0.0]]));
        assert!(matches!(
            tape.softmax_cross_entropy(x, &[2]),
            Err(crate::Error::Input(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let mut tape = Tape::new();
        let x = tape.param(&t2(&[&[0.0, 0.0]]));
        let l = tape.softmax_cross_entropy(x, &[1]).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-12);
        assert!((g[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        let y = tape.affine(x, 2.0, 0.0);
        assert!(matches!(tape.backward(y), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn grad_buffers_match_value_shapes() {
        let mut tape = Tape::new();
        let x = tape.param(&t2(&[&[1.0, -2.0], &[0.5, 0.0]]));
        let y = tape.activate(x, ActKind::Relu);
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().len(), tape.value(x).len());
        let gt = tape.grad_tensor(x).unwrap();
        assert_eq!(gt.shape(), tape.value(x).shape());
    }

    #[test]
    fn untracked_inputs_expose_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::vector(vec![1.0]));
        let y = tape.affine(x, 1.0, 0.0);
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn gradient_accumulates_across_reuse() {
        // loss = sum(x + x) so each element's gradient is 2.
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::vector(vec![1.0, 2.0]));
        let y = tape.add(x, x).unwrap();
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut tape = Tape::new();
        let x = tape.input(&t2(&[&[1.0, 10.0], &[3.0, 30.0], &[5.0, 50.0]]));
        let g = tape.input(&Tensor::vector(vec![1.0, 1.0]));
        let b = tape.input(&Tensor::vector(vec![0.0, 0.0]));
        let (y, stats) = tape.batchnorm_train(x, g, b, 1e-5).unwrap();
        assert_eq!(stats.mean, vec![3.0, 30.0]);
        let out = tape.value(y);
        for j in 0..2 {
            let col: Vec<f64> = (0..3).map(|i| out.at(i, j)).collect();
            let mean: f64 = col.iter().sum::<f64>() / 3.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_gamma_zero_collapses_to_beta() {
        let mut tape = Tape::new();
        let x = tape.input(&t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let g = tape.input(&Tensor::vector(vec![0.0, 0.0]));
        let b = tape.input(&Tensor::vector(vec![7.0, -1.0]));
        let (y, _) = tape.batchnorm_train(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0, -1.0, 7.0, -1.0]);
    }

    #[test]
    fn batchnorm_train_rejects_batch_of_one() {
        let mut tape = Tape::new();
        let x = tape.input(&t2(&[&[1.0, 2.0]]));
        let g = tape.input(&Tensor::vector(vec![1.0, 1.0]));
        let b = tape.input(&Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(
            tape.batchnorm_train(x, g, b, 1e-5),
            Err(crate::Error::Usage(_))
        ));
    }

    #[test]
    fn batchnorm_constant_column_maps_to_beta() {
        // A zero-variance feature normalizes to 0 (up to eps), landing on beta.
        let mut tape = Tape::new();
        let x = tape.input(&t2(&[&[5.0, 1.0], &[5.0, 3.0]]));
        let g = tape.input(&Tensor::vector(vec![2.0, 2.0]));
        let b = tape.input(&Tensor::vector(vec![0.5, 0.5]));
        let (y, _) = tape.batchnorm_train(x, g, b, 1e-5).unwrap();
        let out = tape.value(y);
        assert!((out.at(0, 0) - 0.5).abs() < 1e-9);
        assert!((out.at(1, 0) - 0.5).abs() < 1e-9);
    }
}
