//! Dense layers with a built-in activity guarantee.
//!
//! A guaranteed-active layer with `m` outputs trains only `m - 1` weight
//! rows. The last row is tied to the others (negative sum or negative mean),
//! and the last bias is clamped so that a fixed simplex vector `lambda`
//! satisfies `lambda' W_eff = 0` and `lambda' b_eff > cutoff`. The convex
//! combination `lambda' z` of the pre-activations then exceeds the cutoff for
//! every input, so some neuron is always active: the layer cannot die and
//! gradient always flows through the aggregated path back into the trainable
//! rows.
//!
//! The residual block reuses the construction around a two-layer bottleneck,
//! but its aggregated component folds in the skip input, which shifts
//! `lambda' z` by a data-dependent amount. Its guarantee is therefore
//! conditional; [`FarkasResidualBlock::certified_margins`] reports the exact
//! per-input bound and the verifier treats blocks separately.

use crate::lp::LpProblem;
use crate::tensor::{ActKind, Aggregation, Tape, Tensor, Var};
use crate::{Error, Result};

/// Default strictness margin added on top of the bias clamp threshold.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Uniform simplex weights `(1/m, ..., 1/m)`.
pub fn make_lambda(m: usize) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::spec(format!(
            "guaranteed layer needs at least 2 outputs, got {m}"
        )));
    }
    Ok(vec![1.0 / m as f64; m])
}

/// The simplex vector annihilating the effective weights for a mode. Sum
/// mode: uniform. Mean mode: the tied row weighs `m - 1` trainable rows at
/// `1/(m-1)` each, so the null vector is `(1, ..., 1, m-1)` normalized.
pub fn certificate_lambda(m: usize, agg: Aggregation) -> Result<Vec<f64>> {
    match agg {
        Aggregation::Sum => make_lambda(m),
        Aggregation::Mean => {
            if m < 2 {
                return Err(Error::spec(format!(
                    "guaranteed layer needs at least 2 outputs, got {m}"
                )));
            }
            let denom = 2.0 * (m - 1) as f64;
            let mut lam = vec![1.0 / denom; m];
            lam[m - 1] = 0.5;
            Ok(lam)
        }
    }
}

/// The tied last row: column-wise negative sum or negative mean of the
/// trainable rows.
pub fn aggregate_rows(w_train: &Tensor, agg: Aggregation) -> Result<Vec<f64>> {
    if w_train.rank() != 2 || w_train.shape()[0] == 0 {
        return Err(Error::dim(
            "trainable rows must form a nonempty rank-2 tensor".to_string(),
        ));
    }
    let (rows, n) = (w_train.shape()[0], w_train.shape()[1]);
    let mut out = vec![0.0; n];
    for i in 0..rows {
        for (o, &w) in out.iter_mut().zip(w_train.row(i)) {
            *o += w;
        }
    }
    let scale = match agg {
        Aggregation::Sum => -1.0,
        Aggregation::Mean => -1.0 / rows as f64,
    };
    for o in &mut out {
        *o *= scale;
    }
    Ok(out)
}

/// Last-bias clamp: `max(cutoff - agg(head) + epsilon, raw_last)`. Strictly
/// exceeding `cutoff - agg(head)` is what makes `lambda' b_eff > cutoff`
/// (sum mode; the mean-mode certificate gives the analogous bound), hence
/// the strict activity guarantee.
pub fn aggregate_bias(bias: &[f64], agg: Aggregation, cutoff: f64, epsilon: f64) -> Result<f64> {
    if bias.len() < 2 {
        return Err(Error::dim("bias needs at least 2 entries".to_string()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::spec(format!("epsilon must be positive, got {epsilon}")));
    }
    let head = &bias[..bias.len() - 1];
    let threshold = cutoff - agg.apply(head) + epsilon;
    Ok(threshold.max(bias[bias.len() - 1]))
}

/// Dense layer with `m` outputs, `m - 1` trainable rows, and tied last row.
#[derive(Debug, Clone)]
pub struct FarkasDenseLayer {
    w_train: Tensor,
    bias: Tensor,
    lambda: Vec<f64>,
    agg: Aggregation,
    activation: ActKind,
    cutoff: f64,
    epsilon: f64,
}

impl FarkasDenseLayer {
    /// Zero-parameter layer mapping `n` inputs to `m >= 2` outputs.
    pub fn new(n: usize, m: usize, agg: Aggregation) -> Result<Self> {
        Self::with_options(n, m, agg, ActKind::Relu, 0.0, DEFAULT_EPSILON)
    }

    pub fn with_options(
        n: usize,
        m: usize,
        agg: Aggregation,
        activation: ActKind,
        cutoff: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::spec("layer input dimension must be positive".to_string()));
        }
        Self::from_params(
            Tensor::zeros(vec![m.saturating_sub(1).max(1), n]),
            Tensor::zeros(vec![m.max(1)]),
            agg,
            activation,
            cutoff,
            epsilon,
        )
        .and_then(|l| {
            if l.m() != m {
                Err(Error::spec(format!(
                    "guaranteed layer needs at least 2 outputs, got {m}"
                )))
            } else {
                Ok(l)
            }
        })
    }

    /// Builds from explicit parameters. `w_train` is `[m-1, n]`, `bias` is
    /// `[m]` with a raw (pre-clamp) last entry.
    pub fn from_params(
        w_train: Tensor,
        bias: Tensor,
        agg: Aggregation,
        activation: ActKind,
        cutoff: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if w_train.rank() != 2 || w_train.shape()[0] == 0 || w_train.shape()[1] == 0 {
            return Err(Error::dim(format!(
                "trainable rows must be [m-1 >= 1, n >= 1], got {:?}",
                w_train.shape()
            )));
        }
        let m = w_train.shape()[0] + 1;
        if bias.rank() != 1 || bias.len() != m {
            return Err(Error::dim(format!(
                "bias must have {m} entries, got shape {:?}",
                bias.shape()
            )));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::spec(format!("epsilon must be positive, got {epsilon}")));
        }
        if !cutoff.is_finite() {
            return Err(Error::spec("cutoff must be finite".to_string()));
        }
        let lambda = certificate_lambda(m, agg)?;
        Ok(FarkasDenseLayer {
            w_train,
            bias,
            lambda,
            agg,
            activation,
            cutoff,
            epsilon,
        })
    }

    /// Restores a layer with an explicitly stored certificate (checkpoint
    /// loading); the vector length must match.
    pub fn from_parts(
        w_train: Tensor,
        bias: Tensor,
        lambda: Vec<f64>,
        agg: Aggregation,
        activation: ActKind,
        cutoff: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let mut layer = Self::from_params(w_train, bias, agg, activation, cutoff, epsilon)?;
        if lambda.len() != layer.m() {
            return Err(Error::dim(format!(
                "certificate length {} for {} outputs",
                lambda.len(),
                layer.m()
            )));
        }
        layer.lambda = lambda;
        Ok(layer)
    }

    pub fn n(&self) -> usize {
        self.w_train.shape()[1]
    }

    /// Output count, including the tied row.
    pub fn m(&self) -> usize {
        self.w_train.shape()[0] + 1
    }

    pub fn w_train(&self) -> &Tensor {
        &self.w_train
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn agg(&self) -> Aggregation {
        self.agg
    }

    pub fn activation(&self) -> ActKind {
        self.activation
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w_train, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_train, &mut self.bias]
    }

    /// Full `[m, n]` weight matrix: trainable rows plus the tied last row.
    pub fn effective_weights(&self) -> Tensor {
        let (rows, n) = (self.w_train.shape()[0], self.n());
        let tied = aggregate_rows(&self.w_train, self.agg).expect("validated at construction");
        let mut data = self.w_train.data().to_vec();
        data.extend_from_slice(&tied);
        Tensor::new(vec![rows + 1, n], data).expect("shape by construction")
    }

    /// Bias vector with the clamped last entry.
    pub fn effective_bias(&self) -> Vec<f64> {
        let mut b = self.bias.data().to_vec();
        let clamped = aggregate_bias(self.bias.data(), self.agg, self.cutoff, self.epsilon)
            .expect("validated at construction");
        *b.last_mut().unwrap() = clamped;
        b
    }

    /// The input-independent lower bound `lambda' b_eff` on the convex
    /// combination of pre-activations; strictly above the cutoff by
    /// construction.
    pub fn guaranteed_margin(&self) -> f64 {
        self.lambda
            .iter()
            .zip(self.effective_bias())
            .map(|(l, b)| l * b)
            .sum()
    }

    /// The layer's margin LP over its effective weights and bias.
    pub fn as_lp(&self) -> Result<LpProblem> {
        LpProblem::new(self.effective_weights(), self.effective_bias())
    }

    /// Records the layer on a tape: trainable-row product, aggregated output
    /// column, bias clamp, activation. Pushes the lifted parameter handles
    /// (`w_train`, then `bias`) onto `params` in the same order as
    /// [`FarkasDenseLayer::params`]. Gradient flows through the aggregation
    /// and, on clamp ties, into the raw last bias.
    pub fn forward(&self, tape: &mut Tape, x: Var, params: &mut Vec<Var>) -> Result<Var> {
        let w = tape.param(&self.w_train);
        let b = tape.param(&self.bias);
        params.push(w);
        params.push(b);
        let m = self.m();

        let y = tape.linear(x, w)?;
        let agg_y = tape.reduce(y, self.agg);
        let ybar = tape.affine(agg_y, -1.0, 0.0);
        let z_pre = tape.concat_last(y, ybar)?;

        let b_head = tape.slice(b, 0, m - 1)?;
        let b_last = tape.slice(b, m - 1, m)?;
        let agg_b = tape.reduce(b_head, self.agg);
        let clamp = tape.affine(agg_b, -1.0, self.cutoff + self.epsilon);
        let b_bar = tape.maximum(clamp, b_last)?;
        let b_eff = tape.concat_last(b_head, b_bar)?;

        let z = tape.add_bias(z_pre, b_eff)?;
        Ok(tape.activate(z, self.activation))
    }

    /// Pre-activations via the tied-weight route (`x W_eff' + b_eff`),
    /// algebraically equal to the output-aggregation route used on tape.
    pub fn pre_activations(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.n() {
            return Err(Error::dim(format!(
                "layer input must be [batch, {}], got {:?}",
                self.n(),
                x.shape()
            )));
        }
        let w = self.effective_weights();
        let b = self.effective_bias();
        let (bsz, m) = (x.shape()[0], self.m());
        let mut out = vec![0.0; bsz * m];
        for i in 0..bsz {
            for j in 0..m {
                let dot: f64 = x.row(i).iter().zip(w.row(j)).map(|(a, c)| a * c).sum();
                out[i * m + j] = dot + b[j];
            }
        }
        Tensor::new(vec![bsz, m], out)
    }

    /// Tape-free forward pass for evaluation.
    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = self.pre_activations(x)?;
        for v in z.data_mut() {
            *v = self.activation.apply(*v);
        }
        Ok(z)
    }
}

/// Residual block: an inner guaranteed layer `d -> h`, a plain projection
/// `h -> d`, and an aggregated component folding in the skip input.
#[derive(Debug, Clone)]
pub struct FarkasResidualBlock {
    inner: FarkasDenseLayer,
    w2: Tensor,
    bias2: Tensor,
    lambda: Vec<f64>,
    agg: Aggregation,
    activation: ActKind,
    cutoff: f64,
    epsilon: f64,
}

impl FarkasResidualBlock {
    /// Block taking `d` inputs to `d + 1` outputs through a width-`h` inner
    /// layer (`h >= 2`).
    pub fn new(d: usize, h: usize, agg: Aggregation) -> Result<Self> {
        Self::with_options(d, h, agg, ActKind::Relu, 0.0, DEFAULT_EPSILON)
    }

    pub fn with_options(
        d: usize,
        h: usize,
        agg: Aggregation,
        activation: ActKind,
        cutoff: f64,
        epsilon: f64,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::spec("block input dimension must be positive".to_string()));
        }
        let inner = FarkasDenseLayer::with_options(d, h, agg, activation, cutoff, epsilon)?;
        Self::from_parts(
            inner,
            Tensor::zeros(vec![d, h]),
            Tensor::zeros(vec![d + 1]),
            None,
            agg,
            activation,
            cutoff,
            epsilon,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        inner: FarkasDenseLayer,
        w2: Tensor,
        bias2: Tensor,
        lambda: Option<Vec<f64>>,
        agg: Aggregation,
        activation: ActKind,
        cutoff: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let d = inner.n();
        let h = inner.m();
        if w2.rank() != 2 || w2.shape() != [d, h] {
            return Err(Error::dim(format!(
                "projection must be [{d}, {h}], got {:?}",
                w2.shape()
            )));
        }
        if bias2.rank() != 1 || bias2.len() != d + 1 {
            return Err(Error::dim(format!(
                "block bias must have {} entries, got {}",
                d + 1,
                bias2.len()
            )));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::spec(format!("epsilon must be positive, got {epsilon}")));
        }
        let m = d + 1;
        let lambda = match lambda {
            Some(l) => {
                if l.len() != m {
                    return Err(Error::dim(format!(
                        "certificate length {} for {m} outputs",
                        l.len()
                    )));
                }
                l
            }
            None => certificate_lambda(m, agg)?,
        };
        Ok(FarkasResidualBlock {
            inner,
            w2,
            bias2,
            lambda,
            agg,
            activation,
            cutoff,
            epsilon,
        })
    }

    pub fn d(&self) -> usize {
        self.inner.n()
    }

    pub fn h(&self) -> usize {
        self.inner.m()
    }

    /// Output count, `d + 1`.
    pub fn m(&self) -> usize {
        self.d() + 1
    }

    pub fn inner(&self) -> &FarkasDenseLayer {
        &self.inner
    }

    pub fn inner_mut(&mut self) -> &mut FarkasDenseLayer {
        &mut self.inner
    }

    pub fn w2(&self) -> &Tensor {
        &self.w2
    }

    pub fn w2_mut(&mut self) -> &mut Tensor {
        &mut self.w2
    }

    pub fn bias2(&self) -> &Tensor {
        &self.bias2
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn agg(&self) -> Aggregation {
        self.agg
    }

    pub fn activation(&self) -> ActKind {
        self.activation
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Parameter order: inner rows, inner bias, projection, block bias.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.inner.params();
        p.push(&self.w2);
        p.push(&self.bias2);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let FarkasResidualBlock { inner, w2, bias2, .. } = self;
        let mut p = inner.params_mut();
        p.push(w2);
        p.push(bias2);
        p
    }

    /// Block bias with the clamped last entry.
    pub fn effective_bias(&self) -> Vec<f64> {
        let mut b = self.bias2.data().to_vec();
        let clamped = aggregate_bias(self.bias2.data(), self.agg, self.cutoff, self.epsilon)
            .expect("validated at construction");
        *b.last_mut().unwrap() = clamped;
        b
    }

    /// The input-independent part of the certified bound, `lambda' b_eff`.
    /// Unlike the dense layer this alone does not guarantee activity: the
    /// aggregated component also carries `-agg(x)` from the skip input.
    pub fn static_margin(&self) -> f64 {
        self.lambda
            .iter()
            .zip(self.effective_bias())
            .map(|(l, b)| l * b)
            .sum()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, params: &mut Vec<Var>) -> Result<Var> {
        let u = self.inner.forward(tape, x, params)?;
        let w2 = tape.param(&self.w2);
        let b2 = tape.param(&self.bias2);
        params.push(w2);
        params.push(b2);
        let m = self.m();

        let y = tape.linear(u, w2)?;
        let xy = tape.add(x, y)?;
        let agg_xy = tape.reduce(xy, self.agg);
        let ybar = tape.affine(agg_xy, -1.0, 0.0);
        let z_pre = tape.concat_last(y, ybar)?;

        let b_head = tape.slice(b2, 0, m - 1)?;
        let b_last = tape.slice(b2, m - 1, m)?;
        let agg_b = tape.reduce(b_head, self.agg);
        let clamp = tape.affine(agg_b, -1.0, self.cutoff + self.epsilon);
        let b_bar = tape.maximum(clamp, b_last)?;
        let b_eff = tape.concat_last(b_head, b_bar)?;

        let z = tape.add_bias(z_pre, b_eff)?;
        Ok(tape.activate(z, self.activation))
    }

    /// Pre-activations without a tape.
    pub fn pre_activations(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.d() {
            return Err(Error::dim(format!(
                "block input must be [batch, {}], got {:?}",
                self.d(),
                x.shape()
            )));
        }
        let u = self.inner.forward_values(x)?;
        let (bsz, d, m) = (x.shape()[0], self.d(), self.m());
        let b_eff = self.effective_bias();
        let mut out = vec![0.0; bsz * m];
        for i in 0..bsz {
            let mut y = vec![0.0; d];
            for (j, yj) in y.iter_mut().enumerate() {
                *yj = u.row(i).iter().zip(self.w2.row(j)).map(|(a, c)| a * c).sum();
            }
            let xy: Vec<f64> = x.row(i).iter().zip(&y).map(|(a, c)| a + c).collect();
            for j in 0..d {
                out[i * m + j] = y[j] + b_eff[j];
            }
            out[i * m + d] = -self.agg.apply(&xy) + b_eff[d];
        }
        Tensor::new(vec![bsz, m], out)
    }

    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = self.pre_activations(x)?;
        for v in z.data_mut() {
            *v = self.activation.apply(*v);
        }
        Ok(z)
    }

    /// Per-row certified lower bound `lambda' z` on the maximum
    /// pre-activation. Rows with a value above the cutoff provably have an
    /// active neuron for that input.
    pub fn certified_margins(&self, x: &Tensor) -> Result<Vec<f64>> {
        let z = self.pre_activations(x)?;
        Ok((0..z.rows())
            .map(|i| z.row(i).iter().zip(&self.lambda).map(|(v, l)| v * l).sum())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = DEFAULT_EPSILON;

    #[test]
    fn uniform_lambda() {
        assert_eq!(make_lambda(4).unwrap(), vec![0.25; 4]);
        assert!(make_lambda(1).is_err());
    }

    #[test]
    fn mean_mode_lambda_weights_tied_row() {
        let lam = certificate_lambda(3, Aggregation::Mean).unwrap();
        assert_eq!(lam, vec![0.25, 0.25, 0.5]);
        let lam = certificate_lambda(2, Aggregation::Mean).unwrap();
        assert_eq!(lam, vec![0.5, 0.5]);
    }

    #[test]
    fn aggregate_rows_modes() {
        let w = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(aggregate_rows(&w, Aggregation::Sum).unwrap(), vec![-4.0, -6.0]);
        assert_eq!(aggregate_rows(&w, Aggregation::Mean).unwrap(), vec![-2.0, -3.0]);
    }

    #[test]
    fn aggregate_bias_clamp_cases() {
        // Head sums to 0.3, so the clamp threshold -0.3 + eps beats -1.
        let b = [0.5, -0.2, -1.0];
        let v = aggregate_bias(&b, Aggregation::Sum, 0.0, EPS).unwrap();
        assert!((v - (-0.3 + EPS)).abs() < 1e-15);
        // A large raw last bias survives the clamp untouched.
        let b = [0.0, 0.0, 7.0];
        assert_eq!(aggregate_bias(&b, Aggregation::Sum, 0.0, EPS).unwrap(), 7.0);
        // Mean mode with a nonzero cutoff.
        let b = [2.0, 4.0, -10.0];
        let v = aggregate_bias(&b, Aggregation::Mean, 1.0, EPS).unwrap();
        assert!((v - (-2.0 + EPS)).abs() < 1e-15);
    }

    #[test]
    fn aggregate_bias_rejects_nonpositive_epsilon() {
        assert!(aggregate_bias(&[0.0, 0.0], Aggregation::Sum, 0.0, 0.0).is_err());
        assert!(aggregate_bias(&[0.0, 0.0], Aggregation::Sum, 0.0, -1.0).is_err());
    }

    fn layer_m2() -> FarkasDenseLayer {
        FarkasDenseLayer::from_params(
            Tensor::matrix(&[vec![1.0]]).unwrap(),
            Tensor::vector(vec![-5.0, 0.0]),
            Aggregation::Sum,
            ActKind::Relu,
            0.0,
            EPS,
        )
        .unwrap()
    }

    #[test]
    fn hand_traced_forward_m2() {
        // x = 0: y = 0, aggregated output 0, bias clamp max(5 + eps, 0).
        let layer = layer_m2();
        let x = Tensor::matrix(&[vec![0.0]]).unwrap();
        let out = layer.forward_values(&x).unwrap();
        assert_eq!(out.shape(), &[1, 2]);
        assert_eq!(out.at(0, 0), 0.0);
        assert!((out.at(0, 1) - (5.0 + EPS)).abs() < 1e-12);
    }

    #[test]
    fn tape_route_matches_value_route() {
        let layer = FarkasDenseLayer::from_params(
            Tensor::matrix(&[vec![0.3, -1.2], vec![2.0, 0.7], vec![-0.5, 0.1]]).unwrap(),
            Tensor::vector(vec![0.1, -0.4, 0.9, -2.0]),
            Aggregation::Mean,
            ActKind::Relu,
            0.0,
            EPS,
        )
        .unwrap();
        let x = Tensor::matrix(&[vec![1.0, -2.0], vec![0.25, 0.5], vec![0.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        let mut params = Vec::new();
        let out = layer.forward(&mut tape, xv, &mut params).unwrap();
        let by_tape = tape.value(out);
        let by_values = layer.forward_values(&x).unwrap();
        for (a, b) in by_tape.data().iter().zip(by_values.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn effective_weights_are_annihilated_by_lambda() {
        for agg in [Aggregation::Sum, Aggregation::Mean] {
            let layer = FarkasDenseLayer::from_params(
                Tensor::matrix(&[vec![1.5, -0.3, 2.2], vec![0.1, 0.1, -7.0]]).unwrap(),
                Tensor::vector(vec![0.0, 0.0, 0.0]),
                agg,
                ActKind::Relu,
                0.0,
                EPS,
            )
            .unwrap();
            let w = layer.effective_weights();
            for j in 0..3 {
                let s: f64 = (0..3).map(|i| layer.lambda()[i] * w.at(i, j)).sum();
                assert!(s.abs() < 1e-12, "column {j} gives {s}");
            }
        }
    }

    #[test]
    fn guaranteed_margin_is_epsilon_over_m_at_clamp() {
        let layer = FarkasDenseLayer::from_params(
            Tensor::matrix(&[vec![1.0], vec![1.0]]).unwrap(),
            Tensor::vector(vec![0.5, -0.2, -1.0]),
            Aggregation::Sum,
            ActKind::Relu,
            0.0,
            EPS,
        )
        .unwrap();
        // b_eff = (0.5, -0.2, -0.3 + eps); uniform lambda gives eps / 3.
        assert!((layer.guaranteed_margin() - EPS / 3.0).abs() < 1e-12);
        assert!(layer.guaranteed_margin() > 0.0);
    }

    #[test]
    fn zero_input_leaves_bias_and_something_active() {
        let layer = layer_m2();
        let x = Tensor::matrix(&[vec![0.0]]).unwrap();
        let z = layer.pre_activations(&x).unwrap();
        assert_eq!(z.row(0), &layer.effective_bias()[..]);
        assert!(z.row(0).iter().cloned().fold(f64::NEG_INFINITY, f64::max) > 0.0);
    }

    #[test]
    fn gradient_reaches_trainable_rows_through_aggregation() {
        // Only the aggregated neuron is active at x = 1, yet w still learns.
        let layer = layer_m2();
        let x = Tensor::matrix(&[vec![1.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        let mut params = Vec::new();
        let out = layer.forward(&mut tape, xv, &mut params).unwrap();
        assert_eq!(tape.value(out).data()[0], 0.0);
        assert!(tape.value(out).data()[1] > 0.0);
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        // d out2 / d w = -x through the aggregated column.
        assert_eq!(tape.grad(params[0]).unwrap(), &[-1.0]);
        // The clamp chose its threshold branch, so the head bias carries -1.
        assert_eq!(tape.grad(params[1]).unwrap(), &[-1.0, 0.0]);
    }

    #[test]
    fn clamp_tie_routes_gradient_to_raw_last_bias() {
        // head = (eps) so threshold = 0 - eps + eps = 0 = raw last: a tie.
        let layer = FarkasDenseLayer::from_params(
            Tensor::matrix(&[vec![1.0]]).unwrap(),
            Tensor::vector(vec![EPS, 0.0]),
            Aggregation::Sum,
            ActKind::Relu,
            0.0,
            EPS,
        )
        .unwrap();
        let x = Tensor::matrix(&[vec![-1.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        let mut params = Vec::new();
        let out = layer.forward(&mut tape, xv, &mut params).unwrap();
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        // Aggregated neuron is active (z2 = 1); its bias gradient must land
        // on the raw last entry, not the head, because of the tie.
        assert_eq!(tape.grad(params[1]).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn dense_certified_margin_is_input_independent() {
        let layer = FarkasDenseLayer::from_params(
            Tensor::matrix(&[vec![0.4, -0.8], vec![1.1, 0.2]]).unwrap(),
            Tensor::vector(vec![0.3, -0.6, 0.05]),
            Aggregation::Sum,
            ActKind::Relu,
            0.0,
            EPS,
        )
        .unwrap();
        let x = Tensor::matrix(&[vec![5.0, -3.0], vec![0.0, 0.0], vec![-100.0, 42.0]]).unwrap();
        let z = layer.pre_activations(&x).unwrap();
        for i in 0..3 {
            let lz: f64 = z.row(i).iter().zip(layer.lambda()).map(|(v, l)| v * l).sum();
            assert!((lz - layer.guaranteed_margin()).abs() < 1e-9);
        }
    }

    #[test]
    fn residual_block_shapes_and_margin_shift() {
        // d = 1, h = 2, sum mode: lambda' z = lambda' b_eff - x/2.
        let block = FarkasResidualBlock::new(1, 2, Aggregation::Sum).unwrap();
        let x = Tensor::matrix(&[vec![3.0]]).unwrap();
        let out = block.forward_values(&x).unwrap();
        assert_eq!(out.shape(), &[1, 2]);
        let margins = block.certified_margins(&x).unwrap();
        assert!((margins[0] - (block.static_margin() - 1.5)).abs() < 1e-12);
        // Zero input removes the shift entirely.
        let x0 = Tensor::matrix(&[vec![0.0]]).unwrap();
        let m0 = block.certified_margins(&x0).unwrap();
        assert!((m0[0] - block.static_margin()).abs() < 1e-15);
        assert!(m0[0] > 0.0);
    }

    #[test]
    fn residual_tape_matches_value_route() {
        let inner = FarkasDenseLayer::from_params(
            Tensor::matrix(&[vec![0.5, -0.2], vec![1.0, 0.3]]).unwrap(),
            Tensor::vector(vec![0.1, 0.2, -0.3]),
            Aggregation::Mean,
            ActKind::Relu,
            0.0,
            EPS,
        )
        .unwrap();
        let block = FarkasResidualBlock::from_parts(
            inner,
            Tensor::matrix(&[vec![0.7, -0.1, 0.4], vec![-0.6, 0.2, 0.9]]).unwrap(),
            Tensor::vector(vec![0.05, -0.4, 0.2]),
            None,
            Aggregation::Mean,
            ActKind::Relu,
            0.0,
            EPS,
        )
        .unwrap();
        let x = Tensor::matrix(&[vec![0.3, -1.0], vec![2.0, 0.5]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        let mut params = Vec::new();
        let out = block.forward(&mut tape, xv, &mut params).unwrap();
        assert_eq!(params.len(), 4);
        let by_values = block.forward_values(&x).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(by_values.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn residual_guarantee_is_conditional() {
        // With a zero projection and a large positive skip input, every
        // component can land at or below zero; this is exactly why blocks
        // report per-input margins instead of a static guarantee.
        let mut block = FarkasResidualBlock::new(1, 2, Aggregation::Sum).unwrap();
        block.inner_mut().params_mut()[0].data_mut()[0] = 1.0;
        let mut params = block.params_mut();
        params[3].data_mut()[0] = -5.0;
        params[3].data_mut()[1] = 0.0;
        drop(params);
        let x = Tensor::matrix(&[vec![10.0]]).unwrap();
        let z = block.pre_activations(&x).unwrap();
        let max = z.row(0).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(max <= 0.0, "constructed counterexample should be fully dead");
        let margins = block.certified_margins(&x).unwrap();
        assert!(margins[0] <= 0.0);
        // The certified bound is still sound: it never exceeds the true max.
        assert!(margins[0] <= max + 1e-12);
    }

    #[test]
    fn constructor_rejects_small_layers() {
        assert!(FarkasDenseLayer::new(3, 1, Aggregation::Sum).is_err());
        assert!(FarkasDenseLayer::new(0, 3, Aggregation::Sum).is_err());
        assert!(FarkasResidualBlock::new(2, 1, Aggregation::Sum).is_err());
    }
}
