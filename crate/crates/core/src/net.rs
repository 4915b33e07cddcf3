//! Network assembly: layer specifications, parameter initialization, and
//! forward passes for training (taped) and evaluation (plain values).

use crate::farkas::{FarkasDenseLayer, FarkasResidualBlock};
use crate::rng::{self, streams};
use crate::tensor::{ActKind, Aggregation, Tape, Tensor, Var};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Declarative description of one layer. Dimensions are explicit so a
/// mismatched stack fails at build time rather than mid-forward.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
        bias: bool,
    },
    FarkasDense {
        input: usize,
        output: usize,
        agg: Aggregation,
        activation: ActKind,
        cutoff: f64,
        epsilon: f64,
    },
    FarkasResidual {
        input: usize,
        hidden: usize,
        agg: Aggregation,
        activation: ActKind,
        cutoff: f64,
        epsilon: f64,
    },
    BatchNorm {
        features: usize,
    },
    Activation {
        kind: ActKind,
    },
}

impl LayerSpec {
    /// Output width given the incoming width, or an error on a mismatch.
    /// `None` incoming means this is the first layer and anything goes.
    fn chain(&self, incoming: Option<usize>) -> Result<usize> {
        let expect = |want: usize, what: &str| -> Result<()> {
            match incoming {
                Some(have) if have != want => Err(Error::spec(format!(
                    "{what} expects {want} inputs but the previous layer produces {have}"
                ))),
                _ => Ok(()),
            }
        };
        match *self {
            LayerSpec::Dense { input, output, .. } => {
                expect(input, "dense layer")?;
                Ok(output)
            }
            LayerSpec::FarkasDense { input, output, .. } => {
                expect(input, "guaranteed layer")?;
                Ok(output)
            }
            LayerSpec::FarkasResidual { input, .. } => {
                expect(input, "residual block")?;
                Ok(input + 1)
            }
            LayerSpec::BatchNorm { features } => {
                expect(features, "batchnorm")?;
                Ok(features)
            }
            LayerSpec::Activation { .. } => incoming.ok_or_else(|| {
                Error::spec("an activation cannot be the first layer".to_string())
            }),
        }
    }
}

/// A full network description.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        NetworkSpec { layers }
    }

    /// Validates dimension chaining and materializes zero-initialized layers.
    pub fn build(&self) -> Result<Network> {
        let mut incoming = None;
        let mut layers = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            let out = spec.chain(incoming)?;
            layers.push(match *spec {
                LayerSpec::Dense { input, output, bias } => {
                    if input == 0 || output == 0 {
                        return Err(Error::spec("dense dimensions must be positive".to_string()));
                    }
                    Layer::Dense(DenseLayer {
                        weight: Tensor::zeros(vec![output, input]),
                        bias: bias.then(|| Tensor::zeros(vec![output])),
                    })
                }
                LayerSpec::FarkasDense {
                    input,
                    output,
                    agg,
                    activation,
                    cutoff,
                    epsilon,
                } => Layer::Farkas(FarkasDenseLayer::with_options(
                    input, output, agg, activation, cutoff, epsilon,
                )?),
                LayerSpec::FarkasResidual {
                    input,
                    hidden,
                    agg,
                    activation,
                    cutoff,
                    epsilon,
                } => Layer::Residual(FarkasResidualBlock::with_options(
                    input, hidden, agg, activation, cutoff, epsilon,
                )?),
                LayerSpec::BatchNorm { features } => {
                    if features == 0 {
                        return Err(Error::spec("batchnorm needs at least one feature".to_string()));
                    }
                    Layer::BatchNorm(BatchNormLayer::new(features))
                }
                LayerSpec::Activation { kind } => Layer::Activation(kind),
            });
            incoming = Some(out);
        }
        Ok(Network { layers })
    }
}

/// How to fill parameters at startup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Uniform on `(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    FanInUniform,
    /// Zero-mean Gaussian weights with the given standard deviation and
    /// all-zero biases.
    SymmetricNormal { sigma: f64 },
    /// He initialization: Gaussian weights with variance `2/fan_in` and
    /// all-zero biases. Keeps relu activations at unit scale through deep
    /// stacks.
    HeNormal,
}

/// Plain fully connected layer.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl DenseLayer {
    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, params: &mut Vec<Var>) -> Result<Var> {
        let w = tape.param(&self.weight);
        params.push(w);
        let y = tape.linear(x, w)?;
        match &self.bias {
            Some(b) => {
                let bv = tape.param(b);
                params.push(bv);
                tape.add_bias(y, bv)
            }
            None => Ok(y),
        }
    }

    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.in_features() {
            return Err(Error::dim(format!(
                "dense input must be [batch, {}], got {:?}",
                self.in_features(),
                x.shape()
            )));
        }
        let (bsz, m) = (x.shape()[0], self.out_features());
        let mut out = vec![0.0; bsz * m];
        for i in 0..bsz {
            for j in 0..m {
                let dot: f64 = x
                    .row(i)
                    .iter()
                    .zip(self.weight.row(j))
                    .map(|(a, c)| a * c)
                    .sum();
                out[i * m + j] = dot + self.bias.as_ref().map_or(0.0, |b| b.data()[j]);
            }
        }
        Tensor::new(vec![bsz, m], out)
    }
}

/// Batch normalization with running statistics for evaluation.
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Weight of the newest batch in the running-statistic update.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub fn new(features: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::new(vec![features], vec![1.0; features]).expect("static shape"),
            beta: Tensor::zeros(vec![features]),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    fn absorb_batch(&mut self, mean: &[f64], var: &[f64]) {
        let keep = 1.0 - self.momentum;
        for (r, &m) in self.running_mean.iter_mut().zip(mean) {
            *r = keep * *r + self.momentum * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(var) {
            *r = keep * *r + self.momentum * v;
        }
    }

    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        let m = self.features();
        if x.rank() != 2 || x.shape()[1] != m {
            return Err(Error::dim(format!(
                "batchnorm input must be [batch, {m}], got {:?}",
                x.shape()
            )));
        }
        let bsz = x.shape()[0];
        let mut out = vec![0.0; bsz * m];
        for i in 0..bsz {
            for j in 0..m {
                let inv = 1.0 / (self.running_var[j] + self.eps).sqrt();
                out[i * m + j] =
                    self.gamma.data()[j] * (x.at(i, j) - self.running_mean[j]) * inv
                        + self.beta.data()[j];
            }
        }
        Tensor::new(vec![bsz, m], out)
    }
}

/// A materialized layer.
#[derive(Debug, Clone)]
pub enum Layer {
    Dense(DenseLayer),
    Farkas(FarkasDenseLayer),
    Residual(FarkasResidualBlock),
    BatchNorm(BatchNormLayer),
    Activation(ActKind),
}

impl Layer {
    /// Whether this layer ends in an activation, making an all-zero output
    /// over a probe set meaningful as "dead".
    pub fn is_activated(&self) -> bool {
        matches!(
            self,
            Layer::Farkas(_) | Layer::Residual(_) | Layer::Activation(_)
        )
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => {
                let mut p = vec![&d.weight];
                if let Some(b) = &d.bias {
                    p.push(b);
                }
                p
            }
            Layer::Farkas(f) => f.params(),
            Layer::Residual(r) => r.params(),
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            Layer::Activation(_) => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => {
                let mut p = vec![&mut d.weight];
                if let Some(b) = &mut d.bias {
                    p.push(b);
                }
                p
            }
            Layer::Farkas(f) => f.params_mut(),
            Layer::Residual(r) => r.params_mut(),
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::Activation(_) => Vec::new(),
        }
    }

    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense(d) => d.forward_values(x),
            Layer::Farkas(f) => f.forward_values(x),
            Layer::Residual(r) => r.forward_values(x),
            Layer::BatchNorm(bn) => bn.forward_values(x),
            Layer::Activation(kind) => {
                let mut t = x.clone();
                for v in t.data_mut() {
                    *v = kind.apply(*v);
                }
                Ok(t)
            }
        }
    }
}

/// A stack of layers with shared forward/parameter plumbing.
#[derive(Debug, Clone, Default)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn from_layers(layers: Vec<Layer>) -> Self {
        Network { layers }
    }

    /// All parameter tensors in forward order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Fills parameters from per-layer random streams so a layer's draw does
    /// not depend on how many parameters earlier layers consumed.
    pub fn init(&mut self, scheme: InitScheme, seed: u64) {
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            let mut rng = rng::stream_rng(seed, streams::LAYER_INIT + idx as u64);
            match layer {
                Layer::Dense(d) => {
                    let fan_in = d.in_features();
                    fill_weights(&mut d.weight, scheme, fan_in, &mut rng);
                    if let Some(b) = &mut d.bias {
                        fill_bias(b, scheme, fan_in, &mut rng);
                    }
                }
                Layer::Farkas(f) => {
                    let fan_in = f.n();
                    let mut params = f.params_mut();
                    fill_weights(&mut *params[0], scheme, fan_in, &mut rng);
                    fill_bias(&mut *params[1], scheme, fan_in, &mut rng);
                }
                Layer::Residual(r) => {
                    let (fan_in, fan_mid) = (r.d(), r.h());
                    let mut params = r.params_mut();
                    fill_weights(&mut *params[0], scheme, fan_in, &mut rng);
                    fill_bias(&mut *params[1], scheme, fan_in, &mut rng);
                    fill_weights(&mut *params[2], scheme, fan_mid, &mut rng);
                    fill_bias(&mut *params[3], scheme, fan_mid, &mut rng);
                }
                Layer::BatchNorm(_) | Layer::Activation(_) => {}
            }
        }
    }

    /// Records the whole network on a tape, collecting lifted parameter
    /// handles in the same order as [`Network::params`]. Batchnorm layers use
    /// batch statistics and fold them into their running estimates.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        x: Var,
        params: &mut Vec<Var>,
    ) -> Result<Var> {
        let mut cur = x;
        for layer in &mut self.layers {
            cur = match layer {
                Layer::Dense(d) => d.forward(tape, cur, params)?,
                Layer::Farkas(f) => f.forward(tape, cur, params)?,
                Layer::Residual(r) => r.forward(tape, cur, params)?,
                Layer::BatchNorm(bn) => {
                    let g = tape.param(&bn.gamma);
                    let b = tape.param(&bn.beta);
                    params.push(g);
                    params.push(b);
                    let (out, stats) = tape.batchnorm_train(cur, g, b, bn.eps)?;
                    bn.absorb_batch(&stats.mean, &stats.var);
                    out
                }
                Layer::Activation(kind) => tape.activate(cur, *kind),
            };
        }
        Ok(cur)
    }

    /// Evaluation pass; batchnorm uses running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward_values(&cur)?;
        }
        Ok(cur)
    }

    /// Evaluation pass that keeps every layer's output.
    pub fn eval_trace(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward_values(&cur)?;
            outs.push(cur.clone());
        }
        Ok(outs)
    }
}

fn fill_weights(t: &mut Tensor, scheme: InitScheme, fan_in: usize, rng: &mut impl Rng) {
    match scheme {
        InitScheme::FanInUniform => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        InitScheme::SymmetricNormal { sigma } => {
            let dist = Normal::new(0.0, sigma).expect("finite sigma");
            for v in t.data_mut() {
                *v = dist.sample(rng);
            }
        }
        InitScheme::HeNormal => {
            let sigma = (2.0 / fan_in.max(1) as f64).sqrt();
            let dist = Normal::new(0.0, sigma).expect("finite sigma");
            for v in t.data_mut() {
                *v = dist.sample(rng);
            }
        }
    }
}

fn fill_bias(t: &mut Tensor, scheme: InitScheme, fan_in: usize, rng: &mut impl Rng) {
    match scheme {
        InitScheme::FanInUniform => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        InitScheme::SymmetricNormal { .. } | InitScheme::HeNormal => {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
    }
}

/// Index of the first activated layer whose outputs are exactly zero for
/// every probe row, or `None` when no layer is dead on the probes.
pub fn born_dead_layer(net: &Network, probes: &Tensor) -> Option<usize> {
    let trace = match net.eval_trace(probes) {
        Ok(t) => t,
        Err(_) => return None,
    };
    for (idx, (layer, out)) in net.layers().iter().zip(&trace).enumerate() {
        if layer.is_activated() && out.data().iter().all(|&v| v == 0.0) {
            return Some(idx);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relu_spec(dims: &[usize]) -> NetworkSpec {
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            layers.push(LayerSpec::Dense {
                input: w[0],
                output: w[1],
                bias: true,
            });
            layers.push(LayerSpec::Activation { kind: ActKind::Relu });
        }
        NetworkSpec::new(layers)
    }

    #[test]
    fn build_checks_dimension_chaining() {
        let ok = relu_spec(&[3, 4, 2]).build();
        assert!(ok.is_ok());
        let bad = NetworkSpec::new(vec![
            LayerSpec::Dense { input: 3, output: 4, bias: true },
            LayerSpec::Dense { input: 5, output: 2, bias: true },
        ]);
        assert!(bad.build().is_err());
        let act_first = NetworkSpec::new(vec![LayerSpec::Activation { kind: ActKind::Relu }]);
        assert!(act_first.build().is_err());
    }

    #[test]
    fn residual_chain_adds_one() {
        let spec = NetworkSpec::new(vec![
            LayerSpec::FarkasResidual {
                input: 3,
                hidden: 4,
                agg: Aggregation::Sum,
                activation: ActKind::Relu,
                cutoff: 0.0,
                epsilon: 1e-6,
            },
            LayerSpec::Dense { input: 4, output: 2, bias: false },
        ]);
        assert!(spec.build().is_ok());
    }

    #[test]
    fn param_count_matches_layout() {
        let net = relu_spec(&[3, 4, 2]).build().unwrap();
        // 3*4 + 4 + 4*2 + 2
        assert_eq!(net.param_count(), 26);
        assert_eq!(net.params().len(), 4);
    }

    #[test]
    fn init_is_reproducible_and_layerwise() {
        let spec = relu_spec(&[3, 4, 2]);
        let mut a = spec.build().unwrap();
        let mut b = spec.build().unwrap();
        a.init(InitScheme::FanInUniform, 7);
        b.init(InitScheme::FanInUniform, 7);
        for (x, y) in a.params().iter().zip(b.params()) {
            assert!(x.bit_eq(y));
        }
        let mut c = spec.build().unwrap();
        c.init(InitScheme::FanInUniform, 8);
        assert!(!a.params()[0].bit_eq(c.params()[0]));
    }

    #[test]
    fn symmetric_normal_zeroes_biases() {
        let mut net = relu_spec(&[2, 2]).build().unwrap();
        net.init(InitScheme::SymmetricNormal { sigma: 1.0 }, 3);
        let params = net.params();
        assert!(params[0].data().iter().any(|&v| v != 0.0));
        assert!(params[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_train_matches_eval_without_batchnorm() {
        let mut net = relu_spec(&[3, 5, 2]).build().unwrap();
        net.init(InitScheme::FanInUniform, 11);
        let x = Tensor::matrix(&[vec![0.1, -0.7, 2.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        let mut params = Vec::new();
        let out = net.forward_train(&mut tape, xv, &mut params).unwrap();
        assert_eq!(params.len(), 4);
        let eval = net.forward_eval(&x).unwrap();
        assert!(tape.value(out).bit_eq(&eval));
    }

    #[test]
    fn batchnorm_running_stats_move_toward_batch() {
        let spec = NetworkSpec::new(vec![LayerSpec::BatchNorm { features: 2 }]);
        let mut net = spec.build().unwrap();
        let x = Tensor::matrix(&[vec![10.0, 0.0], vec![14.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        let mut params = Vec::new();
        net.forward_train(&mut tape, xv, &mut params).unwrap();
        let Layer::BatchNorm(bn) = &net.layers()[0] else {
            panic!("expected batchnorm");
        };
        // Batch mean (12, 0) folded at weight 0.1 into the zero start.
        assert!((bn.running_mean[0] - 1.2).abs() < 1e-12);
        assert_eq!(bn.running_mean[1], 0.0);
        // Batch var (4, 0) folded into the unit start: 0.9 + 0.4.
        assert!((bn.running_var[0] - 1.3).abs() < 1e-12);
        assert!((bn.running_var[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn dead_layer_detection() {
        let mut net = relu_spec(&[2, 2, 2]).build().unwrap();
        // First dense layer forced dead: very negative bias.
        {
            let mut params = net.params_mut();
            for v in params[0].data_mut() {
                *v = 0.5;
            }
            for v in params[1].data_mut() {
                *v = -100.0;
            }
            for v in params[2].data_mut() {
                *v = 1.0;
            }
        }
        let probes = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.3, 0.3]]).unwrap();
        // Layer index 1 is the activation after the first dense layer.
        assert_eq!(born_dead_layer(&net, &probes), Some(1));
        let mut alive = relu_spec(&[2, 2]).build().unwrap();
        for p in alive.params_mut() {
            for v in p.data_mut() {
                *v = 1.0;
            }
        }
        assert_eq!(born_dead_layer(&alive, &probes), None);
    }

    #[test]
    fn dead_layer_blocks_gradient_upstream() {
        let mut net = relu_spec(&[2, 2, 2]).build().unwrap();
        {
            let mut params = net.params_mut();
            for v in params[0].data_mut() {
                *v = 0.5;
            }
            for v in params[1].data_mut() {
                *v = -100.0;
            }
            for v in params[2].data_mut() {
                *v = 1.0;
            }
            for v in params[3].data_mut() {
                *v = 0.25;
            }
        }
        let x = Tensor::matrix(&[vec![1.0, 2.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        let mut params = Vec::new();
        let out = net.forward_train(&mut tape, xv, &mut params).unwrap();
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        // Everything at or before the dead activation gets exact zeros.
        assert!(tape.grad(params[0]).unwrap().iter().all(|&g| g == 0.0));
        assert!(tape.grad(params[1]).unwrap().iter().all(|&g| g == 0.0));
        // The layer after it still trains through its bias.
        assert!(tape.grad(params[3]).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn farkas_network_never_dead_on_probes() {
        let spec = NetworkSpec::new(vec![
            LayerSpec::FarkasDense {
                input: 2,
                output: 3,
                agg: Aggregation::Sum,
                activation: ActKind::Relu,
                cutoff: 0.0,
                epsilon: 1e-6,
            },
            LayerSpec::FarkasDense {
                input: 3,
                output: 3,
                agg: Aggregation::Mean,
                activation: ActKind::Relu,
                cutoff: 0.0,
                epsilon: 1e-6,
            },
        ]);
        let mut net = spec.build().unwrap();
        net.init(InitScheme::SymmetricNormal { sigma: 2.0 }, 99);
        let probes = Tensor::matrix(&[vec![5.0, -3.0], vec![-8.0, -8.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(born_dead_layer(&net, &probes), None);
    }
}
