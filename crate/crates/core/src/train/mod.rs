//! Training: SGD with momentum and weight decay, seeded shuffling, and the
//! shared classifier loop used by the experiment drivers.

pub mod data;
pub mod experiments;

use crate::net::Network;
use crate::report::EpochRow;
use crate::rng::{self, streams};
use crate::tensor::Tape;
use crate::{Error, Result};
use data::Dataset;
use rand::seq::SliceRandom;

/// Hyperparameters for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Rows per step; 0 means full batch.
    pub batch_size: usize,
    /// `(epoch, factor)` pairs; from each epoch on, the base rate is
    /// multiplied by that factor (factors compound).
    pub schedule: Vec<(usize, f64)>,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, epochs: usize) -> Self {
        SgdConfig {
            learning_rate,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs,
            batch_size: 0,
            schedule: Vec::new(),
        }
    }

    /// Tenfold drops at the halfway and three-quarter marks.
    pub fn with_step_schedule(mut self) -> Self {
        self.schedule = vec![(self.epochs / 2, 0.1), (self.epochs * 3 / 4, 0.1)];
        self
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.learning_rate;
        for &(start, factor) in &self.schedule {
            if epoch >= start {
                lr *= factor;
            }
        }
        lr
    }
}

/// Momentum SGD. The velocity update is
/// `v <- momentum * v + grad + weight_decay * param`,
/// `param <- param - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn from_config(cfg: &SgdConfig) -> Self {
        Self::new(cfg.momentum, cfg.weight_decay)
    }

    /// Applies one step. `params` and `grads` must line up in both count and
    /// length, and must keep the same layout across calls.
    pub fn step(
        &mut self,
        params: &mut [&mut crate::tensor::Tensor],
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::usage(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::usage("parameter layout changed mid-run".to_string()));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.len() != g.len() || p.len() != v.len() {
                return Err(Error::usage("gradient length mismatch".to_string()));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Largest-logit class with ties going to the lower index; `None` when the
/// row contains a NaN (callers count that as a miss).
pub fn argmax(row: &[f64]) -> Option<usize> {
    if row.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    Some(best)
}

/// Fraction of rows misclassified under eval-mode forward.
pub fn error_rate(net: &Network, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let logits = net.forward_eval(&ds.inputs)?;
    let mut wrong = 0usize;
    for (i, &label) in ds.labels.iter().enumerate() {
        match argmax(logits.row(i)) {
            Some(pred) if pred == label => {}
            _ => wrong += 1,
        }
    }
    Ok(wrong as f64 / ds.len() as f64)
}

/// Mean cross-entropy of the network on a dataset, eval-mode forward.
pub fn mean_loss(net: &Network, ds: &Dataset) -> Result<f64> {
    let logits = net.forward_eval(&ds.inputs)?;
    let mut tape = Tape::new();
    let lv = tape.input(&logits);
    let loss = tape.softmax_cross_entropy(lv, &ds.labels)?;
    Ok(tape.value(loss).data()[0])
}

/// The outcome of [`train_classifier`].
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub fn final_test_err(&self) -> f64 {
        self.rows.last().map_or(1.0, |r| r.test_err)
    }

    pub fn final_train_err(&self) -> f64 {
        self.rows.last().map_or(1.0, |r| r.train_err)
    }

    /// First epoch at which test error reached the threshold, if any.
    pub fn first_epoch_at(&self, test_err: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.test_err <= test_err).map(|r| r.epoch)
    }

    /// First epoch whose post-epoch training error is at or below the target.
    pub fn first_epoch_at_train(&self, train_err: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.train_err <= train_err).map(|r| r.epoch)
    }
}

/// Trains a softmax classifier with momentum SGD. Shuffling draws from the
/// shuffle stream of `seed`, so runs are reproducible end to end. Metric
/// rows are recorded after each epoch's updates.
pub fn train_classifier(
    net: &mut Network,
    train: &Dataset,
    test: &Dataset,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::input("training set is empty".to_string()));
    }
    let n = train.len();
    let batch = if cfg.batch_size == 0 { n } else { cfg.batch_size.min(n) };
    let mut opt = Sgd::from_config(cfg);
    let mut shuffle_rng = rng::stream_rng(seed, streams::SHUFFLE);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rows = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let (x, labels) = train.batch(chunk);
            let mut tape = Tape::new();
            let xv = tape.input(&x);
            let mut param_vars = Vec::new();
            let out = net.forward_train(&mut tape, xv, &mut param_vars)?;
            let loss = tape.softmax_cross_entropy(out, &labels)?;
            loss_sum += tape.value(loss).data()[0] * chunk.len() as f64;
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = param_vars
                .iter()
                .map(|&v| tape.grad(v).expect("parameters are tracked").to_vec())
                .collect();
            let mut params = net.params_mut();
            opt.step(&mut params, &grads, lr)?;
        }
        rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / n as f64,
            train_err: error_rate(net, train)?,
            test_err: error_rate(net, test)?,
        });
    }
    Ok(TrainLog { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{InitScheme, LayerSpec, NetworkSpec};
    use crate::tensor::{ActKind, Tensor};

    #[test]
    fn argmax_ties_and_nans() {
        assert_eq!(argmax(&[0.0, 0.0]), Some(0));
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax(&[1.0, f64::NAN]), None);
        assert_eq!(argmax(&[2.0]), Some(0));
    }

    #[test]
    fn lr_schedule_compounds() {
        let cfg = SgdConfig {
            learning_rate: 1.0,
            schedule: vec![(10, 0.1), (20, 0.5)],
            ..SgdConfig::new(1.0, 30)
        };
        assert_eq!(cfg.lr_at(0), 1.0);
        assert_eq!(cfg.lr_at(10), 0.1);
        assert!((cfg.lr_at(25) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn step_schedule_hits_half_and_three_quarters() {
        let cfg = SgdConfig::new(0.4, 100).with_step_schedule();
        assert_eq!(cfg.lr_at(49), 0.4);
        assert!((cfg.lr_at(50) - 0.04).abs() < 1e-15);
        assert!((cfg.lr_at(75) - 0.004).abs() < 1e-15);
    }

    #[test]
    fn sgd_matches_hand_computation() {
        // One parameter, two steps, no decay: v1 = 2, p1 = 0.8;
        // v2 = 0.9*2 + 1 = 2.8, p2 = 0.8 - 0.28 = 0.52.
        let mut p = Tensor::vector(vec![1.0]);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut [&mut p], &[vec![2.0]], 0.1).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        opt.step(&mut [&mut p], &[vec![1.0]], 0.1).unwrap();
        assert!((p.data()[0] - 0.52).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = Tensor::vector(vec![10.0]);
        let mut opt = Sgd::new(0.0, 0.1);
        opt.step(&mut [&mut p], &[vec![0.0]], 1.0).unwrap();
        assert!((p.data()[0] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_layout_changes() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut q = Tensor::vector(vec![1.0]);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut [&mut p], &[vec![0.0]], 0.1).unwrap();
        assert!(opt.step(&mut [&mut p, &mut q], &[vec![0.0], vec![0.0]], 0.1).is_err());
    }

    fn separable_data(seed: u64) -> (Dataset, Dataset) {
        let mut rng = crate::rng::stream_rng(seed, streams::DATA_TRAIN);
        let train = data::two_clusters(40, ([2.0, 2.0], [-2.0, -2.0]), 0.5, &mut rng);
        let mut rng = crate::rng::stream_rng(seed, streams::DATA_TEST);
        let test = data::two_clusters(20, ([2.0, 2.0], [-2.0, -2.0]), 0.5, &mut rng);
        (train, test)
    }

    #[test]
    fn training_solves_a_separable_problem() {
        let (train, test) = separable_data(3);
        let mut net = NetworkSpec::new(vec![
            LayerSpec::Dense { input: 2, output: 8, bias: true },
            LayerSpec::Activation { kind: ActKind::Relu },
            LayerSpec::Dense { input: 8, output: 2, bias: true },
        ])
        .build()
        .unwrap();
        net.init(InitScheme::FanInUniform, 3);
        let cfg = SgdConfig { weight_decay: 0.0, ..SgdConfig::new(0.05, 40) };
        let log = train_classifier(&mut net, &train, &test, &cfg, 3).unwrap();
        assert_eq!(log.rows.len(), 40);
        assert!(log.final_test_err() == 0.0, "test err {}", log.final_test_err());
        assert!(log.rows[0].train_loss > log.rows.last().unwrap().train_loss);
    }

    #[test]
    fn training_is_reproducible() {
        let (train, test) = separable_data(9);
        let cfg = SgdConfig { batch_size: 16, ..SgdConfig::new(0.05, 5) };
        let mut run = || {
            let mut net = NetworkSpec::new(vec![
                LayerSpec::Dense { input: 2, output: 4, bias: true },
                LayerSpec::Activation { kind: ActKind::Relu },
                LayerSpec::Dense { input: 4, output: 2, bias: true },
            ])
            .build()
            .unwrap();
            net.init(InitScheme::FanInUniform, 9);
            train_classifier(&mut net, &train, &test, &cfg, 9).unwrap()
        };
        let a = run();
        let b = run();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.test_err.to_bits(), rb.test_err.to_bits());
        }
    }

    #[test]
    fn minibatches_cover_every_row() {
        // 10 rows, batch 4: chunks of 4, 4, 2; the loss denominator is 10.
        let (train, test) = separable_data(5);
        let cfg = SgdConfig { batch_size: 7, ..SgdConfig::new(0.01, 1) };
        let mut net = NetworkSpec::new(vec![LayerSpec::Dense {
            input: 2,
            output: 2,
            bias: true,
        }])
        .build()
        .unwrap();
        net.init(InitScheme::FanInUniform, 5);
        let log = train_classifier(&mut net, &train, &test, &cfg, 5).unwrap();
        assert!(log.rows[0].train_loss.is_finite());
    }
}
