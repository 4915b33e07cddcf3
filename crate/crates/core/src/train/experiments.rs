//! Desk-scale experiment drivers behind the CLI subcommands.
//!
//! Every experiment takes an explicit master seed and derives independent
//! streams per trial, so single-threaded and parallel runs produce identical
//! numbers.

use crate::farkas::FarkasDenseLayer;
use crate::lp;
use crate::net::{born_dead_layer, InitScheme, Layer, LayerSpec, Network, NetworkSpec};
use crate::report::EpochRow;
use crate::rng::{self, streams};
use crate::tensor::{ActKind, Aggregation, Tensor};
use crate::train::{self, data, SgdConfig};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

/// Two well-separated Gaussian blobs; the fixed geometry for the revival
/// demonstration.
pub const TOY_CENTERS: ([f64; 2], [f64; 2]) = ([2.0, 2.0], [-2.0, -2.0]);
pub const TOY_STD: f64 = 0.5;

fn toy_datasets(seed: u64, n_train_per: usize, n_test_per: usize) -> (data::Dataset, data::Dataset) {
    let mut rng = rng::stream_rng(seed, streams::DATA_TRAIN);
    let train = data::two_clusters(n_train_per, TOY_CENTERS, TOY_STD, &mut rng);
    let mut rng = rng::stream_rng(seed, streams::DATA_TEST);
    let test = data::two_clusters(n_test_per, TOY_CENTERS, TOY_STD, &mut rng);
    (train, test)
}

/// Plain two-unit relu classifier with the adversarial start: both weight
/// rows are the unit vector toward class 0's center and both biases are -1,
/// so every class-1 point lands in the dead region of both units.
pub fn toy2d_plain_net() -> Network {
    let mut net = NetworkSpec::new(vec![
        LayerSpec::Dense { input: 2, output: 2, bias: true },
        LayerSpec::Activation { kind: ActKind::Relu },
    ])
    .build()
    .expect("static spec");
    let u = 1.0 / 2.0_f64.sqrt();
    let mut params = net.params_mut();
    params[0].data_mut().copy_from_slice(&[u, u, u, u]);
    params[1].data_mut().copy_from_slice(&[-1.0, -1.0]);
    net
}

/// Guaranteed-layer counterpart with the same adversarial start. Three
/// outputs: two trainable rows identical to the plain net plus the tied row;
/// the third logit acts as a never-labeled spill class.
pub fn toy2d_farkas_net() -> Network {
    let mut net = NetworkSpec::new(vec![LayerSpec::FarkasDense {
        input: 2,
        output: 3,
        agg: Aggregation::Sum,
        activation: ActKind::Relu,
        cutoff: 0.0,
        epsilon: crate::farkas::DEFAULT_EPSILON,
    }])
    .build()
    .expect("static spec");
    let u = 1.0 / 2.0_f64.sqrt();
    let mut params = net.params_mut();
    params[0].data_mut().copy_from_slice(&[u, u, u, u]);
    params[1].data_mut().copy_from_slice(&[-1.0, -1.0, -1.0]);
    net
}

#[derive(Debug, Clone, Serialize)]
pub struct Toy2dRun {
    pub seed: u64,
    /// Final accuracy on the training clusters, the quantity the stuck-net
    /// experiment is about.
    pub plain_final_acc: f64,
    pub farkas_final_acc: f64,
    pub plain_final_test_acc: f64,
    pub farkas_final_test_acc: f64,
    /// First epoch at which the guaranteed net fits the training set exactly.
    pub farkas_epochs_to_perfect: Option<usize>,
    /// Guaranteed margins of every guaranteed layer after training.
    pub farkas_margins: Vec<f64>,
    #[serde(skip)]
    pub plain_curve: Vec<EpochRow>,
    #[serde(skip)]
    pub farkas_curve: Vec<EpochRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Toy2dSummary {
    pub epochs: usize,
    pub learning_rate: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub runs: Vec<Toy2dRun>,
    /// Highest plain-net final training accuracy across seeds.
    pub plain_acc_max: f64,
    /// Lowest guaranteed-net final training accuracy across seeds.
    pub farkas_acc_min: f64,
}

/// Margins of every guaranteed dense layer in forward order.
pub fn guaranteed_margins(net: &Network) -> Vec<f64> {
    net.layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Farkas(f) => Some(f.guaranteed_margin()),
            Layer::Residual(r) => Some(r.static_margin()),
            _ => None,
        })
        .collect()
}

pub fn run_toy2d_once(seed: u64, epochs: usize, lr: f64, n_train_per: usize, n_test_per: usize) -> Result<Toy2dRun> {
    let (tr, te) = toy_datasets(seed, n_train_per, n_test_per);
    let cfg = SgdConfig::new(lr, epochs);

    let mut plain = toy2d_plain_net();
    let plain_log = train::train_classifier(&mut plain, &tr, &te, &cfg, seed)?;

    let mut farkas = toy2d_farkas_net();
    let farkas_log = train::train_classifier(&mut farkas, &tr, &te, &cfg, seed)?;

    Ok(Toy2dRun {
        seed,
        plain_final_acc: 1.0 - plain_log.final_train_err(),
        farkas_final_acc: 1.0 - farkas_log.final_train_err(),
        plain_final_test_acc: 1.0 - plain_log.final_test_err(),
        farkas_final_test_acc: 1.0 - farkas_log.final_test_err(),
        farkas_epochs_to_perfect: farkas_log.first_epoch_at_train(0.0),
        farkas_margins: guaranteed_margins(&farkas),
        plain_curve: plain_log.rows,
        farkas_curve: farkas_log.rows,
    })
}

pub fn run_toy2d(
    seeds: &[u64],
    epochs: usize,
    lr: f64,
    n_train_per: usize,
    n_test_per: usize,
    parallel: bool,
) -> Result<Toy2dSummary> {
    let runs: Vec<Toy2dRun> = run_all(seeds, parallel, |&s| {
        run_toy2d_once(s, epochs, lr, n_train_per, n_test_per)
    })?;
    let plain_acc_max = runs.iter().map(|r| r.plain_final_acc).fold(0.0, f64::max);
    let farkas_acc_min = runs.iter().map(|r| r.farkas_final_acc).fold(1.0, f64::min);
    Ok(Toy2dSummary {
        epochs,
        learning_rate: lr,
        train_per_class: n_train_per,
        test_per_class: n_test_per,
        runs,
        plain_acc_max,
        farkas_acc_min,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BornDeadOutcome {
    pub depth: usize,
    pub width: usize,
    pub trials: usize,
    pub sigma: f64,
    pub probes: usize,
    pub plain_dead_fraction: f64,
    pub farkas_dead_fraction: f64,
    /// Among dead plain trials, the mean index of the first dead activation
    /// (counting activations, not raw layers).
    pub plain_mean_first_dead: Option<f64>,
}

fn plain_column(depth: usize, width: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    for _ in 0..depth {
        layers.push(LayerSpec::Dense { input: width, output: width, bias: true });
        layers.push(LayerSpec::Activation { kind: ActKind::Relu });
    }
    NetworkSpec::new(layers)
}

fn farkas_column(depth: usize, width: usize) -> NetworkSpec {
    let layers = (0..depth)
        .map(|_| LayerSpec::FarkasDense {
            input: width,
            output: width,
            agg: Aggregation::Sum,
            activation: ActKind::Relu,
            cutoff: 0.0,
            epsilon: crate::farkas::DEFAULT_EPSILON,
        })
        .collect();
    NetworkSpec::new(layers)
}

fn gaussian_probes(rng: &mut impl Rng, count: usize, dim: usize) -> Tensor {
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    let data: Vec<f64> = (0..count * dim).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![count, dim], data).expect("shape by construction")
}

/// Initialization-time death census: how often does a freshly initialized
/// column contain a layer that is silent on every probe input?
pub fn run_born_dead(
    depth: usize,
    width: usize,
    trials: usize,
    sigma: f64,
    probes: usize,
    seed: u64,
    parallel: bool,
) -> Result<BornDeadOutcome> {
    if width < 2 {
        return Err(Error::input(
            "width must be at least 2 so the guaranteed column is buildable".to_string(),
        ));
    }
    let idxs: Vec<usize> = (0..trials).collect();
    let per_trial = |&t: &usize| -> Result<(bool, Option<usize>, bool)> {
        let trial_seed = rng::derive_seed(seed, streams::TRIAL + t as u64);
        let probe_set = gaussian_probes(
            &mut rng::stream_rng(trial_seed, streams::PROBES),
            probes,
            width,
        );

        let mut plain = plain_column(depth, width).build()?;
        plain.init(InitScheme::SymmetricNormal { sigma }, trial_seed);
        let plain_dead = born_dead_layer(&plain, &probe_set);
        // Raw index counts dense+activation pairs; report the pair index.
        let plain_first = plain_dead.map(|i| i / 2);

        let mut guarded = farkas_column(depth, width).build()?;
        guarded.init(InitScheme::SymmetricNormal { sigma }, trial_seed);
        let farkas_dead = born_dead_layer(&guarded, &probe_set).is_some();

        Ok((plain_dead.is_some(), plain_first, farkas_dead))
    };
    let results: Vec<(bool, Option<usize>, bool)> = run_all(&idxs, parallel, per_trial)?;

    let plain_dead = results.iter().filter(|r| r.0).count();
    let farkas_dead = results.iter().filter(|r| r.2).count();
    let firsts: Vec<usize> = results.iter().filter_map(|r| r.1).collect();
    Ok(BornDeadOutcome {
        depth,
        width,
        trials,
        sigma,
        probes,
        plain_dead_fraction: plain_dead as f64 / trials.max(1) as f64,
        farkas_dead_fraction: farkas_dead as f64 / trials.max(1) as f64,
        plain_mean_first_dead: if firsts.is_empty() {
            None
        } else {
            Some(firsts.iter().sum::<usize>() as f64 / firsts.len() as f64)
        },
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NormCheckOutcome {
    pub trials: usize,
    /// Mean-mode trials where appending the tied row grew the max row l1
    /// norm beyond rounding.
    pub weight_violations: usize,
    /// Largest observed ratio `inf_norm(W_eff) / inf_norm(W_train)` in mean
    /// mode; mathematically exactly 1 when the tied row cannot dominate.
    pub max_weight_ratio: f64,
    /// Mean-mode trials where the effective bias escaped the
    /// `max(|b|) + |cutoff| + epsilon` envelope.
    pub bias_violations: usize,
    /// Sum-mode identity-matrix counterexample: the tied row's l1 norm over
    /// the trainable maximum. 2 for the 2x2 identity.
    pub sum_counterexample_ratio: f64,
}

/// Checks the mean-aggregation norm-stability claim on random layers and
/// exhibits the sum-mode counterexample.
pub fn run_norm_check(trials: usize, seed: u64) -> Result<NormCheckOutcome> {
    let mut rng = rng::stream_rng(seed, streams::TRIAL);
    let mut weight_violations = 0;
    let mut bias_violations = 0;
    let mut max_ratio: f64 = 0.0;
    for _ in 0..trials {
        let m = rng.gen_range(2..=32);
        let n = rng.gen_range(1..=32);
        let scale = 10f64.powi(rng.gen_range(-6..=6));
        let cutoff = rng.gen_range(-1.0..1.0);
        let normal = Normal::new(0.0, scale).expect("finite scale");
        let w = Tensor::new(
            vec![m - 1, n],
            (0..(m - 1) * n).map(|_| normal.sample(&mut rng)).collect(),
        )?;
        let b = Tensor::new(vec![m], (0..m).map(|_| normal.sample(&mut rng)).collect())?;
        let layer = FarkasDenseLayer::from_params(
            w,
            b,
            Aggregation::Mean,
            ActKind::Relu,
            cutoff,
            crate::farkas::DEFAULT_EPSILON,
        )?;
        let before = lp::inf_norm(layer.w_train());
        let after = lp::inf_norm(&layer.effective_weights());
        if before > 0.0 {
            let ratio = after / before;
            max_ratio = max_ratio.max(ratio);
            if ratio > 1.0 + 1e-12 {
                weight_violations += 1;
            }
        }
        let b_inf = layer
            .bias()
            .data()
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        let b_eff_inf = layer
            .effective_bias()
            .iter()
            .fold(0.0f64, |a, &v| a.max(v.abs()));
        if b_eff_inf > b_inf + cutoff.abs() + layer.epsilon() + 1e-9 * b_inf.max(1.0) {
            bias_violations += 1;
        }
    }

    // Sum mode has no such stability: for the identity the tied row is all
    // minus ones, doubling the max row l1 norm.
    let ident = FarkasDenseLayer::from_params(
        Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]])?,
        Tensor::zeros(vec![3]),
        Aggregation::Sum,
        ActKind::Relu,
        0.0,
        crate::farkas::DEFAULT_EPSILON,
    )?;
    let sum_ratio = lp::inf_norm(&ident.effective_weights()) / lp::inf_norm(ident.w_train());

    Ok(NormCheckOutcome {
        trials,
        weight_violations,
        max_weight_ratio: max_ratio,
        bias_violations,
        sum_counterexample_ratio: sum_ratio,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareArm {
    pub name: String,
    pub final_test_errs: Vec<f64>,
    pub mean_test_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareOutcome {
    pub depth: usize,
    pub width: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    pub arms: Vec<CompareArm>,
    /// Seeds where the guaranteed stack beat the plain stack, both without
    /// batchnorm.
    pub farkas_wins: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CompareKind {
    Plain,
    PlainBn,
    Farkas,
    FarkasBn,
}

impl CompareKind {
    fn name(self) -> &'static str {
        match self {
            CompareKind::Plain => "plain",
            CompareKind::PlainBn => "plain_bn",
            CompareKind::Farkas => "farkas",
            CompareKind::FarkasBn => "farkas_bn",
        }
    }

    fn all() -> [CompareKind; 4] {
        [
            CompareKind::Plain,
            CompareKind::PlainBn,
            CompareKind::Farkas,
            CompareKind::FarkasBn,
        ]
    }
}

fn compare_spec(kind: CompareKind, depth: usize, width: usize, classes: usize) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut cur = 2;
    for _ in 0..depth {
        match kind {
            CompareKind::Plain | CompareKind::PlainBn => {
                layers.push(LayerSpec::Dense { input: cur, output: width, bias: true });
                if kind == CompareKind::PlainBn {
                    layers.push(LayerSpec::BatchNorm { features: width });
                }
                layers.push(LayerSpec::Activation { kind: ActKind::Relu });
            }
            CompareKind::Farkas | CompareKind::FarkasBn => {
                layers.push(LayerSpec::FarkasDense {
                    input: cur,
                    output: width,
                    agg: Aggregation::Mean,
                    activation: ActKind::Relu,
                    cutoff: 0.0,
                    epsilon: crate::farkas::DEFAULT_EPSILON,
                });
                if kind == CompareKind::FarkasBn {
                    layers.push(LayerSpec::BatchNorm { features: width });
                }
            }
        }
        cur = width;
    }
    layers.push(LayerSpec::Dense { input: cur, output: classes, bias: true });
    NetworkSpec::new(layers)
}

/// Depth-stress comparison on the two-ring task: plain and guaranteed
/// columns, each with and without batchnorm, over several seeds. The data is
/// fixed; seeds move initialization and shuffling only.
#[allow(clippy::too_many_arguments)]
pub fn run_compare(
    seeds: &[u64],
    depth: usize,
    width: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    data_seed: u64,
    parallel: bool,
) -> Result<CompareOutcome> {
    let mut rng = rng::stream_rng(data_seed, streams::DATA_TRAIN);
    let train = data::two_rings(150, 1.0, 2.0, 0.1, &mut rng);
    let mut rng = rng::stream_rng(data_seed, streams::DATA_TEST);
    let test = data::two_rings(100, 1.0, 2.0, 0.1, &mut rng);

    let per_seed = |&seed: &u64| -> Result<Vec<f64>> {
        let mut errs = Vec::with_capacity(4);
        for kind in CompareKind::all() {
            let mut net = compare_spec(kind, depth, width, train.classes).build()?;
            net.init(InitScheme::HeNormal, rng::derive_seed(seed, kind as u64));
            let cfg = SgdConfig {
                batch_size,
                momentum: 0.5,
                ..SgdConfig::new(lr, epochs).with_step_schedule()
            };
            let log = train::train_classifier(&mut net, &train, &test, &cfg, seed)?;
            errs.push(log.final_test_err());
        }
        Ok(errs)
    };
    let rows: Vec<Vec<f64>> = run_all(seeds, parallel, per_seed)?;

    let arms: Vec<CompareArm> = CompareKind::all()
        .iter()
        .enumerate()
        .map(|(i, kind)| {
            let errs: Vec<f64> = rows.iter().map(|r| r[i]).collect();
            let mean = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
            CompareArm {
                name: kind.name().to_string(),
                final_test_errs: errs,
                mean_test_err: mean,
            }
        })
        .collect();
    let farkas_wins = rows.iter().filter(|r| r[2] < r[0]).count();
    Ok(CompareOutcome {
        depth,
        width,
        epochs,
        learning_rate: lr,
        seeds: seeds.to_vec(),
        arms,
        farkas_wins,
    })
}

/// Maps a fallible job over items, optionally with rayon; output order
/// always matches input order.
fn run_all<T: Sync, U: Send>(
    items: &[T],
    parallel: bool,
    job: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    if parallel {
        items.par_iter().map(|t| job(t)).collect()
    } else {
        items.iter().map(job).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adversarial_plain_net_starts_at_coin_flip() {
        let net = toy2d_plain_net();
        let (_, te) = toy_datasets(1, 10, 50);
        let err = train::error_rate(&net, &te).unwrap();
        // Class 0 comes out right, class 1 lands on the dead tie.
        assert!((err - 0.5).abs() < 0.05, "initial error {err}");
    }

    #[test]
    fn adversarial_farkas_net_keeps_class1_gradient_alive() {
        let net = toy2d_farkas_net();
        let (tr, _) = toy_datasets(1, 20, 10);
        let Layer::Farkas(f) = &net.layers()[0] else { panic!("expected guaranteed layer") };
        // Every class-1 input still activates the tied third unit.
        let z = f.pre_activations(&tr.inputs).unwrap();
        for i in 20..40 {
            let max = z.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(max > 0.0, "row {i} fully dead");
            assert!(z.at(i, 2) > 0.0, "tied unit inactive on a class-1 point");
        }
    }

    #[test]
    fn toy2d_revival_on_one_seed() {
        let run = run_toy2d_once(11, 200, 0.01, 100, 50).unwrap();
        assert!(
            run.plain_final_acc <= 0.6,
            "plain net escaped: acc {}",
            run.plain_final_acc
        );
        assert_eq!(run.farkas_final_acc, 1.0, "guaranteed net should reach 100%");
        assert!(run.farkas_epochs_to_perfect.is_some());
        assert!(run.farkas_margins[0] > 0.0);
    }

    #[test]
    fn toy2d_revival_with_mirrored_geometry() {
        // Reflect everything through the origin: clusters swap corners and
        // the adversarial rows point at the new class-0 center. The stuck
        // state and the revival must both survive the reflection.
        let mut rng = rng::stream_rng(4, streams::DATA_TRAIN);
        let train = data::two_clusters(80, ([-2.0, -2.0], [2.0, 2.0]), TOY_STD, &mut rng);
        let mut rng = rng::stream_rng(4, streams::DATA_TEST);
        let test = data::two_clusters(40, ([-2.0, -2.0], [2.0, 2.0]), TOY_STD, &mut rng);
        let cfg = SgdConfig::new(0.01, 200);
        let u = -1.0 / 2.0_f64.sqrt();

        let mut plain = toy2d_plain_net();
        plain.params_mut()[0].data_mut().copy_from_slice(&[u, u, u, u]);
        let plain_log = train::train_classifier(&mut plain, &train, &test, &cfg, 4).unwrap();

        let mut farkas = toy2d_farkas_net();
        farkas.params_mut()[0].data_mut().copy_from_slice(&[u, u, u, u]);
        let farkas_log = train::train_classifier(&mut farkas, &train, &test, &cfg, 4).unwrap();

        assert!(plain_log.final_test_err() >= 0.4, "err {}", plain_log.final_test_err());
        assert_eq!(farkas_log.final_test_err(), 0.0);
    }

    #[test]
    fn born_dead_census_smoke() {
        let out = run_born_dead(12, 2, 20, 1.0, 32, 5, false).unwrap();
        assert_eq!(out.farkas_dead_fraction, 0.0);
        assert!(out.plain_dead_fraction > 0.5, "plain fraction {}", out.plain_dead_fraction);
        let seq = run_born_dead(12, 2, 20, 1.0, 32, 5, true).unwrap();
        assert_eq!(out.plain_dead_fraction, seq.plain_dead_fraction);
    }

    #[test]
    fn norm_check_mean_mode_is_stable() {
        let out = run_norm_check(200, 7).unwrap();
        assert_eq!(out.weight_violations, 0);
        assert_eq!(out.bias_violations, 0);
        assert!(out.max_weight_ratio <= 1.0 + 1e-12);
        assert_eq!(out.sum_counterexample_ratio, 2.0);
    }

    #[test]
    fn compare_runs_all_four_arms() {
        let out = run_compare(&[1, 2], 3, 6, 15, 0.05, 0, 123, false).unwrap();
        assert_eq!(out.arms.len(), 4);
        assert_eq!(out.arms[0].final_test_errs.len(), 2);
        assert!(out.arms.iter().all(|a| a.mean_test_err.is_finite()));
    }
}
