//! Network audit: proves or refutes layer activity guarantees.
//!
//! For each layer the auditor asks: is there an input that silences every
//! unit? For plain dense layers feeding a relu this is the margin program
//! `min_x max_i (w_i x + b_i)`; a nonpositive optimum exhibits a killing
//! input. Guaranteed layers carry a stored certificate instead, which is
//! checked directly: nonnegative, sums to one, annihilates the effective
//! weights, and puts the effective bias strictly above the cutoff. The two
//! views meet through duality: a valid certificate lower-bounds the margin
//! program, so the auditor cross-checks the solver against the certificate
//! when both are available.

use crate::lp::{self, Margin};
use crate::net::{Layer, Network};
use crate::tensor::Tensor;
use crate::Result;
use serde::Serialize;

/// Per-entry tolerance on the certificate's weight annihilation.
pub const LAMBDA_RESIDUAL_TOL: f64 = 1e-9;
/// Tolerance on the certificate summing to one.
pub const LAMBDA_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// Provably some unit is active for every input.
    Certified,
    /// A killing input exists (or the certificate failed).
    Flagged,
    /// Guarantee is input-dependent; see the detail field.
    Conditional,
    /// Nothing to audit (no activation follows, or a parameter-free layer).
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerReport {
    pub index: usize,
    pub kind: &'static str,
    pub status: Status,
    /// Optimal value of the margin program, when solved.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_star: Option<f64>,
    /// Certified lower bound on the max pre-activation, when a certificate
    /// exists.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    /// Largest entry of `|W_eff' lambda|` for stored certificates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_residual: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub layers: Vec<LayerReport>,
    /// True when no layer is flagged.
    pub ok: bool,
}

impl VerifyReport {
    pub fn flagged(&self) -> impl Iterator<Item = &LayerReport> {
        self.layers.iter().filter(|l| l.status == Status::Flagged)
    }
}

/// Checks a stored certificate against effective weights and bias. Returns
/// (max row residual, lambda sum, margin).
fn certificate_stats(lambda: &[f64], w_eff: &Tensor, b_eff: &[f64]) -> (f64, f64, f64) {
    let n = w_eff.shape()[1];
    let mut residual = 0.0f64;
    for j in 0..n {
        let s: f64 = lambda
            .iter()
            .enumerate()
            .map(|(i, &l)| l * w_eff.at(i, j))
            .sum();
        residual = residual.max(s.abs());
    }
    let sum: f64 = lambda.iter().sum();
    let margin: f64 = lambda.iter().zip(b_eff).map(|(l, b)| l * b).sum();
    (residual, sum, margin)
}

fn audit_certificate(
    index: usize,
    kind: &'static str,
    lambda: &[f64],
    w_eff: &Tensor,
    b_eff: &[f64],
    cutoff: f64,
    solve_lp: bool,
) -> Result<LayerReport> {
    let (residual, sum, margin) = certificate_stats(lambda, w_eff, b_eff);
    let mut problems = Vec::new();
    if lambda.iter().any(|&l| l < 0.0) {
        problems.push("negative certificate entry".to_string());
    }
    if (sum - 1.0).abs() > LAMBDA_SUM_TOL {
        problems.push(format!("certificate sums to {sum}"));
    }
    if residual > LAMBDA_RESIDUAL_TOL {
        problems.push(format!("weight residual {residual:.3e}"));
    }
    if margin <= cutoff {
        problems.push(format!("margin {margin} not above cutoff {cutoff}"));
    }

    let mut p_star = None;
    if solve_lp {
        let outcome = lp::min_max_margin(&lp::LpProblem::new(w_eff.clone(), b_eff.to_vec())?)?;
        match outcome.margin {
            Margin::Finite { p_star: p, .. } => {
                p_star = Some(p);
                // Weak duality: the certificate can never beat the optimum.
                if problems.is_empty() && margin > p + 1e-6 {
                    problems.push(format!(
                        "certificate margin {margin} exceeds solver optimum {p}"
                    ));
                }
            }
            Margin::UnboundedBelow => {
                // Cannot happen with a valid certificate; flag it.
                if problems.is_empty() {
                    problems.push("margin program unbounded below".to_string());
                }
            }
        }
    }

    let ok = problems.is_empty();
    Ok(LayerReport {
        index,
        kind,
        status: if ok { Status::Certified } else { Status::Flagged },
        p_star,
        margin: Some(margin),
        lambda_residual: Some(residual),
        detail: if ok {
            format!("certified active above {cutoff}")
        } else {
            problems.join("; ")
        },
    })
}

/// Audits every layer. `solve_lps` additionally runs the margin program on
/// each audited layer (dense layers always need it; for guaranteed layers it
/// is a cross-check).
pub fn verify_network(net: &Network, solve_lps: bool) -> Result<VerifyReport> {
    let mut layers = Vec::with_capacity(net.layers().len());
    for (index, layer) in net.layers().iter().enumerate() {
        let report = match layer {
            Layer::Dense(d) => {
                let followed_by_act = matches!(
                    net.layers().get(index + 1),
                    Some(Layer::Activation(_))
                );
                if !followed_by_act {
                    LayerReport {
                        index,
                        kind: "dense",
                        status: Status::Skipped,
                        p_star: None,
                        margin: None,
                        lambda_residual: None,
                        detail: "no activation follows; death does not apply".to_string(),
                    }
                } else {
                    let b = d
                        .bias
                        .as_ref()
                        .map(|t| t.data().to_vec())
                        .unwrap_or_else(|| vec![0.0; d.out_features()]);
                    let problem = lp::LpProblem::new(d.weight.clone(), b)?;
                    let outcome = lp::min_max_margin(&problem)?;
                    match outcome.margin {
                        Margin::Finite { p_star, x_star } => LayerReport {
                            index,
                            kind: "dense",
                            status: if p_star > 0.0 { Status::Certified } else { Status::Flagged },
                            p_star: Some(p_star),
                            margin: None,
                            lambda_residual: None,
                            detail: if p_star > 0.0 {
                                format!("every input keeps some unit above 0 (p* = {p_star:.6})")
                            } else {
                                format!(
                                    "input {x_star:?} drives every pre-activation to {p_star:.6}"
                                )
                            },
                        },
                        Margin::UnboundedBelow => LayerReport {
                            index,
                            kind: "dense",
                            status: Status::Flagged,
                            p_star: None,
                            margin: None,
                            lambda_residual: None,
                            detail: "pre-activation maximum is unbounded below".to_string(),
                        },
                    }
                }
            }
            Layer::Farkas(f) => audit_certificate(
                index,
                "guaranteed",
                f.lambda(),
                &f.effective_weights(),
                &f.effective_bias(),
                f.cutoff(),
                solve_lps,
            )?,
            Layer::Residual(r) => {
                let inner = audit_certificate(
                    index,
                    "residual_inner",
                    r.inner().lambda(),
                    &r.inner().effective_weights(),
                    &r.inner().effective_bias(),
                    r.inner().cutoff(),
                    solve_lps,
                )?;
                if inner.status == Status::Flagged {
                    LayerReport {
                        kind: "residual",
                        detail: format!("inner layer failed: {}", inner.detail),
                        ..inner
                    }
                } else {
                    LayerReport {
                        index,
                        kind: "residual",
                        status: Status::Conditional,
                        p_star: inner.p_star,
                        margin: Some(r.static_margin()),
                        lambda_residual: inner.lambda_residual,
                        detail: format!(
                            "inner layer certified; block bound is input-dependent \
                             (static part {:.6}, shifted by -lambda_m * agg(x))",
                            r.static_margin()
                        ),
                    }
                }
            }
            Layer::BatchNorm(_) => LayerReport {
                index,
                kind: "batchnorm",
                status: Status::Skipped,
                p_star: None,
                margin: None,
                lambda_residual: None,
                detail: "normalization only".to_string(),
            },
            Layer::Activation(_) => LayerReport {
                index,
                kind: "activation",
                status: Status::Skipped,
                p_star: None,
                margin: None,
                lambda_residual: None,
                detail: "audited with the preceding layer".to_string(),
            },
        };
        layers.push(report);
    }
    let ok = layers.iter().all(|l| l.status != Status::Flagged);
    Ok(VerifyReport { layers, ok })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::farkas::FarkasDenseLayer;
    use crate::net::{DenseLayer, InitScheme, LayerSpec, NetworkSpec};
    use crate::tensor::{ActKind, Aggregation};

    fn farkas_net(seed: u64) -> Network {
        let mut net = NetworkSpec::new(vec![LayerSpec::FarkasDense {
            input: 3,
            output: 4,
            agg: Aggregation::Mean,
            activation: ActKind::Relu,
            cutoff: 0.0,
            epsilon: 1e-6,
        }])
        .build()
        .unwrap();
        net.init(InitScheme::FanInUniform, seed);
        net
    }

    #[test]
    fn guaranteed_layer_certifies() {
        let report = verify_network(&farkas_net(2), true).unwrap();
        assert!(report.ok);
        assert_eq!(report.layers[0].status, Status::Certified);
        assert!(report.layers[0].lambda_residual.unwrap() <= LAMBDA_RESIDUAL_TOL);
        let margin = report.layers[0].margin.unwrap();
        let p_star = report.layers[0].p_star.unwrap();
        assert!(margin > 0.0);
        assert!(margin <= p_star + 1e-6, "margin {margin} vs p* {p_star}");
    }

    #[test]
    fn killable_dense_layer_is_flagged() {
        // Opposite rows bound the max below; the shared -1 bias sinks it.
        let net = Network::from_layers(vec![
            Layer::Dense(DenseLayer {
                weight: Tensor::matrix(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap(),
                bias: Some(Tensor::vector(vec![-1.0, -1.0])),
            }),
            Layer::Activation(ActKind::Relu),
        ]);
        let report = verify_network(&net, true).unwrap();
        assert!(!report.ok);
        assert_eq!(report.layers[0].status, Status::Flagged);
        assert!((report.layers[0].p_star.unwrap() + 1.0).abs() < 1e-8);
        assert_eq!(report.layers[1].status, Status::Skipped);
    }

    #[test]
    fn unbounded_dense_layer_is_flagged() {
        // Identity weights: both rows sink together along (-t, -t).
        let net = Network::from_layers(vec![
            Layer::Dense(DenseLayer {
                weight: Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
                bias: Some(Tensor::vector(vec![-1.0, -1.0])),
            }),
            Layer::Activation(ActKind::Relu),
        ]);
        let report = verify_network(&net, true).unwrap();
        assert!(!report.ok);
        assert_eq!(report.layers[0].status, Status::Flagged);
        assert!(report.layers[0].p_star.is_none());
        assert!(report.layers[0].detail.contains("unbounded"));
    }

    #[test]
    fn always_on_dense_layer_certifies() {
        // Opposite-sign rows with positive bias: max(x, -x) - 0.5 + 1 > 0.
        let net = Network::from_layers(vec![
            Layer::Dense(DenseLayer {
                weight: Tensor::matrix(&[vec![1.0], vec![-1.0]]).unwrap(),
                bias: Some(Tensor::vector(vec![1.0, 1.0])),
            }),
            Layer::Activation(ActKind::Relu),
        ]);
        let report = verify_network(&net, true).unwrap();
        assert!(report.ok);
        assert_eq!(report.layers[0].status, Status::Certified);
        assert!((report.layers[0].p_star.unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn dense_without_activation_is_skipped() {
        let net = Network::from_layers(vec![Layer::Dense(DenseLayer {
            weight: Tensor::matrix(&[vec![1.0, 0.0]]).unwrap(),
            bias: None,
        })]);
        let report = verify_network(&net, true).unwrap();
        assert!(report.ok);
        assert_eq!(report.layers[0].status, Status::Skipped);
    }

    #[test]
    fn tampered_certificate_is_flagged() {
        let layer = FarkasDenseLayer::from_parts(
            Tensor::matrix(&[vec![1.0, 2.0], vec![0.5, -0.5]]).unwrap(),
            Tensor::vector(vec![0.1, 0.2, 0.0]),
            vec![0.9, 0.05, 0.05],
            Aggregation::Sum,
            ActKind::Relu,
            0.0,
            1e-6,
        )
        .unwrap();
        let net = Network::from_layers(vec![Layer::Farkas(layer)]);
        let report = verify_network(&net, false).unwrap();
        assert!(!report.ok);
        assert!(report.layers[0].detail.contains("residual"));
    }

    #[test]
    fn residual_block_reports_conditional() {
        let mut net = NetworkSpec::new(vec![LayerSpec::FarkasResidual {
            input: 2,
            hidden: 3,
            agg: Aggregation::Sum,
            activation: ActKind::Relu,
            cutoff: 0.0,
            epsilon: 1e-6,
        }])
        .build()
        .unwrap();
        net.init(InitScheme::FanInUniform, 5);
        let report = verify_network(&net, true).unwrap();
        assert!(report.ok);
        assert_eq!(report.layers[0].status, Status::Conditional);
        assert!(report.layers[0].margin.unwrap() > 0.0);
    }
}
