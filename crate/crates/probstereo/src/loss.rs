//! The two-part training objective: a heteroscedastic regression term where
//! the predicted log variance both weights the residual and is penalised,
//! plus the KL divergence of all weight posteriors to the prior. Their sum
//! is the negative evidence lower bound being minimised.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::network::{BoundNet, StereoNet};
use crate::tensor::Tensor;
use crate::variational::{kl_to_prior, kl_to_prior_graph, PriorSpec};
use serde::{Deserialize, Serialize};

/// Norm applied to the disparity residual inside the regression term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualNorm {
    L1,
    L2,
}

impl Default for ResidualNorm {
    fn default() -> Self {
        ResidualNorm::L1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub regression: f64,
    pub kl: f64,
    pub kl_weight: f64,
    pub total: f64,
}

fn masked_weights(mask: &Tensor) -> Result<(Tensor, usize)> {
    let n = mask.count_positive();
    if n == 0 {
        return Err(Error::Data("no valid ground truth pixels".into()));
    }
    Ok((mask.map(|m| if m > 0.0 { 1.0 / n as f64 } else { 0.0 }), n))
}

/// `(1/N) Σ_i [ ½·exp(−s_i)·‖d_i − d̂_i‖ + ½·s_i ]` over valid pixels.
pub fn regression_loss(
    gt: &Tensor,
    d_hat: &Tensor,
    s: &Tensor,
    mask: &Tensor,
    norm: ResidualNorm,
) -> Result<f64> {
    assert_eq!(gt.shape(), d_hat.shape(), "regression_loss shapes");
    assert_eq!(gt.shape(), s.shape(), "regression_loss shapes");
    assert_eq!(gt.shape(), mask.shape(), "regression_loss shapes");
    let (_, n) = masked_weights(mask)?;
    let mut acc = 0.0;
    for i in 0..gt.len() {
        if mask.data()[i] > 0.0 {
            let r = match norm {
                ResidualNorm::L1 => (gt.data()[i] - d_hat.data()[i]).abs(),
                ResidualNorm::L2 => {
                    let d = gt.data()[i] - d_hat.data()[i];
                    d * d
                }
            };
            let si = s.data()[i];
            acc += 0.5 * (-si).exp() * r + 0.5 * si;
        }
    }
    Ok(acc / n as f64)
}

/// Differentiable version of [`regression_loss`]; `gt` and `mask` enter as
/// constants, `d_hat` and `s` are graph nodes.
pub fn regression_loss_graph(
    g: &mut Graph,
    gt: &Tensor,
    d_hat: NodeId,
    s: NodeId,
    mask: &Tensor,
    norm: ResidualNorm,
) -> Result<NodeId> {
    let (weights, _) = masked_weights(mask)?;
    let gt_leaf = g.leaf(gt.clone());
    let residual = g.sub(gt_leaf, d_hat);
    let r = match norm {
        ResidualNorm::L1 => g.abs(residual),
        ResidualNorm::L2 => g.mul(residual, residual),
    };
    let neg_s = g.neg(s);
    let inv_var = g.exp(neg_s);
    let weighted = g.mul(inv_var, r);
    let half_term = g.mul_scalar(weighted, 0.5);
    let half_s = g.mul_scalar(s, 0.5);
    let per_pixel = g.add(half_term, half_s);
    Ok(g.weighted_sum(per_pixel, weights))
}

/// Sum of the closed-form KL over every variational layer; deterministic
/// layers contribute nothing. Depends only on the posterior parameters, not
/// on forward-pass randomness.
pub fn kl_total(net: &StereoNet) -> f64 {
    let prior = net.config.prior;
    net.posteriors()
        .iter()
        .map(|(_, p)| kl_to_prior(p, &prior))
        .sum()
}

/// Differentiable KL total over the bound posteriors of a forward graph.
pub fn kl_total_graph(g: &mut Graph, bound: &BoundNet, prior: &PriorSpec) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for post in &bound.posteriors {
        let kl = kl_to_prior_graph(g, *post, prior);
        acc = Some(match acc {
            None => kl,
            Some(a) => g.add(a, kl),
        });
    }
    acc.expect("network has at least one variational layer")
}

/// Plain-value total loss for logging and tests.
pub fn total_loss(
    gt: &Tensor,
    d_hat: &Tensor,
    s: &Tensor,
    mask: &Tensor,
    net: &StereoNet,
    kl_weight: f64,
    norm: ResidualNorm,
) -> Result<LossBreakdown> {
    let regression = regression_loss(gt, d_hat, s, mask, norm)?;
    let kl = kl_total(net);
    Ok(LossBreakdown {
        regression,
        kl,
        kl_weight,
        total: regression + kl_weight * kl,
    })
}

pub struct TotalLossNodes {
    pub total: NodeId,
    pub regression: NodeId,
    pub kl: NodeId,
}

/// Differentiable total loss `L_reg + kl_weight · KL` on an existing forward
/// graph.
pub fn total_loss_graph(
    g: &mut Graph,
    gt: &Tensor,
    d_hat: NodeId,
    s: NodeId,
    mask: &Tensor,
    bound: &BoundNet,
    prior: &PriorSpec,
    kl_weight: f64,
    norm: ResidualNorm,
) -> Result<TotalLossNodes> {
    let regression = regression_loss_graph(g, gt, d_hat, s, mask, norm)?;
    let kl = kl_total_graph(g, bound, prior);
    let weighted_kl = g.mul_scalar(kl, kl_weight);
    let total = g.add(regression, weighted_kl);
    Ok(TotalLossNodes {
        total,
        regression,
        kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ones(shape: &[usize]) -> Tensor {
        Tensor::filled(shape, 1.0)
    }

    #[test]
    fn perfect_prediction_with_zero_logvar_is_zero_loss() {
        let gt = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let s = Tensor::zeros(&[2, 2]);
        let l = regression_loss(&gt, &gt, &s, &ones(&[2, 2]), ResidualNorm::L1).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn single_pixel_values_match_hand_evaluation() {
        let gt = Tensor::new(vec![1, 1], vec![5.0]);
        let dh = Tensor::new(vec![1, 1], vec![3.0]);
        let mask = ones(&[1, 1]);
        // s = 0: 0.5*1*2 + 0 = 1.0
        let l0 = regression_loss(&gt, &dh, &Tensor::zeros(&[1, 1]), &mask, ResidualNorm::L1).unwrap();
        assert!((l0 - 1.0).abs() < 1e-12);
        // s = ln 4: 0.5*(1/4)*2 + 0.5*ln4 = 0.25 + 0.6931 = 0.9431
        let s = Tensor::new(vec![1, 1], vec![4.0_f64.ln()]);
        let l1 = regression_loss(&gt, &dh, &s, &mask, ResidualNorm::L1).unwrap();
        assert!((l1 - 0.943_147_180_559_945_3).abs() < 1e-10, "{l1}");
    }

    #[test]
    fn empty_mask_is_an_error() {
        let gt = Tensor::zeros(&[2, 2]);
        let err = regression_loss(&gt, &gt, &gt, &Tensor::zeros(&[2, 2]), ResidualNorm::L1).unwrap_err();
        assert!(err.to_string().contains("no valid ground truth"));
    }

    #[test]
    fn invalid_pixels_do_not_contribute() {
        let gt = Tensor::new(vec![1, 2], vec![5.0, 100.0]);
        let dh = Tensor::new(vec![1, 2], vec![3.0, 0.0]);
        let s = Tensor::zeros(&[1, 2]);
        let mask = Tensor::new(vec![1, 2], vec![1.0, 0.0]);
        let l = regression_loss(&gt, &dh, &s, &mask, ResidualNorm::L1).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logvar_gradient_at_perfect_prediction_is_half() {
        // ∂L/∂s_i at d = d̂ and s = 0 equals 1/(2N) per valid pixel.
        let gt = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mask = ones(&[2, 2]);
        let mut g = Graph::new();
        let dh = g.leaf(gt.clone());
        let s = g.leaf(Tensor::zeros(&[2, 2]));
        let loss = regression_loss_graph(&mut g, &gt, dh, s, &mask, ResidualNorm::L1).unwrap();
        let grads = g.backward(loss);
        let gs = grads.get(s).unwrap();
        for &v in gs.data() {
            assert!((v - 0.5 / 4.0).abs() < 1e-12);
        }
        // finite-difference confirmation on one element
        let eval = |delta: f64| {
            let mut sv = Tensor::zeros(&[2, 2]);
            sv.data_mut()[0] += delta;
            regression_loss(&gt, &gt, &sv, &mask, ResidualNorm::L1).unwrap()
        };
        let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
        assert!((fd - 0.125).abs() < 1e-6);
    }

    #[test]
    fn optimal_logvar_equals_log_residual() {
        // minimising over s for fixed residual r: s* = ln r
        for &r in &[0.5f64, 1.0, 2.0, 7.5] {
            let gt = Tensor::new(vec![1, 1], vec![r]);
            let dh = Tensor::zeros(&[1, 1]);
            let mask = ones(&[1, 1]);
            let mut best = (f64::INFINITY, f64::NAN);
            let mut sv = r.ln() - 5.0;
            while sv <= r.ln() + 5.0 {
                let s = Tensor::new(vec![1, 1], vec![sv]);
                let l = regression_loss(&gt, &dh, &s, &mask, ResidualNorm::L1).unwrap();
                if l < best.0 {
                    best = (l, sv);
                }
                sv += 1e-3;
            }
            assert!((best.1 - r.ln()).abs() <= 1.5e-3, "r={r}: argmin {} vs {}", best.1, r.ln());
        }
    }

    #[test]
    fn kl_total_over_model_and_invariance_to_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = StereoNet::new(NetworkConfig::tiny(), &mut rng).unwrap();
        let k1 = kl_total(&net);
        assert!(k1 > 0.0, "posterior stddev 1e-2 against N(0,1) has positive KL");
        // no forward randomness involved: repeated evaluation is identical
        assert_eq!(k1, kl_total(&net));

        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let node = kl_total_graph(&mut g, &bound, &net.config.prior);
        assert!((g.value(node).item() - k1).abs() < 1e-9 * (1.0 + k1));
    }

    #[test]
    fn total_loss_arithmetic() {
        let gt = Tensor::new(vec![1, 1], vec![5.0]);
        let dh = Tensor::new(vec![1, 1], vec![3.0]);
        let s = Tensor::zeros(&[1, 1]);
        let mask = ones(&[1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = StereoNet::new(NetworkConfig::tiny(), &mut rng).unwrap();

        // kl_weight 0: total is exactly the regression term
        let b0 = total_loss(&gt, &dh, &s, &mask, &net, 0.0, ResidualNorm::L1).unwrap();
        assert_eq!(b0.total, b0.regression);

        // regression 1.0 and kl contribution scaled by 1/1000
        let b1 = total_loss(&gt, &dh, &s, &mask, &net, 1e-3, ResidualNorm::L1).unwrap();
        assert!((b1.total - (b1.regression + 1e-3 * b1.kl)).abs() < 1e-15);
        assert!((b1.regression - 1.0).abs() < 1e-12);
        assert!(b1.kl >= 0.0);
    }
}
