//! Monte-Carlo prediction: repeat stochastic forward passes, average the
//! disparity maps and decompose the predictive variance into an epistemic
//! part (variance of the sampled disparities) and an aleatoric part (average
//! of the predicted variances).

use crate::data::StereoSample;
use crate::error::{Error, Result};
use crate::network::StereoNet;
use crate::tensor::Tensor;
use crate::variational::SamplingMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The number of stochastic passes used when none is specified; beyond this
/// the run-to-run spread of the averaged map improves only marginally.
pub const DEFAULT_PREDICTION_COUNT: usize = 50;

/// Per-pixel mean disparity with the variance decomposition. All maps are
/// `[H, W]`; variances are px².
#[derive(Debug, Clone, PartialEq)]
pub struct UncertainDisparity {
    pub mean_disparity: Tensor,
    pub epistemic_var: Tensor,
    pub aleatoric_var: Tensor,
    /// Elementwise `epistemic_var + aleatoric_var`, stored as the exact sum.
    pub combined_var: Tensor,
    pub t: usize,
}

/// Output of one stochastic forward pass.
#[derive(Debug, Clone)]
pub struct PassOutput {
    pub disparity: Tensor,
    pub log_variance: Tensor,
}

/// Aggregate `T` stored passes:
/// mean `d̄ = (1/T) Σ d̂_t`, epistemic `(1/T) Σ (d̂_t − d̄)²` (the biased 1/T
/// convention), aleatoric `(1/T) Σ exp(s_t)`.
pub fn aggregate_passes(passes: &[PassOutput]) -> Result<UncertainDisparity> {
    if passes.is_empty() {
        return Err(Error::Parameter("prediction count T must be >= 1".into()));
    }
    let t = passes.len();
    let shape = passes[0].disparity.shape().to_vec();
    let n = passes[0].disparity.len();

    let mut mean = Tensor::zeros(&shape);
    for p in passes {
        assert_eq!(p.disparity.shape(), &shape[..], "pass shapes differ");
        for i in 0..n {
            mean.data_mut()[i] += p.disparity.data()[i];
        }
    }
    mean.scale_assign(1.0 / t as f64);

    let mut epistemic = Tensor::zeros(&shape);
    let mut aleatoric = Tensor::zeros(&shape);
    for p in passes {
        for i in 0..n {
            let d = p.disparity.data()[i] - mean.data()[i];
            epistemic.data_mut()[i] += d * d;
            aleatoric.data_mut()[i] += p.log_variance.data()[i].exp();
        }
    }
    epistemic.scale_assign(1.0 / t as f64);
    aleatoric.scale_assign(1.0 / t as f64);
    let combined = epistemic.zip_map(&aleatoric, |e, a| e + a);

    Ok(UncertainDisparity {
        mean_disparity: mean,
        epistemic_var: epistemic,
        aleatoric_var: aleatoric,
        combined_var: combined,
        t,
    })
}

/// Derive the per-pass random stream for pass `t` of a prediction seeded
/// with `seed`: same ChaCha key, distinct stream.
pub fn pass_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64 + 1);
    rng
}

/// Repeat the stochastic forward pass `t` times with independently derived
/// weight draws and aggregate. Deterministic for a fixed `seed`.
pub fn mc_predict(
    net: &StereoNet,
    sample: &StereoSample,
    t: usize,
    seed: u64,
) -> Result<UncertainDisparity> {
    if t < 1 {
        return Err(Error::Parameter("prediction count T must be >= 1".into()));
    }
    let mut passes = Vec::with_capacity(t);
    for i in 0..t {
        let mut rng = pass_rng(seed, i);
        let (d, s) = net.predict_once(sample, SamplingMode::Stochastic, &mut rng)?;
        passes.push(PassOutput {
            disparity: d,
            log_variance: s,
        });
    }
    aggregate_passes(&passes)
}

/// Elementwise square roots of the three variance maps, in pixels:
/// (aleatoric, epistemic, combined).
pub fn uncertainty_stddev_maps(u: &UncertainDisparity) -> (Tensor, Tensor, Tensor) {
    (
        u.aleatoric_var.map(f64::sqrt),
        u.epistemic_var.map(f64::sqrt),
        u.combined_var.map(f64::sqrt),
    )
}

/// One row of the prediction-count study: for each `T`, the pixel-averaged
/// standard deviation of the averaged disparity map across `repeats`
/// independent estimations.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub t: usize,
    pub mean_pixel_stddev: f64,
}

pub fn convergence_analysis(
    net: &StereoNet,
    samples: &[StereoSample],
    t_values: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<ConvergenceRow>> {
    if t_values.is_empty() {
        return Err(Error::Parameter("t_values must not be empty".into()));
    }
    if repeats < 2 {
        return Err(Error::Parameter("repeats must be >= 2".into()));
    }
    if samples.is_empty() {
        return Err(Error::Parameter("at least one sample required".into()));
    }

    let mut rows = Vec::with_capacity(t_values.len());
    for &t in t_values {
        let mut acc = 0.0;
        for (si, sample) in samples.iter().enumerate() {
            let mut means: Vec<Tensor> = Vec::with_capacity(repeats);
            for rep in 0..repeats {
                // distinct seed per (sample, repeat) cell
                let mut mix = ChaCha8Rng::seed_from_u64(seed);
                mix.set_stream(((si as u64) << 32) | rep as u64);
                let rep_seed: u64 = mix.gen();
                means.push(mc_predict(net, sample, t, rep_seed)?.mean_disparity);
            }
            let n = means[0].len();
            let mut pixel_std_sum = 0.0;
            for i in 0..n {
                let m = means.iter().map(|t| t.data()[i]).sum::<f64>() / repeats as f64;
                let var = means
                    .iter()
                    .map(|t| {
                        let d = t.data()[i] - m;
                        d * d
                    })
                    .sum::<f64>()
                    / repeats as f64;
                pixel_std_sum += var.sqrt();
            }
            acc += pixel_std_sum / n as f64;
        }
        rows.push(ConvergenceRow {
            t,
            mean_pixel_stddev: acc / samples.len() as f64,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    fn tiny_sample() -> StereoSample {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        crate::data::synth_stereogram(
            &crate::data::SynthParams {
                width: 8,
                height: 8,
                max_disparity: 3,
                num_shapes: 1,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap()
    }

    fn tiny_net(seed: u64) -> StereoNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StereoNet::new(NetworkConfig::tiny(), &mut rng).unwrap()
    }

    #[test]
    fn aggregation_matches_hand_computed_example() {
        // two passes with d̂ = {4, 6} and σ̂² = {1, 3} at the single pixel:
        // d̄ = 5, epistemic = 1, aleatoric = 2, combined = 3
        let passes = vec![
            PassOutput {
                disparity: Tensor::new(vec![1, 1], vec![4.0]),
                log_variance: Tensor::new(vec![1, 1], vec![1.0_f64.ln()]),
            },
            PassOutput {
                disparity: Tensor::new(vec![1, 1], vec![6.0]),
                log_variance: Tensor::new(vec![1, 1], vec![3.0_f64.ln()]),
            },
        ];
        let u = aggregate_passes(&passes).unwrap();
        assert!((u.mean_disparity.item() - 5.0).abs() < 1e-12);
        assert!((u.epistemic_var.item() - 1.0).abs() < 1e-12);
        assert!((u.aleatoric_var.item() - 2.0).abs() < 1e-12);
        assert!((u.combined_var.item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_matches_brute_force_on_random_stacks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let t = rng.gen_range(1..8);
            let passes: Vec<PassOutput> = (0..t)
                .map(|_| PassOutput {
                    disparity: Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(0.0..16.0)).collect()),
                    log_variance: Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()),
                })
                .collect();
            let u = aggregate_passes(&passes).unwrap();
            for i in 0..12 {
                let ds: Vec<f64> = passes.iter().map(|p| p.disparity.data()[i]).collect();
                let mean = ds.iter().sum::<f64>() / t as f64;
                let epi = ds.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / t as f64;
                let alea = passes.iter().map(|p| p.log_variance.data()[i].exp()).sum::<f64>() / t as f64;
                assert!((u.mean_disparity.data()[i] - mean).abs() < 1e-9);
                assert!((u.epistemic_var.data()[i] - epi).abs() < 1e-9);
                assert!((u.aleatoric_var.data()[i] - alea).abs() < 1e-9);
                // identity, not approximation
                assert_eq!(
                    u.combined_var.data()[i],
                    u.epistemic_var.data()[i] + u.aleatoric_var.data()[i]
                );
            }
        }
    }

    #[test]
    fn t_below_one_is_a_parameter_error() {
        let net = tiny_net(1);
        assert!(mc_predict(&net, &tiny_sample(), 0, 7).is_err());
    }

    #[test]
    fn single_pass_has_zero_epistemic() {
        let net = tiny_net(2);
        let u = mc_predict(&net, &tiny_sample(), 1, 7).unwrap();
        assert_eq!(u.epistemic_var.sum(), 0.0);
        assert_eq!(u.combined_var, u.aleatoric_var);
    }

    #[test]
    fn frozen_posteriors_make_passes_identical() {
        let mut net = tiny_net(3);
        net.freeze_posteriors();
        let u = mc_predict(&net, &tiny_sample(), 10, 99).unwrap();
        assert!(u.epistemic_var.max() <= 1e-10, "max epistemic {}", u.epistemic_var.max());
    }

    #[test]
    fn mc_predict_is_seed_deterministic() {
        let net = tiny_net(4);
        let s = tiny_sample();
        let a = mc_predict(&net, &s, 5, 1234).unwrap();
        let b = mc_predict(&net, &s, 5, 1234).unwrap();
        assert_eq!(a, b);
        let c = mc_predict(&net, &s, 5, 1235).unwrap();
        assert_ne!(a.mean_disparity, c.mean_disparity);
    }

    #[test]
    fn stddev_maps_are_square_roots() {
        let u = UncertainDisparity {
            mean_disparity: Tensor::zeros(&[1, 3]),
            epistemic_var: Tensor::new(vec![1, 3], vec![1.0, 4.0, 0.0]),
            aleatoric_var: Tensor::new(vec![1, 3], vec![4.0, 9.0, 4.41]),
            combined_var: Tensor::new(vec![1, 3], vec![5.0, 13.0, 4.41]),
            t: 2,
        };
        let (alea, epi, comb) = uncertainty_stddev_maps(&u);
        assert_eq!(epi.data(), &[1.0, 2.0, 0.0]);
        assert!((alea.data()[2] - 2.1).abs() < 1e-12);
        assert!((comb.data()[0] - 5.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn averaged_runs_vary_less_than_single_passes() {
        // law of large numbers: two independent T=50 averages differ far
        // less than two single passes
        let net = tiny_net(9);
        let s = tiny_sample();
        let mean_abs_diff = |a: &Tensor, b: &Tensor| {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
        };
        let d1 = mc_predict(&net, &s, 50, 1).unwrap().mean_disparity;
        let d2 = mc_predict(&net, &s, 50, 2).unwrap().mean_disparity;
        let s1 = net
            .predict_once(&s, crate::variational::SamplingMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(100))
            .unwrap()
            .0;
        let s2 = net
            .predict_once(&s, crate::variational::SamplingMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(101))
            .unwrap()
            .0;
        let ratio = mean_abs_diff(&d1, &d2) / mean_abs_diff(&s1, &s2);
        assert!(ratio < 0.5, "T=50 averages vary {ratio:.3}x the single-pass spread");
    }

    #[test]
    fn convergence_rejects_bad_parameters() {
        let net = tiny_net(5);
        let s = [tiny_sample()];
        assert!(convergence_analysis(&net, &s, &[], 3, 1).is_err());
        assert!(convergence_analysis(&net, &s, &[1, 2], 1, 1).is_err());
    }

    #[test]
    fn deterministic_model_has_zero_convergence_stddev() {
        let mut net = tiny_net(6);
        net.freeze_posteriors();
        let s = [tiny_sample()];
        let rows = convergence_analysis(&net, &s, &[1, 4], 3, 2).unwrap();
        for row in rows {
            assert!(row.mean_pixel_stddev <= 1e-12, "T={} std {}", row.t, row.mean_pixel_stddev);
        }
    }
}
