//! Convolution primitives whose weights are random variables with learned
//! Gaussian posteriors, plus the deterministic transposed convolution and the
//! closed-form KL divergence of the posteriors to the prior.
//!
//! The posterior over each weight is `N(mean, softplus(raw_scale)^2)`; the
//! softplus keeps the standard deviation positive with smooth gradients.
//! Sampling uses the reparameterisation `w = mean + softplus(raw_scale) ⊙ ε`,
//! either with one weight draw per call (`NaiveReparam`) or with shared mean
//! weights plus sign-flipped perturbations (`Flipout`).

use crate::conv::ConvGeom;
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::{softplus, softplus_inv, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Per-layer mean / raw-scale arrays defining the weight distribution.
/// `stddev = softplus(raw_scale) > 0` elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Tensor,
    pub raw_scale: Tensor,
}

impl GaussianPosterior {
    pub fn new(mean: Tensor, raw_scale: Tensor) -> Self {
        assert_eq!(mean.shape(), raw_scale.shape(), "posterior parameter shapes differ");
        GaussianPosterior { mean, raw_scale }
    }

    /// Posterior with all means at `mean_value` and stddev `stddev` everywhere.
    pub fn constant(shape: &[usize], mean_value: f64, stddev: f64) -> Self {
        GaussianPosterior {
            mean: Tensor::filled(shape, mean_value),
            raw_scale: Tensor::filled(shape, softplus_inv(stddev)),
        }
    }

    pub fn stddev(&self) -> Tensor {
        self.raw_scale.map(softplus)
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    pub fn num_weights(&self) -> usize {
        self.mean.len()
    }

    /// Freeze the stddev to (numerically) zero, keeping the means.
    pub fn freeze(&mut self) {
        self.raw_scale = Tensor::filled(self.raw_scale.shape(), -40.0);
    }
}

/// The prior `p` each posterior is regularised towards: a fully factorised
/// normal, `N(0, 1)` by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub mean: f64,
    pub stddev: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec { mean: 0.0, stddev: 1.0 }
    }
}

impl PriorSpec {
    pub fn new(mean: f64, stddev: f64) -> Self {
        assert!(stddev > 0.0, "prior stddev must be positive");
        PriorSpec { mean, stddev }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    Stochastic,
    MeanOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbationScheme {
    /// One weight draw for the whole call.
    NaiveReparam,
    /// Shared mean weights plus a sign-flipped noise branch.
    Flipout,
}

/// Geometry plus sampling behaviour of one convolution layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    /// Spatial kernel dims; 2 entries for 2D layers, 3 for volume layers.
    pub kernel: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    /// Transposed-conv output padding (unused by forward convolutions).
    pub out_padding: Vec<usize>,
    pub sampling_mode: SamplingMode,
    pub perturbation_scheme: PerturbationScheme,
}

impl LayerConfig {
    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerConfig {
            kernel: vec![kernel, kernel],
            in_channels,
            out_channels,
            stride: vec![stride, stride],
            padding: vec![kernel / 2, kernel / 2],
            out_padding: vec![0, 0],
            sampling_mode: SamplingMode::Stochastic,
            perturbation_scheme: PerturbationScheme::NaiveReparam,
        }
    }

    pub fn conv3d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerConfig {
            kernel: vec![kernel, kernel, kernel],
            in_channels,
            out_channels,
            stride: vec![stride, stride, stride],
            padding: vec![kernel / 2; 3],
            out_padding: vec![0; 3],
            sampling_mode: SamplingMode::Stochastic,
            perturbation_scheme: PerturbationScheme::NaiveReparam,
        }
    }

    /// Stride-2 upsampling transposed 3D convolution that exactly doubles
    /// each spatial dim for odd kernels.
    pub fn conv_transpose3d_x2(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerConfig {
            kernel: vec![kernel, kernel, kernel],
            in_channels,
            out_channels,
            stride: vec![2, 2, 2],
            padding: vec![kernel / 2; 3],
            out_padding: vec![1; 3],
            sampling_mode: SamplingMode::MeanOnly,
            perturbation_scheme: PerturbationScheme::NaiveReparam,
        }
    }

    pub fn spatial_rank(&self) -> usize {
        self.kernel.len()
    }

    /// Full weight tensor shape for a forward convolution.
    pub fn conv_weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend_from_slice(&self.kernel);
        s
    }

    /// Full weight tensor shape for a transposed convolution.
    pub fn convt_weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.in_channels, self.out_channels];
        s.extend_from_slice(&self.kernel);
        s
    }

    pub fn geom3d(&self) -> ConvGeom {
        assert_eq!(self.kernel.len(), 3);
        ConvGeom::new(
            [self.kernel[0], self.kernel[1], self.kernel[2]],
            [self.stride[0], self.stride[1], self.stride[2]],
            [self.padding[0], self.padding[1], self.padding[2]],
        )
        .with_out_pad([self.out_padding[0], self.out_padding[1], self.out_padding[2]])
    }
}

/// Draw standard-normal noise with the same shape as `like`.
pub fn standard_normal_like(like: &Tensor, rng: &mut impl Rng) -> Tensor {
    let data: Vec<f64> = (0..like.len()).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(like.shape().to_vec(), data)
}

/// `mean + softplus(raw_scale) ⊙ ε` with ε i.i.d. standard normal.
pub fn sample_weights(posterior: &GaussianPosterior, rng: &mut impl Rng) -> Tensor {
    let eps = standard_normal_like(&posterior.mean, rng);
    let std = posterior.stddev();
    let mut w = posterior.mean.clone();
    for i in 0..w.len() {
        w.data_mut()[i] += std.data()[i] * eps.data()[i];
    }
    w
}

/// Closed-form KL divergence of the factorised Gaussian posterior to the
/// prior, summed over all weights:
/// `log(σ_p/σ_q) + (σ_q² + (μ_q − μ_p)²) / (2σ_p²) − 1/2` per weight.
pub fn kl_to_prior(posterior: &GaussianPosterior, prior: &PriorSpec) -> f64 {
    let mut total = 0.0;
    for i in 0..posterior.mean.len() {
        let mu = posterior.mean.data()[i];
        let sigma = softplus(posterior.raw_scale.data()[i]);
        let dm = mu - prior.mean;
        total += (prior.stddev / sigma).ln()
            + (sigma * sigma + dm * dm) / (2.0 * prior.stddev * prior.stddev)
            - 0.5;
    }
    total
}

/// Graph nodes bound to one posterior's parameters during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BoundPosterior {
    pub mean: NodeId,
    pub raw_scale: NodeId,
}

/// Differentiable KL-to-prior of one bound posterior; returns a scalar node.
pub fn kl_to_prior_graph(g: &mut Graph, bound: BoundPosterior, prior: &PriorSpec) -> NodeId {
    let sigma = g.softplus(bound.raw_scale);
    let ln_sigma = g.ln(sigma);
    let sq_sigma = g.mul(sigma, sigma);
    let centered = g.add_scalar(bound.mean, -prior.mean);
    let sq_mean = g.mul(centered, centered);
    let quad = g.add(sq_sigma, sq_mean);
    let scaled = g.mul_scalar(quad, 0.5 / (prior.stddev * prior.stddev));
    let neg_ln = g.neg(ln_sigma);
    let a = g.add(scaled, neg_ln);
    let b = g.add_scalar(a, prior.stddev.ln() - 0.5);
    g.sum(b)
}

/// Build the sampled-weight node `mean + softplus(raw_scale) ⊙ ε` on the
/// graph; ε is a constant drawn from `rng`, so the node is differentiable
/// w.r.t. both posterior parameter leaves.
pub fn sampled_weight_node(g: &mut Graph, bound: BoundPosterior, rng: &mut impl Rng) -> NodeId {
    let eps = standard_normal_like(g.value(bound.mean), rng);
    let eps_leaf = g.leaf(eps);
    let std = g.softplus(bound.raw_scale);
    let noise = g.mul(std, eps_leaf);
    g.add(bound.mean, noise)
}

/// Build the effective weight node for one forward pass of a layer.
/// `MeanOnly` uses the posterior mean and consumes no randomness;
/// `NaiveReparam` draws one weight set; `Flipout` perturbs the shared mean
/// by `softplus(ρ) ⊙ ε` with Rademacher sign flips over the output/input
/// channel axes (equivalent to `r ⊙ conv(s ⊙ x, Δ)` by linearity, expressed
/// as a single weight tensor so one draw can feed several convolutions).
pub fn effective_weight_node(
    g: &mut Graph,
    bound: BoundPosterior,
    cfg: &LayerConfig,
    mode: SamplingMode,
    rng: &mut impl Rng,
) -> NodeId {
    match mode {
        SamplingMode::MeanOnly => bound.mean,
        SamplingMode::Stochastic => match cfg.perturbation_scheme {
            PerturbationScheme::NaiveReparam => sampled_weight_node(g, bound, rng),
            PerturbationScheme::Flipout => {
                let eps = standard_normal_like(g.value(bound.mean), rng);
                let s_signs = rademacher(cfg.in_channels, rng);
                let r_signs = rademacher(cfg.out_channels, rng);
                // signs[o, c, ...] = r_o * s_c, folded into the noise draw
                let shape = g.value(bound.mean).shape().to_vec();
                let inner: usize = shape[2..].iter().product();
                let mut signed = eps;
                for o in 0..cfg.out_channels {
                    for c in 0..cfg.in_channels {
                        let f = r_signs.data()[o] * s_signs.data()[c];
                        let base = (o * cfg.in_channels + c) * inner;
                        for v in &mut signed.data_mut()[base..base + inner] {
                            *v *= f;
                        }
                    }
                }
                let eps_leaf = g.leaf(signed);
                let std = g.softplus(bound.raw_scale);
                let noise = g.mul(std, eps_leaf);
                g.add(bound.mean, noise)
            }
        },
    }
}

/// Convolution with an already-drawn weight node; `input` is `[C,H,W]` for
/// 2D layers or `[C,D,H,W]` for 3D layers.
pub fn conv_with_weights(
    g: &mut Graph,
    name: &str,
    input: NodeId,
    weights: NodeId,
    cfg: &LayerConfig,
) -> Result<NodeId> {
    if cfg.spatial_rank() == 2 {
        g.conv2d(name, input, weights, [cfg.stride[0], cfg.stride[1]], [cfg.padding[0], cfg.padding[1]])
    } else {
        g.conv3d(name, input, weights, cfg.geom3d())
    }
}

/// Variational convolution: draw weights per `cfg.sampling_mode` (one weight
/// set for the whole call) and convolve. Both sampling schemes produce
/// `conv(input, mean)` in expectation.
pub fn conv_variational(
    g: &mut Graph,
    name: &str,
    input: NodeId,
    bound: BoundPosterior,
    cfg: &LayerConfig,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let w = effective_weight_node(g, bound, cfg, cfg.sampling_mode, rng);
    conv_with_weights(g, name, input, w, cfg)
}

fn rademacher(n: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::new(
        vec![n],
        (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect(),
    )
}

/// Deterministic transposed 3D convolution with ordinary point-estimate
/// weights (`[C_in, C_out, kd, kh, kw]` layout).
pub fn conv_transposed_deterministic(
    g: &mut Graph,
    name: &str,
    input: NodeId,
    weight: NodeId,
    cfg: &LayerConfig,
) -> Result<NodeId> {
    g.conv_transpose3d(name, input, weight, cfg.geom3d())
}

/// Glorot-uniform initialisation for a convolution weight of the given shape
/// (`[out, in, k...]` or `[in, out, k...]`; fan counts are symmetric).
pub fn glorot_uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let receptive: usize = shape[2..].iter().product();
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Initial raw scale chosen so the posterior stddev starts at `stddev`.
pub fn initial_raw_scale(shape: &[usize], stddev: f64) -> Tensor {
    Tensor::filled(shape, softplus_inv(stddev))
}
