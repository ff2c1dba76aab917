//! Training loop: per step one random crop, one stochastic forward pass
//! (a single weight draw), the heteroscedastic loss plus weighted KL, and an
//! RMSProp update. Fully deterministic for a fixed master seed.

use crate::checkpoint::{save_checkpoint, OptimizerMeta};
use crate::data::{random_crop, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::inference::mc_predict;
use crate::loss::{total_loss_graph, ResidualNorm};
use crate::metrics::{accumulate, MetricsAccumulator, MetricsReport};
use crate::network::{NetworkConfig, StereoNet};
use crate::tensor::Tensor;
use crate::variational::SamplingMode;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    /// Held-out split evaluated at checkpoints and after training.
    pub val_dataset: Option<DatasetSpec>,
    pub network: NetworkConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    /// None selects the minibatch ELBO scaling 1 / (training samples).
    pub kl_weight: Option<f64>,
    pub residual_norm: ResidualNorm,
    pub seed: u64,
    pub crop_width: usize,
    pub crop_height: usize,
    pub checkpoint_path: PathBuf,
    /// Save (and evaluate, if a val set exists) every this many epochs;
    /// 0 saves only at the end.
    pub eval_cadence_epochs: usize,
    /// Monte-Carlo passes used for validation metrics.
    pub eval_prediction_count: usize,
    pub loss_log_path: Option<PathBuf>,
    /// Optional hard cap on optimizer steps (pilot runs, tests).
    pub max_steps: Option<usize>,
    /// Forward-sampling mode during training; `MeanOnly` gives the
    /// deterministic degeneration of the probabilistic net.
    pub train_mode: SamplingMode,
}

impl TrainConfig {
    pub fn new(dataset: DatasetSpec, network: NetworkConfig, checkpoint_path: PathBuf) -> Self {
        TrainConfig {
            dataset,
            val_dataset: None,
            network,
            epochs: 12,
            batch_size: 1,
            learning_rate: 1e-3,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            kl_weight: None,
            residual_norm: ResidualNorm::L1,
            seed: 0,
            crop_width: 256,
            crop_height: 128,
            checkpoint_path,
            eval_cadence_epochs: 0,
            eval_prediction_count: crate::inference::DEFAULT_PREDICTION_COUNT,
            loss_log_path: None,
            max_steps: None,
            train_mode: SamplingMode::Stochastic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            return Err(Error::Config("rmsprop decay must lie in [0, 1)".into()));
        }
        self.network.validate()
    }
}

/// RMSProp with the conventional square-gradient accumulator:
/// `v ← γ·v + (1−γ)·g²`, `θ ← θ − lr·g / (√v + ε)`.
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    state: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(learning_rate: f64, decay: f64, epsilon: f64) -> Self {
        RmsProp {
            learning_rate,
            decay,
            epsilon,
            state: Vec::new(),
        }
    }

    pub fn with_state(mut self, state: Vec<Tensor>) -> Self {
        self.state = state;
        self
    }

    pub fn state(&self) -> &[Tensor] {
        &self.state
    }

    pub fn meta(&self) -> OptimizerMeta {
        OptimizerMeta {
            learning_rate: self.learning_rate,
            decay: self.decay,
            epsilon: self.epsilon,
            has_state: !self.state.is_empty(),
        }
    }

    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "gradient count");
        if self.state.is_empty() {
            self.state = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for ((slot, grad), v) in params.iter_mut().zip(grads).zip(self.state.iter_mut()) {
            let p = &mut slot.1;
            for i in 0..p.len() {
                let g = grad.data()[i];
                let vi = self.decay * v.data()[i] + (1.0 - self.decay) * g * g;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= self.learning_rate * g / (vi.sqrt() + self.epsilon);
            }
        }
    }
}

/// One line of the per-step loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub sample: String,
    pub regression: f64,
    pub kl: f64,
    pub kl_weight: f64,
    pub total: f64,
}

impl StepRecord {
    /// Deterministic text form: Rust's shortest-roundtrip float formatting,
    /// so identical runs produce identical logs.
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.epoch, self.sample, self.regression, self.kl, self.kl_weight, self.total
        )
    }
}

pub struct TrainOutcome {
    pub net: StereoNet,
    pub checkpoint_path: PathBuf,
    pub steps: usize,
    pub loss_log: Vec<StepRecord>,
    pub final_metrics: Option<MetricsReport>,
    pub kl_weight: f64,
    pub wall_seconds: f64,
}

fn train_step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5445_0000_0000_0000 | step as u64);
    rng
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x4550_0000_0000_0000 | epoch as u64);
    rng
}

pub fn run_train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();

    let dataset = Dataset::load(&config.dataset)?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let val = config
        .val_dataset
        .as_ref()
        .map(Dataset::load)
        .transpose()?;

    let kl_weight = config.kl_weight.unwrap_or(1.0 / dataset.len() as f64);
    let channels = config.network.in_channels;

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(0x494e_4954); // model init stream
    let mut net = StereoNet::new(config.network.clone(), &mut init_rng)?;

    let mut opt = RmsProp::new(config.learning_rate, config.rmsprop_decay, config.rmsprop_epsilon);
    let mut loss_log = Vec::new();
    let mut log_file = match &config.loss_log_path {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };

    let mut step = 0usize;
    let mut pending: Vec<Tensor> = Vec::new();
    let mut pending_count = 0usize;

    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut epoch_rng(config.seed, epoch));

        for &idx in &order {
            if let Some(cap) = config.max_steps {
                if step >= cap {
                    break 'epochs;
                }
            }
            let sample = dataset.get(idx, channels)?;
            let mut rng = train_step_rng(config.seed, step);

            // one extract per image pair per epoch, clamped to the image size
            let (h, w) = sample.dims();
            let crop_w = config.crop_width.min(w);
            let crop_h = config.crop_height.min(h);
            let crop = random_crop(&sample, crop_w, crop_h, &mut rng)?;
            let gt = crop
                .gt_disparity
                .as_ref()
                .ok_or_else(|| Error::Data(format!("sample {} has no ground truth", dataset.stem(idx))))?;
            let mask = crop
                .valid_mask
                .clone()
                .unwrap_or_else(|| Tensor::filled(gt.shape(), 1.0));

            let mut g = Graph::new();
            let bound = net.bind(&mut g);
            let fwd = net.forward_on(&mut g, &bound, &crop, config.train_mode, &mut rng)?;
            let losses = total_loss_graph(
                &mut g,
                gt,
                fwd.disparity,
                fwd.log_variance,
                &mask,
                &bound,
                &net.config.prior,
                kl_weight,
                config.residual_norm,
            )?;
            let record = StepRecord {
                step,
                epoch,
                sample: dataset.stem(idx).to_string(),
                regression: g.value(losses.regression).item(),
                kl: g.value(losses.kl).item(),
                kl_weight,
                total: g.value(losses.total).item(),
            };
            if !record.total.is_finite() {
                let dump = format!(
                    "non-finite loss at step {} (epoch {}, sample {}): regression={}, kl={}, \
                     disparity range [{}, {}], log-variance range [{}, {}]",
                    record.step,
                    record.epoch,
                    record.sample,
                    record.regression,
                    record.kl,
                    g.value(fwd.disparity).min(),
                    g.value(fwd.disparity).max(),
                    g.value(fwd.log_variance).min(),
                    g.value(fwd.log_variance).max(),
                );
                if let Some(f) = log_file.as_mut() {
                    let _ = writeln!(f, "ABORT {dump}");
                }
                return Err(Error::Numeric(dump));
            }

            let mut grads = g.backward(losses.total);
            let step_grads: Vec<Tensor> = bound
                .param_ids
                .iter()
                .map(|&id| {
                    grads
                        .take(id)
                        .unwrap_or_else(|| Tensor::zeros(g.value(id).shape()))
                })
                .collect();

            // gradient accumulation implements batch sizes beyond one
            if pending.is_empty() {
                pending = step_grads;
            } else {
                for (acc, gnew) in pending.iter_mut().zip(&step_grads) {
                    acc.add_assign(gnew);
                }
            }
            pending_count += 1;
            if pending_count == config.batch_size {
                if config.batch_size > 1 {
                    let scale = 1.0 / config.batch_size as f64;
                    for t in pending.iter_mut() {
                        t.scale_assign(scale);
                    }
                }
                let mut params = net.named_params_mut();
                opt.step(&mut params, &pending);
                pending = Vec::new();
                pending_count = 0;
            }

            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", record.to_line()).map_err(|e| {
                    Error::io(config.loss_log_path.as_ref().unwrap(), e)
                })?;
            }
            loss_log.push(record);
            step += 1;
        }

        let cadence_hit = config.eval_cadence_epochs > 0 && (epoch + 1) % config.eval_cadence_epochs == 0;
        if cadence_hit && epoch + 1 < config.epochs {
            save_checkpoint(
                &config.checkpoint_path,
                &net,
                epoch + 1,
                step,
                config.seed,
                kl_weight,
                config.residual_norm,
                opt.meta(),
                Some(opt.state()),
            )?;
        }
    }

    save_checkpoint(
        &config.checkpoint_path,
        &net,
        config.epochs,
        step,
        config.seed,
        kl_weight,
        config.residual_norm,
        opt.meta(),
        Some(opt.state()),
    )?;

    let final_metrics = match &val {
        Some(val) => Some(evaluate_split(
            &net,
            val,
            channels,
            config.eval_prediction_count,
            config.seed ^ 0x5641_4c00,
        )?),
        None => None,
    };

    Ok(TrainOutcome {
        net,
        checkpoint_path: config.checkpoint_path.clone(),
        steps: step,
        loss_log,
        final_metrics,
        kl_weight,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Monte-Carlo evaluation of a split: per-image metrics merged into one
/// count-weighted aggregate.
pub fn evaluate_split(
    net: &StereoNet,
    dataset: &Dataset,
    channels: usize,
    prediction_count: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let mut total = MetricsAccumulator::default();
    for i in 0..dataset.len() {
        let sample = dataset.get(i, channels)?;
        let gt = sample
            .gt_disparity
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sample {} has no ground truth", dataset.stem(i))))?;
        let mask = sample
            .valid_mask
            .clone()
            .unwrap_or_else(|| Tensor::filled(gt.shape(), 1.0));
        let mut mix = ChaCha8Rng::seed_from_u64(seed);
        mix.set_stream(i as u64);
        let u = mc_predict(net, &sample, prediction_count, mix.gen())?;
        total.merge(&accumulate(&u.mean_disparity, gt, &mask, Some(&u))?);
    }
    total.report()
}
