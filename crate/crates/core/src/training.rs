//! Adam optimization, the training loop, and evaluation.
//!
//! Training is fully deterministic for a fixed `(seed, config, corpus)`:
//! epoch shuffles are seeded with `seed + epoch`, dropout draws from its own
//! seeded stream, and everything runs single-threaded.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::fixed_threshold;
use crate::checkpoint::Checkpoint;
use crate::datasets::Sample;
use crate::losses::{combined_loss, compute_metrics, dice_loss, LossConfig, MetricsRecord};
use crate::segnet::{hard_binarize, threshold_forward, unet_forward, SegModel, ThresholdMap};
use crate::tape::Tape;
use crate::tensor::{contract_err, shape_err, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Feed the threshold head a detached copy of the probability map so
    /// its gradients do not reach the U-Net.
    pub detach_threshold_input: bool,
    /// When false the threshold head is skipped entirely and validation
    /// binarizes at the fixed 0.5 of the post-processing rule.
    pub use_threshold_module: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.00005,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 20,
            batch_size: 4,
            seed: 0,
            loss: LossConfig::default(),
            detach_threshold_input: false,
            use_threshold_module: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.lr <= 0.0 {
            return Err(contract_err("TrainConfig", "lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(contract_err("TrainConfig", "betas must lie in [0, 1)"));
        }
        if self.adam_eps <= 0.0 {
            return Err(contract_err("TrainConfig", "adam_eps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(contract_err("TrainConfig", "batch_size must be positive"));
        }
        self.loss.validate()
    }
}

#[derive(Debug)]
pub enum TrainError {
    Tensor(TensorError),
    NonFiniteLoss { epoch: usize, batch: usize, value: f32 },
    Contract(String),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::NonFiniteLoss { epoch, batch, value } => {
                write!(f, "non-finite loss {value} at epoch {epoch}, batch {batch}; aborting")
            }
            TrainError::Contract(m) => write!(f, "training contract error: {m}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

/// First/second-moment accumulators for every model parameter, in the
/// model's canonical parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam step over all parameters.
    pub fn update(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Vec<f32>],
        cfg: &TrainConfig,
    ) -> Result<(), TensorError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(shape_err(
                "adam_step",
                format!(
                    "parameter/gradient/state counts differ: {} vs {} vs {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        self.step += 1;
        for ((param, grad), (m, v)) in
            params.iter_mut().zip(grads.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            adam_step(param.data_mut(), grad, m, v, self.step, cfg)?;
        }
        Ok(())
    }
}

/// Standard Adam with bias correction:
/// `m <- b1*m + (1-b1)*g`, `v <- b2*v + (1-b2)*g^2`,
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    cfg: &TrainConfig,
) -> Result<(), TensorError> {
    if param.len() != grad.len() || param.len() != m.len() || param.len() != v.len() {
        return Err(shape_err(
            "adam_step",
            format!(
                "length mismatch: param {}, grad {}, m {}, v {}",
                param.len(),
                grad.len(),
                m.len(),
                v.len()
            ),
        ));
    }
    if step == 0 {
        return Err(contract_err("adam_step", "step must be at least 1 for bias correction"));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

/// One line of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_dice_loss: f32,
    pub train_mse_loss: f32,
    pub val: MetricsRecord,
}

pub const METRICS_CSV_HEADER: &str =
    "epoch,train_loss,train_dice_loss,train_mse_loss,val_dice,val_iou,val_fp,val_fn";

/// Renders the epoch log as the metrics CSV.
pub fn metrics_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.train_loss,
            r.train_dice_loss,
            r.train_mse_loss,
            r.val.dice,
            r.val.iou,
            r.val.false_pos,
            r.val.false_neg
        ));
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

fn stack_batch(samples: &[&Sample]) -> Result<(Tensor, Tensor), TensorError> {
    let shape = samples[0].image.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut images = Vec::with_capacity(samples.len() * c * h * w);
    let mut masks = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if s.image.shape() != shape {
            return Err(shape_err(
                "stack_batch",
                format!("sample {} shape {:?} differs from {:?}", s.id, s.image.shape(), shape),
            ));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    Ok((
        Tensor::new(vec![samples.len(), c, h, w], images)?,
        Tensor::new(vec![samples.len(), c, h, w], masks)?,
    ))
}

/// Predicted hard mask and batch-shaped target for one sample under the
/// configured binarization.
fn predict_mask(
    model: &SegModel,
    sample: &Sample,
    use_threshold: bool,
) -> Result<(Tensor, Tensor), TensorError> {
    let mut tape = Tape::new();
    let vars = model.stage(&mut tape, false);
    let (batch, target) = stack_batch(&[sample])?;
    let input = tape.constant(batch);
    let prob = unet_forward(&mut tape, &vars, &model.config, input, None)?;
    let mask = if use_threshold {
        let thr = threshold_forward(&mut tape, &vars, model.pooled_size, prob)?;
        hard_binarize(tape.value(prob), &ThresholdMap(tape.value(thr).clone()))?
    } else {
        fixed_threshold(tape.value(prob))
    };
    Ok((mask, target))
}

/// Full training loop. Returns the final checkpoint, the checkpoint with
/// the best validation Dice, and the per-epoch log.
pub fn train(
    model: &mut SegModel,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Contract("train and val splits must be non-empty".into()));
    }

    let mut adam = AdamState::new(model.named_params().iter().map(|(_, t)| *t));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut log: Vec<EpochRecord> = Vec::new();
    let mut best: Option<Checkpoint> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let (mut loss_sum, mut dice_sum, mut mse_sum, mut seen) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch_samples: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (images, targets) = stack_batch(&batch_samples)?;

            let mut tape = Tape::new();
            let vars = model.stage(&mut tape, true);
            let input = tape.constant(images);
            let dropout = if model.config.dropout_rate > 0.0 { Some(&mut dropout_rng) } else { None };
            let prob = unet_forward(&mut tape, &vars, &model.config, input, dropout)?;

            let (total, dice_v, mse_v) = if cfg.use_threshold_module {
                let thr_input =
                    if cfg.detach_threshold_input { tape.detach(prob) } else { prob };
                let thr = threshold_forward(&mut tape, &vars, model.pooled_size, thr_input)?;
                let parts = combined_loss(&mut tape, prob, thr, &targets, &cfg.loss)?;
                let mse_v = match parts.mse {
                    Some(id) => tape.value(id).item()?,
                    None => 0.0,
                };
                (parts.total, tape.value(parts.dice).item()?, mse_v)
            } else {
                let dice = dice_loss(&mut tape, prob, &targets, cfg.loss.epsilon)?;
                (dice, tape.value(dice).item()?, 0.0)
            };

            let loss_value = tape.value(total).item()?;
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_idx, value: loss_value });
            }
            tape.backward(total)?;

            let grads: Vec<Vec<f32>> = vars
                .ids()
                .iter()
                .map(|&id| {
                    tape.grad(id)
                        .map(<[f32]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
                })
                .collect();
            let mut params = model.params_mut();
            adam.update(&mut params, &grads, cfg)?;

            let weight = chunk.len() as f64;
            loss_sum += loss_value as f64 * weight;
            dice_sum += dice_v as f64 * weight;
            mse_sum += mse_v as f64 * weight;
            seen += chunk.len();
        }

        let val = evaluate(model, val_set, cfg.use_threshold_module)?.0;
        log.push(EpochRecord {
            epoch,
            train_loss: (loss_sum / seen as f64) as f32,
            train_dice_loss: (dice_sum / seen as f64) as f32,
            train_mse_loss: (mse_sum / seen as f64) as f32,
            val,
        });

        let is_better = best.as_ref().map_or(true, |b| val.dice as f32 > b.val_dice);
        if is_better {
            best = Some(Checkpoint::from_model(model, &adam, cfg.seed, epoch as u32, val.dice as f32));
        }
    }

    let last_epoch = log.last().map_or(0, |r| r.epoch as u32);
    let last_dice = log.last().map_or(0.0, |r| r.val.dice as f32);
    let final_checkpoint = Checkpoint::from_model(model, &adam, cfg.seed, last_epoch, last_dice);
    let best_checkpoint = best.unwrap_or_else(|| final_checkpoint.clone());
    Ok(TrainOutcome { final_checkpoint, best_checkpoint, log })
}

/// Deterministic forward + hard binarization + pixel metrics, micro-averaged
/// over the samples.
pub fn evaluate(
    model: &SegModel,
    samples: &[Sample],
    use_threshold: bool,
) -> Result<(MetricsRecord, Vec<(String, MetricsRecord)>), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Contract("cannot evaluate an empty sample set".into()));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        let (mask, target) = predict_mask(model, s, use_threshold)?;
        let record = compute_metrics(&mask, &target)?;
        per_sample.push((s.id.clone(), record));
    }
    let aggregate = MetricsRecord::merge(per_sample.iter().map(|(_, r)| *r));
    Ok((aggregate, per_sample))
}
