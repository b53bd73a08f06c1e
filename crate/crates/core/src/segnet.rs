//! U-Net-lite segmentation network with a learnable adaptive-thresholding
//! head.
//!
//! The encoder runs `depth` blocks of conv-relu-conv-relu followed by 2×2
//! max pooling, doubling channels per level; the bottleneck is one more
//! double-conv; the decoder mirrors the encoder with nearest-neighbor ×2
//! upsampling and skip concatenation. A final 1×1 convolution plus sigmoid
//! produces the per-pixel probability map.
//!
//! The threshold head pools the probability map to `pooled_size²` features,
//! feeds them through one fully connected layer to `H·W` logits, and applies
//! a sigmoid, yielding one threshold in (0, 1) per pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, TensorId};
use crate::tensor::{contract_err, shape_err, Tensor, TensorError};

/// Default pooled grid edge for the threshold head.
pub const DEFAULT_POOLED_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub dropout_rate: f32,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 16,
            depth: 3,
            in_channels: 1,
            image_h: 64,
            image_w: 64,
            dropout_rate: 0.0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let d = 1usize << self.depth;
        if self.base_channels == 0 || self.depth == 0 {
            return Err(contract_err("UNetConfig", "base_channels and depth must be positive"));
        }
        if self.in_channels != 1 {
            return Err(contract_err("UNetConfig", "only single-channel input is supported"));
        }
        if self.image_h % d != 0 || self.image_w % d != 0 {
            return Err(shape_err(
                "UNetConfig",
                format!(
                    "image {}x{} not divisible by 2^depth = {d}",
                    self.image_h, self.image_w
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(contract_err(
                "UNetConfig",
                format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate),
            ));
        }
        Ok(())
    }

    /// Channel count at encoder level `i` (0-based).
    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All trainable state: U-Net convolutions plus the threshold head.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub config: UNetConfig,
    pub pooled_size: usize,
    pub encoder: Vec<[ConvLayer; 2]>,
    pub bottleneck: [ConvLayer; 2],
    /// Decoder blocks ordered from deepest level to level 0.
    pub decoder: Vec<[ConvLayer; 2]>,
    pub head: ConvLayer,
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
}

/// Per-pixel thresholds in (0, 1), shaped like the probability map.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdMap(pub Tensor);

/// Tape handles for one staged copy of the model parameters.
pub struct ModelVars {
    pub encoder: Vec<[(TensorId, TensorId); 2]>,
    pub bottleneck: [(TensorId, TensorId); 2],
    pub decoder: Vec<[(TensorId, TensorId); 2]>,
    pub head: (TensorId, TensorId),
    pub fc_weight: TensorId,
    pub fc_bias: TensorId,
}

impl ModelVars {
    /// Ids in the model's canonical parameter order.
    pub fn ids(&self) -> Vec<TensorId> {
        let mut out = Vec::new();
        for block in &self.encoder {
            for (w, b) in block {
                out.push(*w);
                out.push(*b);
            }
        }
        for (w, b) in &self.bottleneck {
            out.push(*w);
            out.push(*b);
        }
        for block in &self.decoder {
            for (w, b) in block {
                out.push(*w);
                out.push(*b);
            }
        }
        out.push(self.head.0);
        out.push(self.head.1);
        out.push(self.fc_weight);
        out.push(self.fc_bias);
        out
    }
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let limit = (6.0 / fan_in as f32).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f32> = (0..numel).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(shape, data).expect("consistent")
}

fn init_conv(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize) -> ConvLayer {
    ConvLayer {
        weight: he_uniform(rng, vec![cout, cin, k, k], cin * k * k),
        bias: Tensor::zeros(vec![cout]),
    }
}

impl SegModel {
    /// Seeded He-style initialization; biases start at zero.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self, TensorError> {
        Self::init_with_pooled(config, DEFAULT_POOLED_SIZE, seed)
    }

    pub fn init_with_pooled(
        config: UNetConfig,
        pooled_size: usize,
        seed: u64,
    ) -> Result<Self, TensorError> {
        config.validate()?;
        if pooled_size == 0 {
            return Err(contract_err("SegModel::init", "pooled_size must be positive"));
        }
        if pooled_size > config.image_h || pooled_size > config.image_w {
            return Err(shape_err(
                "SegModel::init",
                format!("pooled_size {pooled_size} exceeds image {}x{}", config.image_h, config.image_w),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut encoder = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels;
        for level in 0..config.depth {
            let c = config.channels(level);
            encoder.push([init_conv(&mut rng, c, cin, 3), init_conv(&mut rng, c, c, 3)]);
            cin = c;
        }
        let cb = config.channels(config.depth);
        let bottleneck = [init_conv(&mut rng, cb, cin, 3), init_conv(&mut rng, cb, cb, 3)];

        // Decoder from deepest level down to level 0; block input is the
        // upsampled deeper feature concatenated with the same-level skip.
        let mut decoder = Vec::with_capacity(config.depth);
        let mut c_above = cb;
        for level in (0..config.depth).rev() {
            let c = config.channels(level);
            decoder.push([init_conv(&mut rng, c, c_above + c, 3), init_conv(&mut rng, c, c, 3)]);
            c_above = c;
        }
        let head = init_conv(&mut rng, 1, config.base_channels, 1);

        let hw = config.image_h * config.image_w;
        let p2 = pooled_size * pooled_size;
        let fc_weight = he_uniform(&mut rng, vec![hw, p2], p2);
        let fc_bias = Tensor::zeros(vec![hw]);

        Ok(SegModel {
            config,
            pooled_size,
            encoder,
            bottleneck,
            decoder,
            head,
            fc_weight,
            fc_bias,
        })
    }

    /// Canonical (name, tensor) listing; checkpoint order and the optimizer
    /// slot order both follow it.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, block) in self.encoder.iter().enumerate() {
            for (j, layer) in block.iter().enumerate() {
                out.push((format!("enc{i}.conv{}.weight", j + 1), &layer.weight));
                out.push((format!("enc{i}.conv{}.bias", j + 1), &layer.bias));
            }
        }
        for (j, layer) in self.bottleneck.iter().enumerate() {
            out.push((format!("bottleneck.conv{}.weight", j + 1), &layer.weight));
            out.push((format!("bottleneck.conv{}.bias", j + 1), &layer.bias));
        }
        for (i, block) in self.decoder.iter().enumerate() {
            let level = self.config.depth - 1 - i;
            for (j, layer) in block.iter().enumerate() {
                out.push((format!("dec{level}.conv{}.weight", j + 1), &layer.weight));
                out.push((format!("dec{level}.conv{}.bias", j + 1), &layer.bias));
            }
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out.push(("threshold.fc.weight".to_string(), &self.fc_weight));
        out.push(("threshold.fc.bias".to_string(), &self.fc_bias));
        out
    }

    /// Mutable view in the same canonical order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for block in self.encoder.iter_mut() {
            for layer in block.iter_mut() {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        for layer in self.bottleneck.iter_mut() {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        for block in self.decoder.iter_mut() {
            for layer in block.iter_mut() {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out.push(&mut self.fc_weight);
        out.push(&mut self.fc_bias);
        out
    }

    /// Registers every parameter on the tape; `trainable` controls whether
    /// gradients are tracked.
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone().with_grad())
            } else {
                tape.constant(t.clone())
            }
        };
        ModelVars {
            encoder: self
                .encoder
                .iter()
                .map(|b| [(put(&b[0].weight), put(&b[0].bias)), (put(&b[1].weight), put(&b[1].bias))])
                .collect(),
            bottleneck: [
                (put(&self.bottleneck[0].weight), put(&self.bottleneck[0].bias)),
                (put(&self.bottleneck[1].weight), put(&self.bottleneck[1].bias)),
            ],
            decoder: self
                .decoder
                .iter()
                .map(|b| [(put(&b[0].weight), put(&b[0].bias)), (put(&b[1].weight), put(&b[1].bias))])
                .collect(),
            head: (put(&self.head.weight), put(&self.head.bias)),
            fc_weight: put(&self.fc_weight),
            fc_bias: put(&self.fc_bias),
        }
    }

    /// Convenience inference: probability map, threshold map, and hard mask
    /// for a batch, without gradient tracking.
    pub fn predict(&self, batch: &Tensor) -> Result<Prediction, TensorError> {
        let mut tape = Tape::new();
        let vars = self.stage(&mut tape, false);
        let input = tape.constant(batch.clone());
        let prob = unet_forward(&mut tape, &vars, &self.config, input, None)?;
        let thr = threshold_forward(&mut tape, &vars, self.pooled_size, prob)?;
        let prob_t = tape.value(prob).clone();
        let thr_t = ThresholdMap(tape.value(thr).clone());
        let mask = hard_binarize(&prob_t, &thr_t)?;
        Ok(Prediction { prob: prob_t, threshold: thr_t, mask })
    }
}

pub struct Prediction {
    pub prob: Tensor,
    pub threshold: ThresholdMap,
    pub mask: Tensor,
}

fn double_conv(
    tape: &mut Tape,
    x: TensorId,
    layers: &[(TensorId, TensorId); 2],
) -> Result<TensorId, TensorError> {
    let c1 = tape.conv2d(x, layers[0].0, layers[0].1, 1, 1)?;
    let r1 = tape.relu(c1);
    let c2 = tape.conv2d(r1, layers[1].0, layers[1].1, 1, 1)?;
    Ok(tape.relu(c2))
}

/// Full U-Net forward pass producing a probability map in (0, 1) with the
/// same `N×1×H×W` shape as the batch.
///
/// `dropout_rng` enables inverted dropout after each encoder block and the
/// bottleneck (training only); `None` means inference.
pub fn unet_forward(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &UNetConfig,
    batch: TensorId,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<TensorId, TensorError> {
    let (_, c, h, w) = tape.value(batch).dims4("unet_forward")?;
    if c != config.in_channels || h != config.image_h || w != config.image_w {
        return Err(shape_err(
            "unet_forward",
            format!(
                "batch shape {:?} does not match configured {}x{}x{}",
                tape.value(batch).shape(),
                config.in_channels,
                config.image_h,
                config.image_w
            ),
        ));
    }

    let mut skips = Vec::with_capacity(config.depth);
    let mut x = batch;
    for block in &vars.encoder {
        let mut f = double_conv(tape, x, block)?;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            if config.dropout_rate > 0.0 {
                f = tape.dropout(f, config.dropout_rate, rng)?;
            }
        }
        skips.push(f);
        x = tape.max_pool2d(f)?;
    }

    x = double_conv(tape, x, &vars.bottleneck)?;
    if let Some(rng) = dropout_rng.as_deref_mut() {
        if config.dropout_rate > 0.0 {
            x = tape.dropout(x, config.dropout_rate, rng)?;
        }
    }

    for (block, skip) in vars.decoder.iter().zip(skips.iter().rev()) {
        let up = tape.upsample_nearest2d(x)?;
        let cat = tape.concat_channels(up, *skip)?;
        x = double_conv(tape, cat, block)?;
    }

    let logits = tape.conv2d(x, vars.head.0, vars.head.1, 1, 0)?;
    Ok(tape.sigmoid(logits))
}

/// Adaptive-threshold head: pool the probability map to a `P×P` grid,
/// flatten, map through the fully connected layer to one logit per pixel,
/// and squash with a sigmoid.
pub fn threshold_forward(
    tape: &mut Tape,
    vars: &ModelVars,
    pooled_size: usize,
    prob: TensorId,
) -> Result<TensorId, TensorError> {
    threshold_forward_with(tape, vars.fc_weight, vars.fc_bias, pooled_size, prob)
}

/// Same as [`threshold_forward`] with explicit fully connected parameters;
/// used when the head is trained in isolation.
pub fn threshold_forward_with(
    tape: &mut Tape,
    fc_weight: TensorId,
    fc_bias: TensorId,
    pooled_size: usize,
    prob: TensorId,
) -> Result<TensorId, TensorError> {
    let (n, c, h, w) = tape.value(prob).dims4("threshold_forward")?;
    if c != 1 {
        return Err(shape_err(
            "threshold_forward",
            format!("probability map must have one channel, got {c}"),
        ));
    }
    let pooled = tape.adaptive_avg_pool2d(prob, pooled_size, pooled_size)?;
    let flat = tape.reshape(pooled, vec![n, pooled_size * pooled_size])?;
    let logits = tape.linear(flat, fc_weight, fc_bias)?;
    let t = tape.sigmoid(logits);
    tape.reshape(t, vec![n, 1, h, w])
}

/// Hard binarization: pixel is foreground iff `prob >= t` (ties are
/// foreground).
pub fn hard_binarize(prob: &Tensor, t: &ThresholdMap) -> Result<Tensor, TensorError> {
    if prob.shape() != t.0.shape() {
        return Err(shape_err(
            "hard_binarize",
            format!("prob shape {:?} vs threshold shape {:?}", prob.shape(), t.0.shape()),
        ));
    }
    let data = prob
        .data()
        .iter()
        .zip(t.0.data().iter())
        .map(|(&p, &tv)| if p >= tv { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(prob.shape().to_vec(), data)
}

/// Differentiable binarization surrogate `sigmoid((prob - t) / tau)`;
/// approaches [`hard_binarize`] pointwise as `tau -> 0` wherever
/// `prob != t`.
pub fn soft_binarize(
    tape: &mut Tape,
    prob: TensorId,
    t: TensorId,
    tau: f32,
) -> Result<TensorId, TensorError> {
    if tau <= 0.0 {
        return Err(contract_err("soft_binarize", format!("tau must be positive, got {tau}")));
    }
    let diff = tape.sub(prob, t)?;
    let scaled = tape.mul_scalar(diff, 1.0 / tau);
    Ok(tape.sigmoid(scaled))
}
