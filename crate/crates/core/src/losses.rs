//! Training losses and evaluation metrics.
//!
//! The Dice term drives the probability map toward the mask; the MSE term
//! compares the soft-binarized output against the mask and is what trains
//! the threshold head. Evaluation metrics are plain confusion counts with
//! micro-averaging helpers.

use crate::segnet::soft_binarize;
use crate::tape::{Tape, TensorId};
use crate::tensor::{contract_err, shape_err, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub epsilon: f32,
    pub lambda_mse: f32,
    pub tau: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { epsilon: 1e-6, lambda_mse: 1.0, tau: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.epsilon <= 0.0 {
            return Err(contract_err("LossConfig", "epsilon must be positive"));
        }
        if self.lambda_mse < 0.0 {
            return Err(contract_err("LossConfig", "lambda_mse must be non-negative"));
        }
        if self.tau <= 0.0 {
            return Err(contract_err("LossConfig", "tau must be positive"));
        }
        Ok(())
    }
}

/// Dice loss `1 - 2*sum(pred*target) / (sum(pred^2) + sum(target^2) + eps)`,
/// differentiable in `pred`.
///
/// The smoothed overlap coefficient is maximal at perfect overlap, so the
/// loss is one minus it.
pub fn dice_loss(
    tape: &mut Tape,
    pred: TensorId,
    target: &Tensor,
    epsilon: f32,
) -> Result<TensorId, TensorError> {
    if tape.value(pred).shape() != target.shape() {
        return Err(shape_err(
            "dice_loss",
            format!("pred shape {:?} vs target shape {:?}", tape.value(pred).shape(), target.shape()),
        ));
    }
    // Target is constant: its squared sum folds into the denominator offset.
    let target_sq: f32 = target.data().iter().map(|t| t * t).sum();
    let tgt = tape.constant(target.clone());
    let inter = tape.mul(pred, tgt)?;
    let inter_sum = tape.sum(inter);
    let numerator = tape.mul_scalar(inter_sum, 2.0);
    let pred_sq = tape.mul(pred, pred)?;
    let pred_sq_sum = tape.sum(pred_sq);
    let denominator = tape.add_scalar(pred_sq_sum, target_sq + epsilon);
    let coeff = tape.div(numerator, denominator)?;
    let neg = tape.mul_scalar(coeff, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Mean squared error over all elements, differentiable in `pred`.
pub fn mse_loss(tape: &mut Tape, pred: TensorId, target: TensorId) -> Result<TensorId, TensorError> {
    if tape.value(pred).shape() != tape.value(target).shape() {
        return Err(shape_err(
            "mse_loss",
            format!(
                "pred shape {:?} vs target shape {:?}",
                tape.value(pred).shape(),
                tape.value(target).shape()
            ),
        ));
    }
    let diff = tape.sub(target, pred)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// The combined training objective and its logged components.
pub struct CombinedLoss {
    pub total: TensorId,
    pub dice: TensorId,
    /// Absent when `lambda_mse == 0` (threshold branch unused).
    pub mse: Option<TensorId>,
}

/// `dice_loss(prob, target) + lambda_mse * mse_loss(soft_binarize(prob, t,
/// tau), target)`; with `lambda_mse == 0` the Dice term is returned alone.
pub fn combined_loss(
    tape: &mut Tape,
    prob: TensorId,
    threshold: TensorId,
    target: &Tensor,
    cfg: &LossConfig,
) -> Result<CombinedLoss, TensorError> {
    cfg.validate()?;
    let dice = dice_loss(tape, prob, target, cfg.epsilon)?;
    if cfg.lambda_mse == 0.0 {
        return Ok(CombinedLoss { total: dice, dice, mse: None });
    }
    let soft = soft_binarize(tape, prob, threshold, cfg.tau)?;
    let tgt = tape.constant(target.clone());
    let mse = mse_loss(tape, soft, tgt)?;
    let weighted = tape.mul_scalar(mse, cfg.lambda_mse);
    let total = tape.add(dice, weighted)?;
    Ok(CombinedLoss { total, dice, mse: Some(mse) })
}

/// Pixel-level confusion counts plus the derived overlap metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
    pub dice: f64,
    pub iou: f64,
    pub pixel_accuracy: f64,
}

impl MetricsRecord {
    /// Derives the rate metrics from raw counts. Empty-vs-empty masks score
    /// a perfect 1.0 by convention.
    pub fn from_counts(true_pos: u64, false_pos: u64, false_neg: u64, true_neg: u64) -> Self {
        let denom_dice = 2 * true_pos + false_pos + false_neg;
        let dice = if denom_dice == 0 { 1.0 } else { 2.0 * true_pos as f64 / denom_dice as f64 };
        let denom_iou = true_pos + false_pos + false_neg;
        let iou = if denom_iou == 0 { 1.0 } else { true_pos as f64 / denom_iou as f64 };
        let total = true_pos + false_pos + false_neg + true_neg;
        let pixel_accuracy =
            if total == 0 { 1.0 } else { (true_pos + true_neg) as f64 / total as f64 };
        MetricsRecord { true_pos, false_pos, false_neg, true_neg, dice, iou, pixel_accuracy }
    }

    /// Micro-average: pool the confusion counts, then recompute the rates.
    pub fn merge(records: impl IntoIterator<Item = MetricsRecord>) -> Self {
        let (mut tp, mut fp, mut fneg, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for r in records {
            tp += r.true_pos;
            fp += r.false_pos;
            fneg += r.false_neg;
            tn += r.true_neg;
        }
        MetricsRecord::from_counts(tp, fp, fneg, tn)
    }
}

/// Pixelwise confusion between a predicted and a reference binary mask.
pub fn compute_metrics(pred_mask: &Tensor, target: &Tensor) -> Result<MetricsRecord, TensorError> {
    if pred_mask.shape() != target.shape() {
        return Err(shape_err(
            "compute_metrics",
            format!("pred shape {:?} vs target shape {:?}", pred_mask.shape(), target.shape()),
        ));
    }
    if !pred_mask.is_binary() {
        return Err(contract_err("compute_metrics", "prediction mask is not binary"));
    }
    if !target.is_binary() {
        return Err(contract_err("compute_metrics", "target mask is not binary"));
    }
    let (mut tp, mut fp, mut fneg, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in pred_mask.data().iter().zip(target.data().iter()) {
        match (p == 1.0, t == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(MetricsRecord::from_counts(tp, fp, fneg, tn))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_dice(pred: &Tensor, target: &Tensor, eps: f32) -> f32 {
        let mut tape = Tape::new();
        let p = tape.constant(pred.clone());
        let loss = dice_loss(&mut tape, p, target, eps).unwrap();
        tape.value(loss).item().unwrap()
    }

    #[test]
    fn dice_perfect_overlap_is_near_zero() {
        let mask = Tensor::new(vec![8], vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let loss = eval_dice(&mask, &mask, 1e-6);
        assert!(loss <= 1e-5, "loss {loss}");
    }

    #[test]
    fn dice_disjoint_masks_is_near_one() {
        let a = Tensor::new(vec![4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![4], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let loss = eval_dice(&a, &b, 1e-6);
        assert!(loss >= 1.0 - 1e-5, "loss {loss}");
    }

    #[test]
    fn dice_hand_computed_case() {
        // target [1,1,0,0], pred [1,0,0,0]: coeff = 2 / (1 + 2 + eps).
        let target = Tensor::new(vec![4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let pred = Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let loss = eval_dice(&pred, &target, 1e-6);
        assert!((loss - (1.0 - 2.0 / 3.0)).abs() < 1e-5, "loss {loss}");

        let bad = Tensor::zeros(vec![5]);
        let mut tape = Tape::new();
        let p = tape.constant(bad);
        assert!(dice_loss(&mut tape, p, &target, 1e-6).is_err());
    }

    #[test]
    fn mse_hand_computed_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let zero = tape.constant(Tensor::zeros(vec![2]));
        let same = mse_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(same).item().unwrap(), 0.0);

        let half = mse_loss(&mut tape, zero, a).unwrap();
        assert_eq!(tape.value(half).item().unwrap(), 0.5);

        let b = tape.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let one = mse_loss(&mut tape, b, a).unwrap();
        assert_eq!(tape.value(one).item().unwrap(), 1.0);

        let odd = tape.constant(Tensor::zeros(vec![3]));
        assert!(mse_loss(&mut tape, odd, a).is_err());
    }

    #[test]
    fn mse_is_symmetric_bitwise() {
        let xs = Tensor::new(vec![5], vec![0.13, -0.7, 2.4, 0.0, -3.3]).unwrap();
        let ys = Tensor::new(vec![5], vec![1.0, 0.25, -2.0, 0.5, 3.1]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(xs);
        let y = tape.constant(ys);
        let ab = mse_loss(&mut tape, x, y).unwrap();
        let ba = mse_loss(&mut tape, y, x).unwrap();
        assert_eq!(tape.value(ab).item().unwrap(), tape.value(ba).item().unwrap());
    }

    #[test]
    fn combined_with_zero_lambda_equals_dice() {
        let target = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let prob_t = Tensor::new(vec![1, 1, 2, 2], vec![0.8, 0.2, 0.3, 0.9]).unwrap();
        let cfg = LossConfig { lambda_mse: 0.0, ..Default::default() };

        let mut tape = Tape::new();
        let prob = tape.constant(prob_t.clone());
        let thr = tape.constant(Tensor::full(vec![1, 1, 2, 2], 0.5));
        let combined = combined_loss(&mut tape, prob, thr, &target, &cfg).unwrap();
        assert!(combined.mse.is_none());
        let total = tape.value(combined.total).item().unwrap();
        assert_eq!(total, eval_dice(&prob_t, &target, cfg.epsilon));
    }

    #[test]
    fn combined_small_on_confident_correct_prediction() {
        // prob == target (binary) with threshold 0.5 and tau 0.01: both
        // terms evaluated by hand are tiny.
        let target = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let cfg = LossConfig { tau: 0.01, ..Default::default() };
        let mut tape = Tape::new();
        let prob = tape.constant(target.clone());
        let thr = tape.constant(Tensor::full(vec![1, 1, 2, 2], 0.5));
        let combined = combined_loss(&mut tape, prob, thr, &target, &cfg).unwrap();
        let total = tape.value(combined.total).item().unwrap();
        assert!(total < 0.05, "loss {total}");
    }

    #[test]
    fn combined_is_finite_and_nonnegative_on_random_inputs() {
        use rand::{Rng, SeedableRng};
        for seed in 0..20u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let prob_v: Vec<f32> = (0..16).map(|_| rng.gen::<f32>()).collect();
            let thr_v: Vec<f32> = (0..16).map(|_| rng.gen::<f32>()).collect();
            let tgt_v: Vec<f32> = (0..16).map(|_| f32::from(rng.gen::<bool>())).collect();
            let target = Tensor::new(vec![1, 1, 4, 4], tgt_v).unwrap();
            let mut tape = Tape::new();
            let prob = tape.constant(Tensor::new(vec![1, 1, 4, 4], prob_v).unwrap());
            let thr = tape.constant(Tensor::new(vec![1, 1, 4, 4], thr_v).unwrap());
            let combined =
                combined_loss(&mut tape, prob, thr, &target, &LossConfig::default()).unwrap();
            let total = tape.value(combined.total).item().unwrap();
            assert!(total.is_finite() && total >= 0.0, "seed {seed}: loss {total}");
        }
    }

    #[test]
    fn metrics_perfect_and_degenerate_cases() {
        let mask = Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let m = compute_metrics(&mask, &mask).unwrap();
        assert_eq!((m.dice, m.iou, m.pixel_accuracy), (1.0, 1.0, 1.0));
        assert_eq!((m.false_pos, m.false_neg), (0, 0));

        let ones = Tensor::full(vec![6], 1.0);
        let zeros = Tensor::zeros(vec![6]);
        let m = compute_metrics(&ones, &zeros).unwrap();
        assert_eq!(m.false_pos, 6);
        assert_eq!(m.dice, 0.0);

        // Both empty: perfect by convention.
        let m = compute_metrics(&zeros, &zeros).unwrap();
        assert_eq!((m.dice, m.iou), (1.0, 1.0));
    }

    #[test]
    fn metrics_hand_confusion_count() {
        let target = Tensor::new(vec![4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let pred = Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = compute_metrics(&pred, &target).unwrap();
        assert_eq!((m.true_pos, m.false_pos, m.false_neg, m.true_neg), (1, 1, 1, 1));
        assert_eq!(m.dice, 0.5);
        assert!((m.iou - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(m.pixel_accuracy, 0.5);
        // Counts partition the pixels and IoU never exceeds Dice.
        assert_eq!(m.true_pos + m.false_pos + m.false_neg + m.true_neg, 4);
        assert!(m.iou <= m.dice);
    }

    #[test]
    fn metrics_reject_non_binary() {
        let soft = Tensor::new(vec![2], vec![0.5, 1.0]).unwrap();
        let bin = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert!(matches!(compute_metrics(&soft, &bin), Err(TensorError::Contract { .. })));
        assert!(matches!(compute_metrics(&bin, &soft), Err(TensorError::Contract { .. })));
    }

    #[test]
    fn metrics_dice_agrees_with_dice_loss_on_binary_masks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a: Vec<f32> = (0..32).map(|_| f32::from(rng.gen::<bool>())).collect();
            let b: Vec<f32> = (0..32).map(|_| f32::from(rng.gen::<bool>())).collect();
            if a.iter().sum::<f32>() == 0.0 || b.iter().sum::<f32>() == 0.0 {
                continue;
            }
            let pred = Tensor::new(vec![32], a).unwrap();
            let target = Tensor::new(vec![32], b).unwrap();
            let m = compute_metrics(&pred, &target).unwrap();
            let loss = eval_dice(&pred, &target, 1e-6);
            assert!(
                (m.dice - (1.0 - loss as f64)).abs() < 1e-4,
                "metrics {} vs 1-loss {}",
                m.dice,
                1.0 - loss as f64
            );
        }
    }

    #[test]
    fn dice_gradient_never_rewards_lowering_true_foreground() {
        use crate::gradcheck::finite_diff_grad;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let target_v: Vec<f32> = (0..16).map(|_| f32::from(rng.gen::<bool>())).collect();
            let pred_v: Vec<f32> = (0..16).map(|_| rng.gen_range(0.05..0.95)).collect();
            let target = Tensor::new(vec![16], target_v.clone()).unwrap();
            let pred = Tensor::new(vec![16], pred_v).unwrap();
            let fd = finite_diff_grad(
                |p| {
                    let mut tape = Tape::new();
                    let id = tape.constant(p.clone());
                    let loss = dice_loss(&mut tape, id, &target, 1e-6)?;
                    Ok(tape.value(loss).item()? as f64)
                },
                &pred,
                1e-3,
            )
            .unwrap();
            for (i, (&g, &t)) in fd.data().iter().zip(target_v.iter()).enumerate() {
                if t == 1.0 {
                    assert!(g <= 1e-4, "pixel {i}: raising pred where target=1 increased loss ({g})");
                }
            }
        }
    }
}
