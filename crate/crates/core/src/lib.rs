//! Segmentation toolkit built around a U-Net-lite network whose binarization
//! threshold is itself learned: a pooled view of the probability map feeds a
//! fully connected layer that emits one threshold per pixel, trained jointly
//! with the network (Dice + MSE). Classical fixed-0.5 and local-statistics
//! thresholding baselines are included for comparison.

pub mod baselines;
pub mod checkpoint;
pub mod datasets;
pub mod gradcheck;
pub mod losses;
pub mod pgm;
pub mod segnet;
pub mod tape;
pub mod tensor;
pub mod training;

pub use baselines::{fixed_threshold, local_stat_threshold, IntegralImage, LocalStatConfig, ThresholdMethod};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use datasets::{gen_synthetic, load_dataset, split_dataset, write_dataset, DataError, Sample, SplitSpec};
pub use losses::{combined_loss, compute_metrics, dice_loss, mse_loss, LossConfig, MetricsRecord};
pub use pgm::{load_pgm, save_pgm, PgmError};
pub use segnet::{
    hard_binarize, soft_binarize, threshold_forward, unet_forward, SegModel, ThresholdMap, UNetConfig,
};
pub use tape::{Tape, TensorId};
pub use tensor::{Tensor, TensorError};
pub use training::{
    adam_step, evaluate, metrics_csv, train, AdamState, EpochRecord, TrainConfig, TrainError,
    TrainOutcome, METRICS_CSV_HEADER,
};
