//! Non-learned binarization baselines: the fixed-0.5 rule and classical
//! local-statistics thresholding (mean / Niblack / Sauvola) backed by
//! integral images, so the cost is O(H·W) regardless of window size.

use crate::tensor::{contract_err, Tensor, TensorError};

/// Fixed post-processing rule: 0 below 0.5, 1 at or above it.
pub fn fixed_threshold(prob: &Tensor) -> Tensor {
    let data = prob.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    Tensor::new(prob.shape().to_vec(), data).expect("same shape")
}

/// Summed-area tables (values and squared values) in 64-bit.
///
/// `sum[i][j]` holds the inclusive prefix sum over `img[0..=i, 0..=j]`, so
/// any axis-aligned window sum needs at most four lookups.
pub struct IntegralImage {
    h: usize,
    w: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl IntegralImage {
    pub fn new(img: &Tensor) -> Result<Self, TensorError> {
        let (h, w) = img.dims2("integral_image")?;
        let src = img.data();
        let mut sum = vec![0.0f64; h * w];
        let mut sum_sq = vec![0.0f64; h * w];
        for i in 0..h {
            let mut row = 0.0f64;
            let mut row_sq = 0.0f64;
            for j in 0..w {
                let v = src[i * w + j] as f64;
                row += v;
                row_sq += v * v;
                let above = if i > 0 { sum[(i - 1) * w + j] } else { 0.0 };
                let above_sq = if i > 0 { sum_sq[(i - 1) * w + j] } else { 0.0 };
                sum[i * w + j] = above + row;
                sum_sq[i * w + j] = above_sq + row_sq;
            }
        }
        Ok(IntegralImage { h, w, sum, sum_sq })
    }

    pub fn table(&self) -> &[f64] {
        &self.sum
    }

    pub fn table_sq(&self) -> &[f64] {
        &self.sum_sq
    }

    fn lookup(table: &[f64], w: usize, r0: usize, c0: usize, r1: usize, c1: usize) -> f64 {
        let br = table[r1 * w + c1];
        let top = if r0 > 0 { table[(r0 - 1) * w + c1] } else { 0.0 };
        let left = if c0 > 0 { table[r1 * w + c0 - 1] } else { 0.0 };
        let corner = if r0 > 0 && c0 > 0 { table[(r0 - 1) * w + c0 - 1] } else { 0.0 };
        br - top - left + corner
    }

    /// Sum over the inclusive window `[r0..=r1] × [c0..=c1]`.
    pub fn window_sum(&self, r0: usize, c0: usize, r1: usize, c1: usize) -> f64 {
        debug_assert!(r1 < self.h && c1 < self.w && r0 <= r1 && c0 <= c1);
        Self::lookup(&self.sum, self.w, r0, c0, r1, c1)
    }

    pub fn window_sum_sq(&self, r0: usize, c0: usize, r1: usize, c1: usize) -> f64 {
        debug_assert!(r1 < self.h && c1 < self.w && r0 <= r1 && c0 <= c1);
        Self::lookup(&self.sum_sq, self.w, r0, c0, r1, c1)
    }

    /// Mean and standard deviation of the window centered at `(r, c)` with
    /// the given radius, clipped to the image bounds.
    pub fn window_stats(&self, r: usize, c: usize, radius: usize) -> (f64, f64) {
        let r0 = r.saturating_sub(radius);
        let c0 = c.saturating_sub(radius);
        let r1 = (r + radius).min(self.h - 1);
        let c1 = (c + radius).min(self.w - 1);
        let count = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        let mean = self.window_sum(r0, c0, r1, c1) / count;
        let var = (self.window_sum_sq(r0, c0, r1, c1) / count - mean * mean).max(0.0);
        (mean, var.sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMethod {
    Mean,
    Niblack,
    Sauvola,
}

/// Window and constants for local-statistics thresholding. The `k` and `r`
/// defaults follow the classical formulations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalStatConfig {
    pub window: usize,
    pub k: f32,
    pub r: f32,
    pub method: ThresholdMethod,
}

impl LocalStatConfig {
    pub fn mean(window: usize) -> Self {
        LocalStatConfig { window, k: 0.0, r: 0.5, method: ThresholdMethod::Mean }
    }

    pub fn niblack(window: usize) -> Self {
        LocalStatConfig { window, k: -0.2, r: 0.5, method: ThresholdMethod::Niblack }
    }

    pub fn sauvola(window: usize) -> Self {
        LocalStatConfig { window, k: 0.5, r: 0.5, method: ThresholdMethod::Sauvola }
    }
}

impl Default for LocalStatConfig {
    fn default() -> Self {
        LocalStatConfig::sauvola(15)
    }
}

/// Binarizes against a per-pixel threshold from clipped local window
/// statistics:
///
/// * mean:    `t = m`
/// * Niblack: `t = m + k·s`
/// * Sauvola: `t = m · (1 + k·(s/r − 1))`
///
/// A pixel is foreground iff `img >= t`.
pub fn local_stat_threshold(img: &Tensor, cfg: &LocalStatConfig) -> Result<Tensor, TensorError> {
    let (h, w) = img.dims2("local_stat_threshold")?;
    if cfg.window % 2 == 0 || cfg.window == 0 {
        return Err(contract_err(
            "local_stat_threshold",
            format!("window must be odd and positive, got {}", cfg.window),
        ));
    }
    if cfg.window > h.min(w) {
        return Err(contract_err(
            "local_stat_threshold",
            format!("window {} larger than image {h}x{w}", cfg.window),
        ));
    }
    if cfg.method == ThresholdMethod::Sauvola && cfg.r <= 0.0 {
        return Err(contract_err("local_stat_threshold", "Sauvola r must be positive"));
    }
    let integral = IntegralImage::new(img)?;
    let radius = cfg.window / 2;
    let mut out = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            let (m, s) = integral.window_stats(i, j, radius);
            let t = match cfg.method {
                ThresholdMethod::Mean => m,
                ThresholdMethod::Niblack => m + cfg.k as f64 * s,
                ThresholdMethod::Sauvola => m * (1.0 + cfg.k as f64 * (s / cfg.r as f64 - 1.0)),
            };
            if img.data()[i * w + j] as f64 >= t {
                out[i * w + j] = 1.0;
            }
        }
    }
    Tensor::new(vec![h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_threshold_boundary_and_extremes() {
        let t = Tensor::new(vec![4], vec![0.49, 0.5, 0.0, 1.0]).unwrap();
        assert_eq!(fixed_threshold(&t).data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn fixed_threshold_matches_brute_force_and_is_idempotent() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f32> = (0..64).map(|_| rng.gen::<f32>()).collect();
        let t = Tensor::new(vec![8, 8], data.clone()).unwrap();
        let out = fixed_threshold(&t);
        for (o, x) in out.data().iter().zip(data.iter()) {
            assert_eq!(*o, if *x >= 0.5 { 1.0 } else { 0.0 });
        }
        let twice = fixed_threshold(&out);
        assert_eq!(twice.data(), out.data());
    }

    #[test]
    fn integral_image_matches_direct_summation() {
        let img = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ii = IntegralImage::new(&img).unwrap();
        assert_eq!(ii.table(), &[1.0, 3.0, 4.0, 10.0]);
        assert_eq!(ii.table_sq(), &[1.0, 5.0, 10.0, 30.0]);
        // Full-image window equals the bottom-right entry.
        assert_eq!(ii.window_sum(0, 0, 1, 1), 10.0);

        let zeros = Tensor::zeros(vec![3, 5]);
        let zi = IntegralImage::new(&zeros).unwrap();
        assert!(zi.table().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_image_mean_method_is_all_ones() {
        let img = Tensor::full(vec![6, 6], 0.37);
        let out = local_stat_threshold(&img, &LocalStatConfig::mean(3)).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn two_region_image_interior_classified_one() {
        // Left half 0.2, right half 0.8; interior pixels of each constant
        // half sit at their local mean, so the tie rule marks them 1.
        let mut data = vec![0.0f32; 64];
        for i in 0..8 {
            for j in 0..8 {
                data[i * 8 + j] = if j < 4 { 0.2 } else { 0.8 };
            }
        }
        let img = Tensor::new(vec![8, 8], data).unwrap();
        let out = local_stat_threshold(&img, &LocalStatConfig::mean(3)).unwrap();
        for i in 0..8 {
            for j in [0usize, 1, 2, 6, 7] {
                assert_eq!(out.data()[i * 8 + j], 1.0, "pixel ({i},{j})");
            }
        }
    }

    #[test]
    fn window_validation() {
        let img = Tensor::zeros(vec![8, 8]);
        assert!(local_stat_threshold(&img, &LocalStatConfig::mean(4)).is_err());
        assert!(local_stat_threshold(&img, &LocalStatConfig::mean(9)).is_err());
        assert!(local_stat_threshold(&img, &LocalStatConfig::mean(7)).is_ok());
    }

    // Naive O(H*W*window^2) sliding-window oracle, deliberately independent
    // of the integral-image fast path.
    fn naive_threshold(img: &Tensor, cfg: &LocalStatConfig) -> Tensor {
        let (h, w) = img.dims2("naive").unwrap();
        let radius = cfg.window / 2;
        let mut out = vec![0.0f32; h * w];
        for i in 0..h {
            for j in 0..w {
                let (mut acc, mut acc_sq, mut count) = (0.0f64, 0.0f64, 0u32);
                for di in i.saturating_sub(radius)..=(i + radius).min(h - 1) {
                    for dj in j.saturating_sub(radius)..=(j + radius).min(w - 1) {
                        let v = img.data()[di * w + dj] as f64;
                        acc += v;
                        acc_sq += v * v;
                        count += 1;
                    }
                }
                let m = acc / count as f64;
                let s = (acc_sq / count as f64 - m * m).max(0.0).sqrt();
                let t = match cfg.method {
                    ThresholdMethod::Mean => m,
                    ThresholdMethod::Niblack => m + cfg.k as f64 * s,
                    ThresholdMethod::Sauvola => m * (1.0 + cfg.k as f64 * (s / cfg.r as f64 - 1.0)),
                };
                if img.data()[i * w + j] as f64 >= t {
                    out[i * w + j] = 1.0;
                }
            }
        }
        Tensor::new(vec![h, w], out).unwrap()
    }

    #[test]
    fn random_images_match_naive_oracle_for_all_methods() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..4 {
            let data: Vec<f32> = (0..64).map(|_| rng.gen::<f32>()).collect();
            let img = Tensor::new(vec![8, 8], data).unwrap();
            for cfg in [
                LocalStatConfig::mean(5),
                LocalStatConfig::niblack(5),
                LocalStatConfig::sauvola(5),
            ] {
                let fast = local_stat_threshold(&img, &cfg).unwrap();
                let slow = naive_threshold(&img, &cfg);
                assert_eq!(fast.data(), slow.data(), "method {:?}", cfg.method);
            }
        }
    }

    #[test]
    fn integral_window_stats_match_naive_in_exhaustive_sweep() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let data: Vec<f32> = (0..64).map(|_| rng.gen::<f32>()).collect();
        let img = Tensor::new(vec![8, 8], data.clone()).unwrap();
        let ii = IntegralImage::new(&img).unwrap();
        for r0 in 0..8 {
            for c0 in 0..8 {
                for r1 in r0..8 {
                    for c1 in c0..8 {
                        let mut acc = 0.0f64;
                        for r in r0..=r1 {
                            for c in c0..=c1 {
                                acc += data[r * 8 + c] as f64;
                            }
                        }
                        let got = ii.window_sum(r0, c0, r1, c1);
                        assert!((got - acc).abs() < 1e-6, "window ({r0},{c0})..({r1},{c1})");
                    }
                }
            }
        }
    }

    #[test]
    fn runtime_scales_linearly_with_pixel_count() {
        use rand::{Rng, SeedableRng};
        use std::time::Instant;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let cfg = LocalStatConfig::sauvola(15);
        let mut times = Vec::new();
        for size in [64usize, 128, 256] {
            let data: Vec<f32> = (0..size * size).map(|_| rng.gen::<f32>()).collect();
            let img = Tensor::new(vec![size, size], data).unwrap();
            // Median of several runs to tame scheduler noise.
            let mut samples: Vec<f64> = (0..5)
                .map(|_| {
                    let start = Instant::now();
                    let out = local_stat_threshold(&img, &cfg).unwrap();
                    std::hint::black_box(out);
                    start.elapsed().as_secs_f64()
                })
                .collect();
            samples.sort_by(f64::total_cmp);
            times.push(samples[2]);
        }
        // 64^2 -> 256^2 is 16x the pixels; allow 2x headroom around linear.
        let ratio = times[2] / times[0].max(1e-9);
        assert!(ratio < 32.0, "scaling ratio {ratio} vs linear 16x");
    }
}
