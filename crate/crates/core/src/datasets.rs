//! Synthetic tumor-like corpus generation, on-disk dataset ingestion, and
//! deterministic train/val/test splitting.
//!
//! Synthetic samples are dark backgrounds carrying 1–3 brighter ellipses
//! (the ground-truth mask is their exact union) plus seeded Gaussian noise.
//! The optional bias field is a smooth left-to-right intensity ramp sized so
//! that no single global threshold separates foreground cleanly.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::pgm::{load_pgm, save_pgm, PgmError};
use crate::tensor::Tensor;

const BACKGROUND: f32 = 0.15;
const NOISE_SIGMA: f32 = 0.05;
const BIAS_AMPLITUDE: f32 = 0.3;

#[derive(Debug)]
pub enum DataError {
    Contract(String),
    Pgm { path: PathBuf, source: PgmError },
    Io { path: PathBuf, source: std::io::Error },
    Layout(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Contract(m) => write!(f, "dataset contract error: {m}"),
            DataError::Pgm { path, source } => write!(f, "{}: {source}", path.display()),
            DataError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            DataError::Layout(m) => write!(f, "dataset layout error: {m}"),
        }
    }
}

impl std::error::Error for DataError {}

/// One grayscale image paired with its binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]`, values in `{0, 1}`.
    pub mask: Tensor,
    /// Provenance: synthetic tag or file stem.
    pub id: String,
}

/// 80/10/10 split parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f32,
    pub val_frac: f32,
    pub test_frac: f32,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        SplitSpec { train_frac: 0.8, val_frac: 0.1, test_frac: 0.1, seed }
    }

    fn validate(&self) -> Result<(), DataError> {
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-6 {
            return Err(DataError::Contract(format!("split fractions sum to {sum}, expected 1.0")));
        }
        if self.train_frac < 0.0 || self.val_frac < 0.0 || self.test_frac < 0.0 {
            return Err(DataError::Contract("split fractions must be non-negative".into()));
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Polynomial smoothstep in `[0, 1]`.
fn smoothstep(u: f32) -> f32 {
    u * u * (3.0 - 2.0 * u)
}

struct Ellipse {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    intensity: f32,
}

impl Ellipse {
    fn contains(&self, x: f32, y: f32) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Generates `n` samples of size `h`×`w`, deterministically per
/// `(n, h, w, seed, bias_field)`; each sample depends only on the seed and
/// its index.
pub fn gen_synthetic(
    n: usize,
    h: usize,
    w: usize,
    seed: u64,
    bias_field: bool,
) -> Result<Vec<Sample>, DataError> {
    if n == 0 {
        return Err(DataError::Contract("sample count must be positive".into()));
    }
    if h < 16 || w < 16 {
        return Err(DataError::Contract(format!("image dims must be at least 16x16, got {h}x{w}")));
    }
    let mut out = Vec::with_capacity(n);
    for index in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(
            seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(index as u64),
        ));
        let noise = Normal::new(0.0f32, NOISE_SIGMA).expect("valid sigma");

        // Radii capped at extent/6 so even three disjoint ellipses cover
        // less than half of the image.
        let count = rng.gen_range(1..=3usize);
        let ellipses: Vec<Ellipse> = (0..count)
            .map(|_| {
                let rx = rng.gen_range((w as f32 / 16.0).max(2.0)..=w as f32 / 6.0);
                let ry = rng.gen_range((h as f32 / 16.0).max(2.0)..=h as f32 / 6.0);
                Ellipse {
                    cx: rng.gen_range(rx..=(w as f32 - 1.0 - rx)),
                    cy: rng.gen_range(ry..=(h as f32 - 1.0 - ry)),
                    rx,
                    ry,
                    intensity: rng.gen_range(0.55..=0.8f32),
                }
            })
            .collect();

        let mut image = vec![0.0f32; h * w];
        let mut mask = vec![0.0f32; h * w];
        for i in 0..h {
            for j in 0..w {
                let (x, y) = (j as f32, i as f32);
                let mut v = BACKGROUND;
                for e in &ellipses {
                    if e.contains(x, y) {
                        mask[i * w + j] = 1.0;
                        v = v.max(e.intensity);
                    }
                }
                if bias_field {
                    v += BIAS_AMPLITUDE * smoothstep(j as f32 / (w - 1) as f32);
                }
                v += noise.sample(&mut rng);
                image[i * w + j] = v.clamp(0.0, 1.0);
            }
        }
        out.push(Sample {
            image: Tensor::new(vec![1, h, w], image).expect("constructed"),
            mask: Tensor::new(vec![1, h, w], mask).expect("constructed"),
            id: format!("syn-{seed}-{index:04}"),
        });
    }
    Ok(out)
}

/// Seeded shuffle followed by a contiguous cut: `floor(0.8 n)` train,
/// `floor(0.1 n)` val, remainder test.
pub fn split_dataset(
    samples: Vec<Sample>,
    spec: &SplitSpec,
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>), DataError> {
    spec.validate()?;
    let n = samples.len();
    if n < 10 {
        return Err(DataError::Contract(format!("need at least 10 samples to split, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (spec.train_frac as f64 * n as f64).floor() as usize;
    let n_val = (spec.val_frac as f64 * n as f64).floor() as usize;

    let mut shuffled: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<Sample> {
        idx.iter().map(|&i| shuffled[i].take().expect("each index used once")).collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}

/// Writes `images/<id>.pgm` and `masks/<id>.pgm` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<(), DataError> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| DataError::Io { path: d.clone(), source: e })?;
    }
    for s in samples {
        let ipath = images.join(format!("{}.pgm", s.id));
        save_pgm(&s.image, &ipath).map_err(|e| DataError::Pgm { path: ipath.clone(), source: e })?;
        let mpath = masks.join(format!("{}.pgm", s.id));
        save_pgm(&s.mask, &mpath).map_err(|e| DataError::Pgm { path: mpath.clone(), source: e })?;
    }
    Ok(())
}

/// Loads a dataset laid out as `images/<id>.pgm` + `masks/<id>.pgm`,
/// matched by stem and ordered by path.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>, DataError> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    let entries = std::fs::read_dir(&images_dir)
        .map_err(|e| DataError::Io { path: images_dir.clone(), source: e })?;
    let mut image_paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    image_paths.sort();
    if image_paths.is_empty() {
        return Err(DataError::Layout(format!("no .pgm images under {}", images_dir.display())));
    }

    let mut samples = Vec::with_capacity(image_paths.len());
    for ipath in image_paths {
        let stem = ipath
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| DataError::Layout(format!("unreadable file name {}", ipath.display())))?
            .to_string();
        let mpath = masks_dir.join(format!("{stem}.pgm"));
        if !mpath.is_file() {
            return Err(DataError::Layout(format!(
                "image {stem} has no matching mask {}",
                mpath.display()
            )));
        }
        let image = load_pgm(&ipath).map_err(|e| DataError::Pgm { path: ipath.clone(), source: e })?;
        let mask = load_pgm(&mpath).map_err(|e| DataError::Pgm { path: mpath.clone(), source: e })?;
        if image.shape() != mask.shape() {
            return Err(DataError::Layout(format!(
                "image/mask shapes differ for {stem}: {:?} vs {:?}",
                image.shape(),
                mask.shape()
            )));
        }
        if !mask.is_binary() {
            return Err(DataError::Layout(format!(
                "mask {} contains values other than 0 and 255",
                mpath.display()
            )));
        }
        samples.push(Sample { image, mask, id: stem });
    }
    Ok(samples)
}
