//! Deterministic synthetic segmentation data: a large label set of which each
//! image shows only a handful of classes, painted as noisy rectangles.

mod format;
mod report;

pub use format::{file_len, read_dataset, read_dataset_file, write_dataset, write_dataset_file, FORMAT_VERSION, MAGIC};
pub use report::{distribution_report, distribution_report_csv, read_distribution_csv, DistributionRow};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::build_multilabel_target;

/// RNG stream reserved for the per-class channel signatures. Sample `i` uses
/// stream `i`.
const SIGNATURE_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub max_classes_per_image: usize,
    /// Probability of an image showing `1, 2, ..., max_classes_per_image` classes.
    pub class_count_distribution: Vec<f64>,
    /// Zipf exponent over class ids; class 0 is the most frequent.
    pub class_frequency_skew: f64,
    /// Inclusive range of rectangles painted per non-background class.
    pub blobs_per_class: [usize; 2],
    pub noise_sigma: f64,
    pub seed: u64,
    /// Attempts at a layout where every class stays visible.
    pub max_render_attempts: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 64,
            height: 32,
            width: 32,
            channels: 8,
            max_classes_per_image: 6,
            class_count_distribution: vec![1.0 / 6.0; 6],
            class_frequency_skew: 1.0,
            blobs_per_class: [1, 3],
            noise_sigma: 0.25,
            seed: 0,
            max_render_attempts: 100,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 2 || self.num_classes >= u16::MAX as usize {
            return bad(format!("data.num_classes must be in 2..{}, got {}", u16::MAX, self.num_classes));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("data extents and channels must be positive".into());
        }
        if self.height > u16::MAX as usize || self.width > u16::MAX as usize || self.channels > u16::MAX as usize {
            return bad("data extents and channels must fit in 16 bits".into());
        }
        if self.max_classes_per_image == 0 || self.max_classes_per_image > self.num_classes {
            return bad(format!(
                "data.max_classes_per_image must be in 1..={}, got {}",
                self.num_classes, self.max_classes_per_image
            ));
        }
        if self.max_classes_per_image > self.height * self.width {
            return bad("data.max_classes_per_image exceeds the pixel count".into());
        }
        let dist = &self.class_count_distribution;
        if dist.len() != self.max_classes_per_image {
            return bad(format!(
                "data.class_count_distribution has {} entries, expected {}",
                dist.len(),
                self.max_classes_per_image
            ));
        }
        if dist.iter().any(|p| !(*p >= 0.0)) || (dist.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("data.class_count_distribution must be non-negative and sum to 1".into());
        }
        if !(self.class_frequency_skew >= 0.0) || !self.class_frequency_skew.is_finite() {
            return bad("data.class_frequency_skew must be a finite value >= 0".into());
        }
        let [lo, hi] = self.blobs_per_class;
        if lo == 0 || lo > hi {
            return bad(format!("data.blobs_per_class must satisfy 1 <= min <= max, got {lo}..{hi}"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("data.noise_sigma must be a finite value >= 0".into());
        }
        if self.max_render_attempts == 0 {
            return bad("data.max_render_attempts must be positive".into());
        }
        Ok(())
    }

    /// Also requires the extents to tile into `patch`-sized squares.
    pub fn validate_for_patch(&self, patch: usize) -> Result<()> {
        self.validate()?;
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::Config(format!(
                "image extents {}x{} are not divisible by patch size {patch}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Sentinel id for unlabelled pixels, one past the last class.
    pub fn ignore_index(&self) -> u16 {
        self.num_classes as u16
    }

    /// Fixed per-class channel signatures, `[K, C]` row-major.
    pub fn class_signatures(&self) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(SIGNATURE_STREAM);
        (0..self.num_classes * self.channels)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }

    /// RNG of sample `index`, independent of every other sample.
    pub fn sample_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[C, H, W]` row-major.
    pub image: Vec<f32>,
    /// `[H, W]` row-major class ids.
    pub seg_map: Vec<u16>,
    pub multilabel: Vec<bool>,
}

impl SyntheticSample {
    pub fn present_classes(&self) -> usize {
        self.multilabel.iter().filter(|&&p| p).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ignore_index(&self) -> u16 {
        self.num_classes as u16
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Distinct class ids for one image; the first entry is the background.
pub fn sample_class_subset<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> Vec<usize> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut count = cfg.max_classes_per_image;
    for (i, p) in cfg.class_count_distribution.iter().enumerate() {
        acc += p;
        if u < acc {
            count = i + 1;
            break;
        }
    }
    let mut weights: Vec<f64> = (0..cfg.num_classes)
        .map(|c| ((c + 1) as f64).powf(-cfg.class_frequency_skew))
        .collect();
    let mut chosen = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = weights.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (c, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            acc += w;
            pick = Some(c);
            if target < acc {
                break;
            }
        }
        let c = pick.expect("fewer picks than classes");
        weights[c] = 0.0;
        chosen.push(c);
    }
    chosen
}

/// Paints `classes` onto an image. `signatures` comes from
/// [`SyntheticConfig::class_signatures`].
pub fn render_sample<R: Rng + ?Sized>(
    classes: &[usize],
    cfg: &SyntheticConfig,
    signatures: &[f32],
    rng: &mut R,
) -> Result<SyntheticSample> {
    let (h, w, ch) = (cfg.height, cfg.width, cfg.channels);
    if classes.is_empty() {
        return Err(Error::Config("cannot render an image without classes".into()));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= cfg.num_classes) {
        return Err(Error::ClassOutOfRange {
            id: c,
            num_classes: cfg.num_classes,
        });
    }
    if signatures.len() != cfg.num_classes * ch {
        return Err(Error::Shape(format!(
            "{} signature values for {} classes of {ch} channels",
            signatures.len(),
            cfg.num_classes
        )));
    }
    let side = |extent: usize| ((extent / 8).max(1), (extent / 2).max(1));
    let (min_h, max_h) = side(h);
    let (min_w, max_w) = side(w);
    let mut seg_map = vec![0u16; h * w];
    let mut attempt = 0;
    loop {
        if attempt == cfg.max_render_attempts {
            return Err(Error::Config(format!(
                "could not keep all {} classes visible within {} attempts",
                classes.len(),
                cfg.max_render_attempts
            )));
        }
        attempt += 1;
        seg_map.fill(classes[0] as u16);
        for &c in &classes[1..] {
            let blobs = rng.random_range(cfg.blobs_per_class[0]..=cfg.blobs_per_class[1]);
            for _ in 0..blobs {
                let rh = rng.random_range(min_h..=max_h);
                let rw = rng.random_range(min_w..=max_w);
                let top = rng.random_range(0..=h - rh);
                let left = rng.random_range(0..=w - rw);
                for y in top..top + rh {
                    seg_map[y * w + left..y * w + left + rw].fill(c as u16);
                }
            }
        }
        let visible = build_multilabel_target(&seg_map, cfg.num_classes, cfg.ignore_index())?;
        if classes.iter().all(|&c| visible[c]) {
            break;
        }
    }

    let mut image = vec![0f32; ch * h * w];
    for (p, &c) in seg_map.iter().enumerate() {
        let sig = &signatures[c as usize * ch..(c as usize + 1) * ch];
        for (k, &s) in sig.iter().enumerate() {
            let noise: f64 = StandardNormal.sample(rng);
            image[k * h * w + p] = s + (cfg.noise_sigma * noise) as f32;
        }
    }
    let multilabel = build_multilabel_target(&seg_map, cfg.num_classes, cfg.ignore_index())?;
    Ok(SyntheticSample {
        image,
        seg_map,
        multilabel,
    })
}

/// Samples `first_index .. first_index + n`, each from its own stream.
pub fn generate_range(cfg: &SyntheticConfig, first_index: u64, n: usize) -> Result<Dataset> {
    cfg.validate()?;
    let signatures = cfg.class_signatures();
    let samples = (0..n as u64)
        .map(|i| {
            let mut rng = cfg.sample_rng(first_index + i);
            let classes = sample_class_subset(cfg, &mut rng);
            render_sample(&classes, cfg, &signatures, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        num_classes: cfg.num_classes,
        channels: cfg.channels,
        height: cfg.height,
        width: cfg.width,
        samples,
    })
}

pub fn generate_dataset(cfg: &SyntheticConfig, n: usize) -> Result<Dataset> {
    generate_range(cfg, 0, n)
}

#[cfg(test)]
mod tests;
