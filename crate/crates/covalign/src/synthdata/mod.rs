//! Seeded two-domain synthetic segmentation benchmark.
//!
//! Scenes are composed by painting axis-aligned rectangles and ellipses
//! over a background: every region is filled from its class's per-channel
//! normal intensity distribution, labels are painted identically, and a
//! global additive sensor noise pass runs last. Object counts follow a
//! deficit-greedy loop that keeps per-class pixel shares near the
//! configured priors despite occlusion.
//!
//! All randomness comes from ChaCha8: image `i` of a generation call uses
//! `ChaCha8Rng::seed_from_u64(seed)` with stream `i`, so generation is
//! order-independent, reproducible bit-for-bit, and safe to parallelize
//! per image.
//!
//! Ground-truth label maps count every read; training code must never
//! touch target labels, and the audit counters prove it after a run.

use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

pub mod benchmark;
pub mod io;

/// Label value marking pixels excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Per-channel intensity distribution of one class: `(mean, sd)` pairs.
pub type ClassIntensity = Vec<(f64, f64)>;

/// Generative description of one domain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DomainSpec {
    /// Domain tag copied into every generated sample.
    pub name: String,
    /// Expected per-class area share; non-negative, sums to 1. Entry 0 is
    /// the background class.
    pub class_priors: Vec<f64>,
    /// Per-class `[min, max]` object extent in pixels; entry 0 is unused
    /// (the background is the unpainted canvas).
    pub scale_range: Vec<[usize; 2]>,
    /// Per-class, per-channel intensity distributions.
    pub intensity: Vec<ClassIntensity>,
    /// Additive zero-mean sensor noise applied to the whole image.
    pub background_noise_sd: f64,
    /// Height and width of generated images.
    pub image_size: usize,
    pub channels: usize,
}

impl DomainSpec {
    pub fn num_classes(&self) -> usize {
        self.class_priors.len()
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let n = self.class_priors.len();
        if n < 2 {
            return Err(GenError::BadSpec("need at least 2 classes".into()));
        }
        if self.class_priors.iter().any(|&p| p < 0.0) {
            return Err(GenError::BadSpec("negative class prior".into()));
        }
        let total: f64 = self.class_priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GenError::BadSpec(format!("priors sum to {total}, not 1")));
        }
        if self.scale_range.len() != n || self.intensity.len() != n {
            return Err(GenError::BadSpec(
                "scale_range and intensity must have one entry per class".into(),
            ));
        }
        if self.intensity.iter().any(|ci| ci.len() != self.channels) {
            return Err(GenError::BadSpec(
                "intensity entries must match channel count".into(),
            ));
        }
        for (class, r) in self.scale_range.iter().enumerate().skip(1) {
            if self.class_priors[class] == 0.0 {
                continue;
            }
            if r[0] < 1 || r[0] > r[1] || r[1] > self.image_size {
                return Err(GenError::BadScale { class });
            }
            // reachability: the shape budget must be able to cover the
            // target area even with maximal occlusion slack
            let target = self.class_priors[class] * (self.image_size * self.image_size) as f64;
            let max_area = (r[1] * r[1]) as f64;
            if max_area * shape_budget(n) as f64 / 4.0 < target {
                return Err(GenError::Unplaceable { class });
            }
        }
        Ok(())
    }
}

fn shape_budget(num_classes: usize) -> usize {
    64 * num_classes
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid domain spec: {0}")]
    BadSpec(String),
    #[error("class {class}: scale range is unusable")]
    BadScale { class: usize },
    #[error("class {class}: prior cannot be reached with the configured object scale")]
    Unplaceable { class: usize },
}

/// Dense label map with an audit counter on every pixel read.
#[derive(Debug)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
    reads: AtomicU64,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> LabelMap {
        assert_eq!(data.len(), h * w, "label map size mismatch");
        LabelMap {
            h,
            w,
            data,
            reads: AtomicU64::new(0),
        }
    }

    /// Audited access: every call counts as one read of the ground truth.
    pub fn pixels(&self) -> &[u8] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.data
    }

    pub fn read_count(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }
}

impl Clone for LabelMap {
    fn clone(&self) -> Self {
        LabelMap {
            h: self.h,
            w: self.w,
            data: self.data.clone(),
            reads: AtomicU64::new(self.reads.load(Ordering::Relaxed)),
        }
    }
}

/// Raw multi-channel image buffer (channel-major), `Send`-friendly.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl ImageBuf {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.channels, self.h, self.w], self.data.clone())
    }
}

/// One synthetic image with its dense labels and provenance.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub image: ImageBuf,
    pub labels: LabelMap,
    pub domain: String,
    pub seed: u64,
}

/// Total ground-truth reads across a sample set.
pub fn label_read_count(samples: &[SceneSample]) -> u64 {
    samples.iter().map(|s| s.labels.read_count()).sum()
}

/// Generate `count` scenes from a spec, deterministically in `(spec,
/// count, seed)`. Image `i` draws only from ChaCha8 stream `i`.
pub fn generate(spec: &DomainSpec, count: usize, seed: u64) -> Result<Vec<SceneSample>, GenError> {
    assert!(count >= 1, "generate: count must be positive");
    spec.validate()?;
    Ok((0..count).map(|i| generate_one(spec, seed, i as u64)).collect())
}

fn generate_one(spec: &DomainSpec, seed: u64, stream: u64) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let size = spec.image_size;
    let hw = size * size;
    let n = spec.num_classes();

    let mut labels = vec![0u8; hw];
    let mut image = vec![0.0f64; spec.channels * hw];
    fill_region(&mut image, &mut rng, spec, 0, &(0..hw).collect::<Vec<_>>(), hw);

    // deficit-greedy painting toward the class priors
    let mut counts = vec![0usize; n];
    counts[0] = hw;
    let targets: Vec<f64> = spec.class_priors.iter().map(|p| p * hw as f64).collect();
    let tolerance = 0.01 * hw as f64;
    for _ in 0..shape_budget(n) {
        let (class, deficit) = (1..n)
            .map(|c| (c, targets[c] - counts[c] as f64))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one foreground class");
        if deficit <= tolerance {
            break;
        }
        let covered = draw_shape(&mut rng, spec, class, size);
        if covered.is_empty() {
            continue;
        }
        for &p in &covered {
            let prev = labels[p] as usize;
            counts[prev] -= 1;
            counts[class] += 1;
            labels[p] = class as u8;
        }
        fill_region(&mut image, &mut rng, spec, class, &covered, hw);
    }

    if spec.background_noise_sd > 0.0 {
        let noise = Normal::new(0.0, spec.background_noise_sd).expect("valid noise sd");
        for v in image.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    SceneSample {
        image: ImageBuf {
            channels: spec.channels,
            h: size,
            w: size,
            data: image,
        },
        labels: LabelMap::new(size, size, labels),
        domain: spec.name.clone(),
        seed,
    }
}

/// Pixels covered by one randomly drawn rectangle or ellipse of `class`,
/// clipped to the canvas.
fn draw_shape(rng: &mut ChaCha8Rng, spec: &DomainSpec, class: usize, size: usize) -> Vec<usize> {
    let [lo, hi] = spec.scale_range[class];
    let ew = rng.gen_range(lo..=hi) as i64;
    let eh = rng.gen_range(lo..=hi) as i64;
    let cx = rng.gen_range(0..size) as i64;
    let cy = rng.gen_range(0..size) as i64;
    let ellipse = rng.gen_bool(0.5);
    let mut covered = Vec::new();
    let (rx, ry) = (ew as f64 / 2.0, eh as f64 / 2.0);
    for dy in -eh / 2..=eh / 2 {
        let y = cy + dy;
        if y < 0 || y >= size as i64 {
            continue;
        }
        for dx in -ew / 2..=ew / 2 {
            let x = cx + dx;
            if x < 0 || x >= size as i64 {
                continue;
            }
            if ellipse {
                let nx = dx as f64 / rx.max(0.5);
                let ny = dy as f64 / ry.max(0.5);
                if nx * nx + ny * ny > 1.0 {
                    continue;
                }
            }
            covered.push(y as usize * size + x as usize);
        }
    }
    covered
}

fn fill_region(
    image: &mut [f64],
    rng: &mut ChaCha8Rng,
    spec: &DomainSpec,
    class: usize,
    pixels: &[usize],
    hw: usize,
) {
    for (ch, &(mean, sd)) in spec.intensity[class].iter().enumerate() {
        if sd > 0.0 {
            let dist = Normal::new(mean, sd).expect("valid intensity sd");
            for &p in pixels {
                image[ch * hw + p] = dist.sample(rng);
            }
        } else {
            for &p in pixels {
                image[ch * hw + p] = mean;
            }
        }
    }
}
