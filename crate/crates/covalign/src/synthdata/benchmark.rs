//! Built-in two-domain benchmark constants.
//!
//! One place defines the whole shift between the source-like and the
//! target-like domain, across three axes:
//! - class priors differ strongly (L1 distance >= 0.6): the source is
//!   background/class-1 heavy, the target is dominated by classes 3-4;
//! - every class's intensity mean moves by at least one intra-class
//!   standard deviation between domains, and the moves point toward other
//!   classes' source appearance so a source-trained classifier partially
//!   confuses them;
//! - object extents differ by 2x, so the target's receptive-field context
//!   mix changes as well.
//!
//! Images are 32x32 at desk scale; every adaptation experiment in the
//! test suite runs on these constants.

use super::{ClassIntensity, DomainSpec};

pub const NUM_CLASSES: usize = 5;
pub const CHANNELS: usize = 3;
pub const IMAGE_SIZE: usize = 32;

/// Intra-class intensity spread of the source domain.
pub const SOURCE_INTENSITY_SD: f64 = 0.08;

/// Intra-class intensity spread of the target domain; the much wider
/// spread is the dominant difficulty of the shift.
pub const TARGET_INTENSITY_SD: f64 = 0.18;

/// Global additive sensor noise, both domains.
pub const SENSOR_NOISE_SD: f64 = 0.02;

pub const SOURCE_PRIORS: [f64; NUM_CLASSES] = [0.40, 0.24, 0.16, 0.12, 0.08];
pub const TARGET_PRIORS: [f64; NUM_CLASSES] = [0.20, 0.08, 0.13, 0.22, 0.37];

/// Object extent bounds `[min, max]` in pixels for classes 1..N.
pub const SOURCE_SCALE: [usize; 2] = [3, 7];
pub const TARGET_SCALE: [usize; 2] = [7, 15];

pub const SOURCE_MEANS: [[f64; CHANNELS]; NUM_CLASSES] = [
    [0.20, 0.20, 0.20],
    [0.80, 0.25, 0.20],
    [0.25, 0.75, 0.25],
    [0.20, 0.30, 0.80],
    [0.75, 0.70, 0.25],
];

/// Spectral confusion: target class `i` sits `CONFUSION[i]` of the way
/// from its own source spectrum toward the next foreground class's, so a
/// source-trained classifier systematically leaks class `i` into class
/// `i+1` on the target domain.
pub const CONFUSION: [f64; NUM_CLASSES] = [0.0, 0.15, 0.15, 0.15, 0.15];

/// Global tint added to every target class on top of the confusion blend.
pub const TARGET_TINT: [f64; CHANNELS] = [0.08, 0.05, -0.06];

/// Target spectra derived from the source spectra by the confusion blend
/// plus the tint; class 0 blends toward class 1.
pub fn target_means() -> [[f64; CHANNELS]; NUM_CLASSES] {
    let mut out = [[0.0; CHANNELS]; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let next = if c == 0 || c == NUM_CLASSES - 1 { 1 } else { c + 1 };
        for ch in 0..CHANNELS {
            let blend = (1.0 - CONFUSION[c]) * SOURCE_MEANS[c][ch]
                + CONFUSION[c] * SOURCE_MEANS[next][ch];
            out[c][ch] = blend + TARGET_TINT[ch];
        }
    }
    out
}

fn intensities(means: &[[f64; CHANNELS]; NUM_CLASSES], sd: f64) -> Vec<ClassIntensity> {
    means
        .iter()
        .map(|m| m.iter().map(|&mean| (mean, sd)).collect())
        .collect()
}

fn spec(
    name: &str,
    priors: &[f64; NUM_CLASSES],
    scale: [usize; 2],
    means: &[[f64; CHANNELS]; NUM_CLASSES],
    sd: f64,
) -> DomainSpec {
    let mut scale_range = vec![[0, 0]];
    scale_range.extend(std::iter::repeat(scale).take(NUM_CLASSES - 1));
    DomainSpec {
        name: name.to_string(),
        class_priors: priors.to_vec(),
        scale_range,
        intensity: intensities(means, sd),
        background_noise_sd: SENSOR_NOISE_SD,
        image_size: IMAGE_SIZE,
        channels: CHANNELS,
    }
}

/// The built-in benchmark pair `(source, target)`.
pub fn default_benchmark() -> (DomainSpec, DomainSpec) {
    (
        spec(
            "source",
            &SOURCE_PRIORS,
            SOURCE_SCALE,
            &SOURCE_MEANS,
            SOURCE_INTENSITY_SD,
        ),
        spec(
            "target",
            &TARGET_PRIORS,
            TARGET_SCALE,
            &target_means(),
            TARGET_INTENSITY_SD,
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate;

    #[test]
    fn priors_differ_strongly() {
        let l1: f64 = SOURCE_PRIORS
            .iter()
            .zip(&TARGET_PRIORS)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(l1 >= 0.6, "prior L1 distance {l1}");
    }

    #[test]
    fn intensity_means_shift_by_at_least_one_sd() {
        let target = target_means();
        for c in 0..NUM_CLASSES {
            let has_big_shift = (0..CHANNELS)
                .any(|ch| (SOURCE_MEANS[c][ch] - target[c][ch]).abs() >= SOURCE_INTENSITY_SD);
            assert!(has_big_shift, "class {c} shifts less than one sd");
        }
    }

    #[test]
    fn object_scales_differ_by_two_x() {
        assert!(TARGET_SCALE[0] >= 2 * SOURCE_SCALE[0]);
        assert!(TARGET_SCALE[1] >= 2 * SOURCE_SCALE[1]);
    }

    #[test]
    fn both_domains_validate_and_produce_every_class() {
        let (src, tgt) = default_benchmark();
        src.validate().unwrap();
        tgt.validate().unwrap();
        for spec in [&src, &tgt] {
            let samples = generate(spec, 200, 5).unwrap();
            let mut counts = vec![0u64; NUM_CLASSES];
            for s in &samples {
                for &l in s.labels.pixels() {
                    counts[l as usize] += 1;
                }
            }
            for (c, &count) in counts.iter().enumerate() {
                assert!(count > 0, "{}: class {c} never appears", spec.name);
            }
        }
    }
}
