//! Category feature pooling: collapse deep features and the coarse
//! softmax output into one centroid vector per category.
//!
//! Pooling happens at feature resolution with the pre-upsample coarse
//! output. The default normalization divides by the pixel count, so
//! `f[i] = (1/(h*w)) * sum_k coarse[i,k] * features[:,k]`; a mass-
//! normalized variant divides each category by its soft-assignment total
//! instead, giving true centroids for losses where absolute scale
//! matters. Categories whose mask mass falls below `1e-3 * h * w` are
//! flagged invalid and excluded from alignment losses downstream.

use crate::tensor::{Tape, Tensor};

/// Mask-mass fraction of the pixel count below which a category is
/// considered absent from the batch.
pub const VALIDITY_MASS_FRACTION: f64 = 1e-3;

/// Per-category pooled centroids with soft-mass validity bookkeeping.
pub struct CategoryFeatures {
    /// `[N, C]` pooled centroid matrix, differentiable.
    pub f: Tensor,
    /// Per-category soft-assignment totals `sum_k coarse[i, k]`.
    pub mask_mass: Vec<f64>,
    /// `mask_mass[i] >= VALIDITY_MASS_FRACTION * h * w`.
    pub valid: Vec<bool>,
}

impl CategoryFeatures {
    pub fn num_categories(&self) -> usize {
        self.mask_mass.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.f.shape()[1]
    }

    /// Stop-gradient copy: same centroids, no gradient flow.
    pub fn detach(&self) -> CategoryFeatures {
        CategoryFeatures {
            f: self.f.detach(),
            mask_mass: self.mask_mass.clone(),
            valid: self.valid.clone(),
        }
    }
}

fn check_coarse(features: &Tensor, coarse: &Tensor) -> (usize, usize, usize, usize) {
    let fs = features.shape();
    let cs = coarse.shape();
    assert_eq!(fs.len(), 3, "pool: features must be [C,h,w], got {fs:?}");
    assert_eq!(cs.len(), 3, "pool: coarse output must be [N,h,w], got {cs:?}");
    assert_eq!(
        (fs[1], fs[2]),
        (cs[1], cs[2]),
        "pool: spatial extents differ: features {fs:?} vs coarse {cs:?}"
    );
    let (c, h, w) = (fs[0], fs[1], fs[2]);
    let n = cs[0];
    // the coarse output must be a per-pixel probability field
    {
        let data = coarse.data();
        let hw = h * w;
        for p in 0..hw {
            let mut s = 0.0;
            for i in 0..n {
                s += data[i * hw + p];
            }
            assert!(
                (s - 1.0).abs() <= 1e-6,
                "pool: coarse channel sum {s} at pixel {p} violates probability contract"
            );
        }
    }
    (n, c, h, w)
}

fn mass_and_validity(coarse: &Tensor, n: usize, hw: usize) -> (Vec<f64>, Vec<bool>) {
    let data = coarse.data();
    let mass: Vec<f64> = (0..n)
        .map(|i| data[i * hw..(i + 1) * hw].iter().sum())
        .collect();
    let tau = VALIDITY_MASS_FRACTION * hw as f64;
    let valid = mass.iter().map(|&m| m >= tau).collect();
    (mass, valid)
}

/// Pool `[C,h,w]` features by an `[N,h,w]` probability field into `[N,C]`
/// centroids, dividing by the pixel count. Differentiable in both inputs.
pub fn pool(tape: &Tape, features: &Tensor, coarse: &Tensor) -> CategoryFeatures {
    let (n, c, h, w) = check_coarse(features, coarse);
    let hw = h * w;
    let (mask_mass, valid) = mass_and_validity(coarse, n, hw);

    let coarse_mat = tape.reshape(coarse, &[n, hw]);
    let feat_cols = tape.transpose(&tape.reshape(features, &[c, hw]));
    let f = tape.scalar_mul(&tape.matmul(&coarse_mat, &feat_cols), 1.0 / hw as f64);

    CategoryFeatures {
        f,
        mask_mass,
        valid,
    }
}

/// Mass-normalized pooling: each category divided by its soft-assignment
/// total, yielding true centroids. The coarse output must already be
/// detached (gradient flows through features only).
pub fn pool_mass_normalized(tape: &Tape, features: &Tensor, coarse: &Tensor) -> CategoryFeatures {
    assert!(
        !coarse.requires_grad(),
        "pool_mass_normalized: coarse output must be detached"
    );
    let (n, c, h, w) = check_coarse(features, coarse);
    let hw = h * w;
    let (mask_mass, valid) = mass_and_validity(coarse, n, hw);

    // rows of the (constant) coarse matrix scaled by 1/mass
    let scaled: Vec<f64> = {
        let data = coarse.data();
        let mut out = vec![0.0; n * hw];
        for i in 0..n {
            let m = mask_mass[i].max(f64::MIN_POSITIVE);
            for p in 0..hw {
                out[i * hw + p] = data[i * hw + p] / m;
            }
        }
        out
    };
    let coarse_mat = Tensor::from_vec(&[n, hw], scaled);
    let feat_cols = tape.transpose(&tape.reshape(features, &[c, hw]));
    let f = tape.matmul(&coarse_mat, &feat_cols);

    CategoryFeatures {
        f,
        mask_mass,
        valid,
    }
}

/// Pool a group of images as one batch: the mean of the per-image pooled
/// centroids, which equals pooling over the concatenated pixels.
pub fn pool_group(tape: &Tape, items: &[(Tensor, Tensor)]) -> CategoryFeatures {
    assert!(!items.is_empty(), "pool_group: empty group");
    pool_group_with(tape, items, pool)
}

/// Group pooling with the mass-normalized per-image variant.
pub fn pool_group_mass_normalized(tape: &Tape, items: &[(Tensor, Tensor)]) -> CategoryFeatures {
    assert!(!items.is_empty(), "pool_group: empty group");
    pool_group_with(tape, items, pool_mass_normalized)
}

fn pool_group_with(
    tape: &Tape,
    items: &[(Tensor, Tensor)],
    pool_one: fn(&Tape, &Tensor, &Tensor) -> CategoryFeatures,
) -> CategoryFeatures {
    let pooled: Vec<CategoryFeatures> = items
        .iter()
        .map(|(feat, coarse)| pool_one(tape, feat, coarse))
        .collect();
    let n = pooled[0].num_categories();
    let count = pooled.len() as f64;
    let mut acc = pooled[0].f.clone();
    for p in &pooled[1..] {
        assert_eq!(p.num_categories(), n, "pool_group: category count differs");
        acc = tape.add(&acc, &p.f);
    }
    let f = tape.scalar_mul(&acc, 1.0 / count);
    let mask_mass: Vec<f64> = (0..n)
        .map(|i| pooled.iter().map(|p| p.mask_mass[i]).sum::<f64>() / count)
        .collect();
    let hw = {
        let s = items[0].1.shape();
        s[1] * s[2]
    };
    let tau = VALIDITY_MASS_FRACTION * hw as f64;
    let valid = mask_mass.iter().map(|&m| m >= tau).collect();
    CategoryFeatures {
        f,
        mask_mass,
        valid,
    }
}
