//! Alignment losses over category features: the covariance-regularization
//! family plus the mean-square and triplet baselines.
//!
//! [`pearson_matrix`] correlates every category of one feature set with
//! every category of another, taking mean and standard deviation over the
//! feature dimensions, so two `[N,C]` sets yield an `[N,N]` matrix.
//! [`cr_loss`] drives its diagonal toward +1 and its off-diagonal down to
//! 0: each diagonal entry contributes `-log(clamp(corr, eps, 1))`, each
//! off-diagonal entry `-log(clamp(1 - corr, eps, 1))`. The upper clamp
//! makes 0 the natural decision boundary for off-diagonal correlations:
//! once two categories are uncorrelated the term is exactly 0 and no
//! further gradient pushes them apart. The loss is therefore non-negative
//! and vanishes exactly when all valid diagonal correlations are 1 and no
//! off-diagonal correlation is positive.
//!
//! A category participates only if its soft mask mass passed the pooling
//! threshold on both sides and its feature spread is at least
//! `sigma_floor`; near-constant centroids have no meaningful correlation.
//!
//! Matrix export layout (see `metrics::corr_heatmap_export`): one
//! `# config_hash=` comment line, a header of N category labels, then N
//! rows, with invalid entries left empty.

use crate::cfp::CategoryFeatures;
use crate::tensor::{Tape, Tensor};
use serde::{Deserialize, Serialize};

/// Knobs of the covariance-regularization family.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CrConfig {
    /// Log-domain floor inside the loss.
    pub epsilon: f64,
    /// Minimum per-category feature standard deviation for a category to
    /// participate; also stabilizes the correlation denominator.
    pub sigma_floor: f64,
    /// Margin of the triplet baseline. The covariance losses never read it.
    pub triplet_margin: f64,
}

impl Default for CrConfig {
    fn default() -> Self {
        CrConfig {
            epsilon: 1e-6,
            sigma_floor: 1e-8,
            triplet_margin: 0.5,
        }
    }
}

impl CrConfig {
    pub fn validate(&self) -> Result<(), crate::model::ConfigError> {
        use crate::model::ConfigError;
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(ConfigError::other("epsilon must lie in (0, 1)"));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(ConfigError::other("sigma_floor must be positive"));
        }
        if self.triplet_margin < 0.0 {
            return Err(ConfigError::other("triplet_margin must be non-negative"));
        }
        Ok(())
    }
}

/// Pairwise Pearson correlations between two category feature sets.
pub struct CorrMatrix {
    /// `[N, N]` correlation entries, differentiable.
    pub values: Tensor,
    /// Flattened `[N, N]` validity: entry `(i, j)` is meaningful iff
    /// category `i` of the first set and `j` of the second are valid.
    pub pair_valid: Vec<bool>,
}

impl CorrMatrix {
    pub fn size(&self) -> usize {
        self.pair_valid.len().isqrt()
    }

    pub fn is_pair_valid(&self, i: usize, j: usize) -> bool {
        self.pair_valid[i * self.size() + j]
    }

    /// Mean of the valid diagonal entries, if any.
    pub fn mean_valid_diagonal(&self) -> Option<f64> {
        let n = self.size();
        let vals = self.values.to_vec();
        let diag: Vec<f64> = (0..n)
            .filter(|&i| self.pair_valid[i * n + i])
            .map(|i| vals[i * n + i])
            .collect();
        if diag.is_empty() {
            None
        } else {
            Some(diag.iter().sum::<f64>() / diag.len() as f64)
        }
    }
}

/// A loss value plus a flag marking that the batch had nothing to align.
pub struct LossTerm {
    pub value: Tensor,
    pub skipped: bool,
}

impl LossTerm {
    fn skipped() -> LossTerm {
        LossTerm {
            value: Tensor::scalar(0.0),
            skipped: true,
        }
    }

    fn active(value: Tensor) -> LossTerm {
        LossTerm {
            value,
            skipped: false,
        }
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }
}

/// Per-category standard deviations computed outside the tape, used only
/// for validity flags.
fn row_sigmas(f: &CategoryFeatures) -> Vec<f64> {
    let n = f.num_categories();
    let c = f.feature_dim();
    let data = f.f.to_vec();
    (0..n)
        .map(|i| {
            let row = &data[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            var.sqrt()
        })
        .collect()
}

fn side_validity(f: &CategoryFeatures, cfg: &CrConfig) -> Vec<bool> {
    row_sigmas(f)
        .iter()
        .zip(&f.valid)
        .map(|(&sigma, &mass_ok)| mass_ok && sigma >= cfg.sigma_floor)
        .collect()
}

/// Categories valid on both sides; the covariance losses only compare
/// these.
fn mutual_validity(f1: &CategoryFeatures, f2: &CategoryFeatures, cfg: &CrConfig) -> Vec<bool> {
    side_validity(f1, cfg)
        .iter()
        .zip(&side_validity(f2, cfg))
        .map(|(&a, &b)| a && b)
        .collect()
}

/// Mass-only mutual validity for the distance-based baselines, where a
/// constant centroid still has a well-defined Euclidean distance.
fn mutual_mass_validity(f1: &CategoryFeatures, f2: &CategoryFeatures) -> Vec<bool> {
    f1.valid
        .iter()
        .zip(&f2.valid)
        .map(|(&a, &b)| a && b)
        .collect()
}

/// Centered rows and their standard deviations, on the tape.
fn centered_rows(tape: &Tape, f: &Tensor, n: usize, c: usize) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut centered = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    for i in 0..n {
        let row = tape.slice_row(f, i);
        let mu = tape.mean(&row);
        let cen = tape.sub(&row, &tape.broadcast_scalar(&mu, c));
        let sigma = tape.sqrt(&tape.mean(&tape.mul(&cen, &cen)));
        centered.push(cen);
        sigmas.push(sigma);
    }
    (centered, sigmas)
}

/// The `[N, N]` Pearson correlation matrix between two category feature
/// sets, with mean and deviation taken over the `C` feature dimensions
/// and the denominator stabilized as `max(sigma_i * sigma_j, sigma_floor)`.
///
/// Requires `C >= 2`; a single feature dimension has no correlation.
pub fn pearson_matrix(
    tape: &Tape,
    f1: &CategoryFeatures,
    f2: &CategoryFeatures,
    cfg: &CrConfig,
) -> CorrMatrix {
    let n = f1.num_categories();
    let c = f1.feature_dim();
    assert_eq!(
        n,
        f2.num_categories(),
        "pearson_matrix: category counts differ"
    );
    assert_eq!(c, f2.feature_dim(), "pearson_matrix: feature dims differ");
    assert!(c >= 2, "pearson_matrix: need at least 2 feature dimensions");

    let (cen1, sig1) = centered_rows(tape, &f1.f, n, c);
    let (cen2, sig2) = centered_rows(tape, &f2.f, n, c);

    let mut entries = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let cov = tape.mean(&tape.mul(&cen1[i], &cen2[j]));
            let denom = tape.clamp_min(&tape.mul(&sig1[i], &sig2[j]), cfg.sigma_floor);
            entries.push(tape.div(&cov, &denom));
        }
    }
    let values = tape.reshape(&tape.stack_scalars(&entries), &[n, n]);

    let v1 = side_validity(f1, cfg);
    let v2 = side_validity(f2, cfg);
    let mut pair_valid = Vec::with_capacity(n * n);
    for &a in &v1 {
        for &b in &v2 {
            pair_valid.push(a && b);
        }
    }
    CorrMatrix { values, pair_valid }
}

/// Covariance-regularization loss between two category feature sets.
///
/// Returns the mean over valid pairs of `-log(A_ij)` where
/// `A_ii = clamp(corr, eps, 1)` and `A_ij = clamp(1 - corr, eps, 1)`.
/// Skips (exact 0) when fewer than two categories are valid on both
/// sides. Clamped regions pass zero gradient.
pub fn cr_loss(
    tape: &Tape,
    f1: &CategoryFeatures,
    f2: &CategoryFeatures,
    cfg: &CrConfig,
) -> LossTerm {
    let mutual = mutual_validity(f1, f2, cfg);
    if mutual.iter().filter(|&&m| m).count() < 2 {
        return LossTerm::skipped();
    }
    let corr = pearson_matrix(tape, f1, f2, cfg);
    let n = f1.num_categories();
    let mut terms = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if !corr.pair_valid[i * n + j] {
                continue;
            }
            let entry = tape.get(&corr.values, i * n + j);
            // clamp(x, eps, 1) as clamp_min(1 - relu(1 - x), eps)
            let pre = if i == j {
                entry
            } else {
                // off-diagonal scores 1 - corr
                tape.add_scalar(&tape.scalar_mul(&entry, -1.0), 1.0)
            };
            let capped = tape.add_scalar(
                &tape.scalar_mul(&tape.relu(&tape.add_scalar(&tape.scalar_mul(&pre, -1.0), 1.0)), -1.0),
                1.0,
            );
            let clamped = tape.clamp_min(&capped, cfg.epsilon);
            terms.push(tape.scalar_mul(&tape.log(&clamped), -1.0));
        }
    }
    LossTerm::active(tape.mean(&tape.stack_scalars(&terms)))
}

/// Intra-domain covariance regularization between two groups of one
/// source batch.
///
/// Caller contract: both groups were pooled with their coarse outputs
/// detached, so gradient reaches encoder features of both groups and
/// never their outputs.
pub fn icr_loss(
    tape: &Tape,
    f_group1: &CategoryFeatures,
    f_group2: &CategoryFeatures,
    cfg: &CrConfig,
) -> LossTerm {
    cr_loss(tape, f_group1, f_group2, cfg)
}

/// Cross-domain covariance regularization aligning target features to a
/// frozen source reference.
///
/// The source side is detached here (covering both its features and
/// outputs); the caller pools the target side with a detached coarse
/// output so that only target encoder features receive gradient.
pub fn ccr_loss(
    tape: &Tape,
    f_source: &CategoryFeatures,
    f_target: &CategoryFeatures,
    cfg: &CrConfig,
) -> LossTerm {
    cr_loss(tape, &f_source.detach(), f_target, cfg)
}

/// Mean Euclidean distance between same-category centroids, over valid
/// categories. Not scale-invariant; pairs naturally with mass-normalized
/// pooling.
pub fn mse_align_loss(tape: &Tape, f1: &CategoryFeatures, f2: &CategoryFeatures) -> LossTerm {
    let mutual = mutual_mass_validity(f1, f2);
    if !mutual.iter().any(|&m| m) {
        return LossTerm::skipped();
    }
    let mut terms = Vec::new();
    for (i, &ok) in mutual.iter().enumerate() {
        if !ok {
            continue;
        }
        terms.push(category_distance(tape, f1, f2, i, i));
    }
    LossTerm::active(tape.mean(&tape.stack_scalars(&terms)))
}

fn category_distance(
    tape: &Tape,
    f1: &CategoryFeatures,
    f2: &CategoryFeatures,
    i: usize,
    j: usize,
) -> Tensor {
    let a = tape.slice_row(&f1.f, i);
    let b = tape.slice_row(&f2.f, j);
    let d = tape.sub(&a, &b);
    tape.sqrt(&tape.sum(&tape.mul(&d, &d)))
}

/// Margin-hinge loss pushing inter-category distances past intra-category
/// distances by `cfg.triplet_margin`:
/// `(1/(N*N)) * sum_i sum_{j != i} max(d(f1_i, f2_i) - d(f1_i, f2_j) + margin, 0)`
/// restricted to valid pairs.
pub fn triplet_align_loss(
    tape: &Tape,
    f1: &CategoryFeatures,
    f2: &CategoryFeatures,
    cfg: &CrConfig,
) -> LossTerm {
    let mutual = mutual_mass_validity(f1, f2);
    if mutual.iter().filter(|&&m| m).count() < 2 {
        return LossTerm::skipped();
    }
    let n = f1.num_categories();
    let mut hinges = Vec::new();
    for i in 0..n {
        if !mutual[i] {
            continue;
        }
        let intra = category_distance(tape, f1, f2, i, i);
        for j in 0..n {
            if j == i || !mutual[j] {
                continue;
            }
            let inter = category_distance(tape, f1, f2, i, j);
            let gap = tape.add_scalar(&tape.sub(&intra, &inter), cfg.triplet_margin);
            hinges.push(tape.relu(&gap));
        }
    }
    let total = tape.sum(&tape.stack_scalars(&hinges));
    LossTerm::active(tape.scalar_mul(&total, 1.0 / (n * n) as f64))
}
