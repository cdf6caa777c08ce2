//! Stagewise self-training with covariance alignment.
//!
//! One run is: pretrain on the labeled source domain (stage 0), then K
//! stages that each regenerate pseudo-labels from the previous model and
//! train on the weighted four-term loss
//!
//! ```text
//! L = w0 * CE(source) + w1 * CE(target vs pseudo) + w2 * intra + w3 * cross
//! ```
//!
//! where `intra` aligns two random disjoint halves of the source batch
//! and `cross` aligns target category features to a frozen source
//! reference. Methods differ only in the weights and in which alignment
//! functional fills the intra/cross slots, so zeroing weights reproduces
//! the simpler pipelines bit-for-bit (the code path is identical and each
//! RNG concern has its own stream).
//!
//! The poly learning-rate schedule is indexed by the global iteration
//! with a horizon of `(K + 1) * iters_per_stage` (pretraining spends the
//! same per-stage budget as each stage).
//!
//! RNG streams, all ChaCha8 seeded from the run seed: stream 0 is never
//! used here (model init draws it), 1 samples source batches, 2 samples
//! target batches, 3 draws the intra-domain halving. Streams 2 and 3 are
//! consumed only when their term is active.
//!
//! Target ground-truth labels are never read on any training path;
//! [`RunOutcome::target_label_reads`] proves it (evaluation uses the
//! held-out sets passed separately).

use crate::align::{
    ccr_loss, icr_loss, mse_align_loss, triplet_align_loss, CrConfig, LossTerm,
};
use crate::cfp::{pool_group, pool_group_mass_normalized};
use crate::metrics::ConfusionMatrix;
use crate::model::{ModelConfig, OptimConfig, SegModel, StepError};
use crate::synthdata::{label_read_count, SceneSample, IGNORE_LABEL};
use crate::tensor::{Tape, Tensor};
use crate::util::{fnv1a, parallel_map};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const STREAM_SOURCE_BATCH: u64 = 1;
const STREAM_TARGET_BATCH: u64 = 2;
const STREAM_HALVING: u64 = 3;

/// Probability floor applied before logarithms in the cross-entropy.
pub const CE_PROB_FLOOR: f64 = 1e-12;

/// Stage plan and loss weighting of one run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageConfig {
    /// Number of self-training stages K after pretraining.
    pub max_stages: usize,
    /// Iteration budget per stage, and of the pretraining phase.
    pub iters_per_stage: usize,
    pub batch_size: usize,
    /// When set, pseudo-label pixels whose max probability is below the
    /// threshold become ignore; plain argmax otherwise.
    pub pseudo_confidence_threshold: Option<f64>,
    /// Weights of (CE source, CE target, intra-align, cross-align).
    pub loss_weights: [f64; 4],
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            max_stages: 5,
            iters_per_stage: 300,
            batch_size: 4,
            pseudo_confidence_threshold: None,
            loss_weights: [1.0; 4],
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<(), crate::model::ConfigError> {
        use crate::model::ConfigError;
        if self.max_stages < 1 {
            return Err(ConfigError::other("max_stages must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(ConfigError::other("batch_size must be at least 1"));
        }
        if let Some(t) = self.pseudo_confidence_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(ConfigError::other("confidence threshold must be in [0, 1]"));
            }
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ConfigError::other("loss weights must be finite and >= 0"));
        }
        Ok(())
    }

    /// Global schedule horizon: pretraining plus K stages.
    pub fn total_iters(&self) -> usize {
        (self.max_stages + 1) * self.iters_per_stage
    }
}

/// SGD hyperparameters without a horizon; the stage plan owns the budget.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SgdSettings {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
}

impl Default for SgdSettings {
    fn default() -> Self {
        SgdSettings {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            poly_power: 0.9,
        }
    }
}

impl SgdSettings {
    pub fn to_optim(&self, max_iters: usize) -> OptimConfig {
        OptimConfig {
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            poly_power: self.poly_power,
            max_iters: max_iters.max(1),
        }
    }
}

/// Which functional fills the intra-domain alignment slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraAlign {
    /// Covariance regularization between two source groups.
    Covariance,
    /// Margin-hinge over mass-normalized source centroids.
    Triplet,
}

/// Which functional fills the cross-domain alignment slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossAlign {
    /// Covariance regularization of target features against a frozen
    /// source reference.
    Covariance,
    /// Euclidean centroid matching against a frozen source reference.
    MeanSquare,
}

/// The alignment functionals of a run; weights decide whether each slot
/// is active at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentRecipe {
    pub intra: IntraAlign,
    pub cross: CrossAlign,
}

impl Default for AlignmentRecipe {
    fn default() -> Self {
        AlignmentRecipe {
            intra: IntraAlign::Covariance,
            cross: CrossAlign::Covariance,
        }
    }
}

/// Everything one training run needs besides the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sgd: SgdSettings,
    pub stage: StageConfig,
    pub cr: CrConfig,
    pub recipe: AlignmentRecipe,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), crate::model::ConfigError> {
        self.model.validate()?;
        self.stage.validate()?;
        self.cr.validate()?;
        self.sgd.to_optim(self.stage.total_iters()).validate()
    }
}

/// Frozen per-stage pseudo-labels for the target training set.
pub struct PseudoLabelSet {
    maps: Vec<Vec<u8>>,
    h: usize,
    w: usize,
    /// Stage whose model generated these labels.
    pub stage: usize,
}

impl PseudoLabelSet {
    pub fn map(&self, image_index: usize) -> &[u8] {
        &self.maps[image_index]
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// Stable digest over all maps; stage-constancy is checked with it.
    pub fn digest(&self) -> u64 {
        let bytes = self
            .maps
            .iter()
            .flat_map(|m| m.iter().copied())
            .chain(self.stage.to_le_bytes());
        fnv1a(bytes)
    }
}

/// Per-iteration loss breakdown written to the stage trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub stage: usize,
    pub iter: usize,
    pub l_ce_s: f64,
    pub l_ce_t: f64,
    pub l_intra: f64,
    pub l_cross: f64,
    pub lr: f64,
}

/// Summary of one stage (stage 0 is pretraining).
#[derive(Debug, Clone)]
pub struct StageRecord {
    pub stage: usize,
    pub mean_ce_s: f64,
    pub mean_ce_t: f64,
    pub mean_intra: f64,
    pub mean_cross: f64,
    pub source_miou: Option<f64>,
    pub target_miou: Option<f64>,
}

/// Held-out sets used for the per-stage metric trace only.
pub struct EvalSets<'a> {
    pub source_val: &'a [SceneSample],
    pub target_val: &'a [SceneSample],
}

pub struct RunOutcome {
    pub model: SegModel,
    /// `K + 1` records: pretraining plus each stage.
    pub stages: Vec<StageRecord>,
    pub trace: Vec<TraceRow>,
    /// Parameter snapshots `M_0 ..= M_K` taken at stage boundaries.
    pub stage_models: Vec<crate::model::ModelSnapshot>,
    /// The frozen pseudo-label set of each stage `1..=K`.
    pub pseudo_sets: Vec<PseudoLabelSet>,
    /// Ground-truth reads of target training labels during the run; the
    /// training contract keeps this at 0.
    pub target_label_reads: u64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(
        "non-finite loss at stage {stage}, iteration {iter} \
         (ce_s={ce_s}, ce_t={ce_t}, intra={intra}, cross={cross})"
    )]
    NonFinite {
        stage: usize,
        iter: usize,
        ce_s: f64,
        ce_t: f64,
        intra: f64,
        cross: f64,
    },
    #[error("optimizer abort at stage {stage}, iteration {iter}: {source}")]
    Step {
        stage: usize,
        iter: usize,
        source: StepError,
    },
}

/// Dual-term cross-entropy of a post-softmax prediction against a label
/// map with ignore support, averaged over non-ignored pixels:
/// `-(1/|kept|) * sum_k sum_i [Y log p + (1 - Y) log(1 - p)]`.
pub fn cross_entropy(tape: &Tape, pred: &Tensor, labels: &[u8], ignore: u8) -> LossTerm {
    let s = pred.shape();
    assert_eq!(s.len(), 3, "cross_entropy: expected [N,H,W], got {s:?}");
    let (n, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    assert_eq!(labels.len(), hw, "cross_entropy: label extent mismatch");
    let kept = labels.iter().filter(|&&l| l != ignore).count();
    if kept == 0 {
        return LossTerm {
            value: Tensor::scalar(0.0),
            skipped: true,
        };
    }
    let mut onehot = vec![0.0; n * hw];
    let mut keep = vec![0.0; n * hw];
    for (p, &l) in labels.iter().enumerate() {
        if l == ignore {
            continue;
        }
        let li = l as usize;
        assert!(li < n, "cross_entropy: label {li} out of {n} classes");
        onehot[li * hw + p] = 1.0;
        for c in 0..n {
            keep[c * hw + p] = 1.0;
        }
    }
    let y = Tensor::from_vec(&[n, h, w], onehot);
    let mask = Tensor::from_vec(&[n, h, w], keep);

    let p_pos = tape.clamp_min(pred, CE_PROB_FLOOR);
    let one_minus = tape.add_scalar(&tape.scalar_mul(pred, -1.0), 1.0);
    let p_neg = tape.clamp_min(&one_minus, CE_PROB_FLOOR);
    let pos = tape.mul(&y, &tape.log(&p_pos));
    let neg_y = tape.add_scalar(&tape.scalar_mul(&y, -1.0), 1.0);
    let neg = tape.mul(&neg_y, &tape.log(&p_neg));
    let terms = tape.mul(&tape.add(&pos, &neg), &mask);
    let value = tape.scalar_mul(&tape.sum(&terms), -1.0 / kept as f64);
    LossTerm {
        value,
        skipped: false,
    }
}

/// Full-resolution class posterior of one image under a frozen model.
fn posterior(model: &SegModel, tape: &Tape, image: &crate::synthdata::ImageBuf) -> Tensor {
    let x = image.to_tensor();
    let feat = model.encode(tape, &x);
    let logits = model.classify(tape, &feat, image.h, image.w);
    tape.softmax_channel(&logits)
}

/// Argmax labels with ties broken toward the lowest category index.
fn argmax_labels(probs: &Tensor, threshold: Option<f64>) -> Vec<u8> {
    let s = probs.shape();
    let (n, hw) = (s[0], s[1] * s[2]);
    let data = probs.data();
    let mut out = vec![0u8; hw];
    for p in 0..hw {
        let mut best = 0usize;
        let mut best_v = data[p];
        for c in 1..n {
            let v = data[c * hw + p];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        out[p] = if threshold.is_some_and(|t| best_v < t) {
            IGNORE_LABEL
        } else {
            best as u8
        };
    }
    out
}

/// Predicted label map of one image (plain argmax).
pub fn predict_labels(model: &SegModel, image: &crate::synthdata::ImageBuf) -> Vec<u8> {
    let tape = Tape::inference();
    argmax_labels(&posterior(model, &tape, image), None)
}

/// Pseudo-labels for every target image from a frozen model; fans out
/// across worker threads and merges in image order.
pub fn generate_pseudo_labels(
    model: &SegModel,
    target: &[SceneSample],
    threshold: Option<f64>,
    stage: usize,
) -> PseudoLabelSet {
    assert!(!target.is_empty(), "no target images");
    let snap = model.snapshot();
    let maps = parallel_map(target.len(), |i| {
        let local = SegModel::from_snapshot(&snap);
        let tape = Tape::inference();
        argmax_labels(&posterior(&local, &tape, &target[i].image), threshold)
    });
    PseudoLabelSet {
        h: target[0].image.h,
        w: target[0].image.w,
        maps,
        stage,
    }
}

/// Confusion over a sample set (evaluation path: reads ground truth).
pub fn evaluate_confusion(model: &SegModel, samples: &[SceneSample]) -> ConfusionMatrix {
    let n = model.config.num_classes;
    let snap = model.snapshot();
    let parts = parallel_map(samples.len(), |i| {
        let local = SegModel::from_snapshot(&snap);
        let pred = predict_labels(&local, &samples[i].image);
        let mut conf = ConfusionMatrix::new(n);
        conf.accumulate(samples[i].labels.pixels(), &pred, IGNORE_LABEL);
        conf
    });
    let mut total = ConfusionMatrix::new(n);
    for p in &parts {
        total.merge(p);
    }
    total
}

pub fn evaluate_miou(model: &SegModel, samples: &[SceneSample]) -> Option<f64> {
    crate::metrics::iou(&evaluate_confusion(model, samples)).miou
}

struct Streams {
    source: ChaCha8Rng,
    target: ChaCha8Rng,
    halving: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Streams {
        let mk = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            rng
        };
        Streams {
            source: mk(STREAM_SOURCE_BATCH),
            target: mk(STREAM_TARGET_BATCH),
            halving: mk(STREAM_HALVING),
        }
    }
}

fn sample_batch(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.gen_range(0..len)).collect()
}

/// Owns the model and RNG state across the stagewise procedure.
pub struct Trainer {
    pub model: SegModel,
    cfg: RunConfig,
    optim: OptimConfig,
    streams: Streams,
    global_iter: usize,
    pub trace: Vec<TraceRow>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Trainer {
        cfg.validate().expect("invalid run config");
        let model = SegModel::init(&cfg.model, cfg.seed);
        let optim = cfg.sgd.to_optim(cfg.stage.total_iters());
        let streams = Streams::new(cfg.seed);
        Trainer {
            model,
            cfg,
            optim,
            streams,
            global_iter: 0,
            trace: Vec::new(),
        }
    }

    /// Stage 0: source-only supervision plus the intra-domain alignment
    /// term; the target domain is untouched.
    ///
    /// The stage budget is spent sequentially: supervision alone first,
    /// then supervision jointly with the alignment term. Until the
    /// classifier has differentiated the coarse outputs, every pooled
    /// centroid is the same vector, all pairwise correlations sit at the
    /// singular end of the log terms, and the alignment gradient swamps
    /// the supervision signal.
    pub fn pretrain(&mut self, source: &[SceneSample]) -> Result<(), TrainError> {
        let w = self.cfg.stage.loss_weights;
        let warmup = self.cfg.stage.iters_per_stage / 2;
        for it in 0..self.cfg.stage.iters_per_stage {
            let intra = if it < warmup { 0.0 } else { w[2] };
            self.iteration(source, &[], None, [w[0], 0.0, intra, 0.0], 0)?;
        }
        Ok(())
    }

    /// One self-training stage against a frozen pseudo-label set.
    pub fn run_stage(
        &mut self,
        stage: usize,
        source: &[SceneSample],
        target: &[SceneSample],
        pseudo: &PseudoLabelSet,
    ) -> Result<(), TrainError> {
        assert_eq!(
            pseudo.stage, stage,
            "stage {stage} must train on labels generated for it"
        );
        assert_eq!(pseudo.len(), target.len(), "pseudo-label set size mismatch");
        let weights = self.cfg.stage.loss_weights;
        for _ in 0..self.cfg.stage.iters_per_stage {
            self.iteration(source, target, Some(pseudo), weights, stage)?;
        }
        Ok(())
    }

    fn iteration(
        &mut self,
        source: &[SceneSample],
        target: &[SceneSample],
        pseudo: Option<&PseudoLabelSet>,
        weights: [f64; 4],
        stage: usize,
    ) -> Result<(), TrainError> {
        let tape = Tape::new();
        let batch = self.cfg.stage.batch_size;
        let (n_cls, _c) = (self.cfg.model.num_classes, self.cfg.model.feature_dim());
        let cr = &self.cfg.cr;
        let zero = || Tensor::scalar(0.0);

        // source forward is shared by CE, intra- and cross-alignment
        let src_idx = sample_batch(&mut self.streams.source, source.len(), batch);
        let src_fwd: Vec<(usize, Tensor, Tensor)> = src_idx
            .iter()
            .map(|&i| {
                let x = source[i].image.to_tensor();
                let feat = self.model.encode(&tape, &x);
                let coarse_logits = self.model.classify_coarse(&tape, &feat);
                (i, feat, coarse_logits)
            })
            .collect();

        let mut term_ce_s = zero();
        if weights[0] > 0.0 {
            let mut acc: Option<Tensor> = None;
            for (i, _, coarse_logits) in &src_fwd {
                let sample = &source[*i];
                let up = tape.upsample_bilinear(coarse_logits, sample.image.h, sample.image.w);
                let pred = tape.softmax_channel(&up);
                let ce = cross_entropy(&tape, &pred, sample.labels.pixels(), IGNORE_LABEL);
                acc = Some(match acc {
                    None => ce.value,
                    Some(a) => tape.add(&a, &ce.value),
                });
            }
            term_ce_s = tape.scalar_mul(&acc.expect("non-empty batch"), 1.0 / batch as f64);
        }

        let mut term_intra = zero();
        if weights[2] > 0.0 && batch >= 2 {
            let mut order: Vec<usize> = (0..batch).collect();
            order.shuffle(&mut self.streams.halving);
            let (half1, half2) = order.split_at(batch / 2);
            let group = |half: &[usize]| -> Vec<(Tensor, Tensor)> {
                half.iter()
                    .map(|&b| {
                        let (_, feat, logits) = &src_fwd[b];
                        let coarse = tape.softmax_channel(logits).detach();
                        (feat.clone(), coarse)
                    })
                    .collect()
            };
            let (g1, g2) = (group(half1), group(half2));
            let term = match self.cfg.recipe.intra {
                IntraAlign::Covariance => {
                    icr_loss(&tape, &pool_group(&tape, &g1), &pool_group(&tape, &g2), cr)
                }
                IntraAlign::Triplet => triplet_align_loss(
                    &tape,
                    &pool_group_mass_normalized(&tape, &g1),
                    &pool_group_mass_normalized(&tape, &g2),
                    cr,
                ),
            };
            term_intra = term.value;
        }

        let mut term_ce_t = zero();
        let mut term_cross = zero();
        let target_active = weights[1] > 0.0 || weights[3] > 0.0;
        if target_active && !target.is_empty() {
            let tgt_idx = sample_batch(&mut self.streams.target, target.len(), batch);
            let tgt_fwd: Vec<(usize, Tensor, Tensor)> = tgt_idx
                .iter()
                .map(|&i| {
                    let x = target[i].image.to_tensor();
                    let feat = self.model.encode(&tape, &x);
                    let coarse_logits = self.model.classify_coarse(&tape, &feat);
                    (i, feat, coarse_logits)
                })
                .collect();

            if weights[1] > 0.0 {
                let pseudo = pseudo.expect("stages with target supervision carry pseudo-labels");
                let mut acc: Option<Tensor> = None;
                for (i, _, coarse_logits) in &tgt_fwd {
                    let img = &target[*i].image;
                    let up = tape.upsample_bilinear(coarse_logits, img.h, img.w);
                    let pred = tape.softmax_channel(&up);
                    let ce = cross_entropy(&tape, &pred, pseudo.map(*i), IGNORE_LABEL);
                    acc = Some(match acc {
                        None => ce.value,
                        Some(a) => tape.add(&a, &ce.value),
                    });
                }
                term_ce_t = tape.scalar_mul(&acc.expect("non-empty batch"), 1.0 / batch as f64);
            }

            if weights[3] > 0.0 {
                // frozen source reference: both features and outputs detached
                let src_items: Vec<(Tensor, Tensor)> = src_fwd
                    .iter()
                    .map(|(_, feat, logits)| {
                        (feat.detach(), tape.softmax_channel(logits).detach())
                    })
                    .collect();
                let tgt_items: Vec<(Tensor, Tensor)> = tgt_fwd
                    .iter()
                    .map(|(_, feat, logits)| {
                        (feat.clone(), tape.softmax_channel(logits).detach())
                    })
                    .collect();
                let term = match self.cfg.recipe.cross {
                    CrossAlign::Covariance => {
                        let f_s = pool_group(&tape, &src_items);
                        let f_t = pool_group(&tape, &tgt_items);
                        ccr_loss(&tape, &f_s, &f_t, cr)
                    }
                    CrossAlign::MeanSquare => {
                        let f_s = pool_group_mass_normalized(&tape, &src_items).detach();
                        let f_t = pool_group_mass_normalized(&tape, &tgt_items);
                        mse_align_loss(&tape, &f_s, &f_t)
                    }
                };
                term_cross = term.value;
            }
        }
        debug_assert!(n_cls >= 2);

        let (v_ce_s, v_ce_t, v_intra, v_cross) = (
            term_ce_s.item(),
            term_ce_t.item(),
            term_intra.item(),
            term_cross.item(),
        );
        let finite =
            v_ce_s.is_finite() && v_ce_t.is_finite() && v_intra.is_finite() && v_cross.is_finite();
        if !finite {
            return Err(TrainError::NonFinite {
                stage,
                iter: self.global_iter,
                ce_s: v_ce_s,
                ce_t: v_ce_t,
                intra: v_intra,
                cross: v_cross,
            });
        }

        let mut total = tape.scalar_mul(&term_ce_s, weights[0]);
        for (term, w) in [
            (&term_ce_t, weights[1]),
            (&term_intra, weights[2]),
            (&term_cross, weights[3]),
        ] {
            if w > 0.0 {
                total = tape.add(&total, &tape.scalar_mul(term, w));
            }
        }
        let lr = crate::model::poly_lr(&self.optim, self.global_iter);
        tape.backward(&total);
        self.model
            .sgd_step(&self.optim, self.global_iter)
            .map_err(|source| TrainError::Step {
                stage,
                iter: self.global_iter,
                source,
            })?;
        self.trace.push(TraceRow {
            stage,
            iter: self.global_iter,
            l_ce_s: v_ce_s,
            l_ce_t: v_ce_t,
            l_intra: v_intra,
            l_cross: v_cross,
            lr,
        });
        self.global_iter += 1;
        Ok(())
    }

    fn stage_record(&self, stage: usize, eval: Option<&EvalSets>) -> StageRecord {
        let rows: Vec<&TraceRow> = self.trace.iter().filter(|r| r.stage == stage).collect();
        let mean = |f: fn(&TraceRow) -> f64| {
            if rows.is_empty() {
                0.0
            } else {
                rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
            }
        };
        let (source_miou, target_miou) = match eval {
            Some(sets) => (
                evaluate_miou(&self.model, sets.source_val),
                evaluate_miou(&self.model, sets.target_val),
            ),
            None => (None, None),
        };
        StageRecord {
            stage,
            mean_ce_s: mean(|r| r.l_ce_s),
            mean_ce_t: mean(|r| r.l_ce_t),
            mean_intra: mean(|r| r.l_intra),
            mean_cross: mean(|r| r.l_cross),
            source_miou,
            target_miou,
        }
    }
}

/// The full stagewise procedure: pretrain, then K rounds of pseudo-label
/// refresh plus joint training. Returns the final model, the per-stage
/// records (length K + 1), the iteration trace, and all stage snapshots.
pub fn run_algorithm1(
    source: &[SceneSample],
    target: &[SceneSample],
    eval: Option<&EvalSets>,
    cfg: &RunConfig,
) -> Result<RunOutcome, TrainError> {
    assert!(!source.is_empty(), "no source images");
    assert!(!target.is_empty(), "no target images");
    let reads_before = label_read_count(target);

    let mut trainer = Trainer::new(cfg.clone());
    trainer.pretrain(source)?;
    let mut stages = vec![trainer.stage_record(0, eval)];
    let mut stage_models = vec![trainer.model.snapshot()];
    let mut pseudo_sets = Vec::new();

    for k in 1..=cfg.stage.max_stages {
        let pseudo = generate_pseudo_labels(
            &trainer.model,
            target,
            cfg.stage.pseudo_confidence_threshold,
            k,
        );
        let digest_at_start = pseudo.digest();
        trainer.run_stage(k, source, target, &pseudo)?;
        assert_eq!(
            pseudo.digest(),
            digest_at_start,
            "pseudo-labels must stay constant within a stage"
        );
        stages.push(trainer.stage_record(k, eval));
        stage_models.push(trainer.model.snapshot());
        pseudo_sets.push(pseudo);
    }

    let target_label_reads = label_read_count(target) - reads_before;
    assert_eq!(
        target_label_reads, 0,
        "training read target ground truth {target_label_reads} times"
    );
    Ok(RunOutcome {
        model: trainer.model,
        stages,
        trace: trainer.trace,
        stage_models,
        pseudo_sets,
        target_label_reads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::benchmark::default_benchmark;
    use crate::synthdata::generate;

    fn tiny_run_config(seed: u64) -> RunConfig {
        RunConfig {
            model: ModelConfig {
                in_channels: 3,
                widths: vec![6, 8, 8],
                num_classes: 5,
                downsample_factor: 4,
            },
            sgd: SgdSettings::default(),
            stage: StageConfig {
                max_stages: 2,
                iters_per_stage: 4,
                batch_size: 4,
                pseudo_confidence_threshold: None,
                loss_weights: [1.0; 4],
            },
            cr: CrConfig::default(),
            recipe: AlignmentRecipe::default(),
            seed,
        }
    }

    fn tiny_data(seed: u64) -> (Vec<SceneSample>, Vec<SceneSample>) {
        let (src, tgt) = default_benchmark();
        (
            generate(&src, 6, seed).unwrap(),
            generate(&tgt, 6, seed + 500).unwrap(),
        )
    }

    #[test]
    fn ce_of_near_perfect_prediction_is_tiny() {
        let tape = Tape::new();
        let labels = vec![0u8, 1, 1, 0];
        let mut probs = vec![0.0; 2 * 4];
        for (p, &l) in labels.iter().enumerate() {
            probs[l as usize * 4 + p] = 1.0 - 1e-9;
            probs[(1 - l as usize) * 4 + p] = 1e-9;
        }
        let pred = Tensor::from_vec(&[2, 2, 2], probs);
        let term = cross_entropy(&tape, &pred, &labels, IGNORE_LABEL);
        assert!(term.item() < 1e-8);
        assert!(term.item() >= 0.0);
    }

    #[test]
    fn ce_of_uniform_prediction_matches_formula_oracle() {
        // direct evaluation of the dual-term formula at p = 1/N
        let n = 2;
        let tape = Tape::new();
        let pred = Tensor::full(&[n, 2, 2], 1.0 / n as f64);
        let labels = vec![0u8, 1, 0, 1];
        let term = cross_entropy(&tape, &pred, &labels, IGNORE_LABEL);
        let p = 1.0 / n as f64;
        let per_pixel: f64 = -(p.ln() + (n - 1) as f64 * (1.0 - p).ln());
        assert!((term.item() - per_pixel).abs() < 1e-12);
    }

    #[test]
    fn ce_ignores_masked_pixels_exactly() {
        let tape = Tape::new();
        let mut probs = vec![0.0; 2 * 4];
        for p in 0..4 {
            probs[p] = 0.25 + 0.1 * p as f64;
            probs[4 + p] = 1.0 - probs[p];
        }
        let pred = Tensor::from_vec(&[2, 2, 2], probs.clone());
        let half = cross_entropy(&tape, &pred, &[0, 1, 255, 255], IGNORE_LABEL);
        let kept = cross_entropy(&tape, &pred, &[0, 1, 255, 255], IGNORE_LABEL);
        assert_eq!(half.item(), kept.item());
        // equals the loss computed on only the kept half
        let mut kept_probs = vec![0.0; 2 * 2];
        kept_probs[0] = probs[0];
        kept_probs[1] = probs[1];
        kept_probs[2] = probs[4];
        kept_probs[3] = probs[5];
        let pred_kept = Tensor::from_vec(&[2, 1, 2], kept_probs);
        let full = cross_entropy(&tape, &pred_kept, &[0, 1], IGNORE_LABEL);
        assert!((half.item() - full.item()).abs() < 1e-12);
    }

    #[test]
    fn ce_all_ignored_is_skipped() {
        let tape = Tape::new();
        let pred = Tensor::full(&[2, 1, 2], 0.5);
        let term = cross_entropy(&tape, &pred, &[255, 255], IGNORE_LABEL);
        assert!(term.skipped);
        assert_eq!(term.item(), 0.0);
    }

    #[test]
    fn ce_gradient_through_softmax_checks_out() {
        use crate::tensor::grad_check;
        let labels = vec![0u8, 2, 1, 255];
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let point = Tensor::from_vec(
            &[3, 2, 2],
            (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let err = grad_check(
            move |tape, logits| {
                let pred = tape.softmax_channel(logits);
                cross_entropy(tape, &pred, &labels, IGNORE_LABEL).value
            },
            &point,
            1e-5,
        );
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn pseudo_labels_from_uniform_model_pick_class_zero() {
        let cfg = tiny_run_config(0);
        let model = SegModel::init(&cfg.model, 0); // zero classifier: uniform posterior
        let (_, tgt) = tiny_data(1);
        let pseudo = generate_pseudo_labels(&model, &tgt, None, 1);
        for i in 0..pseudo.len() {
            assert!(pseudo.map(i).iter().all(|&l| l == 0), "tie breaks low");
        }
    }

    #[test]
    fn confidence_threshold_one_ignores_everything() {
        let cfg = tiny_run_config(0);
        let model = SegModel::init(&cfg.model, 0);
        let (_, tgt) = tiny_data(2);
        let pseudo = generate_pseudo_labels(&model, &tgt, Some(1.0), 1);
        for i in 0..pseudo.len() {
            assert!(pseudo.map(i).iter().all(|&l| l == IGNORE_LABEL));
        }
    }

    #[test]
    fn pseudo_label_accuracy_equals_model_accuracy() {
        let cfg = tiny_run_config(3);
        let (src, tgt) = tiny_data(3);
        let mut trainer = Trainer::new(cfg);
        trainer.pretrain(&src).unwrap();
        let pseudo = generate_pseudo_labels(&trainer.model, &tgt, None, 1);
        for (i, sample) in tgt.iter().enumerate() {
            let direct = predict_labels(&trainer.model, &sample.image);
            assert_eq!(pseudo.map(i), &direct[..], "same maps by definition");
        }
    }

    #[test]
    fn zero_iteration_run_returns_the_initialized_model() {
        let mut cfg = tiny_run_config(4);
        cfg.stage.max_stages = 1;
        cfg.stage.iters_per_stage = 0;
        let (src, tgt) = tiny_data(4);
        let outcome = run_algorithm1(&src, &tgt, None, &cfg).unwrap();
        let init = SegModel::init(&cfg.model, cfg.seed);
        for (a, b) in outcome.model.params().iter().zip(init.params()) {
            assert_eq!(a.to_vec(), b.to_vec());
        }
        assert_eq!(outcome.stages.len(), 2, "pretrain plus one stage");
        assert!(outcome.trace.is_empty());
    }

    #[test]
    fn first_pretrain_iteration_starts_at_the_uniform_ce_value() {
        let cfg = tiny_run_config(5);
        let (src, _) = tiny_data(5);
        let mut trainer = Trainer::new(cfg.clone());
        trainer.pretrain(&src).unwrap();
        let n = cfg.model.num_classes as f64;
        let p = 1.0 / n;
        let uniform_ce = -(p.ln() + (n - 1.0) * (1.0 - p).ln());
        let first = &trainer.trace[0];
        assert!(
            (first.l_ce_s - uniform_ce).abs() < 1e-9,
            "zero classifier forces the uniform prediction: {} vs {uniform_ce}",
            first.l_ce_s
        );
    }

    #[test]
    fn twenty_iterations_on_four_images_beat_the_uniform_baseline() {
        let (src_spec, _) = default_benchmark();
        for seed in 0..5u64 {
            let cfg = RunConfig {
                model: ModelConfig::default(),
                sgd: SgdSettings {
                    base_lr: 0.15,
                    ..SgdSettings::default()
                },
                stage: StageConfig {
                    max_stages: 1,
                    iters_per_stage: 20,
                    batch_size: 4,
                    pseudo_confidence_threshold: None,
                    loss_weights: [1.0; 4],
                },
                cr: Default::default(),
                recipe: Default::default(),
                seed,
            };
            let src = generate(&src_spec, 4, 100 + seed).unwrap();
            let uniform = evaluate_miou(&SegModel::init(&cfg.model, cfg.seed), &src).unwrap();
            let mut trainer = Trainer::new(cfg);
            trainer.pretrain(&src).unwrap();
            let miou = evaluate_miou(&trainer.model, &src).unwrap();
            assert!(
                miou > uniform,
                "seed {seed}: {miou} does not beat the uniform baseline {uniform}"
            );
        }
    }

    #[test]
    fn traces_and_checkpoints_are_deterministic() {
        let cfg = tiny_run_config(7);
        let (src, tgt) = tiny_data(7);
        let a = run_algorithm1(&src, &tgt, None, &cfg).unwrap();
        let b = run_algorithm1(&src, &tgt, None, &cfg).unwrap();
        for (x, y) in a.model.params().iter().zip(b.model.params()) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
        assert_eq!(a.trace.len(), b.trace.len());
        for (r, s) in a.trace.iter().zip(&b.trace) {
            assert_eq!(r.l_ce_s.to_bits(), s.l_ce_s.to_bits());
            assert_eq!(r.l_cross.to_bits(), s.l_cross.to_bits());
        }
    }

    #[test]
    fn ablation_weights_reproduce_simpler_pipelines_bit_for_bit() {
        let (src, tgt) = tiny_data(8);
        let base = tiny_run_config(8);

        // source-only: target terms zeroed
        let mut c1 = base.clone();
        c1.stage.loss_weights = [1.0, 0.0, 0.0, 0.0];
        let r1 = run_algorithm1(&src, &tgt, None, &c1).unwrap();
        let r1b = run_algorithm1(&src, &tgt, None, &c1).unwrap();
        for (x, y) in r1.model.params().iter().zip(r1b.model.params()) {
            assert_eq!(x.to_vec(), y.to_vec());
        }

        // the self-training baseline adds only target CE
        let mut c2 = base.clone();
        c2.stage.loss_weights = [1.0, 1.0, 0.0, 0.0];
        let r2 = run_algorithm1(&src, &tgt, None, &c2).unwrap();
        // source batches and halving streams are independent, so the
        // source-only trajectory is embedded identically in stage 0
        let t1: Vec<&TraceRow> = r1.trace.iter().filter(|r| r.stage == 0).collect();
        let t2: Vec<&TraceRow> = r2.trace.iter().filter(|r| r.stage == 0).collect();
        for (a, b) in t1.iter().zip(&t2) {
            assert_eq!(a.l_ce_s.to_bits(), b.l_ce_s.to_bits());
        }
    }

    #[test]
    fn training_never_reads_target_ground_truth() {
        let cfg = tiny_run_config(9);
        let (src, tgt) = tiny_data(9);
        let outcome = run_algorithm1(&src, &tgt, None, &cfg).unwrap();
        assert_eq!(outcome.target_label_reads, 0);
        assert_eq!(outcome.stage_models.len(), cfg.stage.max_stages + 1);
    }

    #[test]
    fn full_run_keeps_all_loss_terms_finite() {
        let cfg = tiny_run_config(10);
        let (src, tgt) = tiny_data(10);
        let outcome = run_algorithm1(&src, &tgt, None, &cfg).unwrap();
        for row in &outcome.trace {
            assert!(row.l_ce_s.is_finite());
            assert!(row.l_ce_t.is_finite());
            assert!(row.l_intra.is_finite());
            assert!(row.l_cross.is_finite());
            assert!(row.lr > 0.0);
        }
        let ces: Vec<f64> = outcome
            .trace
            .iter()
            .filter(|r| r.stage > 0)
            .map(|r| r.l_ce_t)
            .collect();
        assert!(!ces.is_empty());
    }

    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
}
