//! Experiment configuration and the `gen` / `run` / `eval` / `diag`
//! commands behind the command-line binary.
//!
//! One JSON config fully specifies an experiment; its SHA-256 hash is
//! embedded in every artifact (checkpoints, CSVs, the dataset manifest)
//! so outputs can never silently mix across configs. One process runs
//! one experiment; sweeps are shell loops.
//!
//! Exit codes used by the binary: 0 success, 2 configuration or usage
//! error (including the overwrite refusal), 3 data error, 4 numeric
//! abort during training.

use crate::align::CrConfig;
use crate::metrics::{results_table, ResultsRow};
use crate::model::{ModelConfig, SegModel};
use crate::selftrain::{
    evaluate_confusion, AlignmentRecipe, CrossAlign, EvalSets, IntraAlign, RunConfig, RunOutcome,
    SgdSettings, StageConfig,
};
use crate::synthdata::io::{
    dir_is_nonempty, load_dataset, save_dataset, write_pseudo_labels, DatasetSplits,
};
use crate::synthdata::{generate, DomainSpec, SceneSample};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

/// Desk-scale weight of the mean-square alignment term; its gradient
/// into the shared encoder is an order of magnitude larger than the
/// supervised terms', so the `mse_align` method scales it down.
pub const MSE_ALIGN_WEIGHT: f64 = 0.1;

/// Same calibration for the triplet baseline's slot.
pub const TRIPLET_ALIGN_WEIGHT: f64 = 0.1;

/// Table-I-style method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SourceOnly,
    StBaseline,
    MseAlign,
    TripletAlign,
    Dca,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::StBaseline => "st_baseline",
            Method::MseAlign => "mse_align",
            Method::TripletAlign => "triplet_align",
            Method::Dca => "dca",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Some(match s {
            "source_only" => Method::SourceOnly,
            "st_baseline" => Method::StBaseline,
            "mse_align" => Method::MseAlign,
            "triplet_align" => Method::TripletAlign,
            "dca" => Method::Dca,
            _ => return None,
        })
    }

    /// Active-slot mask applied on top of the configured loss weights.
    pub fn weight_mask(&self) -> [f64; 4] {
        match self {
            Method::SourceOnly => [1.0, 0.0, 0.0, 0.0],
            Method::StBaseline => [1.0, 1.0, 0.0, 0.0],
            Method::MseAlign => [1.0, 1.0, 0.0, MSE_ALIGN_WEIGHT],
            Method::TripletAlign => [1.0, 1.0, TRIPLET_ALIGN_WEIGHT, 0.0],
            Method::Dca => [1.0, 1.0, 1.0, 1.0],
        }
    }

    pub fn recipe(&self) -> AlignmentRecipe {
        match self {
            Method::MseAlign => AlignmentRecipe {
                intra: IntraAlign::Covariance,
                cross: CrossAlign::MeanSquare,
            },
            Method::TripletAlign => AlignmentRecipe {
                intra: IntraAlign::Triplet,
                cross: CrossAlign::Covariance,
            },
            _ => AlignmentRecipe::default(),
        }
    }
}

/// Dataset location and generation counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    /// Dataset directory for `run`/`eval`/`diag`.
    #[serde(default)]
    pub root: Option<String>,
    #[serde(default = "default_train_count")]
    pub source_train: usize,
    #[serde(default = "default_val_count")]
    pub source_val: usize,
    #[serde(default = "default_train_count")]
    pub target_train: usize,
    #[serde(default = "default_val_count")]
    pub target_val: usize,
    /// Explicit domain pair; the built-in benchmark when absent.
    #[serde(default)]
    pub specs: Option<SpecPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecPair {
    pub source: DomainSpec,
    pub target: DomainSpec,
}

fn default_train_count() -> usize {
    32
}

fn default_val_count() -> usize {
    24
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            source_train: default_train_count(),
            source_val: default_val_count(),
            target_train: default_train_count(),
            target_val: default_val_count(),
            specs: None,
        }
    }
}

/// The versioned experiment document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub sgd: SgdSettings,
    #[serde(default)]
    pub stage: StageConfig,
    #[serde(default)]
    pub cr: CrConfig,
}

fn default_version() -> u32 {
    1
}

fn default_method() -> Method {
    Method::Dca
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: 1,
            seed: 0,
            method: Method::Dca,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            sgd: SgdSettings::default(),
            stage: StageConfig::default(),
            cr: CrConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig, CliError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        ExperimentConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != 1 {
            return Err(CliError::Config(format!(
                "unsupported config version {}",
                self.version
            )));
        }
        self.to_run_config()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(pair) = &self.data.specs {
            pair.source
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
            pair.target
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// SHA-256 of the serialized config; stamped into every artifact.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn domain_specs(&self) -> (DomainSpec, DomainSpec) {
        match &self.data.specs {
            Some(pair) => (pair.source.clone(), pair.target.clone()),
            None => crate::synthdata::benchmark::default_benchmark(),
        }
    }

    /// Training configuration with the method mask folded into the
    /// configured loss weights.
    pub fn to_run_config(&self) -> RunConfig {
        let mask = self.method.weight_mask();
        let mut weights = self.stage.loss_weights;
        for (w, m) in weights.iter_mut().zip(mask) {
            *w *= m;
        }
        RunConfig {
            model: self.model.clone(),
            sgd: self.sgd.clone(),
            stage: StageConfig {
                loss_weights: weights,
                ..self.stage.clone()
            },
            cr: self.cr.clone(),
            recipe: self.method.recipe(),
            seed: self.seed,
        }
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

fn data_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

/// Generate both domains' train/val splits into `out_dir`.
///
/// Split `k` of the four (source/target x train/val) draws from seed
/// `config.seed * 10 + k`, so splits never share images.
pub fn cmd_gen(config: &ExperimentConfig, out_dir: &Path, overwrite: bool) -> Result<(), CliError> {
    if dir_is_nonempty(out_dir) && !overwrite {
        return Err(CliError::Config(format!(
            "output directory {} is not empty; pass --overwrite to replace it",
            out_dir.display()
        )));
    }
    let (src_spec, tgt_spec) = config.domain_specs();
    let base = config.seed * 10;
    let splits = DatasetSplits {
        source_train: generate(&src_spec, config.data.source_train, base).map_err(data_err)?,
        source_val: generate(&src_spec, config.data.source_val, base + 1).map_err(data_err)?,
        target_train: generate(&tgt_spec, config.data.target_train, base + 2).map_err(data_err)?,
        target_val: generate(&tgt_spec, config.data.target_val, base + 3).map_err(data_err)?,
    };
    std::fs::create_dir_all(out_dir).map_err(data_err)?;
    save_dataset(
        out_dir,
        &splits,
        &src_spec,
        &tgt_spec,
        config.seed,
        &config.hash(),
    )
    .map_err(data_err)?;
    Ok(())
}

pub struct RunArtifacts {
    pub outcome: RunOutcome,
    pub hash: String,
}

/// Execute the configured method end to end and write every artifact
/// under `out_dir`.
pub fn cmd_run(
    config: &ExperimentConfig,
    out_dir: &Path,
    overwrite: bool,
) -> Result<RunArtifacts, CliError> {
    let root = config
        .data
        .root
        .as_ref()
        .ok_or_else(|| CliError::Config("config.data.root must point at a dataset".into()))?;
    let (splits, _manifest) = load_dataset(Path::new(root)).map_err(data_err)?;
    if dir_is_nonempty(out_dir) && !overwrite {
        return Err(CliError::Config(format!(
            "output directory {} is not empty; pass --overwrite to replace it",
            out_dir.display()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(data_err)?;

    let hash = config.hash();
    let run_cfg = config.to_run_config();
    let eval = EvalSets {
        source_val: &splits.source_val,
        target_val: &splits.target_val,
    };
    let outcome = run_algorithm_checked(&splits.source_train, &splits.target_train, &eval, &run_cfg)?;

    write_trace(&outcome, &hash, &out_dir.join("trace.csv"))?;
    write_stages(&outcome, &hash, &out_dir.join("stages.csv"))?;
    for (k, snap) in outcome.stage_models.iter().enumerate() {
        let model = SegModel::from_snapshot(snap);
        let name = if k == outcome.stage_models.len() - 1 {
            "ckpt_final.bin".to_string()
        } else {
            format!("ckpt_stage{k}.bin")
        };
        model.save(&out_dir.join(name), &hash).map_err(data_err)?;
    }
    for pseudo in &outcome.pseudo_sets {
        let dir = out_dir.join(format!("pseudo/stage{}", pseudo.stage));
        std::fs::create_dir_all(&dir).map_err(data_err)?;
        let (h, w) = pseudo.extent();
        for i in 0..pseudo.len() {
            write_pseudo_labels(&dir.join(format!("lbl_{i:05}.pgm")), h, w, pseudo.map(i))
                .map_err(data_err)?;
        }
    }

    let rows = vec![
        ResultsRow {
            method: format!("{}[source_val]", config.method.name()),
            report: crate::metrics::iou(&evaluate_confusion(&outcome.model, &splits.source_val)),
        },
        ResultsRow {
            method: format!("{}[target_val]", config.method.name()),
            report: crate::metrics::iou(&evaluate_confusion(&outcome.model, &splits.target_val)),
        },
    ];
    let class_names = class_names(config.model.num_classes);
    let (csv, text) = results_table(&rows, &class_names, &hash);
    std::fs::write(out_dir.join("results.csv"), csv).map_err(data_err)?;
    std::fs::write(out_dir.join("results.txt"), &text).map_err(data_err)?;

    Ok(RunArtifacts { outcome, hash })
}

fn run_algorithm_checked(
    source: &[SceneSample],
    target: &[SceneSample],
    eval: &EvalSets,
    run_cfg: &RunConfig,
) -> Result<RunOutcome, CliError> {
    crate::selftrain::run_algorithm1(source, target, Some(eval), run_cfg)
        .map_err(|e| CliError::Numeric(e.to_string()))
}

pub fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class{i}")).collect()
}

fn write_trace(outcome: &RunOutcome, hash: &str, path: &Path) -> Result<(), CliError> {
    let mut out = String::new();
    out.push_str(&format!("# config_hash={hash}\n"));
    out.push_str("stage,iter,L_CE_s,L_CE_t,L_ICR,L_CCR,lr\n");
    for r in &outcome.trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.stage, r.iter, r.l_ce_s, r.l_ce_t, r.l_intra, r.l_cross, r.lr
        ));
    }
    std::fs::write(path, out).map_err(data_err)
}

fn write_stages(outcome: &RunOutcome, hash: &str, path: &Path) -> Result<(), CliError> {
    let mut out = String::new();
    out.push_str(&format!("# config_hash={hash}\n"));
    out.push_str("stage,mean_CE_s,mean_CE_t,mean_ICR,mean_CCR,source_miou,target_miou\n");
    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in &outcome.stages {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.stage,
            s.mean_ce_s,
            s.mean_ce_t,
            s.mean_intra,
            s.mean_cross,
            fmt_opt(s.source_miou),
            fmt_opt(s.target_miou),
        ));
    }
    std::fs::write(path, out).map_err(data_err)
}

/// Evaluate checkpoints on one dataset split, returning the rendered
/// table. Row labels are the checkpoint file stems.
pub fn cmd_eval(
    checkpoints: &[std::path::PathBuf],
    data_root: &Path,
    split: &str,
    out_csv: Option<&Path>,
) -> Result<String, CliError> {
    if checkpoints.is_empty() {
        return Err(CliError::Config("no checkpoints given".into()));
    }
    let (splits, manifest) = load_dataset(data_root).map_err(data_err)?;
    if !crate::synthdata::io::SPLIT_NAMES.contains(&split) {
        return Err(CliError::Config(format!("unknown split {split}")));
    }
    let samples = splits.split(split);
    let mut rows = Vec::new();
    let mut n_classes = 0;
    for ckpt in checkpoints {
        let (model, _hash) = SegModel::load(ckpt).map_err(data_err)?;
        n_classes = model.config.num_classes;
        let conf = evaluate_confusion(&model, samples);
        rows.push(ResultsRow {
            method: ckpt
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| ckpt.display().to_string()),
            report: crate::metrics::iou(&conf),
        });
    }
    let (csv, text) = results_table(&rows, &class_names(n_classes), &manifest.config_hash);
    if let Some(path) = out_csv {
        std::fs::write(path, csv).map_err(data_err)?;
    }
    Ok(text)
}

pub struct DiagReport {
    /// Mean valid diagonal of the source-vs-source correlation matrix.
    pub ss_mean_diagonal: Option<f64>,
    /// Mean valid diagonal of the source-vs-target correlation matrix.
    pub st_mean_diagonal: Option<f64>,
}

/// Correlation matrices between two source groups and across domains,
/// plus a 2-D projection of per-image category centroids, written as CSV.
pub fn cmd_diag(
    checkpoint: &Path,
    data_root: &Path,
    out_dir: &Path,
    seed: u64,
) -> Result<DiagReport, CliError> {
    let (model, hash) = SegModel::load(checkpoint).map_err(data_err)?;
    let (splits, _manifest) = load_dataset(data_root).map_err(data_err)?;
    std::fs::create_dir_all(out_dir).map_err(data_err)?;
    let report = diag_model(
        &model,
        &splits.source_train,
        &splits.target_train,
        seed,
        Some((out_dir, hash.as_str())),
    )?;
    Ok(report)
}

/// The diagnostic computation behind [`cmd_diag`], reusable in-memory.
pub fn diag_model(
    model: &SegModel,
    source: &[SceneSample],
    target: &[SceneSample],
    seed: u64,
    export: Option<(&Path, &str)>,
) -> Result<DiagReport, CliError> {
    use crate::cfp::pool_group;
    use crate::tensor::Tape;

    let batch = 4usize.min(source.len() / 2).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(100);
    let pick = |rng: &mut ChaCha8Rng, len: usize, k: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(rng);
        idx.truncate(k);
        idx
    };
    let src_a = pick(&mut rng, source.len(), batch);
    let src_b = pick(&mut rng, source.len(), batch);
    let tgt_i = pick(&mut rng, target.len(), batch.min(target.len()));

    let tape = Tape::inference();
    let items = |data: &[SceneSample], idx: &[usize]| -> Vec<(crate::tensor::Tensor, crate::tensor::Tensor)> {
        idx.iter()
            .map(|&i| {
                let x = data[i].image.to_tensor();
                let feat = model.encode(&tape, &x);
                let coarse = tape.softmax_channel(&model.classify_coarse(&tape, &feat));
                (feat, coarse)
            })
            .collect()
    };
    let ga = items(source, &src_a);
    let gb = items(source, &src_b);
    let gt = items(target, &tgt_i);

    let cr = CrConfig::default();
    let f_a = pool_group(&tape, &ga);
    let f_b = pool_group(&tape, &gb);
    let f_t = pool_group(&tape, &gt);
    let corr_ss = crate::align::pearson_matrix(&tape, &f_a, &f_b, &cr);
    let corr_st = crate::align::pearson_matrix(&tape, &f_a, &f_t, &cr);

    if let Some((out_dir, hash)) = export {
        let labels = class_names(model.config.num_classes);
        crate::metrics::corr_matrix_export(&corr_ss, &labels, hash, &out_dir.join("corr_ss.csv"))
            .map_err(data_err)?;
        crate::metrics::corr_matrix_export(&corr_st, &labels, hash, &out_dir.join("corr_st.csv"))
            .map_err(data_err)?;

        // per-image category centroids, labeled by domain and class
        let mut feats: Vec<(Vec<f64>, String)> = Vec::new();
        for (domain, group) in [("source", &ga), ("source", &gb), ("target", &gt)] {
            for (feat, coarse) in group.iter() {
                let cf = crate::cfp::pool(&tape, feat, coarse);
                let data = cf.f.to_vec();
                let c = cf.feature_dim();
                for (i, &ok) in cf.valid.iter().enumerate() {
                    if ok {
                        feats.push((data[i * c..(i + 1) * c].to_vec(), format!("{domain}/class{i}")));
                    }
                }
            }
        }
        if feats.len() >= 2 {
            let proj = crate::metrics::feature_projection_2d(&feats);
            let mut csv = format!("# config_hash={hash}\nx,y,label\n");
            for (x, y, label) in &proj.points {
                csv.push_str(&format!("{x},{y},{label}\n"));
            }
            std::fs::write(out_dir.join("projection.csv"), csv).map_err(data_err)?;
        }
    }

    Ok(DiagReport {
        ss_mean_diagonal: corr_ss.mean_valid_diagonal(),
        st_mean_diagonal: corr_st.mean_valid_diagonal(),
    })
}
