//! End-to-end checks of the command-line binary.

use std::path::Path;
use std::process::Command;

fn covalign() -> Command {
    Command::new(env!("CARGO_BIN_EXE_covalign"))
}

fn tiny_config(dir: &Path, data_root: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "seed": 3,
        "method": "dca",
        "data": {
            "root": data_root.to_str().unwrap(),
            "source_train": 6, "source_val": 4,
            "target_train": 6, "target_val": 4
        },
        "model": {
            "in_channels": 3, "widths": [6, 8, 8],
            "num_classes": 5, "downsample_factor": 4
        },
        "stage": {
            "max_stages": 2, "iters_per_stage": 3, "batch_size": 2,
            "pseudo_confidence_threshold": null,
            "loss_weights": [1.0, 1.0, 1.0, 1.0]
        }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn gen_run_eval_diag_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let diag = tmp.path().join("diag");
    let cfg = tiny_config(tmp.path(), &data);

    let out = covalign()
        .args(["gen", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").exists());
    assert!(data.join("source_train/img_00000.cvi").exists());
    assert!(data.join("target_val/lbl_00003.pgm").exists());

    // repeated generation without --overwrite is refused with the
    // documented config exit code
    let refused = covalign()
        .args(["gen", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(refused.status.code(), Some(2));

    // identical regeneration with --overwrite is byte-identical
    let manifest_before = std::fs::read(data.join("manifest.json")).unwrap();
    let again = covalign()
        .args(["gen", "--overwrite", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert!(again.status.success());
    assert_eq!(manifest_before, std::fs::read(data.join("manifest.json")).unwrap());

    let out = covalign()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "trace.csv",
        "stages.csv",
        "results.csv",
        "results.txt",
        "ckpt_stage0.bin",
        "ckpt_stage1.bin",
        "ckpt_final.bin",
        "pseudo/stage1/lbl_00000.pgm",
        "pseudo/stage2/lbl_00005.pgm",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    // every artifact embeds the config hash
    let trace = std::fs::read_to_string(run.join("trace.csv")).unwrap();
    assert!(trace.starts_with("# config_hash="));
    let hash_line = trace.lines().next().unwrap().to_string();
    let results = std::fs::read_to_string(run.join("results.csv")).unwrap();
    assert!(results.starts_with(&hash_line));
    // the trace has one row per iteration: (K + 1) * iters
    let rows = trace.lines().skip(2).count();
    assert_eq!(rows, 3 * 3);

    let out = covalign()
        .arg("eval")
        .arg(run.join("ckpt_final.bin"))
        .arg(run.join("ckpt_stage0.bin"))
        .arg("--data")
        .arg(&data)
        .arg("--split")
        .arg("target_val")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("ckpt_final"));
    assert!(table.contains("mIoU"));

    let out = covalign()
        .args(["diag", "--checkpoint"])
        .arg(run.join("ckpt_final.bin"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&diag)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(diag.join("corr_ss.csv").exists());
    assert!(diag.join("corr_st.csv").exists());
    assert!(diag.join("projection.csv").exists());
    let (labels, entries) =
        covalign::metrics::corr_heatmap_import(&diag.join("corr_st.csv")).unwrap();
    assert_eq!(labels.len(), 5);
    assert_eq!(entries.len(), 25);
}

#[test]
fn missing_checkpoint_fails_with_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = covalign()
        .args(["diag", "--checkpoint"])
        .arg(tmp.path().join("nope.bin"))
        .arg("--data")
        .arg(tmp.path())
        .arg("--out")
        .arg(tmp.path().join("d"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn bad_config_fails_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"version": 1, "model": {"in_channels": 3, "widths": [], "num_classes": 5, "downsample_factor": 4}}"#).unwrap();
    let out = covalign()
        .args(["gen", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_without_dataset_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    // no data.root in config and no --data flag
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"seed": 1}"#).unwrap();
    let out = covalign()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("r"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
