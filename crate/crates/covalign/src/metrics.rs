//! Evaluation: confusion matrices, per-class IoU and mIoU, 2-D feature
//! projections, and the CSV exports behind the diagnostics.
//!
//! Confusion accumulation is a commutative monoid, so per-image counts
//! merge in any order. Classes that never occur (zero denominator) are
//! reported as undefined and excluded from the mean rather than counted
//! as zero.
//!
//! Float cells in CSV exports are printed with 17 significant digits,
//! which round-trips `f64` exactly.

use crate::align::CorrMatrix;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `counts[gt * n + pred]`, ignore pixels excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> ConfusionMatrix {
        assert!(n >= 1);
        ConfusionMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn record(&mut self, gt: usize, pred: usize) {
        self.counts[gt * self.n + pred] += 1;
    }

    /// Accumulate one image; pixels whose ground truth is `ignore` are
    /// skipped.
    pub fn accumulate(&mut self, gt: &[u8], pred: &[u8], ignore: u8) {
        assert_eq!(gt.len(), pred.len(), "confusion: length mismatch");
        for (&g, &p) in gt.iter().zip(pred) {
            if g == ignore {
                continue;
            }
            self.record(g as usize, p as usize);
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.n, other.n);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }
}

/// Per-class IoU (undefined classes are `None`) and their mean.
#[derive(Debug, Clone)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: Option<f64>,
}

/// `IoU_i = TP_i / (TP_i + FP_i + FN_i)`; classes with a zero denominator
/// are undefined and excluded from the mean.
pub fn iou(conf: &ConfusionMatrix) -> IouReport {
    let n = conf.num_classes();
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|c| {
            let tp = conf.count(c, c);
            let fp: u64 = (0..n).filter(|&g| g != c).map(|g| conf.count(g, c)).sum();
            let fn_: u64 = (0..n).filter(|&p| p != c).map(|p| conf.count(c, p)).sum();
            let denom = tp + fp + fn_;
            if denom == 0 {
                None
            } else {
                Some(tp as f64 / denom as f64)
            }
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    IouReport { per_class, miou }
}

/// A 2-D projection of labeled feature vectors.
#[derive(Debug, Clone)]
pub struct Projection {
    pub points: Vec<(f64, f64, String)>,
    /// Set when the input had no variance; all points sit at the origin.
    pub degenerate: bool,
}

/// Project labeled `C`-vectors onto their top two principal components.
///
/// Deterministic: components come from a Jacobi eigendecomposition of the
/// covariance of the centered set, each component's largest-magnitude
/// loading is made positive, and ties in eigenvalues resolve by sweep
/// order.
pub fn feature_projection_2d(features: &[(Vec<f64>, String)]) -> Projection {
    assert!(features.len() >= 2, "projection needs at least 2 vectors");
    let c = features[0].0.len();
    assert!(c >= 2, "projection needs at least 2 dimensions");
    assert!(
        features.iter().all(|(v, _)| v.len() == c),
        "inconsistent feature dimensions"
    );
    let m = features.len();
    let mean: Vec<f64> = (0..c)
        .map(|j| features.iter().map(|(v, _)| v[j]).sum::<f64>() / m as f64)
        .collect();
    let centered: Vec<Vec<f64>> = features
        .iter()
        .map(|(v, _)| v.iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();
    // covariance over samples
    let mut cov = vec![0.0; c * c];
    for row in &centered {
        for i in 0..c {
            for j in i..c {
                cov[i * c + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            cov[i * c + j] /= m as f64;
            cov[j * c + i] = cov[i * c + j];
        }
    }
    let trace: f64 = (0..c).map(|i| cov[i * c + i]).sum();
    if trace <= 1e-30 {
        return Projection {
            points: features
                .iter()
                .map(|(_, l)| (0.0, 0.0, l.clone()))
                .collect(),
            degenerate: true,
        };
    }
    let (eigvals, eigvecs) = jacobi_eigen(&cov, c);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eigvals[b].total_cmp(&eigvals[a]));
    let component = |k: usize| -> Vec<f64> {
        let col = order[k];
        let mut v: Vec<f64> = (0..c).map(|i| eigvecs[i * c + col]).collect();
        // sign convention: largest-magnitude loading positive
        let lead = v
            .iter()
            .cloned()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap();
        if lead < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
        v
    };
    let (p1, p2) = (component(0), component(1));
    let points = centered
        .iter()
        .zip(features)
        .map(|(row, (_, label))| {
            let x: f64 = row.iter().zip(&p1).map(|(a, b)| a * b).sum();
            let y: f64 = row.iter().zip(&p2).map(|(a, b)| a * b).sum();
            (x, y, label.clone())
        })
        .collect();
    Projection {
        points,
        degenerate: false,
    }
}

/// Cyclic Jacobi sweeps on a symmetric matrix; returns eigenvalues and a
/// column-major eigenvector matrix.
fn jacobi_eigen(sym: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = sym.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = cos * akp - sin * akq;
                    a[k * n + q] = sin * akp + cos * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = cos * apk - sin * aqk;
                    a[q * n + k] = sin * apk + cos * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = cos * vkp - sin * vkq;
                    v[k * n + q] = sin * vkp + cos * vkq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| a[i * n + i]).collect();
    (vals, v)
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write a correlation matrix as CSV: a `# config_hash=` line, a header
/// of category labels, then one row per category with invalid entries
/// left empty.
pub fn corr_heatmap_export(
    corr_values: &[f64],
    pair_valid: &[bool],
    labels: &[String],
    config_hash: &str,
    path: &Path,
) -> Result<(), ExportError> {
    let n = labels.len();
    assert_eq!(corr_values.len(), n * n);
    assert_eq!(pair_valid.len(), n * n);
    let mut out = String::new();
    out.push_str(&format!("# config_hash={config_hash}\n"));
    out.push_str(&format!(",{}\n", labels.join(",")));
    for i in 0..n {
        out.push_str(&labels[i]);
        for j in 0..n {
            out.push(',');
            if pair_valid[i * n + j] {
                out.push_str(&fmt17(corr_values[i * n + j]));
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// Convenience wrapper reading straight from a [`CorrMatrix`].
pub fn corr_matrix_export(
    corr: &CorrMatrix,
    labels: &[String],
    config_hash: &str,
    path: &Path,
) -> Result<(), ExportError> {
    corr_heatmap_export(
        &corr.values.to_vec(),
        &corr.pair_valid,
        labels,
        config_hash,
        path,
    )
}

/// Parse a heatmap CSV back into `(labels, entries)` with `None` for
/// invalid cells.
pub fn corr_heatmap_import(path: &Path) -> Result<(Vec<String>, Vec<Option<f64>>), ExportError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| ExportError::Malformed {
        path: path.display().to_string(),
        reason: "empty file".into(),
    })?;
    let labels: Vec<String> = header.split(',').skip(1).map(|s| s.to_string()).collect();
    let n = labels.len();
    let mut entries = Vec::with_capacity(n * n);
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n + 1 {
            return Err(ExportError::Malformed {
                path: path.display().to_string(),
                reason: format!("row has {} cells, expected {}", cells.len(), n + 1),
            });
        }
        for cell in &cells[1..] {
            if cell.is_empty() {
                entries.push(None);
            } else {
                let v = cell.parse().map_err(|_| ExportError::Malformed {
                    path: path.display().to_string(),
                    reason: format!("bad float {cell}"),
                })?;
                entries.push(Some(v));
            }
        }
    }
    if entries.len() != n * n {
        return Err(ExportError::Malformed {
            path: path.display().to_string(),
            reason: "row count does not match header".into(),
        });
    }
    Ok((labels, entries))
}

/// One row of a results table: a method name with its per-class IoU and
/// mIoU.
pub struct ResultsRow {
    pub method: String,
    pub report: IouReport,
}

/// Results table as CSV (17-digit floats) plus an aligned text rendering.
pub fn results_table(
    rows: &[ResultsRow],
    class_names: &[String],
    config_hash: &str,
) -> (String, String) {
    let mut csv = String::new();
    csv.push_str(&format!("# config_hash={config_hash}\n"));
    csv.push_str(&format!("method,{},miou\n", class_names.join(",")));
    for row in rows {
        csv.push_str(&row.method);
        for c in &row.report.per_class {
            csv.push(',');
            if let Some(v) = c {
                csv.push_str(&fmt17(*v));
            }
        }
        csv.push(',');
        if let Some(m) = row.report.miou {
            csv.push_str(&fmt17(m));
        }
        csv.push('\n');
    }

    let mut text = String::new();
    let name_w = rows
        .iter()
        .map(|r| r.method.len())
        .chain(std::iter::once("method".len()))
        .max()
        .unwrap_or(6);
    text.push_str(&format!("{:name_w$}", "method"));
    for c in class_names {
        text.push_str(&format!("  {c:>9}"));
    }
    text.push_str(&format!("  {:>9}\n", "mIoU"));
    for row in rows {
        text.push_str(&format!("{:name_w$}", row.method));
        for c in &row.report.per_class {
            match c {
                Some(v) => text.push_str(&format!("  {:>9.2}", 100.0 * v)),
                None => text.push_str(&format!("  {:>9}", "-")),
            }
        }
        match row.report.miou {
            Some(m) => text.push_str(&format!("  {:>9.2}\n", 100.0 * m)),
            None => text.push_str(&format!("  {:>9}\n", "-")),
        }
    }
    (csv, text)
}
