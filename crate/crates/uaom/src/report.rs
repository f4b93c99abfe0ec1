//! Evaluation manifests in, CSV and JSON reports out.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use uaom_core::eval::{average_runs, ground_truth_agreement, EvalRecord};
use uaom_core::network::NetworkModel;

use crate::error::{Error, Result};
use crate::imageio::load_png_gray;
use crate::pipeline::{evaluate_pair, Settings};

pub const DEFAULT_RUNS: usize = 10;

fn default_runs() -> usize {
    DEFAULT_RUNS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub path_a: PathBuf,
    pub path_b: PathBuf,
    /// Row-major homography taking A coordinates to B.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_transform: Option<[[f64; 3]; 3]>,
    #[serde(default = "default_runs")]
    pub runs: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestFile {
    List(Vec<ManifestEntry>),
    Wrapped { pairs: Vec<ManifestEntry> },
}

/// Reads a manifest: either a JSON array of entries or `{"pairs": [...]}`.
/// Relative image paths are resolved against the manifest's directory.
/// Image paths are not checked here; a bad one fails only its own entry.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut entries = match parsed {
        ManifestFile::List(v) => v,
        ManifestFile::Wrapped { pairs } => pairs,
    };
    let base = path.parent().unwrap_or(Path::new("."));
    for e in &mut entries {
        if e.runs == 0 {
            return Err(Error::Config(format!("{}: runs must be positive", e.pair_id)));
        }
        if let Some(h) = e.expected_transform {
            let m = Matrix3::from_fn(|r, c| h[r][c]);
            if !m.iter().all(|v| v.is_finite()) || m.determinant().abs() < 1e-12 {
                return Err(Error::Config(format!("{}: expected_transform is not invertible", e.pair_id)));
            }
        }
        for p in [&mut e.path_a, &mut e.path_b] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(entries)
}

/// Serializable mirror of [`EvalRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordJson {
    pub pair_id: String,
    pub method: String,
    pub gm: f64,
    pub inl: f64,
    pub ma: f64,
    pub rt_s: f64,
    pub transfer_s: f64,
    pub gm_ratio_only: f64,
    pub degenerate: bool,
}

impl From<&EvalRecord> for RecordJson {
    fn from(r: &EvalRecord) -> Self {
        Self {
            pair_id: r.pair_id.clone(),
            method: r.method.clone(),
            gm: r.gm,
            inl: r.inl,
            ma: r.ma,
            rt_s: r.rt_seconds,
            transfer_s: r.transfer_seconds,
            gm_ratio_only: r.gm_ratio_only,
            degenerate: r.degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryReport {
    pub pair_id: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub records: Vec<RecordJson>,
    /// Fraction of inliers (over all runs) consistent with the expected
    /// transform within the RANSAC threshold.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub settings: Settings,
    pub entries: Vec<EntryReport>,
}

impl EvalReport {
    pub fn succeeded(&self) -> usize {
        self.entries.iter().filter(|e| e.ok).count()
    }

    /// Records of successful entries, in manifest order.
    pub fn records(&self) -> impl Iterator<Item = &RecordJson> {
        self.entries.iter().flat_map(|e| e.records.iter())
    }
}

fn evaluate_entry(
    entry: &ManifestEntry,
    model: &NetworkModel,
    desc: &NetworkModel,
    settings: &Settings,
    baseline: bool,
) -> Result<(Vec<RecordJson>, Option<f64>)> {
    let a = load_png_gray(&entry.path_a)?;
    let b = load_png_gray(&entry.path_b)?;
    let truth = entry
        .expected_transform
        .map(|m| Matrix3::from_fn(|r, c| m[r][c]));
    let mut ours = Vec::with_capacity(entry.runs);
    let mut raw = Vec::new();
    let (mut agree, mut total) = (0usize, 0usize);
    for run in 0..entry.runs {
        let s = Settings {
            seed: settings.seed.wrapping_add(run as u64),
            ..settings.clone()
        };
        let out = evaluate_pair(&a, &b, model, desc, &s, &entry.pair_id, baseline)?;
        if let Some(h) = &truth {
            let (ok, n) = ground_truth_agreement(&out.matches, h, s.ransac_thresh_px);
            agree += ok;
            total += n;
        }
        ours.push(out.record);
        if let Some((r, _)) = out.raw {
            raw.push(r);
        }
    }
    let mut records = vec![RecordJson::from(&average_runs(&ours)?)];
    if !raw.is_empty() {
        records.push(RecordJson::from(&average_runs(&raw)?));
    }
    let agreement = truth.map(|_| if total == 0 { 0.0 } else { agree as f64 / total as f64 });
    Ok((records, agreement))
}

/// Evaluates every entry, in parallel across entries. Output order follows
/// the manifest regardless of scheduling.
pub fn run_manifest(
    entries: &[ManifestEntry],
    model: &NetworkModel,
    desc: &NetworkModel,
    settings: &Settings,
    baseline: bool,
) -> EvalReport {
    let reports = entries
        .par_iter()
        .map(|e| match evaluate_entry(e, model, desc, settings, baseline) {
            Ok((records, truth_agreement)) => EntryReport {
                pair_id: e.pair_id.clone(),
                ok: true,
                error: None,
                records,
                truth_agreement,
            },
            Err(err) => EntryReport {
                pair_id: e.pair_id.clone(),
                ok: false,
                error: Some(err.to_string()),
                records: Vec::new(),
                truth_agreement: None,
            },
        })
        .collect();
    EvalReport {
        settings: settings.clone(),
        entries: reports,
    }
}

pub const CSV_HEADER: [&str; 7] = ["pair_id", "method", "gm", "inl", "ma", "rt_s", "transfer_s"];

pub fn records_csv<'a>(records: impl IntoIterator<Item = &'a RecordJson>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.pair_id.clone(),
            r.method.clone(),
            format!("{}", r.gm),
            format!("{}", r.inl),
            format!("{:.4}", r.ma),
            format!("{:.4}", r.rt_s),
            format!("{:.4}", r.transfer_s),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
