use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{reduction_label, CacheSpec};
use crate::bench::BenchPairRow;
use crate::bkv::{BalanceFactor, KvNormRow};
use crate::error::{Error, Result};
use crate::rorope::KeyNormRow;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub stage: String,
    /// False when the stage was skipped and the layer passed through.
    pub applied: bool,
    pub max_abs_vs_prev: f64,
    pub rel_vs_prev: f64,
    pub max_abs_vs_source: f64,
    pub rel_vs_source: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheAccounting {
    pub before_scalars: usize,
    pub after_scalars: usize,
    /// `1 − after/before`
    pub reduction: f64,
    pub reduction_label: String,
}

impl CacheAccounting {
    pub fn new(before: &CacheSpec, after: &CacheSpec) -> Self {
        let reduction = after.reduction_vs(before);
        Self {
            before_scalars: before.per_token_scalars,
            after_scalars: after.per_token_scalars,
            reduction,
            reduction_label: reduction_label(reduction),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSweepRow {
    pub method: String,
    pub rank: usize,
    pub key_error: f64,
    pub value_error: f64,
    pub captured_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub hidden: usize,
    pub heads: usize,
    pub groups: usize,
    pub head_dim: usize,
    pub fold: usize,
    pub n_keep_heads: usize,
    pub d_rope: usize,
    pub r_kv: usize,
    pub r_q: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub layer: LayerSummary,
    pub stages: Vec<StageError>,
    pub cache: CacheAccounting,
    pub balance: Option<BalanceFactor>,
    pub captured_energy: f64,
    pub query_captured_energy: Option<f64>,
    pub key_norms: Vec<KeyNormRow>,
    pub kv_norms: Vec<KvNormRow>,
    pub rank_sweep: Vec<RankSweepRow>,
    /// GQA baseline vs converted layer, one row per context length.
    pub bench: Vec<BenchPairRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(Error::config(format!("unknown report format `{other}`"))),
        }
    }
}

pub fn load_report(path: impl AsRef<Path>) -> Result<ConversionReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the report into `dir` and returns the created files.
///
/// JSON produces `report.json`; CSV produces one file per table.
pub fn emit_report(report: &ConversionReport, dir: impl AsRef<Path>, format: ReportFormat) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    match format {
        ReportFormat::Json => {
            let path = dir.join("report.json");
            fs::write(&path, serde_json::to_string_pretty(report)? + "\n")?;
            Ok(vec![path])
        }
        ReportFormat::Csv => {
            let mut out = Vec::new();
            let mut emit = |name: &str, f: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
                let path = dir.join(name);
                f(&path)?;
                out.push(path);
                Ok(())
            };
            emit("stages.csv", &|p| {
                write_csv(
                    p,
                    &[
                        "stage",
                        "applied",
                        "max_abs_vs_prev",
                        "rel_vs_prev",
                        "max_abs_vs_source",
                        "rel_vs_source",
                    ],
                    &report.stages,
                )
            })?;
            emit("cache.csv", &|p| {
                write_csv(
                    p,
                    &["before_scalars", "after_scalars", "reduction", "reduction_label"],
                    std::slice::from_ref(&report.cache),
                )
            })?;
            emit("key_norms.csv", &|p| {
                write_csv(p, &["dim", "pre", "rorope", "freqfold"], &report.key_norms)
            })?;
            emit("kv_norms.csv", &|p| {
                write_csv(p, &["component", "pre_balance", "post_balance"], &report.kv_norms)
            })?;
            emit("rank_sweep.csv", &|p| {
                write_csv(
                    p,
                    &["method", "rank", "key_error", "value_error", "captured_energy"],
                    &report.rank_sweep,
                )
            })?;
            emit("bench.csv", &|p| {
                write_csv(
                    p,
                    &[
                        "context",
                        "decode_steps",
                        "baseline_tokens_per_s",
                        "candidate_tokens_per_s",
                        "speedup",
                        "baseline_cache_bytes",
                        "candidate_cache_bytes",
                        "cache_bytes_ratio",
                    ],
                    &report.bench,
                )
            })?;
            Ok(out)
        }
    }
}
