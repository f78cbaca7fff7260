//! End-to-end conversion: merge, fold, rotate, split, balance, compress, assemble.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attention::{CacheSpec, GqaDecoder, GqaLayer, MlaDecoder, MlaLayer};
use crate::bench::{bench_decode_pair, BenchOptions};
use crate::bkv::{
    assemble_mla, balance, compress_query, compute_alpha, decompose_projections, joint_kv_pca, kv_activations,
    kv_norm_rows, pca_basis, weight_kv_pca, KvPcaBasis,
};
use crate::error::{Error, Result, StageExt};
use crate::io::{load_bundle, load_tensor, save_bundle, synth_calib, synth_gqa, synth_gqa_kv_split, CalibStructure};
use crate::layer::{AnyLayer, AttentionLayer};
use crate::report::{CacheAccounting, ConversionReport, LayerSummary, RankSweepRow, StageError};
use crate::rewrite::{merge_key_heads, MergedGqaLayer};
use crate::rorope::{
    apply_rotations, collect_key_stats, fold_frequencies, key_norm_rows, solve_rotations, split_rope_nope,
    SplitKeyLayer,
};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::verify::{compare_outputs, forward_all, split_sequences};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaMethod {
    #[default]
    Activation,
    Weight,
}

fn default_one() -> usize {
    1
}
fn default_seq_len() -> usize {
    16
}
fn default_true() -> bool {
    true
}
fn default_fit_fraction() -> f64 {
    0.9
}
fn default_tolerance() -> f64 {
    1e-8
}

/// Knobs shared by the library entry point and the JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionOptions {
    /// FreqFold group size `M`.
    #[serde(default = "default_one")]
    pub fold: usize,
    #[serde(default = "default_one")]
    pub n_keep_heads: usize,
    pub r_kv: usize,
    #[serde(default)]
    pub r_q: Option<usize>,
    #[serde(default)]
    pub pca: PcaMethod,
    #[serde(default = "default_true")]
    pub balance: bool,
    /// Tokens per sequence when evaluating outputs.
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    /// Share of sequences used for fitting; the rest verify.
    #[serde(default = "default_fit_fraction")]
    pub fit_fraction: f64,
    /// Extra ranks for the reconstruction-error table.
    #[serde(default)]
    pub rank_sweep: Vec<usize>,
}

impl ConversionOptions {
    pub fn new(r_kv: usize) -> Self {
        Self {
            fold: 1,
            n_keep_heads: 1,
            r_kv,
            r_q: None,
            pca: PcaMethod::Activation,
            balance: true,
            seq_len: default_seq_len(),
            fit_fraction: default_fit_fraction(),
            rank_sweep: Vec::new(),
        }
    }

    fn validate(&self, groups: usize, head_dim: usize) -> Result<()> {
        if self.n_keep_heads > groups {
            return Err(Error::config(format!(
                "n_keep_heads {} exceeds {groups} groups",
                self.n_keep_heads
            )));
        }
        let max_rkv = (2 * groups - self.n_keep_heads) * head_dim;
        if self.r_kv == 0 || self.r_kv > max_rkv {
            return Err(Error::config(format!("r_kv {} outside 1..={max_rkv}", self.r_kv)));
        }
        if self.fold == 0 || (head_dim / 2) % self.fold != 0 {
            return Err(Error::config(format!(
                "fold {} does not divide {} frequency pairs",
                self.fold,
                head_dim / 2
            )));
        }
        if !(self.fit_fraction > 0.0 && self.fit_fraction < 1.0) {
            return Err(Error::config("fit_fraction must lie in (0, 1)"));
        }
        if self.seq_len == 0 {
            return Err(Error::config("seq_len must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceSpec {
    Bundle {
        path: PathBuf,
    },
    Synth {
        hidden: usize,
        heads: usize,
        groups: usize,
        #[serde(default = "default_base")]
        rope_base: f64,
        /// Keys read the first half of the hidden state, values the second.
        #[serde(default)]
        kv_split: bool,
    },
}

fn default_base() -> f64 {
    10000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibSpec {
    /// A `tokens × D` tensor file.
    Path {
        path: PathBuf,
    },
    Synth {
        samples: usize,
        structure: CalibStructure,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub source: SourceSpec,
    pub calib: CalibSpec,
    #[serde(flatten)]
    pub options: ConversionOptions,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bench: Option<BenchOptions>,
    #[serde(default)]
    pub out_bundle: Option<PathBuf>,
    #[serde(default)]
    pub out_report: Option<PathBuf>,
}

/// Every intermediate layer of a conversion.
#[derive(Debug, Clone)]
pub struct Conversion<T> {
    pub merged: MergedGqaLayer<T>,
    pub folded: MergedGqaLayer<T>,
    pub rotated: MergedGqaLayer<T>,
    pub split: SplitKeyLayer<T>,
    pub balanced: SplitKeyLayer<T>,
    pub basis: KvPcaBasis<T>,
    /// Compressed KV with the full query path.
    pub compressed: MlaLayer<T>,
    /// Final layer, query compressed when requested.
    pub mla: MlaLayer<T>,
    pub report: ConversionReport,
}

struct StageTracker<'a, T> {
    verify: &'a [Matrix<T>],
    source: Vec<Matrix<T>>,
    prev: Vec<Matrix<T>>,
    rows: Vec<StageError>,
}

impl<'a, T: Scalar> StageTracker<'a, T> {
    fn new(src: &dyn AttentionLayer<T>, verify: &'a [Matrix<T>]) -> Result<Self> {
        let source = forward_all(src, verify)?;
        Ok(Self {
            verify,
            prev: source.clone(),
            source,
            rows: Vec::new(),
        })
    }

    fn record(&mut self, stage: &'static str, applied: bool, layer: &dyn AttentionLayer<T>) -> Result<()> {
        let out = forward_all(layer, self.verify).stage(stage)?;
        let vs_prev = compare_outputs(&self.prev, &out, 0.0)?;
        let vs_src = compare_outputs(&self.source, &out, 0.0)?;
        self.rows.push(StageError {
            stage: stage.to_string(),
            applied,
            max_abs_vs_prev: vs_prev.max_abs,
            rel_vs_prev: vs_prev.max_rel,
            max_abs_vs_source: vs_src.max_abs,
            rel_vs_source: vs_src.max_rel,
        });
        self.prev = out;
        Ok(())
    }
}

/// Splits a token stream into fitting tokens and verification sequences.
pub fn fit_verify_split<T: Scalar>(
    x: &Matrix<T>,
    seq_len: usize,
    fit_fraction: f64,
) -> Result<(Matrix<T>, Vec<Matrix<T>>)> {
    let seqs = split_sequences(x, seq_len)?;
    if seqs.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2 * seq_len,
            got: x.rows(),
        });
    }
    let n_fit = ((seqs.len() as f64 * fit_fraction).round() as usize).clamp(1, seqs.len() - 1);
    let fit = x.slice_rows(0..n_fit * seq_len);
    Ok((fit, seqs[n_fit..].to_vec()))
}

fn rank_sweep<T: Scalar>(
    balanced: &SplitKeyLayer<T>,
    unbalanced: &SplitKeyLayer<T>,
    fit: &Matrix<T>,
    ranks: &[usize],
) -> Result<Vec<RankSweepRow>> {
    let cb = kv_activations(balanced, fit);
    let cu = kv_activations(unbalanced, fit);
    let key_rows = balanced.nope_dim();
    let mut rows = Vec::new();
    for &rank in ranks {
        if rank == 0 || rank > cb.cols() {
            continue;
        }
        let methods = [
            ("activation_balanced", pca_basis(&cb, rank, key_rows)?, &cb),
            ("activation_unbalanced", pca_basis(&cu, rank, key_rows)?, &cu),
            ("weight_balanced", weight_kv_pca(balanced, rank)?, &cb),
        ];
        for (method, basis, c) in methods {
            let (key_error, value_error) = basis.reconstruction_error(c);
            rows.push(RankSweepRow {
                method: method.to_string(),
                rank,
                key_error,
                value_error,
                captured_energy: basis.captured_energy_fraction,
            });
        }
    }
    Ok(rows)
}

/// Converts `src` using `calib` (`tokens × D`) for fitting and verification.
pub fn run_conversion<T: Scalar>(
    src: &GqaLayer<T>,
    calib: &Matrix<T>,
    opts: &ConversionOptions,
) -> Result<Conversion<T>> {
    opts.validate(src.groups, src.head_dim)?;
    let (fit, verify) = fit_verify_split(calib, opts.seq_len, opts.fit_fraction)?;
    let mut track = StageTracker::new(src, &verify)?;

    let merged = merge_key_heads(src);
    track.record("merge", true, &merged)?;

    let folded = fold_frequencies(&merged, opts.fold).stage("fold")?;
    track.record("fold", opts.fold > 1, &folded)?;

    let stats = collect_key_stats(&folded, &fit, opts.fold).stage("rotate")?;
    let rot = solve_rotations(&stats).stage("rotate")?;
    let rotated = apply_rotations(&folded, &rot).stage("rotate")?;
    track.record("rotate", true, &rotated)?;

    let (plain_stats, plain_rot) = if opts.fold == 1 {
        (stats.clone(), rot.clone())
    } else {
        let s = collect_key_stats(&merged, &fit, 1).stage("rotate")?;
        let r = solve_rotations(&s).stage("rotate")?;
        (s, r)
    };
    let key_norms = key_norm_rows(&plain_stats, &plain_rot, &stats, &rot)?;

    let split = split_rope_nope(&rotated, opts.n_keep_heads).stage("split")?;
    track.record("split", true, &split)?;

    let before = if split.nope_dim() > 0 {
        Some(compute_alpha(&split, &fit))
    } else {
        None
    };
    let (balanced, balance_factor, kv_norms) = match before {
        Some(Ok(factor)) if opts.balance => {
            let b = balance(&split, &factor).stage("balance")?;
            let after = compute_alpha(&b, &fit).stage("balance")?;
            (b, Some(factor), kv_norm_rows(&factor, &after))
        }
        Some(Ok(factor)) => (split.clone(), Some(factor), kv_norm_rows(&factor, &factor)),
        Some(Err(Error::Degenerate(_))) | None => (split.clone(), None, Vec::new()),
        Some(Err(e)) => return Err(e).stage("balance"),
    };
    let applied = balance_factor.is_some() && opts.balance;
    track.record("balance", applied, &balanced)?;

    let basis = match opts.pca {
        PcaMethod::Activation => joint_kv_pca(&balanced, &fit, opts.r_kv),
        PcaMethod::Weight => weight_kv_pca(&balanced, opts.r_kv),
    }
    .stage("compress")?;
    let dec = decompose_projections(&balanced, &basis).stage("compress")?;
    let compressed = assemble_mla(&balanced, &dec).stage("compress")?;
    track.record("compress", true, &compressed)?;

    let (mla, query_captured_energy) = match opts.r_q {
        Some(r_q) => {
            let (l, cap) = compress_query(&compressed, &fit, r_q).stage("assemble")?;
            (l, Some(cap))
        }
        None => (compressed.clone(), None),
    };
    track.record("assemble", opts.r_q.is_some(), &mla)?;

    let mut ranks = opts.rank_sweep.clone();
    if !ranks.contains(&opts.r_kv) {
        ranks.push(opts.r_kv);
    }
    let rank_rows = rank_sweep(&balanced, &split, &fit, &ranks)?;

    let before_spec = CacheSpec::gqa(src.groups, src.head_dim, T::DTYPE.size());
    let after_spec = CacheSpec::mla(mla.r_kv, mla.d_rope, T::DTYPE.size());
    let report = ConversionReport {
        layer: LayerSummary {
            hidden: src.hidden,
            heads: src.heads,
            groups: src.groups,
            head_dim: src.head_dim,
            fold: opts.fold,
            n_keep_heads: opts.n_keep_heads,
            d_rope: mla.d_rope,
            r_kv: mla.r_kv,
            r_q: opts.r_q,
        },
        stages: track.rows,
        cache: CacheAccounting::new(&before_spec, &after_spec),
        balance: balance_factor,
        captured_energy: basis.captured_energy_fraction,
        query_captured_energy,
        key_norms,
        kv_norms,
        rank_sweep: rank_rows,
        bench: Vec::new(),
    };
    Ok(Conversion {
        merged,
        folded,
        rotated,
        split,
        balanced,
        basis,
        compressed,
        mla,
        report,
    })
}

pub fn load_source(cfg: &PipelineConfig) -> Result<(GqaLayer<f64>, Option<f64>)> {
    match &cfg.source {
        SourceSpec::Bundle { path } => match load_bundle::<f64>(path)? {
            AnyLayer::Gqa(l) => Ok((l, None)),
            other => Err(Error::config(format!(
                "source bundle holds a `{}` layer, expected `gqa`",
                other.kind()
            ))),
        },
        SourceSpec::Synth {
            hidden,
            heads,
            groups,
            rope_base,
            kv_split,
        } => {
            let make = if *kv_split { synth_gqa_kv_split } else { synth_gqa };
            Ok((make(cfg.seed, *hidden, *heads, *groups, *rope_base)?, Some(*rope_base)))
        }
    }
}

pub fn load_calib(cfg: &PipelineConfig, hidden: usize) -> Result<Matrix<f64>> {
    let x = match &cfg.calib {
        CalibSpec::Path { path } => load_tensor::<f64>(path)?,
        CalibSpec::Synth { samples, structure } => synth_calib(cfg.seed.wrapping_add(1), *samples, hidden, *structure)?,
    };
    if x.cols() != hidden {
        return Err(Error::shape(format!(
            "calibration width {} != hidden {hidden}",
            x.cols()
        )));
    }
    Ok(x)
}

/// Runs a configured conversion, writing the bundle and report if requested.
pub fn convert_pipeline(cfg: &PipelineConfig) -> Result<(MlaLayer<f64>, ConversionReport)> {
    let (src, rope_base) = load_source(cfg)?;
    let calib = load_calib(cfg, src.hidden)?;
    let conv = run_conversion(&src, &calib, &cfg.options)?;
    let mut report = conv.report;
    if let Some(bench) = &cfg.bench {
        let bytes = <f64 as Scalar>::DTYPE.size();
        let paired = bench_decode_pair(
            ("gqa", &GqaDecoder::new(&src)),
            ("mla", &MlaDecoder::new(&conv.mla)),
            bench,
            bytes,
        )?;
        report.bench = paired.rows();
    }
    if let Some(dir) = &cfg.out_bundle {
        save_bundle(dir, &AnyLayer::Mla(conv.mla.clone()), rope_base)?;
    }
    if let Some(dir) = &cfg.out_report {
        crate::report::emit_report(&report, dir, crate::report::ReportFormat::Json)?;
    }
    Ok((conv.mla, report))
}
