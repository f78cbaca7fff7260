//! Single-stream decode timing.
//!
//! For context length `L` the loop caches `L − steps` tokens without
//! attending, then decodes `steps` tokens with full attention over the cache.
//! Only the decode phase is timed. Single-layer runs keep the best of
//! `repeats`; paired runs report the median per-repeat time ratio.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{DecodeLayer, KvCache};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub contexts: Vec<usize>,
    /// Decoded tokens per context; defaults to `min(L/2, 128)`.
    #[serde(default)]
    pub decode_steps: Option<usize>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_repeats() -> usize {
    3
}

impl BenchOptions {
    pub fn new(contexts: Vec<usize>) -> Self {
        Self {
            contexts,
            decode_steps: None,
            repeats: default_repeats(),
            seed: 0,
        }
    }

    pub fn steps_for(&self, context: usize) -> usize {
        self.decode_steps.unwrap_or(128).min(context / 2).max(1).min(context)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub context: usize,
    pub decode_steps: usize,
    pub tokens_per_s: f64,
    pub cache_scalars_per_token: usize,
    /// Cache size at the full context length.
    pub cache_bytes: u64,
}

/// Parses `1k,2k,4096` into token counts (`k` = 1024).
pub fn parse_contexts(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|s| {
            let s = s.trim();
            let (num, mul) = match s.strip_suffix(['k', 'K']) {
                Some(n) => (n, 1024),
                None => (s, 1),
            };
            num.parse::<usize>()
                .ok()
                .and_then(|n| n.checked_mul(mul))
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::config(format!("bad context length `{s}`")))
        })
        .collect()
}

fn tokens<T: Scalar>(seed: u64, n: usize, hidden: usize) -> Matrix<T> {
    let mut rng = crate::io::synth::rng(seed, 32);
    Matrix::from_fn(n, hidden, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

fn check_contexts(opts: &BenchOptions) -> Result<usize> {
    if opts.contexts.iter().any(|&c| c == 0) {
        return Err(Error::config("context length must be positive"));
    }
    Ok(opts.contexts.iter().copied().max().unwrap_or(0))
}

fn max_prefill(opts: &BenchOptions) -> usize {
    opts.contexts.iter().map(|&c| c - opts.steps_for(c)).max().unwrap_or(0)
}

/// Caches `prefill` tokens; shorter contexts reuse prefixes of the result.
fn prefilled<T: Scalar>(layer: &dyn DecodeLayer<T>, x: &Matrix<T>, prefill: usize) -> KvCache<T> {
    let mut cache = KvCache::new(layer.cache_width(), prefill);
    for t in 0..prefill {
        layer.prefill_token(&mut cache, x.row(t));
    }
    cache
}

/// Seconds spent decoding tokens `prefill..context` on a copy of the first
/// `prefill` cached tokens.
fn time_decode<T: Scalar>(
    layer: &dyn DecodeLayer<T>,
    cache: &KvCache<T>,
    x: &Matrix<T>,
    prefill: usize,
    context: usize,
) -> f64 {
    let mut cache = cache.fork(prefill, context - prefill);
    let mut sink = T::zero();
    let start = Instant::now();
    for t in cache.len()..context {
        let y = layer.decode_token(&mut cache, x.row(t));
        sink = sink + y[0];
    }
    let elapsed = start.elapsed().as_secs_f64();
    std::hint::black_box(sink);
    elapsed
}

fn row<T: Scalar>(
    label: &str,
    layer: &dyn DecodeLayer<T>,
    context: usize,
    steps: usize,
    best: f64,
    dtype_bytes: usize,
) -> BenchRow {
    let width = layer.cache_width();
    BenchRow {
        label: label.to_string(),
        context,
        decode_steps: steps,
        tokens_per_s: steps as f64 / best.max(1e-12),
        cache_scalars_per_token: width,
        cache_bytes: (width * dtype_bytes * context) as u64,
    }
}

pub fn bench_decode<T: Scalar>(
    label: &str,
    layer: &dyn DecodeLayer<T>,
    opts: &BenchOptions,
    dtype_bytes: usize,
) -> Result<Vec<BenchRow>> {
    let max = check_contexts(opts)?;
    let x = tokens::<T>(opts.seed, max, layer.hidden());
    let cache = prefilled(layer, &x, max_prefill(opts));
    let mut rows = Vec::with_capacity(opts.contexts.len());
    for &context in &opts.contexts {
        let steps = opts.steps_for(context);
        let best = (0..opts.repeats.max(1))
            .map(|_| time_decode(layer, &cache, &x, context - steps, context))
            .fold(f64::INFINITY, f64::min);
        rows.push(row(label, layer, context, steps, best, dtype_bytes));
    }
    Ok(rows)
}

/// Candidate vs baseline at each shared context length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchComparison {
    pub context: usize,
    pub speedup: f64,
    pub cache_bytes_ratio: f64,
}

/// Ratio of best throughputs at each context present in both row sets.
pub fn compare_bench(baseline: &[BenchRow], candidate: &[BenchRow]) -> Vec<BenchComparison> {
    baseline
        .iter()
        .filter_map(|b| {
            let c = candidate.iter().find(|c| c.context == b.context)?;
            Some(BenchComparison {
                context: b.context,
                speedup: c.tokens_per_s / b.tokens_per_s,
                cache_bytes_ratio: c.cache_bytes as f64 / b.cache_bytes as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedBench {
    pub baseline: Vec<BenchRow>,
    pub candidate: Vec<BenchRow>,
    /// `speedup` here is the median of per-repeat time ratios.
    pub comparison: Vec<BenchComparison>,
}

/// One context length of a paired run, flattened for tabular output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPairRow {
    pub context: usize,
    pub decode_steps: usize,
    pub baseline_tokens_per_s: f64,
    pub candidate_tokens_per_s: f64,
    pub speedup: f64,
    pub baseline_cache_bytes: u64,
    pub candidate_cache_bytes: u64,
    pub cache_bytes_ratio: f64,
}

impl PairedBench {
    pub fn rows(&self) -> Vec<BenchPairRow> {
        self.baseline
            .iter()
            .zip(&self.candidate)
            .zip(&self.comparison)
            .map(|((b, c), cmp)| BenchPairRow {
                context: cmp.context,
                decode_steps: b.decode_steps,
                baseline_tokens_per_s: b.tokens_per_s,
                candidate_tokens_per_s: c.tokens_per_s,
                speedup: cmp.speedup,
                baseline_cache_bytes: b.cache_bytes,
                candidate_cache_bytes: c.cache_bytes,
                cache_bytes_ratio: cmp.cache_bytes_ratio,
            })
            .collect()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Benchmarks two layers on the same tokens, alternating runs so both see
/// the same machine conditions.
pub fn bench_decode_pair<T: Scalar>(
    baseline: (&str, &dyn DecodeLayer<T>),
    candidate: (&str, &dyn DecodeLayer<T>),
    opts: &BenchOptions,
    dtype_bytes: usize,
) -> Result<PairedBench> {
    if baseline.1.hidden() != candidate.1.hidden() {
        return Err(Error::shape("benchmarked layers differ in hidden size"));
    }
    let max = check_contexts(opts)?;
    let x = tokens::<T>(opts.seed, max, baseline.1.hidden());
    let mut out = PairedBench {
        baseline: Vec::new(),
        candidate: Vec::new(),
        comparison: Vec::new(),
    };
    let base_cache = prefilled(baseline.1, &x, max_prefill(opts));
    let cand_cache = prefilled(candidate.1, &x, max_prefill(opts));
    let n = opts.contexts.len();
    let (mut best_base, mut best_cand) = (vec![f64::INFINITY; n], vec![f64::INFINITY; n]);
    let mut ratios = vec![Vec::new(); n];
    // Every repeat sweeps all contexts so slow periods hit each one alike.
    for _ in 0..opts.repeats.max(1) {
        for (i, &context) in opts.contexts.iter().enumerate() {
            let prefill = context - opts.steps_for(context);
            let tb = time_decode(baseline.1, &base_cache, &x, prefill, context);
            let tc = time_decode(candidate.1, &cand_cache, &x, prefill, context);
            best_base[i] = best_base[i].min(tb);
            best_cand[i] = best_cand[i].min(tc);
            ratios[i].push(tb / tc.max(1e-12));
        }
    }
    for (i, &context) in opts.contexts.iter().enumerate() {
        let steps = opts.steps_for(context);
        let b = row(baseline.0, baseline.1, context, steps, best_base[i], dtype_bytes);
        let c = row(candidate.0, candidate.1, context, steps, best_cand[i], dtype_bytes);
        out.comparison.push(BenchComparison {
            context,
            speedup: median(std::mem::take(&mut ratios[i])),
            cache_bytes_ratio: c.cache_bytes as f64 / b.cache_bytes as f64,
        });
        out.baseline.push(b);
        out.candidate.push(c);
    }
    Ok(out)
}
