use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use gqa2mla::attention::{DecodeLayer, GqaDecoder, GqaLayer, MlaDecoder, MlaLayer};
use gqa2mla::bench::{bench_decode, bench_decode_pair, parse_contexts, BenchOptions, BenchRow};
use gqa2mla::io::{load_bundle, load_tensor};
use gqa2mla::pipeline::{convert_pipeline, PipelineConfig};
use gqa2mla::report::{emit_report, load_report, ReportFormat};
use gqa2mla::rewrite::merge_key_heads;
use gqa2mla::rorope::collect_key_stats;
use gqa2mla::verify::{split_sequences, verify_equivalence};
use gqa2mla::{AnyLayer, Error, Scalar};

#[derive(Parser)]
#[command(name = "gqa2mla", version, about = "Convert GQA attention layers into MLA layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a conversion described by a JSON config.
    Convert {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare two layer bundles on a calibration stream.
    Verify {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        tol: f64,
        #[arg(long, default_value_t = 16)]
        seq_len: usize,
    },
    /// Collect per-frequency key statistics for a layer.
    Calibrate {
        #[arg(long)]
        layer: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        group_size: usize,
    },
    /// Time single-stream decoding at several context lengths.
    Bench {
        #[arg(long)]
        layer: PathBuf,
        #[arg(long, default_value = "1k,2k,4k,8k")]
        contexts: String,
        /// Second layer to compare against, usually the source GQA layer.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
        dtype: DtypeArg,
    },
    /// Re-emit a JSON report in another format.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Output directory; defaults to the input file's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

/// Raised when a verification exceeds its tolerance.
#[derive(Debug)]
struct ToleranceExceeded(f64, f64);

impl std::fmt::Display for ToleranceExceeded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "max abs difference {:e} exceeds tolerance {:e}", self.0, self.1)
    }
}

impl std::error::Error for ToleranceExceeded {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(err) = e.downcast_ref::<Error>() {
        return if err.is_io() { 2 } else { 1 };
    }
    if e.downcast_ref::<std::io::Error>().is_some() || e.downcast_ref::<serde_json::Error>().is_some() {
        return 2;
    }
    1
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Convert { config } => convert(&config),
        Command::Verify {
            a,
            b,
            calib,
            tol,
            seq_len,
        } => verify(&a, &b, &calib, tol, seq_len),
        Command::Calibrate {
            layer,
            calib,
            out,
            group_size,
        } => calibrate(&layer, &calib, &out, group_size),
        Command::Bench {
            layer,
            contexts,
            baseline,
            steps,
            repeats,
            dtype,
        } => {
            let mut opts = BenchOptions::new(parse_contexts(&contexts)?);
            opts.decode_steps = steps;
            opts.repeats = repeats;
            match dtype {
                DtypeArg::F32 => bench::<f32>(&layer, baseline.as_deref(), &opts),
                DtypeArg::F64 => bench::<f64>(&layer, baseline.as_deref(), &opts),
            }
        }
        Command::Report { input, format, out } => {
            let format: ReportFormat = format.parse()?;
            let report = load_report(&input).with_context(|| format!("reading {}", input.display()))?;
            let dir = out.unwrap_or_else(|| input.parent().map(Path::to_path_buf).unwrap_or_default());
            for path in emit_report(&report, &dir, format)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn convert(config: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg: PipelineConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
    let (_, report) = convert_pipeline(&cfg)?;
    println!(
        "kv cache per token: {} -> {} ({})",
        report.cache.before_scalars, report.cache.after_scalars, report.cache.reduction_label
    );
    println!("stage,applied,max_abs_vs_prev,max_abs_vs_source");
    for s in &report.stages {
        println!(
            "{},{},{:e},{:e}",
            s.stage, s.applied, s.max_abs_vs_prev, s.max_abs_vs_source
        );
    }
    Ok(())
}

fn verify(a: &Path, b: &Path, calib: &Path, tol: f64, seq_len: usize) -> anyhow::Result<()> {
    let la = load_bundle::<f64>(a).with_context(|| format!("loading {}", a.display()))?;
    let lb = load_bundle::<f64>(b).with_context(|| format!("loading {}", b.display()))?;
    let x = load_tensor::<f64>(calib).with_context(|| format!("loading {}", calib.display()))?;
    let seqs = split_sequences(&x, seq_len)?;
    if seqs.is_empty() {
        bail!(Error::InsufficientSamples {
            needed: seq_len,
            got: x.rows()
        });
    }
    let summary = verify_equivalence(la.as_layer(), lb.as_layer(), &seqs, tol)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if !summary.within_tolerance {
        return Err(ToleranceExceeded(summary.max_abs, tol).into());
    }
    Ok(())
}

fn calibrate(layer: &Path, calib: &Path, out: &Path, group_size: usize) -> anyhow::Result<()> {
    let merged = match load_bundle::<f64>(layer).with_context(|| format!("loading {}", layer.display()))? {
        AnyLayer::Gqa(l) => merge_key_heads(&l),
        AnyLayer::MergedGqa(l) => l,
        other => bail!(Error::config(format!(
            "cannot collect key statistics for a `{}` layer",
            other.kind()
        ))),
    };
    let x = load_tensor::<f64>(calib).with_context(|| format!("loading {}", calib.display()))?;
    let stats = collect_key_stats(&merged, &x, group_size)?;
    fs::write(out, serde_json::to_string_pretty(&stats)? + "\n")
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{} samples, {} frequency groups -> {}",
        stats.sample_count,
        stats.num_groups(),
        out.display()
    );
    Ok(())
}

enum Decodable<T> {
    Gqa(GqaLayer<T>),
    Mla(MlaLayer<T>),
}

impl<T: Scalar> Decodable<T> {
    fn load(path: &Path) -> anyhow::Result<Self> {
        Ok(
            match load_bundle::<f64>(path).with_context(|| format!("loading {}", path.display()))? {
                AnyLayer::Gqa(l) => Self::Gqa(l.cast()),
                AnyLayer::Mla(l) => Self::Mla(l.cast()),
                other => bail!(Error::config(format!("cannot decode a `{}` layer", other.kind()))),
            },
        )
    }

    fn decoder(&self) -> (&'static str, Box<dyn DecodeLayer<T> + '_>) {
        match self {
            Self::Gqa(l) => ("gqa", Box::new(GqaDecoder::new(l))),
            Self::Mla(l) => ("mla", Box::new(MlaDecoder::new(l))),
        }
    }
}

fn print_rows(rows: &[BenchRow]) {
    for r in rows {
        println!(
            "{},{},{},{:.1},{},{}",
            r.label, r.context, r.decode_steps, r.tokens_per_s, r.cache_scalars_per_token, r.cache_bytes
        );
    }
}

fn bench<T: Scalar>(layer: &Path, baseline: Option<&Path>, opts: &BenchOptions) -> anyhow::Result<()> {
    let cand = Decodable::<T>::load(layer)?;
    let (label, cand) = cand.decoder();
    let bytes = T::DTYPE.size();
    println!("label,context,decode_steps,tokens_per_s,cache_scalars_per_token,cache_bytes");
    let Some(baseline) = baseline else {
        print_rows(&bench_decode(label, cand.as_ref(), opts, bytes)?);
        return Ok(());
    };
    let base = Decodable::<T>::load(baseline)?;
    let (base_label, base) = base.decoder();
    let paired = bench_decode_pair((base_label, base.as_ref()), (label, cand.as_ref()), opts, bytes)?;
    print_rows(&paired.candidate);
    print_rows(&paired.baseline);
    println!("context,speedup,cache_bytes_ratio");
    for c in &paired.comparison {
        println!("{},{:.3},{:.6}", c.context, c.speedup, c.cache_bytes_ratio);
    }
    Ok(())
}
