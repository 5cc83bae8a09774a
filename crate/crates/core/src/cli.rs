//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invariant or verification failure, 2 I/O,
//! parse or configuration error.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::chunker::{advise_chunk_size, max_abs_deviation, optimal_pd, plan_chunks, random_case, toy_chunked_prefill, toy_full_prefill};
use crate::config::ExperimentConfig;
use crate::costmodel::{ingest_profile_file, AnalyticalBackend, BatchComposition, DecodeItem, OpKind, Phase, PrefillItem};
use crate::engine::trace_to_jsonl;
use crate::error::{Error, Result};
use crate::experiment::{run_experiment, RunOutput};
use crate::presets;
use crate::sched::{CapacityModel, DEFAULT_RESERVE_FRACTION};
use crate::types::{validate_deployment, ClusterSpec};

/// Deviation above which chunked and full prefill are reported unequal.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "chunkserve", version, about = "Chunked-prefill LLM serving simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its results JSON and plot CSVs.
    Run(RunArgs),
    /// Run every point of the config's [sweep] section.
    Sweep(SweepArgs),
    /// Check chunked prefill against full prefill on a random toy layer.
    VerifyChunking(VerifyArgs),
    /// Print batch size, chunk advice and roofline op times for a deployment.
    Plan(PlanArgs),
    /// Validate a profile CSV and summarize it.
    IngestProfile(IngestArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: the config's [output] dir, else ".").
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the workload seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the trace of each replica as JSON lines.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of sweep points run concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Prompt length P (at most 4096).
    #[arg(long)]
    pub prompt: u64,
    /// Chunk size C.
    #[arg(long)]
    pub chunk: u64,
    /// Hidden size H (at most 64).
    #[arg(long)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Take model, GPU, cluster and L from an experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "llama-13b")]
    pub model: String,
    #[arg(long, default_value = "a6000")]
    pub gpu: String,
    /// Tokens reserved per request (L); default the model's max length.
    #[arg(long)]
    pub seq_len: Option<u64>,
    /// Target chunk size.
    #[arg(long, default_value_t = 256)]
    pub chunk: u64,
    /// Matmul tile; default the GPU's.
    #[arg(long)]
    pub tile: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub tp: u64,
    #[arg(long, default_value_t = 1)]
    pub pp: u64,
    #[arg(long, default_value_t = DEFAULT_RESERVE_FRACTION)]
    pub reserve_fraction: f64,
    /// Directory for plan.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub profile: PathBuf,
    /// Write the validated table back in canonical form.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs a parsed command, printing to `out`. Returns the exit code.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::Run(a) => cmd_run(&a, out),
        Command::Sweep(a) => cmd_sweep(&a, out),
        Command::VerifyChunking(a) => cmd_verify_chunking(&a, out),
        Command::Plan(a) => cmd_plan(&a, out),
        Command::IngestProfile(a) => cmd_ingest_profile(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.workload.seed = s;
    }
    Ok(cfg)
}

fn output_dir(flag: &Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn summary_line(run: &RunOutput) -> String {
    let m = run.metrics();
    format!(
        "{}: policy={} makespan={:.3}s throughput={:.1} tok/s per_token_decode={:.4}ms median_bubble={:.4}s ({} attribution)\n",
        run.document.name,
        run.document.policy,
        m.makespan,
        m.throughput,
        m.per_token_decode * 1e3,
        m.median_bubble,
        m.bubble_attribution.as_str()
    )
}

pub fn cmd_run(a: &RunArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(&a.config, a.seed)?;
    let dir = output_dir(&a.out, &cfg);
    let run = run_experiment(&cfg)?;
    let mut written = run.write(&dir)?;
    if a.trace {
        for (i, t) in run.traces.iter().enumerate() {
            let path = dir.join(format!("{}_trace_r{i}.jsonl", cfg.name));
            std::fs::write(&path, trace_to_jsonl(t)?).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    emit(out, &summary_line(&run))?;
    for p in written {
        emit(out, &format!("wrote {}\n", p.display()))?;
    }
    Ok(0)
}

pub fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(&a.config, a.seed)?;
    let sweep = cfg.sweep.clone().ok_or_else(|| Error::Config {
        path: a.config.display().to_string(),
        key: "sweep".into(),
        reason: "sweep needs a [sweep] section".into(),
    })?;
    if a.parallel == 0 {
        return Err(Error::InvalidArgument("--parallel must be >= 1".into()));
    }
    let dir = output_dir(&a.out, &cfg);
    let points = sweep
        .values
        .iter()
        .map(|&v| cfg.with_sweep_value(sweep.axis, v))
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<RunOutput> = if a.parallel == 1 {
        points.iter().map(run_experiment).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(a.parallel)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| points.par_iter().map(run_experiment).collect::<Result<_>>())?
    };
    let mut combined =
        String::from("axis,value,throughput,makespan,per_token_prefill,per_token_decode,decode_speedup,median_bubble\n");
    for (v, run) in sweep.values.iter().zip(&runs) {
        run.write(&dir)?;
        let m = run.metrics();
        let _ = writeln!(
            combined,
            "{},{},{},{},{},{},{},{}",
            sweep.axis.as_str(),
            v,
            m.throughput,
            m.makespan,
            m.per_token_prefill,
            m.per_token_decode,
            m.decode_speedup,
            m.median_bubble
        );
        emit(out, &summary_line(run))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("{}_sweep.csv", cfg.name));
    std::fs::write(&path, combined).map_err(|e| Error::io(&path, e))?;
    emit(out, &format!("wrote {} result documents and {}\n", runs.len(), path.display()))?;
    Ok(0)
}

/// Max-abs deviation between chunked and full prefill of a seeded case.
pub fn verify_chunking(prompt: u64, chunk: u64, hidden: usize, seed: u64) -> Result<f64> {
    if prompt == 0 || prompt > 4096 {
        return Err(Error::InvalidArgument(format!("prompt length must lie in [1, 4096], got {prompt}")));
    }
    if hidden == 0 || hidden > 64 {
        return Err(Error::InvalidArgument(format!("hidden size must lie in [1, 64], got {hidden}")));
    }
    let plan = plan_chunks(prompt, chunk)?;
    let (x, w) = random_case(prompt as usize, hidden, seed);
    let full = toy_full_prefill(&x, &w)?;
    let chunked = toy_chunked_prefill(&x, &w, &plan)?;
    // outputs and the KV cache left behind must both agree
    Ok(max_abs_deviation(&full.output, &chunked.output)
        .max(max_abs_deviation(&full.kv.keys, &chunked.kv.keys))
        .max(max_abs_deviation(&full.kv.values, &chunked.kv.values)))
}

pub fn cmd_verify_chunking(a: &VerifyArgs, out: &mut dyn Write) -> Result<i32> {
    let dev = verify_chunking(a.prompt, a.chunk, a.hidden, a.seed)?;
    let ok = dev <= EQUIVALENCE_TOLERANCE;
    emit(
        out,
        &format!(
            "P={} C={} H={} seed={} chunks={} max_abs_deviation={:e} {}\n",
            a.prompt,
            a.chunk,
            a.hidden,
            a.seed,
            a.prompt.div_ceil(a.chunk),
            dev,
            if ok { "OK" } else { "MISMATCH" }
        ),
    )?;
    Ok(if ok { 0 } else { 1 })
}

/// Rows of the `plan` report as (key, value) pairs.
pub fn plan_rows(a: &PlanArgs) -> Result<Vec<(String, String)>> {
    let (model, cluster, seq_len, reserve) = match &a.config {
        Some(path) => {
            let cfg = ExperimentConfig::from_file(path)?;
            (cfg.model, cfg.cluster, cfg.capacity.seq_len, cfg.capacity.reserve_fraction)
        }
        None => {
            let model = presets::model(&a.model)?;
            let mut cluster = ClusterSpec::single(presets::gpu(&a.gpu)?);
            cluster.tp_degree = a.tp;
            cluster.pp_degree = a.pp;
            let l = a.seq_len.unwrap_or(model.max_seq_len);
            (model, cluster, l, a.reserve_fraction)
        }
    };
    cluster.validate()?;
    let d = validate_deployment(&model, &cluster)?;
    let cap = CapacityModel::for_deployment(&d, seq_len, reserve)?;
    let b_total = cap.max_batch_size();
    if b_total == 0 {
        return Err(Error::InvalidDeployment(format!(
            "model does not fit: {} on {} (tp={}, pp={}) has {:.3e} bytes for KV, one {}-token request needs {:.3e}",
            model.name,
            cluster.gpu.name,
            cluster.tp_degree,
            cluster.pp_degree,
            cap.kv_budget(),
            seq_len,
            cap.bytes_per_request()
        )));
    }
    let b = (b_total / cluster.pp_degree).max(1);
    let tile = a.tile.unwrap_or(cluster.gpu.tile_size);
    let mut rows: Vec<(String, String)> = vec![
        ("model".into(), model.name.clone()),
        ("gpu".into(), cluster.gpu.name.clone()),
        ("tp".into(), cluster.tp_degree.to_string()),
        ("pp".into(), cluster.pp_degree.to_string()),
        ("layers_per_stage".into(), d.layers_per_stage.to_string()),
        ("param_bytes_per_gpu".into(), format!("{}", d.param_bytes_per_gpu)),
        ("kv_bytes_per_token_per_gpu".into(), format!("{}", d.kv_bytes_per_token)),
        ("seq_len".into(), seq_len.to_string()),
        ("reserve_fraction".into(), reserve.to_string()),
        ("kv_budget_bytes".into(), format!("{}", cap.kv_budget())),
        ("max_batch_size".into(), b_total.to_string()),
        ("micro_batch_size".into(), b.to_string()),
        ("target_chunk".into(), a.chunk.to_string()),
        ("tile".into(), tile.to_string()),
    ];
    let adjusted = advise_chunk_size(a.chunk, b, tile);
    rows.push((
        "adjusted_chunk".into(),
        match &adjusted {
            Ok(c) => c.to_string(),
            Err(e) => format!("n/a ({e})"),
        },
    ));
    rows.push((
        "optimal_pd".into(),
        match optimal_pd(a.chunk, b) {
            Ok(r) => format!("{:.4}", r.value()),
            Err(_) => "undefined (no decode slots)".into(),
        },
    ));

    let backend = AnalyticalBackend::new(model.clone(), cluster.gpu.clone(), cluster.tp_degree);
    let chunk = *adjusted.as_ref().unwrap_or(&a.chunk);
    let mixed = BatchComposition {
        prefill_items: vec![PrefillItem {
            chunk_len: chunk,
            context_offset: 0,
        }],
        decode_items: (1..b).map(|_| DecodeItem { context_len: seq_len }).collect(),
    };
    let shapes = [
        (Phase::Prefill, BatchComposition::prefill_only(a.chunk, 0)),
        (Phase::Mixed, mixed),
        (Phase::Decode, BatchComposition::decode_only((0..b).map(|_| seq_len))),
    ];
    for (phase, comp) in shapes {
        let times = backend.layer_op_times(&comp);
        let mut total = 0.0;
        for op in OpKind::MAJOR {
            let t = times.get(&op).copied().unwrap_or(0.0);
            total += t;
            rows.push((format!("layer_ms.{}.{}", phase.as_str(), op.as_str()), format!("{:.6}", t * 1e3)));
        }
        rows.push((format!("layer_ms.{}.total", phase.as_str()), format!("{:.6}", total * 1e3)));
    }
    Ok(rows)
}

pub fn cmd_plan(a: &PlanArgs, out: &mut dyn Write) -> Result<i32> {
    let rows = plan_rows(a)?;
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut text = String::new();
    for (k, v) in &rows {
        let _ = writeln!(text, "{k:<width$}  {v}");
    }
    emit(out, &text)?;
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("plan.csv");
        let mut csv = String::from("key,value\n");
        for (k, v) in &rows {
            let _ = writeln!(csv, "{k},\"{}\"", v.replace('"', "\"\""));
        }
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        emit(out, &format!("wrote {}\n", path.display()))?;
    }
    Ok(0)
}

pub fn cmd_ingest_profile(a: &IngestArgs, out: &mut dyn Write) -> Result<i32> {
    let table = ingest_profile_file(&a.profile)?;
    let mut counts: std::collections::BTreeMap<(String, String), usize> = Default::default();
    for e in &table.entries {
        *counts.entry((e.op.to_string(), e.phase.to_string())).or_insert(0) += 1;
    }
    let mut text = format!("{}: {} entries\n", a.profile.display(), table.len());
    for ((op, phase), n) in counts {
        let _ = writeln!(text, "  {op:<8} {phase:<7} {n}");
    }
    emit(out, &text)?;
    if let Some(path) = &a.out {
        std::fs::write(path, table.to_csv()).map_err(|e| Error::io(path, e))?;
        emit(out, &format!("wrote {}\n", path.display()))?;
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan_args(model: &str, seq_len: u64, tp: u64, pp: u64) -> PlanArgs {
        PlanArgs {
            config: None,
            model: model.into(),
            gpu: if model == "gpt3" { "a100".into() } else { "a6000".into() },
            seq_len: Some(seq_len),
            chunk: 256,
            tile: None,
            tp,
            pp,
            reserve_fraction: DEFAULT_RESERVE_FRACTION,
            out: None,
        }
    }

    fn get<'a>(rows: &'a [(String, String)], key: &str) -> &'a str {
        &rows.iter().find(|(k, _)| k == key).unwrap().1
    }

    #[test]
    fn llama13b_plan() {
        let rows = plan_rows(&plan_args("llama-13b", 1024, 1, 1)).unwrap();
        assert_eq!(get(&rows, "max_batch_size"), "18");
        assert_eq!(get(&rows, "optimal_pd"), "15.0588");
        assert_eq!(get(&rows, "adjusted_chunk"), "239");
        let mut a = plan_args("llama-13b", 1024, 1, 1);
        a.chunk = 200;
        assert!(get(&plan_rows(&a).unwrap(), "adjusted_chunk").starts_with("n/a"));
    }

    #[test]
    fn gpt3_stage_split() {
        let rows = plan_rows(&plan_args("gpt3", 4096, 8, 8)).unwrap();
        assert_eq!(get(&rows, "layers_per_stage"), "12");
        assert!(get(&rows, "param_bytes_per_gpu").parse::<f64>().unwrap() > 0.0);
    }

    #[test]
    fn no_decode_slots_and_no_fit() {
        let mut a = plan_args("llama-13b", 4096, 1, 1);
        a.reserve_fraction = 0.4;
        // 48e9 * 0.6 - 25.7e9 = 3.1e9 bytes: one 4096-token request (3.36e9) no longer fits
        assert!(matches!(plan_rows(&a), Err(Error::InvalidDeployment(_))));
        a.reserve_fraction = 0.35;
        let rows = plan_rows(&a).unwrap();
        assert_eq!(get(&rows, "max_batch_size"), "1");
        assert_eq!(get(&rows, "optimal_pd"), "undefined (no decode slots)");
    }

    #[test]
    fn verify_examples() {
        assert!(verify_chunking(12, 4, 8, 7).unwrap() <= EQUIVALENCE_TOLERANCE);
        assert_eq!(verify_chunking(1, 1, 2, 0).unwrap(), 0.0);
        assert!(verify_chunking(5000, 4, 8, 7).is_err());
        assert!(verify_chunking(16, 4, 65, 7).is_err());
    }
}
