//! Trace persistence as JSON lines.
//!
//! Line kinds, in file order: one `header`, then one `batch` per
//! micro-batch, one `stage` per (stage, micro-batch) execution and one
//! `request` per request. Floats round-trip exactly.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::{BatchRecord, Interval, RequestRecord, StageTimeline, Trace};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceLine {
    Header {
        policy: String,
        backend: String,
        pp_degree: u64,
    },
    Batch(BatchRecord),
    Stage {
        stage: u64,
        microbatch: u64,
        start: f64,
        end: f64,
        prefill_tokens: u64,
        decode_tokens: u64,
    },
    Request(RequestRecord),
}

pub fn trace_to_jsonl(trace: &Trace) -> Result<String> {
    let mut out = String::new();
    let mut push = |line: &TraceLine| -> Result<()> {
        out.push_str(&serde_json::to_string(line)?);
        out.push('\n');
        Ok(())
    };
    push(&TraceLine::Header {
        policy: trace.policy.clone(),
        backend: trace.backend.clone(),
        pp_degree: trace.pp_degree,
    })?;
    for b in &trace.batches {
        push(&TraceLine::Batch(b.clone()))?;
    }
    for tl in &trace.timelines {
        for iv in &tl.intervals {
            let comp = trace.batch(iv.microbatch).map(|b| &b.composition);
            push(&TraceLine::Stage {
                stage: tl.stage_id,
                microbatch: iv.microbatch,
                start: iv.start,
                end: iv.end,
                prefill_tokens: comp.map_or(0, |c| c.prefill_tokens()),
                decode_tokens: comp.map_or(0, |c| c.decode_tokens()),
            })?;
        }
    }
    for r in &trace.requests {
        push(&TraceLine::Request(r.clone()))?;
    }
    Ok(out)
}

/// Rebuilds a trace and checks its structure; the result equals the
/// exported trace exactly.
pub fn read_trace_jsonl(reader: impl BufRead, source_name: &str) -> Result<Trace> {
    let mut header: Option<(String, String, u64)> = None;
    let mut batches = Vec::new();
    let mut timelines: Vec<StageTimeline> = Vec::new();
    let mut requests = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::parse(source_name, lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(source_name, lineno, e.to_string()))?;
        match rec {
            TraceLine::Header {
                policy,
                backend,
                pp_degree,
            } => {
                if header.is_some() || lineno != 1 {
                    return Err(Error::parse(source_name, lineno, "header must be the first and only header line"));
                }
                if pp_degree == 0 || pp_degree > 4096 {
                    return Err(Error::parse(source_name, lineno, "pp_degree out of range"));
                }
                timelines = (0..pp_degree)
                    .map(|stage_id| StageTimeline {
                        stage_id,
                        intervals: Vec::new(),
                    })
                    .collect();
                header = Some((policy, backend, pp_degree));
            }
            _ if header.is_none() => return Err(Error::parse(source_name, lineno, "missing header line")),
            TraceLine::Batch(b) => batches.push(b),
            TraceLine::Stage {
                stage,
                microbatch,
                start,
                end,
                ..
            } => {
                let tl = timelines
                    .get_mut(stage as usize)
                    .ok_or_else(|| Error::parse(source_name, lineno, format!("stage {stage} out of range")))?;
                tl.intervals.push(Interval { start, end, microbatch });
            }
            TraceLine::Request(r) => requests.push(r),
        }
    }
    let (policy, backend, pp_degree) = header.ok_or_else(|| Error::parse(source_name, 0, "empty trace"))?;
    let trace = Trace {
        policy,
        backend,
        pp_degree,
        batches,
        timelines,
        requests,
    };
    trace
        .validate()
        .map_err(|e| Error::parse(source_name, 0, format!("inconsistent trace: {e}")))?;
    Ok(trace)
}
