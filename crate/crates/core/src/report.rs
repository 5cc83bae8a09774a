//! Metrics over finished traces, run comparison, and result files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Attribution;
use crate::engine::{find_bubbles, per_request_bubble, Trace};
use crate::error::{Error, Result};

/// Time a mixed batch spends on its `d` decodes, per decode token.
pub fn marginal_decode_time(mixed_batch_time: f64, prefill_only_time: f64, d: u64) -> Result<f64> {
    if d == 0 {
        return Err(Error::InvalidArgument("marginal decode time needs d >= 1".into()));
    }
    if mixed_batch_time < prefill_only_time {
        return Err(Error::InconsistentTiming(format!(
            "mixed batch ({mixed_batch_time} s) faster than its prefill-only counterpart ({prefill_only_time} s)"
        )));
    }
    Ok((mixed_batch_time - prefill_only_time) / d as f64)
}

/// Linearly interpolated percentile of ascending `sorted` values.
pub fn percentile(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty list".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("percentile {p} outside [0, 100]")));
    }
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub makespan: f64,
    pub total_tokens: u64,
    pub throughput: f64,
    pub per_token_prefill: f64,
    pub per_token_decode: f64,
    /// Decode time had every decode run in decode-only batches, over the
    /// decode time actually spent.
    pub decode_speedup: f64,
    pub bubble_attribution: Attribution,
    /// Per-request pipeline-bubble seconds, ascending.
    pub bubble_cdf: Vec<f64>,
    pub median_bubble: f64,
    pub pipeline_bubble_total: f64,
    /// Idle seconds per bubble class, summed over stages.
    pub bubble_by_kind: BTreeMap<String, f64>,
    /// (requests completed, time), one point per completion.
    pub completion_curve: Vec<(u64, f64)>,
    pub workload_hash: String,
}

impl MetricsBundle {
    /// Aggregates one trace per replica. Replicas share the time origin.
    pub fn from_traces(traces: &[Trace], rule: Attribution, workload_hash: &str) -> Result<MetricsBundle> {
        let makespan = traces.iter().map(Trace::makespan).fold(0.0, f64::max);
        let total_tokens: u64 = traces
            .iter()
            .flat_map(|t| &t.requests)
            .map(|r| r.prefill_len + r.decode_len)
            .sum();

        let mut prefill_time = 0.0;
        let mut prefill_tokens = 0u64;
        let mut decode_time = 0.0;
        let mut decode_baseline = 0.0;
        let mut decode_tokens = 0u64;
        for b in traces.iter().flat_map(|t| &t.batches) {
            let p = b.composition.prefill_tokens();
            let d = b.composition.decode_tokens();
            if p > 0 {
                prefill_time += b.prefill_only_time;
                prefill_tokens += p + d;
            }
            if d > 0 {
                let spent = if p > 0 {
                    marginal_decode_time(b.compute_time, b.prefill_only_time, d)? * d as f64
                } else {
                    b.compute_time
                };
                decode_time += spent;
                decode_baseline += b.decode_only_time;
                decode_tokens += d;
            }
        }

        let mut per_request = BTreeMap::new();
        let mut by_kind: BTreeMap<String, f64> = BTreeMap::new();
        for t in traces {
            let bubbles = find_bubbles(t);
            for b in &bubbles {
                *by_kind.entry(b.kind.as_str().to_string()).or_insert(0.0) += b.gap;
            }
            per_request.extend(per_request_bubble(t, &bubbles, rule));
        }
        let mut cdf: Vec<f64> = per_request.into_values().collect();
        cdf.sort_by(f64::total_cmp);
        let pipeline_bubble_total = ["PB1", "PB2", "PB3"]
            .iter()
            .filter_map(|k| by_kind.get(*k))
            .sum();

        let mut completions: Vec<f64> = traces.iter().flat_map(|t| &t.requests).map(|r| r.completion).collect();
        completions.sort_by(f64::total_cmp);

        Ok(MetricsBundle {
            makespan,
            total_tokens,
            throughput: if makespan > 0.0 { total_tokens as f64 / makespan } else { 0.0 },
            per_token_prefill: ratio(prefill_time, prefill_tokens as f64),
            per_token_decode: ratio(decode_time, decode_tokens as f64),
            decode_speedup: ratio(decode_baseline, decode_time),
            bubble_attribution: rule,
            median_bubble: if cdf.is_empty() { 0.0 } else { percentile(&cdf, 50.0)? },
            bubble_cdf: cdf,
            pipeline_bubble_total,
            bubble_by_kind: by_kind,
            completion_curve: completions.into_iter().enumerate().map(|(i, t)| (i as u64 + 1, t)).collect(),
            workload_hash: workload_hash.to_string(),
        })
    }

    /// Equal-width histogram of per-request bubble time.
    pub fn bubble_histogram(&self, bins: usize) -> Vec<HistogramBin> {
        let Some(&max) = self.bubble_cdf.last() else { return Vec::new() };
        let bins = bins.max(1);
        if max <= 0.0 {
            return vec![HistogramBin {
                lo: 0.0,
                hi: 0.0,
                count: self.bubble_cdf.len() as u64,
            }];
        }
        let width = max / bins as f64;
        let mut out: Vec<HistogramBin> = (0..bins)
            .map(|i| HistogramBin {
                lo: i as f64 * width,
                hi: if i + 1 == bins { max } else { (i + 1) as f64 * width },
                count: 0,
            })
            .collect();
        for &v in &self.bubble_cdf {
            let i = ((v / width) as usize).min(bins - 1);
            out[i].count += 1;
        }
        out
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// candidate / baseline throughput.
    pub throughput_ratio: f64,
    /// baseline / candidate makespan.
    pub makespan_ratio: f64,
    /// baseline / candidate median per-request bubble; 1 when both are 0.
    pub median_bubble_ratio: f64,
    /// candidate / baseline decode speedup.
    pub decode_speedup_ratio: f64,
}

fn guarded(num: f64, den: f64) -> f64 {
    if num == den {
        1.0
    } else {
        num / den
    }
}

pub fn compare_runs(baseline: &MetricsBundle, candidate: &MetricsBundle) -> Result<Comparison> {
    if baseline.workload_hash != candidate.workload_hash {
        return Err(Error::WorkloadMismatch {
            baseline: baseline.workload_hash.clone(),
            candidate: candidate.workload_hash.clone(),
        });
    }
    Ok(Comparison {
        throughput_ratio: guarded(candidate.throughput, baseline.throughput),
        makespan_ratio: guarded(baseline.makespan, candidate.makespan),
        median_bubble_ratio: guarded(baseline.median_bubble, candidate.median_bubble),
        decode_speedup_ratio: guarded(candidate.decode_speedup, baseline.decode_speedup),
    })
}

/// Series as `x,y` CSV text.
pub fn xy_csv(points: impl IntoIterator<Item = (f64, f64)>) -> String {
    let mut s = String::from("x,y\n");
    for (x, y) in points {
        let _ = writeln!(s, "{x},{y}");
    }
    s
}

/// Plot series of one run, keyed by metric name.
pub fn plot_series(m: &MetricsBundle) -> BTreeMap<&'static str, String> {
    let n = m.bubble_cdf.len() as f64;
    let mut out = BTreeMap::new();
    out.insert(
        "bubble_cdf",
        xy_csv(m.bubble_cdf.iter().enumerate().map(|(i, &v)| (v, (i + 1) as f64 / n))),
    );
    out.insert(
        "completion_curve",
        xy_csv(m.completion_curve.iter().map(|&(k, t)| (k as f64, t))),
    );
    out
}

/// Writes `<run>_<metric>.csv` for every series; returns the paths.
pub fn write_plot_csvs(dir: &Path, run: &str, m: &MetricsBundle) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (metric, body) in plot_series(m) {
        let path = dir.join(format!("{run}_{metric}.csv"));
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
