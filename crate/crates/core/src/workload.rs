//! Synthetic request sets: Zipf-distributed sequence lengths split by a
//! P:D ratio, with all-at-once or Poisson arrivals.
//!
//! Workload CSV (`id,arrival_s,prefill,decode`) is the exchange format.

use std::fmt;
use std::io::Read;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{PdRatio, Request};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Arrival {
    AllAtZero,
    /// Requests per second.
    Poisson { rate: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdMode {
    /// Every request is split at the target ratio.
    PerRequest,
    /// Only the pooled prefill/decode totals hit the target ratio.
    Aggregate,
}

impl fmt::Display for PdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PdMode::PerRequest => "per_request",
            PdMode::Aggregate => "aggregate",
        })
    }
}

impl FromStr for PdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_request" => Ok(PdMode::PerRequest),
            "aggregate" => Ok(PdMode::Aggregate),
            other => Err(Error::InvalidArgument(format!("unknown pd_mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub num_requests: u64,
    pub min_len: u64,
    pub max_len: u64,
    pub zipf_theta: f64,
    pub pd_ratio: PdRatio,
    pub pd_mode: PdMode,
    pub arrival: Arrival,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self, max_seq_len: u64) -> Result<()> {
        if self.num_requests == 0 {
            return Err(Error::InvalidArgument("num_requests must be >= 1".into()));
        }
        if self.min_len < 2 || self.min_len > self.max_len || self.max_len > max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence lengths must satisfy 2 <= min_len <= max_len <= {max_seq_len} (got {}..={})",
                self.min_len, self.max_len
            )));
        }
        if !(self.zipf_theta >= 0.0 && self.zipf_theta.is_finite()) {
            return Err(Error::InvalidArgument("zipf_theta must be a non-negative number".into()));
        }
        if let Arrival::Poisson { rate } = self.arrival {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(Error::InvalidArgument("poisson rate must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Normalized probability of each length in `[min_len, max_len]`; the k-th
/// smallest length (k from 1) has weight `k^-theta`.
pub fn zipf_probabilities(min_len: u64, max_len: u64, theta: f64) -> Vec<f64> {
    let weights: Vec<f64> = (1..=max_len - min_len + 1).map(|k| (k as f64).powf(-theta)).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

fn sample_with(spec: &WorkloadSpec, rng: &mut ChaCha8Rng) -> Result<Vec<u64>> {
    let weights = zipf_probabilities(spec.min_len, spec.max_len, spec.zipf_theta);
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(format!("zipf weights: {e}")))?;
    Ok((0..spec.num_requests)
        .map(|_| spec.min_len + dist.sample(rng) as u64)
        .collect())
}

/// Draws `num_requests` i.i.d. sequence lengths.
pub fn sample_lengths(spec: &WorkloadSpec) -> Result<Vec<u64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    sample_with(spec, &mut rng)
}

/// Splits one sequence into prefill and decode tokens at ratio `r`, keeping
/// at least one token of each when the sequence has two or more.
pub fn split_pd(seq_len: u64, ratio: PdRatio) -> (u64, u64) {
    if seq_len <= 1 {
        return (seq_len, 0);
    }
    let r = ratio.value();
    let p = (seq_len as f64 * r / (1.0 + r)).round() as u64;
    let p = p.clamp(1, seq_len - 1);
    (p, seq_len - p)
}

/// Splits a pool of sequences so the totals hit `ratio`; individual
/// requests may deviate from it.
fn split_aggregate(lengths: &[u64], ratio: PdRatio) -> Vec<(u64, u64)> {
    let r = ratio.value();
    let total: u64 = lengths.iter().sum();
    let min_p = lengths.len() as u64;
    let max_p = total - lengths.len() as u64;
    let target = ((total as f64 * r / (1.0 + r)).round() as u64).clamp(min_p, max_p);

    // floor shares, then hand leftover tokens out by largest remainder
    let mut shares: Vec<(u64, f64, usize)> = lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let exact = len as f64 * target as f64 / total as f64;
            let p = (exact.floor() as u64).clamp(1, len - 1);
            (p, exact - exact.floor(), i)
        })
        .collect();
    let mut assigned: u64 = shares.iter().map(|s| s.0).sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| shares[b].1.total_cmp(&shares[a].1).then(a.cmp(&b)));
    while assigned != target {
        let mut progressed = false;
        for &i in &order {
            if assigned == target {
                break;
            }
            let len = lengths[shares[i].2];
            if assigned < target && shares[i].0 < len - 1 {
                shares[i].0 += 1;
                assigned += 1;
                progressed = true;
            } else if assigned > target && shares[i].0 > 1 {
                shares[i].0 -= 1;
                assigned -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    shares.iter().map(|&(p, _, i)| (p, lengths[i] - p)).collect()
}

/// Generates the request list for `spec`; identical specs yield identical
/// lists.
pub fn build_requests(spec: &WorkloadSpec) -> Result<Vec<Request>> {
    if spec.num_requests == 0 || spec.min_len < 2 || spec.min_len > spec.max_len {
        return Err(Error::InvalidArgument("invalid workload spec".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lengths = sample_with(spec, &mut rng)?;
    let splits = match spec.pd_mode {
        PdMode::PerRequest => lengths.iter().map(|&l| split_pd(l, spec.pd_ratio)).collect(),
        PdMode::Aggregate => split_aggregate(&lengths, spec.pd_ratio),
    };
    let mut clock = 0.0;
    let exp = match spec.arrival {
        Arrival::AllAtZero => None,
        Arrival::Poisson { rate } => {
            Some(Exp::new(rate).map_err(|e| Error::InvalidArgument(format!("poisson rate: {e}")))?)
        }
    };
    Ok(splits
        .into_iter()
        .enumerate()
        .map(|(i, (p, d))| {
            if let Some(exp) = &exp {
                clock += exp.sample(&mut rng);
            }
            Request::new(i as u64, clock, p, d)
        })
        .collect())
}

pub const WORKLOAD_HEADER: &str = "id,arrival_s,prefill,decode";

pub fn workload_to_csv(requests: &[Request]) -> String {
    let mut out = String::from(WORKLOAD_HEADER);
    out.push('\n');
    for r in requests {
        out.push_str(&format!("{},{},{},{}\n", r.id, r.arrival_time, r.prefill_len, r.decode_len));
    }
    out
}

pub fn parse_workload_csv(reader: impl Read, source_name: &str) -> Result<Vec<Request>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let csv_err = |e: csv::Error| {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        Error::parse(source_name, line, e.to_string())
    };
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != WORKLOAD_HEADER {
        return Err(Error::parse(source_name, 1, format!("expected header `{WORKLOAD_HEADER}`")));
    }
    let mut ids = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let at = |reason: String| Error::parse(source_name, line, reason);
        let int = |i: usize, name: &str| {
            record
                .get(i)
                .unwrap_or("")
                .parse::<u64>()
                .map_err(|_| at(format!("{name} must be a non-negative integer")))
        };
        let id = int(0, "id")?;
        let arrival: f64 = record
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|_| at("arrival_s must be a number".into()))?;
        if !(arrival >= 0.0 && arrival.is_finite()) {
            return Err(at("arrival_s must be finite and non-negative".into()));
        }
        let prefill = int(2, "prefill")?;
        let decode = int(3, "decode")?;
        if prefill == 0 {
            return Err(at("prefill must be >= 1".into()));
        }
        if !ids.insert(id) {
            return Err(at(format!("duplicate request id {id}")));
        }
        out.push(Request::new(id, arrival, prefill, decode));
    }
    Ok(out)
}

/// Content hash identifying a request set.
pub fn workload_hash(requests: &[Request]) -> String {
    let digest = Sha256::digest(workload_to_csv(requests).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
