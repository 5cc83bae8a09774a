//! Deterministic simulation of one replica, with or without pipeline
//! parallelism.
//!
//! The pipeline is synchronous and FIFO: a micro-batch's start and end on
//! every stage are fixed as soon as it is formed, stage `s` starting it at
//! `max(stage s free, end on stage s-1 + send)`. New micro-batches are formed
//! whenever stage 0 is free and fewer than `pp` are in flight. A batch's
//! effects on request state (finished chunks, new decode tokens) are applied
//! when it leaves the last stage.

mod bubble;
mod comm;
mod trace;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::costmodel::{BatchComposition, CostBackend};
use crate::error::{Error, Result};
use crate::sched::{BatchPlan, RequestPool, Scheduler};
use crate::types::{Deployment, Request};

pub use bubble::{classify_bubble, find_bubbles, per_request_bubble, BubbleKind, BubbleRecord};
pub use comm::{pp_send, tp_allreduce, CommModel};
pub use trace::{read_trace_jsonl, trace_to_jsonl, TraceLine};

/// Per-stage execution shape of a deployment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageModel {
    pub pp_degree: u64,
    pub layers_per_stage: u64,
    pub hidden_size: u64,
    pub bytes_per_param: u64,
    pub comm: CommModel,
}

impl StageModel {
    pub fn for_deployment(d: &Deployment) -> Self {
        StageModel {
            pp_degree: d.cluster.pp_degree,
            layers_per_stage: d.layers_per_stage,
            hidden_size: d.model.hidden_size,
            bytes_per_param: d.model.bytes_per_param,
            comm: CommModel::for_cluster(&d.cluster),
        }
    }

    pub fn total_layers(&self) -> u64 {
        self.pp_degree * self.layers_per_stage
    }

    fn activation_bytes(&self, comp: &BatchComposition) -> f64 {
        (comp.linear_tokens() * self.hidden_size * self.bytes_per_param) as f64
    }

    /// Compute over this stage's layers plus two all-reduces per layer.
    pub fn stage_time(&self, backend: &dyn CostBackend, comp: &BatchComposition) -> Result<f64> {
        let compute = backend.batch_time(comp, self.layers_per_stage)?;
        let allreduce = self.comm.allreduce(self.activation_bytes(comp));
        Ok(compute + 2.0 * self.layers_per_stage as f64 * allreduce)
    }

    pub fn send_time(&self, comp: &BatchComposition) -> f64 {
        self.comm.send(self.activation_bytes(comp))
    }
}

/// One micro-batch (an iteration when pp = 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub id: u64,
    pub composition: BatchComposition,
    pub prefill_members: Vec<u64>,
    pub decode_members: Vec<u64>,
    /// Entry to the first stage.
    pub start: f64,
    /// Exit from the last stage.
    pub end: f64,
    pub stage_time: f64,
    pub send_time: f64,
    /// Whole-model compute time of this batch.
    pub compute_time: f64,
    /// Whole-model time of a prefill-only batch with the same token count;
    /// zero without prefill.
    pub prefill_only_time: f64,
    /// Whole-model time of this batch's decodes run alone; zero without
    /// decodes.
    pub decode_only_time: f64,
}

impl BatchRecord {
    pub fn members(&self) -> impl Iterator<Item = u64> + '_ {
        self.prefill_members.iter().chain(&self.decode_members).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    pub microbatch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTimeline {
    pub stage_id: u64,
    pub intervals: Vec<Interval>,
}

impl StageTimeline {
    pub fn busy(&self) -> f64 {
        self.intervals.iter().map(|i| i.end - i.start).sum()
    }

    /// Idle gaps between consecutive busy intervals.
    pub fn gaps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.intervals.windows(2).map(|w| (w[0].end, w[1].start))
    }

    pub fn validate(&self) -> Result<()> {
        for i in &self.intervals {
            if !(i.end > i.start) || !i.start.is_finite() || !i.end.is_finite() {
                return Err(Error::Invariant(format!(
                    "stage {}: empty or non-finite interval for micro-batch {}",
                    self.stage_id, i.microbatch
                )));
            }
        }
        for w in self.intervals.windows(2) {
            if w[1].start < w[0].end {
                return Err(Error::Invariant(format!(
                    "stage {}: micro-batches {} and {} overlap",
                    self.stage_id, w[0].microbatch, w[1].microbatch
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival: f64,
    pub prefill_len: u64,
    pub decode_len: u64,
    pub completion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub policy: String,
    pub backend: String,
    pub pp_degree: u64,
    pub batches: Vec<BatchRecord>,
    pub timelines: Vec<StageTimeline>,
    pub requests: Vec<RequestRecord>,
}

impl Trace {
    /// Time the last stage finishes its last micro-batch.
    pub fn makespan(&self) -> f64 {
        self.timelines
            .iter()
            .filter_map(|t| t.intervals.last())
            .map(|i| i.end)
            .fold(0.0, f64::max)
    }

    pub fn batch(&self, id: u64) -> Option<&BatchRecord> {
        self.batches.get(id as usize).filter(|b| b.id == id)
    }

    /// Structural checks: stage count, interval order, causality between
    /// stages and id consistency.
    pub fn validate(&self) -> Result<()> {
        if self.timelines.len() as u64 != self.pp_degree {
            return Err(Error::Invariant(format!(
                "{} timelines for pp = {}",
                self.timelines.len(),
                self.pp_degree
            )));
        }
        for (i, b) in self.batches.iter().enumerate() {
            if b.id != i as u64 {
                return Err(Error::Invariant(format!("batch {} stored at position {i}", b.id)));
            }
            if b.prefill_members.len() != b.composition.prefill_items.len()
                || b.decode_members.len() != b.composition.decode_items.len()
            {
                return Err(Error::Invariant(format!("batch {}: members do not match composition", b.id)));
            }
        }
        for (s, t) in self.timelines.iter().enumerate() {
            if t.stage_id != s as u64 {
                return Err(Error::Invariant(format!("timeline {} stored at position {s}", t.stage_id)));
            }
            t.validate()?;
            if t.intervals.len() != self.batches.len() {
                return Err(Error::Invariant(format!(
                    "stage {s} ran {} of {} micro-batches",
                    t.intervals.len(),
                    self.batches.len()
                )));
            }
            for (iv, b) in t.intervals.iter().zip(&self.batches) {
                if iv.microbatch != b.id {
                    return Err(Error::Invariant(format!("stage {s}: micro-batches out of order")));
                }
                if s > 0 {
                    let prev = &self.timelines[s - 1].intervals[b.id as usize];
                    if iv.start + 1e-12 < prev.end + b.send_time {
                        return Err(Error::Invariant(format!(
                            "micro-batch {} starts on stage {s} before it arrives",
                            b.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Whole-model times of a batch over `layers`: (actual, prefill-only of the
/// same token count, decodes alone).
pub fn evaluate_batch(backend: &dyn CostBackend, comp: &BatchComposition, layers: u64) -> Result<(f64, f64, f64)> {
    Ok((
        backend.batch_time(comp, layers)?,
        backend.batch_time(&comp.prefill_equivalent(), layers)?,
        backend.batch_time(&comp.decode_part(), layers)?,
    ))
}

/// Runs `requests` to completion under `scheduler` on a pipeline shaped
/// by `stages` (pp = 1 included).
pub fn simulate(
    requests: Vec<Request>,
    mut scheduler: Scheduler,
    backend: &dyn CostBackend,
    stages: &StageModel,
) -> Result<Trace> {
    if stages.pp_degree == 0 || stages.layers_per_stage == 0 {
        return Err(Error::InvalidDeployment("pipeline needs >= 1 stage and >= 1 layer per stage".into()));
    }
    let pp = stages.pp_degree as usize;
    let total_layers = stages.total_layers();
    let mut pool = RequestPool::new(requests)?;
    let mut stage_free = vec![0.0f64; pp];
    let mut in_flight: VecDeque<(BatchPlan, f64)> = VecDeque::new();
    let mut timelines: Vec<StageTimeline> = (0..pp as u64)
        .map(|stage_id| StageTimeline {
            stage_id,
            intervals: Vec::new(),
        })
        .collect();
    let mut batches = Vec::new();
    let mut clock = 0.0f64;

    loop {
        // results that have left the last stage by now become visible
        while in_flight.front().is_some_and(|(_, end)| *end <= clock) {
            let (plan, end) = in_flight.pop_front().expect("checked non-empty");
            pool.complete(&plan, end)?;
        }
        if pool.all_finished() && in_flight.is_empty() {
            break;
        }

        let formed = if in_flight.len() < pp && stage_free[0] <= clock {
            scheduler.next_batch(&mut pool, clock)
        } else {
            None
        };

        let Some(plan) = formed else {
            let next_completion = in_flight.front().map(|(_, end)| *end);
            let next_stage0 = (in_flight.len() < pp && stage_free[0] > clock).then_some(stage_free[0]);
            let next_arrival = pool.next_arrival().filter(|&t| t > clock);
            let next = [next_completion, next_stage0, next_arrival]
                .into_iter()
                .flatten()
                .fold(f64::INFINITY, f64::min);
            if !next.is_finite() {
                return Err(Error::Invariant(format!(
                    "simulation stalled at t={clock} with unfinished requests (batch size too small for the workload?)"
                )));
            }
            clock = next;
            continue;
        };

        let comp = &plan.composition;
        let stage_time = stages.stage_time(backend, comp)?;
        let send_time = stages.send_time(comp);
        if !(stage_time > 0.0 && stage_time.is_finite()) {
            return Err(Error::InconsistentTiming(format!(
                "batch {} has non-positive stage time {stage_time}",
                plan.iteration
            )));
        }
        let mut arrive = clock;
        let mut start0 = clock;
        for s in 0..pp {
            let start = if s == 0 {
                clock.max(stage_free[0])
            } else {
                stage_free[s].max(arrive + send_time)
            };
            if s == 0 {
                start0 = start;
            }
            let end = start + stage_time;
            stage_free[s] = end;
            timelines[s].intervals.push(Interval {
                start,
                end,
                microbatch: plan.iteration,
            });
            arrive = end;
        }
        let (compute_time, prefill_only_time, decode_only_time) = evaluate_batch(backend, comp, total_layers)?;
        batches.push(BatchRecord {
            id: plan.iteration,
            composition: comp.clone(),
            prefill_members: plan.prefill_members.clone(),
            decode_members: plan.decode_members.clone(),
            start: start0,
            end: arrive,
            stage_time,
            send_time,
            compute_time,
            prefill_only_time,
            decode_only_time,
        });
        in_flight.push_back((plan, arrive));
    }

    let requests = pool
        .into_requests()
        .into_iter()
        .map(|r| {
            Ok(RequestRecord {
                id: r.id,
                arrival: r.arrival_time,
                prefill_len: r.prefill_len,
                decode_len: r.decode_len,
                completion: r
                    .completion_time
                    .ok_or_else(|| Error::Invariant(format!("request {} never completed", r.id)))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trace {
        policy: scheduler.policy().name().to_string(),
        backend: backend.name().to_string(),
        pp_degree: stages.pp_degree,
        batches,
        timelines,
        requests,
    })
}

/// Single-stage run: each batch occupies the replica for its batch time.
pub fn run_replica(
    requests: Vec<Request>,
    scheduler: Scheduler,
    backend: &dyn CostBackend,
    stages: &StageModel,
) -> Result<Trace> {
    if stages.pp_degree != 1 {
        return Err(Error::InvalidDeployment(format!(
            "run_replica needs pp = 1, got {}",
            stages.pp_degree
        )));
    }
    simulate(requests, scheduler, backend, stages)
}

/// Pipeline-parallel run; returns the trace and its bubbles.
pub fn run_pipeline(
    requests: Vec<Request>,
    scheduler: Scheduler,
    backend: &dyn CostBackend,
    stages: &StageModel,
) -> Result<(Trace, Vec<BubbleRecord>)> {
    if stages.pp_degree < 2 {
        return Err(Error::InvalidDeployment(format!(
            "run_pipeline needs pp >= 2, got {}",
            stages.pp_degree
        )));
    }
    let trace = simulate(requests, scheduler, backend, stages)?;
    let bubbles = find_bubbles(&trace);
    Ok((trace, bubbles))
}

/// Deals requests to `replicas` round-robin by arrival order.
pub fn split_round_robin(mut requests: Vec<Request>, replicas: u64) -> Vec<Vec<Request>> {
    requests.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time).then(a.id.cmp(&b.id)));
    let mut out = vec![Vec::new(); replicas.max(1) as usize];
    let n = out.len();
    for (i, r) in requests.into_iter().enumerate() {
        out[i % n].push(r);
    }
    out
}
