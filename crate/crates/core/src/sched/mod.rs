//! Batch-construction policies and KV-cache admission.
//!
//! Four policies share one [`Scheduler`]:
//!
//! * `RequestLevel` admits a cohort, prefills it in one batch and decodes it
//!   to completion before admitting anyone else.
//! * `OrcaWorst` admits at iteration granularity but never mixes phases: an
//!   iteration is either all new prompts or all decodes.
//! * `OrcaBest` adds at most one new request's full prompt to the running
//!   decodes each iteration.
//! * `DecodeMaximal` takes one prefill chunk from the oldest admitted request
//!   with prompt left and fills the remaining slots with decodes.
//!
//! Admission and prefill service are FCFS by arrival time. Each admitted
//! request reserves its full-length KV footprint up front.

mod capacity;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chunker::advise_chunk_size;
use crate::costmodel::{BatchComposition, DecodeItem, PrefillItem};
use crate::error::{Error, Result};
use crate::types::Request;

pub use capacity::{kv_occupancy, CapacityModel, DEFAULT_RESERVE_FRACTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum SchedulerPolicy {
    RequestLevel,
    OrcaBest,
    OrcaWorst,
    DecodeMaximal { chunk_size: u64, tile_adjust: bool },
}

impl SchedulerPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            SchedulerPolicy::RequestLevel => "request-level",
            SchedulerPolicy::OrcaBest => "orca-best",
            SchedulerPolicy::OrcaWorst => "orca-worst",
            SchedulerPolicy::DecodeMaximal { .. } => "decode-maximal",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let SchedulerPolicy::DecodeMaximal { chunk_size: 0, .. } = self {
            return Err(Error::InvalidArgument("decode-maximal chunk_size must be >= 1".into()));
        }
        Ok(())
    }
}

impl fmt::Display for SchedulerPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedulerPolicy::DecodeMaximal { chunk_size, tile_adjust } => {
                write!(f, "decode-maximal(C={chunk_size}, tile_adjust={tile_adjust})")
            }
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for SchedulerPolicy {
    type Err = Error;

    /// Parses a bare policy name; decode-maximal gets chunk 256, tile-adjusted.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "request-level" => SchedulerPolicy::RequestLevel,
            "orca-best" => SchedulerPolicy::OrcaBest,
            "orca-worst" => SchedulerPolicy::OrcaWorst,
            "decode-maximal" => SchedulerPolicy::DecodeMaximal {
                chunk_size: 256,
                tile_adjust: true,
            },
            other => return Err(Error::InvalidArgument(format!("unknown policy `{other}`"))),
        })
    }
}

/// One scheduled iteration or micro-batch. `prefill_members[i]` owns
/// `composition.prefill_items[i]`, likewise for decodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub iteration: u64,
    pub composition: BatchComposition,
    pub prefill_members: Vec<u64>,
    pub decode_members: Vec<u64>,
}

impl BatchPlan {
    pub fn members(&self) -> impl Iterator<Item = u64> + '_ {
        self.prefill_members.iter().chain(&self.decode_members).copied()
    }

    pub fn size(&self) -> usize {
        self.prefill_members.len() + self.decode_members.len()
    }
}

/// A request plus the scheduler's dispatch cursors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedRequest {
    pub request: Request,
    /// Prompt tokens handed to a batch, including ones still in flight.
    pub prefill_dispatched: u64,
    pub decode_in_flight: bool,
}

impl TrackedRequest {
    fn prefill_remaining(&self) -> u64 {
        self.request.prefill_len - self.prefill_dispatched
    }

    fn decode_ready(&self) -> bool {
        let r = &self.request;
        r.prefill_complete() && r.decode_done < r.decode_len && !self.decode_in_flight
    }

    fn context_for_next_decode(&self) -> u64 {
        self.request.prefill_len + self.request.decode_done + 1
    }
}

/// Requests known to one replica: not yet admitted, admitted, finished.
#[derive(Debug, Clone, Default)]
pub struct RequestPool {
    slots: Vec<TrackedRequest>,
    by_id: BTreeMap<u64, usize>,
    waiting: VecDeque<usize>,
    admitted: Vec<usize>,
    finished: Vec<usize>,
}

impl RequestPool {
    /// Requests are served in (arrival_time, id) order.
    pub fn new(mut requests: Vec<Request>) -> Result<Self> {
        requests.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time).then(a.id.cmp(&b.id)));
        let mut by_id = BTreeMap::new();
        for (i, r) in requests.iter().enumerate() {
            if by_id.insert(r.id, i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate request id {}", r.id)));
            }
        }
        Ok(RequestPool {
            waiting: (0..requests.len()).collect(),
            slots: requests
                .into_iter()
                .map(|request| TrackedRequest {
                    request,
                    prefill_dispatched: 0,
                    decode_in_flight: false,
                })
                .collect(),
            by_id,
            admitted: Vec::new(),
            finished: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&TrackedRequest> {
        self.by_id.get(&id).map(|&i| &self.slots[i])
    }

    pub fn all_finished(&self) -> bool {
        self.finished.len() == self.slots.len()
    }

    pub fn admitted_count(&self) -> u64 {
        self.admitted.len() as u64
    }

    pub fn admitted_requests(&self) -> impl Iterator<Item = &Request> {
        self.admitted.iter().map(|&i| &self.slots[i].request)
    }

    pub fn requests(&self) -> impl Iterator<Item = &Request> {
        self.slots.iter().map(|t| &t.request)
    }

    pub fn into_requests(self) -> Vec<Request> {
        let mut out: Vec<Request> = self.slots.into_iter().map(|t| t.request).collect();
        out.sort_by_key(|r| r.id);
        out
    }

    /// Arrival time of the next request not yet admitted.
    pub fn next_arrival(&self) -> Option<f64> {
        self.waiting.front().map(|&i| self.slots[i].request.arrival_time)
    }

    fn has_arrived_waiting(&self, clock: f64) -> bool {
        self.next_arrival().is_some_and(|t| t <= clock)
    }

    fn admit_next(&mut self, clock: f64) -> Option<usize> {
        if !self.has_arrived_waiting(clock) {
            return None;
        }
        let i = self.waiting.pop_front()?;
        self.admitted.push(i);
        Some(i)
    }

    /// Whether any admitted request could contribute to a batch right now.
    pub fn has_ready_work(&self) -> bool {
        self.admitted.iter().any(|&i| {
            let t = &self.slots[i];
            t.prefill_remaining() > 0 || t.decode_ready()
        })
    }

    /// Applies a batch that has left the last pipeline stage at `time`.
    /// Returns the ids of requests that finished.
    pub fn complete(&mut self, plan: &BatchPlan, time: f64) -> Result<Vec<u64>> {
        let mut done = Vec::new();
        for (id, item) in plan.prefill_members.iter().zip(&plan.composition.prefill_items) {
            let i = self.index(*id)?;
            let r = &mut self.slots[i].request;
            if r.prefill_done != item.context_offset {
                return Err(Error::Invariant(format!(
                    "request {id}: chunk at offset {} completed out of order (prefill_done={})",
                    item.context_offset, r.prefill_done
                )));
            }
            r.prefill_done += item.chunk_len;
            if r.prefill_complete() && r.decode_len == 0 {
                self.finish(i, time)?;
                done.push(*id);
            }
        }
        for id in &plan.decode_members {
            let i = self.index(*id)?;
            let t = &mut self.slots[i];
            t.decode_in_flight = false;
            t.request.decode_done += 1;
            if t.request.decode_done == t.request.decode_len {
                self.finish(i, time)?;
                done.push(*id);
            }
        }
        Ok(done)
    }

    fn index(&self, id: u64) -> Result<usize> {
        self.by_id
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Invariant(format!("unknown request id {id}")))
    }

    fn finish(&mut self, i: usize, time: f64) -> Result<()> {
        let r = &mut self.slots[i].request;
        if r.completion_time.is_some() {
            return Err(Error::Invariant(format!("request {} completed twice", r.id)));
        }
        r.completion_time = Some(time);
        self.admitted.retain(|&j| j != i);
        self.finished.push(i);
        Ok(())
    }
}

/// Batch former for one replica.
#[derive(Debug, Clone)]
pub struct Scheduler {
    policy: SchedulerPolicy,
    /// Requests per batch (B).
    max_batch: u64,
    /// Requests whose KV reservation fits concurrently.
    max_admitted: u64,
    chunk: u64,
    iteration: u64,
}

impl Scheduler {
    /// `max_batch` bounds one batch; `max_admitted` bounds concurrently
    /// admitted requests (equal to `max_batch` without pipelining).
    pub fn new(policy: SchedulerPolicy, max_batch: u64, max_admitted: u64, tile_size: u64) -> Result<Self> {
        policy.validate()?;
        if max_batch == 0 || max_admitted == 0 {
            return Err(Error::InvalidDeployment(
                "batch size is 0: the model does not fit in device memory".into(),
            ));
        }
        let chunk = match policy {
            SchedulerPolicy::DecodeMaximal {
                chunk_size,
                tile_adjust: true,
            } => advise_chunk_size(chunk_size, max_batch, tile_size)?,
            SchedulerPolicy::DecodeMaximal { chunk_size, .. } => chunk_size,
            _ => 0,
        };
        Ok(Scheduler {
            policy,
            max_batch,
            max_admitted: max_admitted.max(max_batch),
            chunk,
            iteration: 0,
        })
    }

    pub fn policy(&self) -> SchedulerPolicy {
        self.policy
    }

    pub fn max_batch(&self) -> u64 {
        self.max_batch
    }

    /// Prefill chunk actually used by decode-maximal batching.
    pub fn effective_chunk(&self) -> Option<u64> {
        matches!(self.policy, SchedulerPolicy::DecodeMaximal { .. }).then_some(self.chunk)
    }

    /// Forms the next batch from requests that have arrived by `clock`,
    /// marking its members as dispatched. `None` means idle.
    pub fn next_batch(&mut self, pool: &mut RequestPool, clock: f64) -> Option<BatchPlan> {
        let mut plan = BatchPlan {
            iteration: self.iteration,
            composition: BatchComposition::default(),
            prefill_members: Vec::new(),
            decode_members: Vec::new(),
        };
        match self.policy {
            SchedulerPolicy::RequestLevel => self.request_level(pool, clock, &mut plan),
            SchedulerPolicy::OrcaWorst => self.orca_worst(pool, clock, &mut plan),
            SchedulerPolicy::OrcaBest => self.orca_best(pool, clock, &mut plan),
            SchedulerPolicy::DecodeMaximal { .. } => self.decode_maximal(pool, clock, &mut plan),
        }
        if plan.size() == 0 {
            return None;
        }
        self.iteration += 1;
        Some(plan)
    }

    fn can_admit(&self, pool: &RequestPool) -> bool {
        pool.admitted_count() < self.max_admitted
    }

    fn push_full_prompt(pool: &mut RequestPool, i: usize, plan: &mut BatchPlan) {
        let t = &mut pool.slots[i];
        let offset = t.prefill_dispatched;
        let len = t.prefill_remaining();
        t.prefill_dispatched = t.request.prefill_len;
        plan.composition.prefill_items.push(PrefillItem {
            chunk_len: len,
            context_offset: offset,
        });
        plan.prefill_members.push(t.request.id);
    }

    fn push_decodes(pool: &mut RequestPool, limit: u64, plan: &mut BatchPlan) {
        let mut taken = 0;
        for &i in &pool.admitted {
            if taken == limit {
                break;
            }
            let t = &mut pool.slots[i];
            if t.decode_ready() {
                plan.composition.decode_items.push(DecodeItem {
                    context_len: t.context_for_next_decode(),
                });
                plan.decode_members.push(t.request.id);
                t.decode_in_flight = true;
                taken += 1;
            }
        }
    }

    fn request_level(&self, pool: &mut RequestPool, clock: f64, plan: &mut BatchPlan) {
        if pool.admitted.is_empty() {
            while (pool.admitted.len() as u64) < self.max_batch.min(self.max_admitted) {
                let Some(i) = pool.admit_next(clock) else { break };
                Self::push_full_prompt(pool, i, plan);
            }
            return;
        }
        Self::push_decodes(pool, self.max_batch, plan);
    }

    fn orca_worst(&self, pool: &mut RequestPool, clock: f64, plan: &mut BatchPlan) {
        while (plan.prefill_members.len() as u64) < self.max_batch && self.can_admit(pool) {
            let Some(i) = pool.admit_next(clock) else { break };
            Self::push_full_prompt(pool, i, plan);
        }
        if plan.prefill_members.is_empty() {
            Self::push_decodes(pool, self.max_batch, plan);
        }
    }

    fn orca_best(&self, pool: &mut RequestPool, clock: f64, plan: &mut BatchPlan) {
        if self.can_admit(pool) {
            if let Some(i) = pool.admit_next(clock) {
                Self::push_full_prompt(pool, i, plan);
            }
        }
        let limit = self.max_batch - plan.prefill_members.len() as u64;
        Self::push_decodes(pool, limit, plan);
    }

    fn decode_maximal(&self, pool: &mut RequestPool, clock: f64, plan: &mut BatchPlan) {
        while self.can_admit(pool) && pool.admit_next(clock).is_some() {}
        let next_prefill = pool
            .admitted
            .iter()
            .copied()
            .find(|&i| pool.slots[i].prefill_remaining() > 0);
        if let Some(i) = next_prefill {
            let t = &mut pool.slots[i];
            let len = self.chunk.min(t.prefill_remaining());
            plan.composition.prefill_items.push(PrefillItem {
                chunk_len: len,
                context_offset: t.prefill_dispatched,
            });
            plan.prefill_members.push(t.request.id);
            t.prefill_dispatched += len;
        }
        let limit = self.max_batch - plan.prefill_members.len() as u64;
        Self::push_decodes(pool, limit, plan);
    }
}
