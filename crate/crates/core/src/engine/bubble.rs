use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Trace;
use crate::config::Attribution;
use crate::costmodel::BatchComposition;

/// Idle-gap classes. `PB1`..`PB3` are pipeline bubbles between two
/// micro-batches; `Startup` and `Drain` are the fill and empty phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BubbleKind {
    /// Both neighbours carry prefill work.
    PB1,
    /// One neighbour carries prefill work, the other only decodes.
    PB2,
    /// Both neighbours only decode.
    PB3,
    Startup,
    Drain,
}

impl BubbleKind {
    pub fn is_pipeline(self) -> bool {
        matches!(self, BubbleKind::PB1 | BubbleKind::PB2 | BubbleKind::PB3)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BubbleKind::PB1 => "PB1",
            BubbleKind::PB2 => "PB2",
            BubbleKind::PB3 => "PB3",
            BubbleKind::Startup => "Startup",
            BubbleKind::Drain => "Drain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BubbleRecord {
    pub stage_id: u64,
    pub start: f64,
    pub gap: f64,
    pub preceding: Option<u64>,
    pub following: Option<u64>,
    pub kind: BubbleKind,
}

/// Classifies the gap between two micro-batches; a missing neighbour
/// means the gap is at the start or end of the stage's timeline.
pub fn classify_bubble(preceding: Option<&BatchComposition>, following: Option<&BatchComposition>) -> BubbleKind {
    match (preceding, following) {
        (None, _) => BubbleKind::Startup,
        (_, None) => BubbleKind::Drain,
        (Some(a), Some(b)) => match (a.prefill_tokens() > 0, b.prefill_tokens() > 0) {
            (true, true) => BubbleKind::PB1,
            (false, false) => BubbleKind::PB3,
            _ => BubbleKind::PB2,
        },
    }
}

/// Every idle gap of every stage: before its first micro-batch, between
/// consecutive ones, and after its last one up to the trace makespan.
pub fn find_bubbles(trace: &Trace) -> Vec<BubbleRecord> {
    const EPS: f64 = 1e-12;
    let makespan = trace.makespan();
    let comp = |id: u64| trace.batch(id).map(|b| &b.composition);
    let mut out = Vec::new();
    for tl in &trace.timelines {
        let Some(first) = tl.intervals.first() else { continue };
        if first.start > EPS {
            out.push(BubbleRecord {
                stage_id: tl.stage_id,
                start: 0.0,
                gap: first.start,
                preceding: None,
                following: Some(first.microbatch),
                kind: BubbleKind::Startup,
            });
        }
        for w in tl.intervals.windows(2) {
            let gap = w[1].start - w[0].end;
            if gap > EPS {
                out.push(BubbleRecord {
                    stage_id: tl.stage_id,
                    start: w[0].end,
                    gap,
                    preceding: Some(w[0].microbatch),
                    following: Some(w[1].microbatch),
                    kind: classify_bubble(comp(w[0].microbatch), comp(w[1].microbatch)),
                });
            }
        }
        let last = tl.intervals.last().expect("non-empty");
        if makespan - last.end > EPS {
            out.push(BubbleRecord {
                stage_id: tl.stage_id,
                start: last.end,
                gap: makespan - last.end,
                preceding: Some(last.microbatch),
                following: None,
                kind: BubbleKind::Drain,
            });
        }
    }
    out
}

/// Pipeline-bubble seconds per request. Each PB gap is charged to the
/// members of the micro-batch that follows it, in full or split evenly.
pub fn per_request_bubble(trace: &Trace, bubbles: &[BubbleRecord], rule: Attribution) -> BTreeMap<u64, f64> {
    let mut out: BTreeMap<u64, f64> = trace.requests.iter().map(|r| (r.id, 0.0)).collect();
    for b in bubbles.iter().filter(|b| b.kind.is_pipeline()) {
        let Some(batch) = b.following.and_then(|id| trace.batch(id)) else { continue };
        let n = batch.prefill_members.len() + batch.decode_members.len();
        let share = match rule {
            Attribution::Full => b.gap,
            Attribution::Fractional => b.gap / n.max(1) as f64,
        };
        // a request holds at most one slot per micro-batch
        let mut members: Vec<u64> = batch.members().collect();
        members.sort_unstable();
        members.dedup();
        for id in members {
            *out.entry(id).or_insert(0.0) += share;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{DecodeItem, PrefillItem};
    use crate::engine::{BatchRecord, Interval, RequestRecord, StageTimeline};

    fn prefill(n: u64) -> BatchComposition {
        BatchComposition::prefill_only(n, 0)
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classify_bubble(Some(&prefill(1024)), Some(&prefill(256))), BubbleKind::PB1);
        let dec = BatchComposition::decode_only([100, 200]);
        assert_eq!(classify_bubble(Some(&prefill(1024)), Some(&dec)), BubbleKind::PB2);
        assert_eq!(classify_bubble(Some(&dec), Some(&prefill(8))), BubbleKind::PB2);
        let a = BatchComposition::decode_only([2048, 2048]);
        let b = BatchComposition::decode_only([512, 512]);
        assert_eq!(classify_bubble(Some(&a), Some(&b)), BubbleKind::PB3);
        assert_eq!(classify_bubble(None, Some(&a)), BubbleKind::Startup);
        assert_eq!(classify_bubble(Some(&a), None), BubbleKind::Drain);
        let mixed = BatchComposition {
            prefill_items: vec![PrefillItem {
                chunk_len: 10,
                context_offset: 0,
            }],
            decode_items: vec![DecodeItem { context_len: 5 }],
        };
        assert_eq!(classify_bubble(Some(&mixed), Some(&prefill(1))), BubbleKind::PB1);
    }

    fn batch(id: u64, members: &[u64]) -> BatchRecord {
        BatchRecord {
            id,
            composition: BatchComposition::decode_only(members.iter().map(|_| 10)),
            prefill_members: Vec::new(),
            decode_members: members.to_vec(),
            start: 0.0,
            end: 0.0,
            stage_time: 0.0,
            send_time: 0.0,
            compute_time: 0.0,
            prefill_only_time: 0.0,
            decode_only_time: 0.0,
        }
    }

    fn iv(start: f64, end: f64, microbatch: u64) -> Interval {
        Interval { start, end, microbatch }
    }

    fn trace(batches: Vec<BatchRecord>, stages: Vec<Vec<Interval>>, ids: &[u64]) -> Trace {
        Trace {
            policy: "test".into(),
            backend: "test".into(),
            pp_degree: stages.len() as u64,
            batches,
            timelines: stages
                .into_iter()
                .enumerate()
                .map(|(s, intervals)| StageTimeline {
                    stage_id: s as u64,
                    intervals,
                })
                .collect(),
            requests: ids
                .iter()
                .map(|&id| RequestRecord {
                    id,
                    arrival: 0.0,
                    prefill_len: 1,
                    decode_len: 1,
                    completion: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn six_second_bubble_charged_to_followers() {
        let t = trace(
            vec![batch(0, &[9]), batch(1, &[1, 2])],
            vec![vec![iv(0.0, 4.0, 0), iv(4.0, 14.0, 1)], vec![iv(4.0, 8.0, 0), iv(14.0, 24.0, 1)]],
            &[1, 2, 9],
        );
        let bubbles = find_bubbles(&t);
        let full = per_request_bubble(&t, &bubbles, Attribution::Full);
        assert_eq!(full[&1], 6.0);
        assert_eq!(full[&2], 6.0);
        assert_eq!(full[&9], 0.0);
        let frac = per_request_bubble(&t, &bubbles, Attribution::Fractional);
        assert_eq!(frac[&1], 3.0);
    }

    #[test]
    fn zero_bubble_trace() {
        let t = trace(
            vec![batch(0, &[1]), batch(1, &[2])],
            vec![vec![iv(0.0, 1.0, 0), iv(1.0, 2.0, 1)], vec![iv(1.0, 2.0, 0), iv(2.0, 3.0, 1)]],
            &[1, 2],
        );
        let bubbles = find_bubbles(&t);
        assert!(bubbles.iter().all(|b| !b.kind.is_pipeline()));
        assert!(per_request_bubble(&t, &bubbles, Attribution::Full).values().all(|&v| v == 0.0));
        let kinds: Vec<BubbleKind> = bubbles.iter().map(|b| b.kind).collect();
        assert_eq!(kinds, vec![BubbleKind::Drain, BubbleKind::Startup]);
    }
}
