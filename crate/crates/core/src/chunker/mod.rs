//! Prefill chunking: chunk plans, progressive causal masks, KV reload
//! accounting and chunk-size advice.

mod toy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::PdRatio;

pub use toy::{max_abs_deviation, random_case, toy_chunked_prefill, toy_full_prefill, ToyAttentionState, ToyOutput, ToyWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub start: u64,
    pub len: u64,
}

impl Chunk {
    pub fn end(&self) -> u64 {
        self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub request_id: u64,
    pub chunk_size: u64,
    pub chunks: Vec<Chunk>,
}

impl ChunkPlan {
    pub fn prompt_len(&self) -> u64 {
        self.chunks.last().map_or(0, Chunk::end)
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// Splits a prompt of `prompt_len` tokens into `ceil(P / C)` chunks of
/// `chunk_size`, the last one holding the remainder.
pub fn plan_chunks(prompt_len: u64, chunk_size: u64) -> Result<ChunkPlan> {
    plan_chunks_for(0, prompt_len, chunk_size)
}

pub fn plan_chunks_for(request_id: u64, prompt_len: u64, chunk_size: u64) -> Result<ChunkPlan> {
    if prompt_len == 0 || chunk_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "prompt length and chunk size must be >= 1 (got P={prompt_len}, C={chunk_size})"
        )));
    }
    let chunks = (0..prompt_len)
        .step_by(chunk_size as usize)
        .map(|start| Chunk {
            start,
            len: chunk_size.min(prompt_len - start),
        })
        .collect();
    Ok(ChunkPlan {
        request_id,
        chunk_size,
        chunks,
    })
}

/// Allowed key range `[0, last_key]` of one query position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRow {
    pub query: u64,
    pub last_key: u64,
}

impl MaskRow {
    pub fn allows(&self, key: u64) -> bool {
        key <= self.last_key
    }

    pub fn key_count(&self) -> u64 {
        self.last_key + 1
    }
}

/// Causal mask of one chunk as per-row key ranges: query `q` sees every
/// earlier chunk's keys plus its own prefix `[start, q]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkMask {
    pub rows: Vec<MaskRow>,
}

pub fn mask_for_chunk(plan: &ChunkPlan, chunk_index: usize) -> Result<ChunkMask> {
    let chunk = plan.chunks.get(chunk_index).ok_or(Error::ChunkIndexOutOfRange {
        index: chunk_index,
        len: plan.chunks.len(),
    })?;
    Ok(ChunkMask {
        rows: (chunk.start..chunk.end())
            .map(|q| MaskRow { query: q, last_key: q })
            .collect(),
    })
}

/// Token-KV entries read across all chunks: chunk `j` re-reads every key
/// before its end, so uniform chunks cost `C * N * (N + 1) / 2`.
pub fn kv_reload_tokens(plan: &ChunkPlan) -> u64 {
    plan.chunks.iter().map(Chunk::end).sum()
}

/// Chunk size that makes `chunk + (B - 1)` piggybacked decode tokens land on
/// a tile multiple.
pub fn advise_chunk_size(target_chunk: u64, batch_size: u64, tile: u64) -> Result<u64> {
    if batch_size == 0 || tile == 0 {
        return Err(Error::InvalidArgument("batch size and tile must be >= 1".into()));
    }
    if !target_chunk.is_multiple_of(tile) {
        return Err(Error::InvalidArgument(format!(
            "target chunk {target_chunk} is not a multiple of tile {tile}"
        )));
    }
    let decodes = batch_size - 1;
    if target_chunk <= decodes {
        return Err(Error::InvalidArgument(format!(
            "target chunk {target_chunk} leaves no prefill tokens beside {decodes} decode slots"
        )));
    }
    Ok(target_chunk - decodes)
}

/// P:D ratio at which chunked prefills and piggybacked decodes run out
/// together: `C / (B - 1)`.
pub fn optimal_pd(chunk_size: u64, batch_size: u64) -> Result<PdRatio> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} leaves no decode slots"
        )));
    }
    PdRatio::new(chunk_size as f64 / (batch_size - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plan_examples() {
        let p = plan_chunks(1024, 256).unwrap();
        assert_eq!(p.chunks.len(), 4);
        assert!(p.chunks.iter().all(|c| c.len == 256));
        let p = plan_chunks(5, 2).unwrap();
        let spans: Vec<(u64, u64)> = p.chunks.iter().map(|c| (c.start, c.len)).collect();
        assert_eq!(spans, vec![(0, 2), (2, 2), (4, 1)]);
        let p = plan_chunks(3, 8).unwrap();
        assert_eq!(p.chunks, vec![Chunk { start: 0, len: 3 }]);
        assert!(plan_chunks(0, 8).is_err());
        assert!(plan_chunks(8, 0).is_err());
    }

    #[test]
    fn mask_examples() {
        let plan = plan_chunks(12, 4).unwrap();
        let m = mask_for_chunk(&plan, 1).unwrap();
        assert_eq!(m.rows.first().unwrap(), &MaskRow { query: 4, last_key: 4 });
        assert_eq!(m.rows.last().unwrap(), &MaskRow { query: 7, last_key: 7 });
        assert!(m.rows[0].allows(0) && !m.rows[0].allows(5));

        let full = plan_chunks(6, 6).unwrap();
        let m = mask_for_chunk(&full, 0).unwrap();
        for (q, row) in m.rows.iter().enumerate() {
            for k in 0..6u64 {
                assert_eq!(row.allows(k), k <= q as u64);
            }
        }

        let last = mask_for_chunk(&plan, 2).unwrap();
        assert_eq!(last.rows.last().unwrap().key_count(), 12);
        assert!(matches!(
            mask_for_chunk(&plan, 3),
            Err(Error::ChunkIndexOutOfRange { index: 3, len: 3 })
        ));
    }

    /// Counts one read per (chunk, key) pair visible to that chunk.
    fn reload_oracle(plan: &ChunkPlan) -> u64 {
        let mut reads = 0;
        for (j, _) in plan.chunks.iter().enumerate() {
            let mask = mask_for_chunk(plan, j).unwrap();
            let visible = mask.rows.iter().map(|r| r.last_key).max().unwrap();
            reads += (0..=visible).count() as u64;
        }
        reads
    }

    #[test]
    fn reload_examples() {
        let plan = plan_chunks(1024, 256).unwrap();
        assert_eq!(reload_oracle(&plan), 2560);
        assert_eq!(kv_reload_tokens(&plan), 2560);
        assert_eq!(kv_reload_tokens(&plan_chunks(77, 77).unwrap()), 77);
        assert_eq!(kv_reload_tokens(&plan_chunks(4, 1).unwrap()), 10);
    }

    #[test]
    fn advise_examples() {
        assert_eq!(advise_chunk_size(256, 4, 128).unwrap(), 253);
        assert_eq!(advise_chunk_size(256, 1, 128).unwrap(), 256);
        assert!(advise_chunk_size(128, 200, 128).is_err());
        assert!(advise_chunk_size(200, 4, 128).is_err());
    }

    #[test]
    fn optimal_pd_examples() {
        assert!((optimal_pd(256, 18).unwrap().value() - 15.0588).abs() < 1e-4);
        assert!((optimal_pd(512, 18).unwrap().value() - 30.1176).abs() < 1e-4);
        assert_eq!(optimal_pd(300, 2).unwrap().value(), 300.0);
        assert!(optimal_pd(256, 1).is_err());
    }

    proptest! {
        #[test]
        fn plan_tiles_prompt(p in 1u64..5000, c in 1u64..600) {
            let plan = plan_chunks(p, c).unwrap();
            prop_assert_eq!(plan.chunks.len() as u64, p.div_ceil(c));
            let mut cursor = 0;
            for (i, ch) in plan.chunks.iter().enumerate() {
                prop_assert_eq!(ch.start, cursor);
                prop_assert!(ch.len >= 1 && ch.len <= c);
                if i + 1 < plan.chunks.len() {
                    prop_assert_eq!(ch.len, c);
                }
                cursor = ch.end();
            }
            prop_assert_eq!(cursor, p);
        }

        #[test]
        fn reload_bounds(p in 1u64..3000, c in 1u64..400) {
            let plan = plan_chunks(p, c).unwrap();
            let reads = kv_reload_tokens(&plan);
            prop_assert_eq!(reads, reload_oracle(&plan));
            prop_assert!(reads >= p);
            prop_assert_eq!(reads == p, plan.chunks.len() == 1);
            if p % c == 0 {
                let n = p / c;
                prop_assert_eq!(reads, c * n * (n + 1) / 2);
            }
        }

        #[test]
        fn masks_grow_monotonically(p in 1u64..200, c in 1u64..50) {
            let plan = plan_chunks(p, c).unwrap();
            let mut prev: Option<u64> = None;
            for j in 0..plan.chunks.len() {
                for row in mask_for_chunk(&plan, j).unwrap().rows {
                    if let Some(last) = prev {
                        prop_assert_eq!(row.last_key, last + 1);
                    }
                    prop_assert_eq!(row.last_key, row.query);
                    prev = Some(row.last_key);
                }
            }
        }

        #[test]
        fn advised_chunk_fills_tile(k in 1u64..8, tile in prop::sample::select(vec![16u64, 64, 128, 256]), b in 1u64..64) {
            let target = k * tile;
            match advise_chunk_size(target, b, tile) {
                Ok(chunk) => prop_assert_eq!((chunk + b - 1) % tile, 0),
                Err(_) => prop_assert!(target <= b - 1),
            }
        }
    }
}
