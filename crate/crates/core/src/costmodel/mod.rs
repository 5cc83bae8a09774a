//! Execution-time estimation for a batch composition.
//!
//! Two backends share the [`CostBackend`] contract: an analytical roofline
//! model with tile quantization ([`AnalyticalBackend`]) and a profiled
//! per-op table with regression extrapolation ([`ProfileBackend`]).

mod analytical;
mod profile;
mod regression;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use analytical::{
    arithmetic_intensity, attention_kv_read_bytes, op_cost, roofline_time, tile_penalty_demo,
    AnalyticalBackend, DEFAULT_OTHERS_FRACTION,
};
pub use profile::{ingest_profile, ingest_profile_file, profile_time, ProfileBackend, ProfileEntry, ProfileTable};
pub use regression::least_squares;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    PreProj,
    Attn,
    PostProj,
    FfnLn1,
    FfnLn2,
    Others,
}

impl OpKind {
    /// The five profiled operations; `Others` is a fixed fraction on top.
    pub const MAJOR: [OpKind; 5] = [
        OpKind::PreProj,
        OpKind::Attn,
        OpKind::PostProj,
        OpKind::FfnLn1,
        OpKind::FfnLn2,
    ];

    pub const LINEAR: [OpKind; 4] = [OpKind::PreProj, OpKind::PostProj, OpKind::FfnLn1, OpKind::FfnLn2];

    pub fn is_linear(self) -> bool {
        matches!(self, OpKind::PreProj | OpKind::PostProj | OpKind::FfnLn1 | OpKind::FfnLn2)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::PreProj => "preproj",
            OpKind::Attn => "attn",
            OpKind::PostProj => "postproj",
            OpKind::FfnLn1 => "ffn_ln1",
            OpKind::FfnLn2 => "ffn_ln2",
            OpKind::Others => "others",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "preproj" => OpKind::PreProj,
            "attn" => OpKind::Attn,
            "postproj" => OpKind::PostProj,
            "ffn_ln1" => OpKind::FfnLn1,
            "ffn_ln2" => OpKind::FfnLn2,
            "others" => OpKind::Others,
            other => return Err(Error::InvalidArgument(format!("unknown op `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
    Mixed,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
            Phase::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "prefill" => Phase::Prefill,
            "decode" => Phase::Decode,
            "mixed" => Phase::Mixed,
            other => return Err(Error::InvalidArgument(format!("unknown phase `{other}`"))),
        })
    }
}

/// A prefill chunk of one request: `chunk_len` new tokens on top of
/// `context_offset` tokens already prefilled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillItem {
    pub chunk_len: u64,
    pub context_offset: u64,
}

/// One decode token attending `context_len` keys, itself included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeItem {
    pub context_len: u64,
}

/// Token composition of one iteration or micro-batch.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchComposition {
    pub prefill_items: Vec<PrefillItem>,
    pub decode_items: Vec<DecodeItem>,
}

impl BatchComposition {
    pub fn prefill_only(chunk_len: u64, context_offset: u64) -> Self {
        BatchComposition {
            prefill_items: vec![PrefillItem {
                chunk_len,
                context_offset,
            }],
            decode_items: Vec::new(),
        }
    }

    pub fn decode_only(contexts: impl IntoIterator<Item = u64>) -> Self {
        BatchComposition {
            prefill_items: Vec::new(),
            decode_items: contexts.into_iter().map(|context_len| DecodeItem { context_len }).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prefill_items.iter().any(|p| p.chunk_len == 0) {
            return Err(Error::InvalidArgument("prefill chunk_len must be >= 1".into()));
        }
        if self.decode_items.iter().any(|d| d.context_len == 0) {
            return Err(Error::InvalidArgument("decode context_len must be >= 1".into()));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.prefill_items.is_empty() && self.decode_items.is_empty()
    }

    pub fn prefill_tokens(&self) -> u64 {
        self.prefill_items.iter().map(|p| p.chunk_len).sum()
    }

    pub fn decode_tokens(&self) -> u64 {
        self.decode_items.len() as u64
    }

    /// Tokens flowing through the fused linear operations.
    pub fn linear_tokens(&self) -> u64 {
        self.prefill_tokens() + self.decode_tokens()
    }

    pub fn decode_context_sum(&self) -> u64 {
        self.decode_items.iter().map(|d| d.context_len).sum()
    }

    /// Longest KV span attended by any item in the batch.
    pub fn max_context(&self) -> u64 {
        let p = self.prefill_items.iter().map(|p| p.context_offset + p.chunk_len);
        let d = self.decode_items.iter().map(|d| d.context_len);
        p.chain(d).max().unwrap_or(0)
    }

    pub fn phase(&self) -> Option<Phase> {
        match (self.prefill_items.is_empty(), self.decode_items.is_empty()) {
            (true, true) => None,
            (false, true) => Some(Phase::Prefill),
            (true, false) => Some(Phase::Decode),
            (false, false) => Some(Phase::Mixed),
        }
    }

    /// The same batch with its decode tokens removed.
    pub fn prefill_part(&self) -> BatchComposition {
        BatchComposition {
            prefill_items: self.prefill_items.clone(),
            decode_items: Vec::new(),
        }
    }

    pub fn decode_part(&self) -> BatchComposition {
        BatchComposition {
            prefill_items: Vec::new(),
            decode_items: self.decode_items.clone(),
        }
    }

    /// Prefill-only batch with the same token count: the decode slots are
    /// handed to the last prefill chunk. Empty when there is no prefill.
    pub fn prefill_equivalent(&self) -> BatchComposition {
        let mut items = self.prefill_items.clone();
        if let Some(last) = items.last_mut() {
            last.chunk_len += self.decode_tokens();
        }
        BatchComposition {
            prefill_items: items,
            decode_items: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OpCost {
    pub flops: f64,
    pub bytes: f64,
}

impl std::ops::Add for OpCost {
    type Output = OpCost;

    fn add(self, rhs: OpCost) -> OpCost {
        OpCost {
            flops: self.flops + rhs.flops,
            bytes: self.bytes + rhs.bytes,
        }
    }
}

impl std::iter::Sum for OpCost {
    fn sum<I: Iterator<Item = OpCost>>(iter: I) -> OpCost {
        iter.fold(OpCost::default(), |a, b| a + b)
    }
}

/// Estimated execution time of a batch, broken down by operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchTiming {
    pub total: f64,
    pub per_op: BTreeMap<OpKind, f64>,
}

/// Maps a batch composition to its execution time on one pipeline stage
/// holding `layers` transformer blocks (communication excluded).
pub trait CostBackend: Send + Sync {
    fn name(&self) -> &str;

    fn batch_timing(&self, comp: &BatchComposition, layers: u64) -> Result<BatchTiming>;

    fn batch_time(&self, comp: &BatchComposition, layers: u64) -> Result<f64> {
        Ok(self.batch_timing(comp, layers)?.total)
    }
}

/// Every non-empty batch takes `seconds_per_layer * layers`, whatever its
/// contents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantBackend {
    pub seconds_per_layer: f64,
}

impl CostBackend for ConstantBackend {
    fn name(&self) -> &str {
        "constant"
    }

    fn batch_timing(&self, comp: &BatchComposition, layers: u64) -> Result<BatchTiming> {
        let total = if comp.is_empty() {
            0.0
        } else {
            self.seconds_per_layer * layers as f64
        };
        Ok(BatchTiming {
            total,
            per_op: BTreeMap::new(),
        })
    }
}

/// Tokens rounded up to a whole number of matmul tiles.
pub fn quantize_tokens(tokens: u64, tile_size: u64) -> u64 {
    tokens.div_ceil(tile_size) * tile_size
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_counts() {
        let comp = BatchComposition {
            prefill_items: vec![PrefillItem {
                chunk_len: 253,
                context_offset: 512,
            }],
            decode_items: vec![DecodeItem { context_len: 100 }, DecodeItem { context_len: 900 }],
        };
        assert_eq!(comp.linear_tokens(), 255);
        assert_eq!(comp.max_context(), 900);
        assert_eq!(comp.decode_context_sum(), 1000);
        assert_eq!(comp.phase(), Some(Phase::Mixed));
        assert_eq!(comp.prefill_part().phase(), Some(Phase::Prefill));
        assert_eq!(BatchComposition::default().phase(), None);
        let eq = comp.prefill_equivalent();
        assert_eq!(eq.prefill_items, vec![PrefillItem { chunk_len: 255, context_offset: 512 }]);
        assert!(comp.decode_part().prefill_equivalent().is_empty());
    }

    #[test]
    fn quantization() {
        assert_eq!(quantize_tokens(1, 128), 128);
        assert_eq!(quantize_tokens(256, 128), 256);
        assert_eq!(quantize_tokens(257, 128), 384);
        assert_eq!(quantize_tokens(7, 1), 7);
    }

    #[test]
    fn op_names_round_trip() {
        for op in OpKind::MAJOR.into_iter().chain([OpKind::Others]) {
            assert_eq!(op.as_str().parse::<OpKind>().unwrap(), op);
        }
        assert!("mlp".parse::<OpKind>().is_err());
    }
}
