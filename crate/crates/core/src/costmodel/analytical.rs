use std::collections::BTreeMap;

use super::{quantize_tokens, BatchComposition, BatchTiming, CostBackend, OpCost, OpKind};
use crate::error::{Error, Result};
use crate::types::{GpuSpec, ModelSpec};

/// Share of the five major operations added for layer norms, residuals and
/// other minor kernels.
pub const DEFAULT_OTHERS_FRACTION: f64 = 0.05;

/// Per-layer FLOP and byte counts of one operation over `comp`, sharded over
/// `tp_degree` GPUs.
///
/// Linear FLOPs use the token count rounded up to `tile_size`; attention is
/// never padded. Pass `tile_size = 1` for the useful (unpadded) work.
pub fn op_cost(kind: OpKind, comp: &BatchComposition, model: &ModelSpec, tile_size: u64, tp_degree: u64) -> OpCost {
    let h = model.hidden_size as f64;
    let h2 = model.ffn_hidden as f64;
    let tp = tp_degree as f64;
    let bpp = model.bytes_per_param as f64;
    let tokens = comp.linear_tokens();
    if kind.is_linear() && tokens == 0 {
        return OpCost::default();
    }
    let t = tokens as f64;
    let t_eff = quantize_tokens(tokens, tile_size.max(1)) as f64;

    // (input width, output width, weight elements) per shard
    let linear = |k_in: f64, n_out: f64, weights: f64| OpCost {
        flops: 2.0 * t_eff * weights,
        bytes: (weights + t * k_in + t * n_out) * bpp,
    };

    match kind {
        OpKind::PreProj => linear(h, 3.0 * h / tp, h * 3.0 * h / tp),
        OpKind::PostProj => linear(h / tp, h, h * h / tp),
        OpKind::FfnLn1 => linear(h, h2 / tp, h * h2 / tp),
        OpKind::FfnLn2 => linear(h2 / tp, h, h2 * h / tp),
        OpKind::Attn => {
            let (prefill, decode) = attention_costs(comp, model, tp_degree);
            prefill.into_iter().sum::<OpCost>() + decode
        }
        OpKind::Others => {
            let major: OpCost = OpKind::MAJOR
                .iter()
                .map(|&k| op_cost(k, comp, model, tile_size, tp_degree))
                .sum();
            OpCost {
                flops: major.flops * DEFAULT_OTHERS_FRACTION,
                bytes: major.bytes * DEFAULT_OTHERS_FRACTION,
            }
        }
    }
}

/// Attention work split into one kernel per prefill item plus one batched
/// kernel for all decode items.
fn attention_costs(comp: &BatchComposition, model: &ModelSpec, tp_degree: u64) -> (Vec<OpCost>, OpCost) {
    let hd = (model.hidden_size / tp_degree) as f64;
    let bpp = model.bytes_per_param as f64;
    let prefill = comp
        .prefill_items
        .iter()
        .map(|p| {
            let c = p.chunk_len as f64;
            let s = p.context_offset as f64;
            // sum_{i=1..c} (s + i): causal rows of QK^T, doubled for AV
            let attended = c * s + c * (c + 1.0) / 2.0;
            let q_and_out = 2.0 * c * hd * bpp;
            let kv_read = (s + c) * 2.0 * hd * bpp;
            let kv_write = c * 2.0 * hd * bpp;
            OpCost {
                flops: 4.0 * hd * attended,
                bytes: q_and_out + kv_read + kv_write,
            }
        })
        .collect();
    let decode = comp
        .decode_items
        .iter()
        .map(|d| {
            let ctx = d.context_len as f64;
            OpCost {
                flops: 4.0 * hd * ctx,
                bytes: 2.0 * hd * bpp + ctx * 2.0 * hd * bpp + 2.0 * hd * bpp,
            }
        })
        .sum();
    (prefill, decode)
}

/// KV-cache bytes read by attention over `comp` in one layer.
pub fn attention_kv_read_bytes(comp: &BatchComposition, model: &ModelSpec, tp_degree: u64) -> f64 {
    let per_token = 2.0 * (model.hidden_size / tp_degree) as f64 * model.bytes_per_param as f64;
    let prefill: u64 = comp.prefill_items.iter().map(|p| p.context_offset + p.chunk_len).sum();
    let decode: u64 = comp.decode_items.iter().map(|d| d.context_len).sum();
    (prefill + decode) as f64 * per_token
}

/// Roofline execution time of a single kernel.
pub fn roofline_time(cost: OpCost, gpu: &GpuSpec) -> f64 {
    let compute = cost.flops / (gpu.peak_flops * gpu.compute_efficiency);
    let memory = cost.bytes / (gpu.mem_bandwidth * gpu.memory_efficiency);
    compute.max(memory) + gpu.kernel_overhead
}

/// Useful FLOPs per byte of the whole batch (no tile padding).
pub fn arithmetic_intensity(comp: &BatchComposition, model: &ModelSpec, tp_degree: u64) -> f64 {
    let total: OpCost = OpKind::MAJOR
        .iter()
        .map(|&k| op_cost(k, comp, model, 1, tp_degree))
        .sum();
    total.flops / total.bytes
}

/// Analytical roofline backend for one model on one GPU type.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticalBackend {
    pub model: ModelSpec,
    pub gpu: GpuSpec,
    pub tp_degree: u64,
    pub others_fraction: f64,
}

impl AnalyticalBackend {
    pub fn new(model: ModelSpec, gpu: GpuSpec, tp_degree: u64) -> Self {
        AnalyticalBackend {
            model,
            gpu,
            tp_degree,
            others_fraction: DEFAULT_OTHERS_FRACTION,
        }
    }

    pub fn with_others_fraction(mut self, fraction: f64) -> Self {
        self.others_fraction = fraction;
        self
    }

    /// Per-layer time of each major op.
    pub fn layer_op_times(&self, comp: &BatchComposition) -> BTreeMap<OpKind, f64> {
        let mut out = BTreeMap::new();
        for kind in OpKind::LINEAR {
            let time = if comp.linear_tokens() == 0 {
                0.0
            } else {
                roofline_time(op_cost(kind, comp, &self.model, self.gpu.tile_size, self.tp_degree), &self.gpu)
            };
            out.insert(kind, time);
        }
        let (prefill, decode) = attention_costs(comp, &self.model, self.tp_degree);
        let mut attn: f64 = prefill.into_iter().map(|c| roofline_time(c, &self.gpu)).sum();
        if !comp.decode_items.is_empty() {
            attn += roofline_time(decode, &self.gpu);
        }
        out.insert(OpKind::Attn, attn);
        out
    }

    /// Fused-batch time over `layers` blocks: linear ops costed once over
    /// all tokens, attention per prefill item plus one batched decode kernel.
    pub fn batch_time_analytical(&self, comp: &BatchComposition, layers: u64) -> BatchTiming {
        let layers = layers as f64;
        let mut per_op: BTreeMap<OpKind, f64> = self
            .layer_op_times(comp)
            .into_iter()
            .map(|(k, t)| (k, t * layers))
            .collect();
        let major: f64 = per_op.values().sum();
        let others = major * self.others_fraction;
        per_op.insert(OpKind::Others, others);
        BatchTiming {
            total: major + others,
            per_op,
        }
    }
}

impl CostBackend for AnalyticalBackend {
    fn name(&self) -> &str {
        "analytical"
    }

    fn batch_timing(&self, comp: &BatchComposition, layers: u64) -> Result<BatchTiming> {
        comp.validate()?;
        Ok(self.batch_time_analytical(comp, layers))
    }
}

/// Full-model time of a single prefill of `tokens` tokens. Linear-op cost
/// steps up at every multiple of the GPU tile size.
pub fn tile_penalty_demo(tokens: u64, gpu: &GpuSpec, model: &ModelSpec) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::InvalidArgument("tile_penalty_demo needs at least one token".into()));
    }
    let backend = AnalyticalBackend::new(model.clone(), gpu.clone(), 1);
    Ok(backend
        .batch_time_analytical(&BatchComposition::prefill_only(tokens, 0), model.num_layers)
        .total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costmodel::{DecodeItem, PrefillItem};
    use crate::presets;

    fn tiny_model() -> ModelSpec {
        ModelSpec {
            name: "tiny".into(),
            num_layers: 2,
            num_heads: 2,
            hidden_size: 4,
            ffn_hidden: 8,
            bytes_per_param: 2,
            max_seq_len: 64,
            vocab_size: 10,
        }
    }

    fn unit_gpu(peak: f64, bw: f64, overhead: f64) -> GpuSpec {
        GpuSpec {
            name: "unit".into(),
            peak_flops: peak,
            mem_bandwidth: bw,
            mem_capacity: 1e9,
            tile_size: 1,
            compute_efficiency: 1.0,
            memory_efficiency: 1.0,
            kernel_overhead: overhead,
        }
    }

    #[test]
    fn preproj_flops_formula() {
        let comp = BatchComposition::decode_only([1, 1]);
        let cost = op_cost(OpKind::PreProj, &comp, &tiny_model(), 1, 1);
        assert_eq!(cost.flops, 192.0);
    }

    #[test]
    fn attention_prefill_flops() {
        let comp = BatchComposition::prefill_only(2, 0);
        assert_eq!(op_cost(OpKind::Attn, &comp, &tiny_model(), 1, 1).flops, 48.0);
    }

    #[test]
    fn decode_kv_read_matches_token_enumeration() {
        let model = presets::model("llama-13b").unwrap();
        let comp = BatchComposition::decode_only([1024]);
        // one K and one V row of H half-precision elements per cached token
        let mut oracle = 0u64;
        for _token in 0..1024 {
            for _tensor in ["k", "v"] {
                oracle += model.hidden_size * model.bytes_per_param;
            }
        }
        assert_eq!(oracle, 20_971_520);
        assert_eq!(attention_kv_read_bytes(&comp, &model, 1), oracle as f64);
    }

    #[test]
    fn roofline_examples() {
        let gpu = unit_gpu(1e14, 1e12, 0.0);
        let t = roofline_time(OpCost { flops: 1e9, bytes: 1e6 }, &gpu);
        assert_eq!(t, 1e-5);
        let t = roofline_time(OpCost { flops: 0.0, bytes: 1e6 }, &gpu);
        assert_eq!(t, 1e-6);
        let gpu = unit_gpu(1e14, 1e12, 5e-6);
        let t = roofline_time(OpCost { flops: 1e9, bytes: 1e9 }, &gpu);
        assert!((t - (1e-3 + 5e-6)).abs() < 1e-18);
    }

    #[test]
    fn single_decode_is_memory_bound() {
        let model = presets::model("llama-13b").unwrap();
        let gpu = presets::gpu("a6000").unwrap();
        let comp = BatchComposition::decode_only([512]);
        for kind in OpKind::LINEAR {
            let cost = op_cost(kind, &comp, &model, 1, 1);
            assert!(cost.flops / cost.bytes < 2.0);
            let c = op_cost(kind, &comp, &model, gpu.tile_size, 1);
            let compute = c.flops / (gpu.peak_flops * gpu.compute_efficiency);
            let memory = c.bytes / (gpu.mem_bandwidth * gpu.memory_efficiency);
            assert!(memory > compute);
        }
    }

    #[test]
    fn tp2_halves_linear_flops() {
        let model = presets::model("llama-13b").unwrap();
        let comp = BatchComposition {
            prefill_items: vec![PrefillItem {
                chunk_len: 300,
                context_offset: 20,
            }],
            decode_items: vec![DecodeItem { context_len: 77 }],
        };
        for kind in OpKind::LINEAR {
            let one = op_cost(kind, &comp, &model, 128, 1).flops;
            let two = op_cost(kind, &comp, &model, 128, 2).flops;
            assert_eq!(two * 2.0, one);
        }
    }

    #[test]
    fn piggybacked_decodes_cost_only_attention() {
        let model = presets::model("llama-13b").unwrap();
        let gpu = presets::gpu("a6000").unwrap();
        let backend = AnalyticalBackend::new(model.clone(), gpu, 1);
        let mixed = BatchComposition {
            prefill_items: vec![PrefillItem {
                chunk_len: 1021,
                context_offset: 0,
            }],
            decode_items: vec![DecodeItem { context_len: 1024 }; 3],
        };
        let full = BatchComposition::prefill_only(1024, 0);
        let a = backend.batch_time_analytical(&mixed, model.num_layers);
        let b = backend.batch_time_analytical(&full, model.num_layers);
        // same quantized token count, so linear ops are identical
        for kind in OpKind::LINEAR {
            let (x, y) = (a.per_op[&kind], b.per_op[&kind]);
            assert!((x - y).abs() <= 1e-12 * y, "{kind}: {x} vs {y}");
        }
        let decode_attn = backend.layer_op_times(&mixed.decode_part())[&OpKind::Attn] * model.num_layers as f64;
        let diff = a.total - b.total;
        assert!(diff > 0.0);
        assert!(diff <= decode_attn * (1.0 + DEFAULT_OTHERS_FRACTION) + 1e-12);
    }

    #[test]
    fn tile_step() {
        let model = presets::model("llama-13b").unwrap();
        let gpu = presets::gpu("a6000").unwrap();
        assert!(tile_penalty_demo(257, &gpu, &model).unwrap() > tile_penalty_demo(256, &gpu, &model).unwrap());
        let t250 = op_cost(OpKind::FfnLn1, &BatchComposition::prefill_only(250, 0), &model, 128, 1);
        let t256 = op_cost(OpKind::FfnLn1, &BatchComposition::prefill_only(256, 0), &model, 128, 1);
        assert_eq!(t250.flops, t256.flops);
        assert!(tile_penalty_demo(0, &gpu, &model).is_err());
    }
}
