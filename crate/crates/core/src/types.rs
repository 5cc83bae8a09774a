//! Domain types shared by every other module: model shapes, device and
//! cluster capabilities, requests and their progress cursors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architectural parameters of a decoder-only transformer.
///
/// `ffn_hidden` is the width of the two-matrix FFN used for FLOP and byte
/// accounting. Gated FFNs with three matrices are folded into an effective
/// two-matrix width (1.5x the gate width) so parameter counts stay faithful.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u64,
    pub num_heads: u64,
    pub hidden_size: u64,
    pub ffn_hidden: u64,
    pub bytes_per_param: u64,
    pub max_seq_len: u64,
    pub vocab_size: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::InvalidModel {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if self.num_layers == 0
            || self.num_heads == 0
            || self.hidden_size == 0
            || self.ffn_hidden == 0
            || self.bytes_per_param == 0
            || self.max_seq_len == 0
        {
            return bad("all counts must be positive");
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return bad("hidden_size must be divisible by num_heads");
        }
        if self.ffn_hidden < self.hidden_size {
            return bad("ffn_hidden must be >= hidden_size");
        }
        Ok(())
    }

    /// Weight parameters of one transformer block: the fused QKV projection
    /// (H x 3H), the output projection (H x H) and the two FFN matrices.
    pub fn params_per_layer(&self) -> u64 {
        let h = self.hidden_size;
        3 * h * h + h * h + 2 * h * self.ffn_hidden
    }

    pub fn embedding_params(&self) -> u64 {
        self.vocab_size * self.hidden_size
    }

    pub fn total_params(&self) -> u64 {
        self.num_layers * self.params_per_layer() + self.embedding_params()
    }

    pub fn total_param_bytes(&self) -> u64 {
        self.total_params() * self.bytes_per_param
    }
}

/// Compute and memory capabilities of one accelerator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuSpec {
    pub name: String,
    /// FLOP/s.
    pub peak_flops: f64,
    /// bytes/s.
    pub mem_bandwidth: f64,
    /// bytes.
    pub mem_capacity: f64,
    /// Token quantum of matmul tiles.
    pub tile_size: u64,
    pub compute_efficiency: f64,
    pub memory_efficiency: f64,
    /// Seconds added to every kernel launch.
    pub kernel_overhead: f64,
}

pub const DEFAULT_COMPUTE_EFFICIENCY: f64 = 0.7;
pub const DEFAULT_MEMORY_EFFICIENCY: f64 = 0.8;
pub const DEFAULT_KERNEL_OVERHEAD: f64 = 10e-6;

impl GpuSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::InvalidGpu {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.peak_flops) || !positive(self.mem_bandwidth) || !positive(self.mem_capacity) {
            return bad("peak_flops, mem_bandwidth and mem_capacity must be positive and finite");
        }
        if self.tile_size == 0 {
            return bad("tile_size must be >= 1");
        }
        let fraction = |v: f64| v > 0.0 && v <= 1.0;
        if !fraction(self.compute_efficiency) || !fraction(self.memory_efficiency) {
            return bad("efficiencies must lie in (0, 1]");
        }
        if !(self.kernel_overhead >= 0.0 && self.kernel_overhead.is_finite()) {
            return bad("kernel_overhead must be non-negative");
        }
        Ok(())
    }

    /// Device FLOPS:bandwidth ratio, the roofline ridge point in FLOP/byte.
    pub fn ridge_intensity(&self) -> f64 {
        (self.peak_flops * self.compute_efficiency) / (self.mem_bandwidth * self.memory_efficiency)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub gpu: GpuSpec,
    pub tp_degree: u64,
    pub pp_degree: u64,
    pub num_replicas: u64,
    /// bytes/s, used by tensor-parallel all-reduce.
    pub intra_node_bw: f64,
    /// bytes/s, used by pipeline stage-to-stage sends.
    pub inter_node_bw: f64,
    /// seconds per collective or send.
    pub link_latency: f64,
}

impl ClusterSpec {
    pub fn single(gpu: GpuSpec) -> Self {
        ClusterSpec {
            gpu,
            tp_degree: 1,
            pp_degree: 1,
            num_replicas: 1,
            intra_node_bw: 300e9,
            inter_node_bw: 25e9,
            link_latency: 5e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gpu.validate()?;
        if self.tp_degree == 0 || self.pp_degree == 0 || self.num_replicas == 0 {
            return Err(Error::InvalidDeployment(
                "tp_degree, pp_degree and num_replicas must be >= 1".into(),
            ));
        }
        if !(self.intra_node_bw > 0.0 && self.inter_node_bw > 0.0) {
            return Err(Error::InvalidDeployment("link bandwidths must be positive".into()));
        }
        if !(self.link_latency >= 0.0 && self.link_latency.is_finite()) {
            return Err(Error::InvalidDeployment("link_latency must be non-negative".into()));
        }
        Ok(())
    }
}

/// A model placed on a cluster, with per-GPU memory accounting resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub model: ModelSpec,
    pub cluster: ClusterSpec,
    pub layers_per_stage: u64,
    /// Parameter bytes resident on each GPU (M_S).
    pub param_bytes_per_gpu: f64,
    /// KV-cache bytes one token occupies on each GPU (m_kv).
    pub kv_bytes_per_token: f64,
}

/// Checks that `model` can be sharded over `cluster` and resolves per-GPU
/// parameter and KV footprints.
pub fn validate_deployment(model: &ModelSpec, cluster: &ClusterSpec) -> Result<Deployment> {
    model.validate()?;
    cluster.validate()?;
    let (tp, pp) = (cluster.tp_degree, cluster.pp_degree);
    if !model.num_layers.is_multiple_of(pp) {
        return Err(Error::InvalidDeployment(format!(
            "{} layers cannot be split evenly over {} pipeline stages",
            model.num_layers, pp
        )));
    }
    if !model.hidden_size.is_multiple_of(tp) || !model.num_heads.is_multiple_of(tp) {
        return Err(Error::InvalidDeployment(format!(
            "hidden size {} / {} heads cannot be sharded over tensor-parallel degree {}",
            model.hidden_size, model.num_heads, tp
        )));
    }
    let layers_per_stage = model.num_layers / pp;
    let param_bytes_per_gpu = model.total_param_bytes() as f64 / tp as f64 / pp as f64;
    let kv_bytes_per_token = 2.0
        * layers_per_stage as f64
        * (model.hidden_size / tp) as f64
        * model.bytes_per_param as f64;
    Ok(Deployment {
        model: model.clone(),
        cluster: cluster.clone(),
        layers_per_stage,
        param_bytes_per_gpu,
        kv_bytes_per_token,
    })
}

/// One inference job and its progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_time: f64,
    pub prefill_len: u64,
    pub decode_len: u64,
    pub prefill_done: u64,
    pub decode_done: u64,
    pub completion_time: Option<f64>,
}

impl Request {
    pub fn new(id: u64, arrival_time: f64, prefill_len: u64, decode_len: u64) -> Self {
        Request {
            id,
            arrival_time,
            prefill_len,
            decode_len,
            prefill_done: 0,
            decode_done: 0,
            completion_time: None,
        }
    }

    pub fn total_len(&self) -> u64 {
        self.prefill_len + self.decode_len
    }

    pub fn prefill_complete(&self) -> bool {
        self.prefill_done == self.prefill_len
    }

    pub fn is_complete(&self) -> bool {
        self.completion_time.is_some()
    }

    /// Tokens whose KV entries are resident.
    pub fn kv_tokens(&self) -> u64 {
        self.prefill_done + self.decode_done
    }

    pub fn validate(&self, max_seq_len: u64) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidRequest { id: self.id, reason });
        if self.prefill_len == 0 {
            return bad("prefill length must be >= 1".into());
        }
        if self.total_len() > max_seq_len {
            return bad(format!(
                "P + D = {} exceeds max sequence length {}",
                self.total_len(),
                max_seq_len
            ));
        }
        if !(self.arrival_time >= 0.0 && self.arrival_time.is_finite()) {
            return bad("arrival time must be finite and non-negative".into());
        }
        if self.prefill_done > self.prefill_len || self.decode_done > self.decode_len {
            return bad("progress cursor beyond request length".into());
        }
        if self.decode_done > 0 && !self.prefill_complete() {
            return bad("decode started before prefill finished".into());
        }
        Ok(())
    }
}

/// Prefill tokens per decode token.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct PdRatio(f64);

impl PdRatio {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(PdRatio(value))
        } else {
            Err(Error::InvalidArgument(format!("P:D ratio must be positive, got {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}
