use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Deployment, Request};

/// Fraction of device memory withheld for activations and workspace,
/// chosen so that LLaMA-13B on a 48 GB A6000 at L = 1024 admits 18 requests.
pub const DEFAULT_RESERVE_FRACTION: f64 = 0.14;

/// Per-GPU KV-cache budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityModel {
    /// Device memory M_G, bytes.
    pub mem_capacity: f64,
    /// Parameter bytes M_S resident per GPU.
    pub param_bytes: f64,
    /// KV bytes per token per GPU (m_kv).
    pub kv_bytes_per_token: f64,
    /// Sequence length L reserved per admitted request.
    pub max_seq_len: u64,
    pub reserve_fraction: f64,
}

impl CapacityModel {
    pub fn new(
        mem_capacity: f64,
        param_bytes: f64,
        kv_bytes_per_token: f64,
        max_seq_len: u64,
        reserve_fraction: f64,
    ) -> Result<Self> {
        if !(kv_bytes_per_token > 0.0) {
            return Err(Error::InvalidArgument("m_kv must be positive".into()));
        }
        if !(0.0..1.0).contains(&reserve_fraction) {
            return Err(Error::InvalidArgument(format!(
                "reserve_fraction must lie in [0, 1), got {reserve_fraction}"
            )));
        }
        if max_seq_len == 0 {
            return Err(Error::InvalidArgument("capacity sequence length must be >= 1".into()));
        }
        if !(mem_capacity > 0.0 && param_bytes >= 0.0) {
            return Err(Error::InvalidArgument("memory sizes must be positive".into()));
        }
        Ok(CapacityModel {
            mem_capacity,
            param_bytes,
            kv_bytes_per_token,
            max_seq_len,
            reserve_fraction,
        })
    }

    pub fn for_deployment(deployment: &Deployment, max_seq_len: u64, reserve_fraction: f64) -> Result<Self> {
        CapacityModel::new(
            deployment.cluster.gpu.mem_capacity,
            deployment.param_bytes_per_gpu,
            deployment.kv_bytes_per_token,
            max_seq_len,
            reserve_fraction,
        )
    }

    /// Bytes available to the KV cache: `M_G (1 - reserve) - M_S`.
    pub fn kv_budget(&self) -> f64 {
        self.mem_capacity * (1.0 - self.reserve_fraction) - self.param_bytes
    }

    pub fn bytes_per_request(&self) -> f64 {
        self.max_seq_len as f64 * self.kv_bytes_per_token
    }

    /// Largest number of requests whose full-length KV reservation fits.
    pub fn max_batch_size(&self) -> u64 {
        let budget = self.kv_budget();
        if budget <= 0.0 {
            return 0;
        }
        (budget / self.bytes_per_request()).floor() as u64
    }

    /// Whether `admitted` requests plus one more still fit at L tokens each.
    pub fn can_admit(&self, admitted: u64) -> bool {
        (admitted + 1) as f64 * self.bytes_per_request() <= self.kv_budget()
    }
}

/// Resident KV bytes of the given requests.
pub fn kv_occupancy<'a>(running: impl IntoIterator<Item = &'a Request>, cap: &CapacityModel) -> f64 {
    running
        .into_iter()
        .map(|r| r.kv_tokens() as f64 * cap.kv_bytes_per_token)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::types::{validate_deployment, ClusterSpec};

    const GIB: f64 = 1024.0 * 1024.0 * 1024.0;
    const MIB: f64 = 1024.0 * 1024.0;

    #[test]
    fn plain_formula() {
        let cap = CapacityModel::new(30.0 * GIB, 10.0 * GIB, MIB, 2048, 0.0).unwrap();
        assert_eq!(cap.max_batch_size(), 10);
        let cap = CapacityModel::new(10.0 * GIB, 12.0 * GIB, MIB, 2048, 0.0).unwrap();
        assert_eq!(cap.max_batch_size(), 0);
    }

    #[test]
    fn llama13b_a6000_calibration() {
        let model = presets::model("llama-13b").unwrap();
        let d = validate_deployment(&model, &ClusterSpec::single(presets::gpu("a6000").unwrap())).unwrap();
        let cap = CapacityModel::for_deployment(&d, 1024, DEFAULT_RESERVE_FRACTION).unwrap();
        assert_eq!(cap.max_batch_size(), 18);
    }

    #[test]
    fn occupancy() {
        let cap = CapacityModel::new(30.0 * GIB, 10.0 * GIB, MIB, 2048, 0.0).unwrap();
        assert_eq!(kv_occupancy(std::iter::empty(), &cap), 0.0);
        let mut r = Request::new(0, 0.0, 1024, 10);
        r.prefill_done = 256;
        assert_eq!(kv_occupancy([&r], &cap), 256.0 * MIB);
    }

    #[test]
    fn full_reservation_fills_budget() {
        // budget of exactly B requests at L tokens each
        let b = 7u64;
        let cap = CapacityModel::new(b as f64 * 2048.0 * MIB + GIB, GIB, MIB, 2048, 0.0).unwrap();
        assert_eq!(cap.max_batch_size(), b);
        assert!(cap.can_admit(b - 1));
        assert!(!cap.can_admit(b));
        let full: Vec<Request> = (0..b)
            .map(|i| {
                let mut r = Request::new(i, 0.0, 2000, 48);
                r.prefill_done = 2000;
                r.decode_done = 48;
                r
            })
            .collect();
        assert_eq!(kv_occupancy(&full, &cap), cap.kv_budget());
    }

    #[test]
    fn rejects_bad_fraction() {
        assert!(CapacityModel::new(1.0, 0.0, 1.0, 1, 1.0).is_err());
        assert!(CapacityModel::new(1.0, 0.0, 0.0, 1, 0.1).is_err());
    }
}
