use serde::{Deserialize, Serialize};

/// Ring all-reduce over `tp` ranks: `2 (tp - 1) / tp * bytes / bw + latency`,
/// zero for a single rank.
pub fn tp_allreduce(bytes: f64, tp: u64, bw: f64, latency: f64) -> f64 {
    if tp <= 1 || bytes <= 0.0 {
        return 0.0;
    }
    2.0 * (tp - 1) as f64 / tp as f64 * bytes / bw + latency
}

/// Point-to-point activation transfer between pipeline stages.
pub fn pp_send(bytes: f64, bw: f64, latency: f64) -> f64 {
    if bytes <= 0.0 {
        return 0.0;
    }
    bytes / bw + latency
}

/// Link parameters of one deployment. `None` bandwidth disables a link
/// (zero-cost communication).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommModel {
    pub tp_degree: u64,
    pub intra_node_bw: Option<f64>,
    pub inter_node_bw: Option<f64>,
    pub latency: f64,
}

impl CommModel {
    pub fn zero() -> Self {
        CommModel {
            tp_degree: 1,
            intra_node_bw: None,
            inter_node_bw: None,
            latency: 0.0,
        }
    }

    pub fn for_cluster(cluster: &crate::types::ClusterSpec) -> Self {
        CommModel {
            tp_degree: cluster.tp_degree,
            intra_node_bw: Some(cluster.intra_node_bw),
            inter_node_bw: Some(cluster.inter_node_bw),
            latency: cluster.link_latency,
        }
    }

    pub fn allreduce(&self, bytes: f64) -> f64 {
        self.intra_node_bw
            .map_or(0.0, |bw| tp_allreduce(bytes, self.tp_degree, bw, self.latency))
    }

    pub fn send(&self, bytes: f64) -> f64 {
        self.inter_node_bw.map_or(0.0, |bw| pp_send(bytes, bw, self.latency))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_formula() {
        assert_eq!(tp_allreduce(1e9, 1, 1e9, 1e-6), 0.0);
        assert!((tp_allreduce(1e9, 2, 1e9, 0.0) - 1.0).abs() < 1e-12);
        assert!((tp_allreduce(8e9, 8, 1e9, 5e-6) - (14.0 + 5e-6)).abs() < 1e-9);
        assert_eq!(pp_send(0.0, 1e9, 1e-3), 0.0);
        assert!((pp_send(2e9, 1e9, 1e-3) - 2.001).abs() < 1e-12);
    }

    #[test]
    fn monotone_and_nonnegative() {
        let mut prev = 0.0;
        for k in 0..50 {
            let b = k as f64 * 1e7;
            let t = tp_allreduce(b, 4, 3e11, 5e-6);
            let s = pp_send(b, 2.5e10, 5e-6);
            assert!(t >= prev && s >= 0.0);
            prev = t;
        }
        let z = CommModel::zero();
        assert_eq!(z.allreduce(1e12) + z.send(1e12), 0.0);
    }
}
