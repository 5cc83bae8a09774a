//! From a resolved config to traces, metrics and a results document.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CostConfig, ExperimentConfig};
use crate::costmodel::{ingest_profile_file, AnalyticalBackend, CostBackend, ProfileBackend};
use crate::engine::{simulate, split_round_robin, StageModel, Trace};
use crate::error::{Error, Result};
use crate::report::{write_plot_csvs, HistogramBin, MetricsBundle};
use crate::sched::{CapacityModel, Scheduler};
use crate::types::{validate_deployment, Deployment, Request};
use crate::workload::{build_requests, workload_hash};

pub fn build_backend(cfg: &ExperimentConfig) -> Result<Box<dyn CostBackend>> {
    Ok(match &cfg.cost {
        CostConfig::Analytical { others_fraction } => Box::new(
            AnalyticalBackend::new(cfg.model.clone(), cfg.cluster.gpu.clone(), cfg.cluster.tp_degree)
                .with_others_fraction(*others_fraction),
        ),
        CostConfig::Profile { path, profiled_layers } => Box::new(ProfileBackend::new(
            ingest_profile_file(path)?,
            cfg.cluster.gpu.tile_size,
            cfg.cluster.gpu.kernel_overhead,
            *profiled_layers,
        )),
    })
}

/// Batch limits of one replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sizing {
    /// Requests whose KV reservation fits at once (B, or B_total with pp).
    pub max_admitted: u64,
    /// Requests per micro-batch: `max_admitted / pp`, at least 1.
    pub micro_batch: u64,
    pub kv_budget_bytes: f64,
    pub layers_per_stage: u64,
    pub param_bytes_per_gpu: f64,
}

pub fn size_deployment(cfg: &ExperimentConfig) -> Result<(Deployment, Sizing)> {
    let d = validate_deployment(&cfg.model, &cfg.cluster)?;
    let cap = CapacityModel::for_deployment(&d, cfg.capacity.seq_len, cfg.capacity.reserve_fraction)?;
    let max_admitted = cfg.capacity.max_batch.unwrap_or_else(|| cap.max_batch_size());
    if max_admitted == 0 {
        return Err(Error::InvalidDeployment(format!(
            "model does not fit: {} on {} leaves no room for one {}-token KV reservation",
            cfg.model.name, cfg.cluster.gpu.name, cfg.capacity.seq_len
        )));
    }
    let sizing = Sizing {
        max_admitted,
        micro_batch: (max_admitted / cfg.cluster.pp_degree).max(1),
        kv_budget_bytes: cap.kv_budget(),
        layers_per_stage: d.layers_per_stage,
        param_bytes_per_gpu: d.param_bytes_per_gpu,
    };
    Ok((d, sizing))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub name: String,
    pub seed: u64,
    /// Fully resolved config text.
    pub config: String,
    pub policy: String,
    pub effective_chunk: Option<u64>,
    pub backend: String,
    pub sizing: Sizing,
    pub metrics: MetricsBundle,
    pub bubble_histogram: Vec<HistogramBin>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub traces: Vec<Trace>,
    pub document: ResultsDocument,
}

impl RunOutput {
    pub fn metrics(&self) -> &MetricsBundle {
        &self.document.metrics
    }

    pub fn results_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.document)? + "\n")
    }

    /// Writes `<name>.json` and the plot CSVs into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{}.json", self.document.name));
        std::fs::write(&json, self.results_json()?).map_err(|e| Error::io(&json, e))?;
        let mut paths = vec![json];
        paths.extend(write_plot_csvs(dir, &self.document.name, &self.document.metrics)?);
        Ok(paths)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let requests = build_requests(&cfg.workload)?;
    run_with_requests(cfg, requests)
}

/// Runs `requests` on every replica of `cfg` (dealt round-robin).
pub fn run_with_requests(cfg: &ExperimentConfig, requests: Vec<Request>) -> Result<RunOutput> {
    let (deployment, sizing) = size_deployment(cfg)?;
    for r in &requests {
        r.validate(cfg.capacity.seq_len)?;
    }
    let hash = workload_hash(&requests);
    let backend = build_backend(cfg)?;
    let stages = StageModel::for_deployment(&deployment);
    let scheduler = Scheduler::new(
        cfg.policy,
        sizing.micro_batch,
        sizing.max_admitted,
        cfg.cluster.gpu.tile_size,
    )?;
    let effective_chunk = scheduler.effective_chunk();
    let parts = split_round_robin(requests, cfg.cluster.num_replicas);
    let traces = parts
        .into_par_iter()
        .map(|part| simulate(part, scheduler.clone(), backend.as_ref(), &stages))
        .collect::<Result<Vec<_>>>()?;
    let metrics = MetricsBundle::from_traces(&traces, cfg.attribution, &hash)?;
    let document = ResultsDocument {
        name: cfg.name.clone(),
        seed: cfg.workload.seed,
        config: cfg.to_config_string(),
        policy: cfg.policy.name().to_string(),
        effective_chunk,
        backend: backend.name().to_string(),
        sizing,
        bubble_histogram: metrics.bubble_histogram(20),
        metrics,
    };
    Ok(RunOutput { traces, document })
}
