//! Experiment configuration.
//!
//! Grammar, one construct per line:
//!
//! ```text
//! # comment            (also `;`; whole-line only)
//! [section]
//! key = value          (whitespace around key and value is trimmed)
//! ```
//!
//! Keys outside a section, repeated sections, repeated keys and unknown keys
//! are errors. Values are plain text; lists are comma separated.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::presets;
use crate::sched::{SchedulerPolicy, DEFAULT_RESERVE_FRACTION};
use crate::types::{ClusterSpec, GpuSpec, ModelSpec, PdRatio};
use crate::workload::{Arrival, PdMode, WorkloadSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|e| e.key == key).map(|e| e.value.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Document {
    pub sections: Vec<Section>,
}

impl Document {
    pub fn parse(text: &str, source_name: &str) -> Result<Document> {
        let mut sections: Vec<Section> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
                continue;
            }
            if let Some(rest) = s.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::parse(source_name, line, "unterminated section header"))?
                    .trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                    return Err(Error::parse(source_name, line, format!("invalid section name `{name}`")));
                }
                if sections.iter().any(|sec| sec.name == name) {
                    return Err(Error::parse(source_name, line, format!("duplicate section [{name}]")));
                }
                sections.push(Section {
                    name: name.to_string(),
                    line,
                    entries: Vec::new(),
                });
                continue;
            }
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| Error::parse(source_name, line, "expected `key = value`"))?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::parse(source_name, line, "empty key"));
            }
            let section = sections
                .last_mut()
                .ok_or_else(|| Error::parse(source_name, line, format!("key `{key}` outside any section")))?;
            if section.get(key).is_some() {
                return Err(Error::parse(
                    source_name,
                    line,
                    format!("duplicate key `{key}` in [{}]", section.name),
                ));
            }
            section.entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line,
            });
        }
        Ok(Document { sections })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }
}

/// Typed reads from one section, reporting errors as `path` + `section.key`.
struct Reader<'a> {
    section: &'a Section,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn new(section: &'a Section, path: &'a str, allowed: &[&str]) -> Result<Self> {
        for e in &section.entries {
            if !allowed.contains(&e.key.as_str()) {
                return Err(Error::Config {
                    path: path.to_string(),
                    key: format!("{}.{}", section.name, e.key),
                    reason: format!("unknown key (line {})", e.line),
                });
            }
        }
        Ok(Reader { section, path })
    }

    fn err(&self, key: &str, reason: impl Into<String>) -> Error {
        Error::Config {
            path: self.path.to_string(),
            key: format!("{}.{}", self.section.name, key),
            reason: reason.into(),
        }
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.section.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| self.err(key, format!("cannot parse `{v}`"))),
        }
    }

    fn req<T: FromStr>(&self, key: &str) -> Result<T> {
        self.opt(key)?.ok_or_else(|| self.err(key, "missing required key"))
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    fn string(&self, key: &str) -> Option<String> {
        self.section.get(key).map(str::to_string)
    }
}

const MODEL_KEYS: &[&str] = &[
    "preset",
    "name",
    "num_layers",
    "num_heads",
    "hidden_size",
    "ffn_hidden",
    "bytes_per_param",
    "max_seq_len",
    "vocab_size",
];

const GPU_KEYS: &[&str] = &[
    "preset",
    "name",
    "peak_flops",
    "mem_bandwidth",
    "mem_capacity",
    "tile_size",
    "compute_efficiency",
    "memory_efficiency",
    "kernel_overhead",
];

/// Reads a `[model]` section. With a `base`, missing keys keep the base
/// value; a `preset` key supplies the base when none is given.
pub fn parse_model_section(section: &Section, base: Option<ModelSpec>, path: &str) -> Result<ModelSpec> {
    let r = Reader::new(section, path, MODEL_KEYS)?;
    let base = match (base, section.get("preset")) {
        (Some(b), _) => Some(b),
        (None, Some(p)) => Some(presets::model(p).map_err(|e| r.err("preset", e.to_string()))?),
        (None, None) => None,
    };
    let m = match base {
        Some(b) => ModelSpec {
            name: r.string("name").unwrap_or(b.name),
            num_layers: r.or("num_layers", b.num_layers)?,
            num_heads: r.or("num_heads", b.num_heads)?,
            hidden_size: r.or("hidden_size", b.hidden_size)?,
            ffn_hidden: r.or("ffn_hidden", b.ffn_hidden)?,
            bytes_per_param: r.or("bytes_per_param", b.bytes_per_param)?,
            max_seq_len: r.or("max_seq_len", b.max_seq_len)?,
            vocab_size: r.or("vocab_size", b.vocab_size)?,
        },
        None => ModelSpec {
            name: r.req("name")?,
            num_layers: r.req("num_layers")?,
            num_heads: r.req("num_heads")?,
            hidden_size: r.req("hidden_size")?,
            ffn_hidden: r.req("ffn_hidden")?,
            bytes_per_param: r.req("bytes_per_param")?,
            max_seq_len: r.req("max_seq_len")?,
            vocab_size: r.req("vocab_size")?,
        },
    };
    m.validate().map_err(|e| r.err("*", e.to_string()))?;
    Ok(m)
}

pub fn parse_gpu_section(section: &Section, base: Option<GpuSpec>, path: &str) -> Result<GpuSpec> {
    let r = Reader::new(section, path, GPU_KEYS)?;
    let base = match (base, section.get("preset")) {
        (Some(b), _) => Some(b),
        (None, Some(p)) => Some(presets::gpu(p).map_err(|e| r.err("preset", e.to_string()))?),
        (None, None) => None,
    };
    let g = match base {
        Some(b) => GpuSpec {
            name: r.string("name").unwrap_or(b.name),
            peak_flops: r.or("peak_flops", b.peak_flops)?,
            mem_bandwidth: r.or("mem_bandwidth", b.mem_bandwidth)?,
            mem_capacity: r.or("mem_capacity", b.mem_capacity)?,
            tile_size: r.or("tile_size", b.tile_size)?,
            compute_efficiency: r.or("compute_efficiency", b.compute_efficiency)?,
            memory_efficiency: r.or("memory_efficiency", b.memory_efficiency)?,
            kernel_overhead: r.or("kernel_overhead", b.kernel_overhead)?,
        },
        None => GpuSpec {
            name: r.req("name")?,
            peak_flops: r.req("peak_flops")?,
            mem_bandwidth: r.req("mem_bandwidth")?,
            mem_capacity: r.req("mem_capacity")?,
            tile_size: r.req("tile_size")?,
            compute_efficiency: r.req("compute_efficiency")?,
            memory_efficiency: r.req("memory_efficiency")?,
            kernel_overhead: r.req("kernel_overhead")?,
        },
    };
    g.validate().map_err(|e| r.err("*", e.to_string()))?;
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribution {
    /// Each bubble is charged in full to every member of the next micro-batch.
    Full,
    /// Each bubble is split evenly among the members of the next micro-batch.
    Fractional,
}

impl Attribution {
    pub fn as_str(self) -> &'static str {
        match self {
            Attribution::Full => "full",
            Attribution::Fractional => "fractional",
        }
    }
}

impl FromStr for Attribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Attribution::Full),
            "fractional" => Ok(Attribution::Fractional),
            other => Err(Error::InvalidArgument(format!("unknown attribution `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum CostConfig {
    Analytical { others_fraction: f64 },
    Profile { path: PathBuf, profiled_layers: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityConfig {
    /// Tokens reserved per admitted request (L).
    pub seq_len: u64,
    pub reserve_fraction: f64,
    /// Replaces the computed batch size when set.
    pub max_batch: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PdRatio,
    ChunkSize,
    BatchSize,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::PdRatio => "pd_ratio",
            SweepAxis::ChunkSize => "chunk_size",
            SweepAxis::BatchSize => "batch_size",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pd_ratio" => Ok(SweepAxis::PdRatio),
            "chunk_size" => Ok(SweepAxis::ChunkSize),
            "batch_size" => Ok(SweepAxis::BatchSize),
            other => Err(Error::InvalidArgument(format!("unknown sweep axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSpec,
    pub cluster: ClusterSpec,
    pub capacity: CapacityConfig,
    pub policy: SchedulerPolicy,
    pub cost: CostConfig,
    pub workload: WorkloadSpec,
    pub attribution: Attribution,
    pub sweep: Option<SweepSpec>,
    pub output_dir: Option<PathBuf>,
}

const KNOWN_SECTIONS: &[&str] = &[
    "experiment",
    "model",
    "gpu",
    "cluster",
    "capacity",
    "policy",
    "cost",
    "workload",
    "engine",
    "sweep",
    "output",
];

fn format_list(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::parse(&text, &path.display().to_string(), path.parent())
    }

    /// Parses config text. Relative file references resolve against
    /// `base_dir` when one is given.
    pub fn parse(text: &str, path: &str, base_dir: Option<&Path>) -> Result<ExperimentConfig> {
        let doc = Document::parse(text, path)?;
        for s in &doc.sections {
            if !KNOWN_SECTIONS.contains(&s.name.as_str()) {
                return Err(Error::Config {
                    path: path.to_string(),
                    key: s.name.clone(),
                    reason: format!("unknown section (line {})", s.line),
                });
            }
        }
        let empty = |name: &str| Section {
            name: name.to_string(),
            line: 0,
            entries: Vec::new(),
        };
        let section = |name: &str| doc.section(name).cloned().unwrap_or_else(|| empty(name));
        let missing = |name: &str| Error::Config {
            path: path.to_string(),
            key: name.to_string(),
            reason: "missing required section".into(),
        };

        let exp = section("experiment");
        let r = Reader::new(&exp, path, &["name"])?;
        let name = r.string("name").unwrap_or_else(|| "experiment".to_string());

        let model = parse_model_section(doc.section("model").ok_or_else(|| missing("model"))?, None, path)?;
        let gpu = parse_gpu_section(doc.section("gpu").ok_or_else(|| missing("gpu"))?, None, path)?;

        let cl = section("cluster");
        let r = Reader::new(
            &cl,
            path,
            &["tp", "pp", "replicas", "intra_node_bw", "inter_node_bw", "link_latency"],
        )?;
        let defaults = ClusterSpec::single(gpu.clone());
        let cluster = ClusterSpec {
            gpu,
            tp_degree: r.or("tp", 1)?,
            pp_degree: r.or("pp", 1)?,
            num_replicas: r.or("replicas", 1)?,
            intra_node_bw: r.or("intra_node_bw", defaults.intra_node_bw)?,
            inter_node_bw: r.or("inter_node_bw", defaults.inter_node_bw)?,
            link_latency: r.or("link_latency", defaults.link_latency)?,
        };
        cluster.validate().map_err(|e| r.err("*", e.to_string()))?;

        let wl = doc.section("workload").ok_or_else(|| missing("workload"))?;
        let r = Reader::new(
            wl,
            path,
            &[
                "num_requests",
                "min_len",
                "max_len",
                "zipf_theta",
                "pd_ratio",
                "pd_mode",
                "arrival",
                "rate",
                "seed",
            ],
        )?;
        let arrival = match r.string("arrival").as_deref().unwrap_or("all_at_zero") {
            "all_at_zero" => Arrival::AllAtZero,
            "poisson" => Arrival::Poisson { rate: r.req("rate")? },
            other => return Err(r.err("arrival", format!("unknown arrival `{other}`"))),
        };
        let pd: f64 = r.req("pd_ratio")?;
        let workload = WorkloadSpec {
            num_requests: r.req("num_requests")?,
            min_len: r.req("min_len")?,
            max_len: r.req("max_len")?,
            zipf_theta: r.or("zipf_theta", 0.0)?,
            pd_ratio: PdRatio::new(pd).map_err(|e| r.err("pd_ratio", e.to_string()))?,
            pd_mode: r.or("pd_mode", PdMode::PerRequest)?,
            arrival,
            seed: r.or("seed", 0)?,
        };
        workload
            .validate(model.max_seq_len)
            .map_err(|e| r.err("*", e.to_string()))?;

        let cap = section("capacity");
        let r = Reader::new(&cap, path, &["seq_len", "reserve_fraction", "max_batch"])?;
        let capacity = CapacityConfig {
            seq_len: r.or("seq_len", workload.max_len)?,
            reserve_fraction: r.or("reserve_fraction", DEFAULT_RESERVE_FRACTION)?,
            max_batch: r.opt("max_batch")?,
        };
        if capacity.seq_len == 0 || capacity.seq_len > model.max_seq_len {
            return Err(r.err("seq_len", format!("must lie in [1, {}]", model.max_seq_len)));
        }
        if !(0.0..1.0).contains(&capacity.reserve_fraction) {
            return Err(r.err("reserve_fraction", "must lie in [0, 1)"));
        }
        if capacity.max_batch == Some(0) {
            return Err(r.err("max_batch", "must be >= 1"));
        }

        let pol = doc.section("policy").ok_or_else(|| missing("policy"))?;
        let r = Reader::new(pol, path, &["name", "chunk_size", "tile_adjust"])?;
        let pname: String = r.req("name")?;
        let policy = match pname.as_str() {
            "decode-maximal" => SchedulerPolicy::DecodeMaximal {
                chunk_size: r.or("chunk_size", 256)?,
                tile_adjust: r.or("tile_adjust", true)?,
            },
            other => {
                if pol.get("chunk_size").is_some() || pol.get("tile_adjust").is_some() {
                    return Err(r.err("chunk_size", format!("only decode-maximal takes a chunk size, not {other}")));
                }
                other.parse().map_err(|e: Error| r.err("name", e.to_string()))?
            }
        };
        policy.validate().map_err(|e| r.err("chunk_size", e.to_string()))?;

        let co = section("cost");
        let r = Reader::new(&co, path, &["backend", "others_fraction", "profile", "profile_layers"])?;
        let cost = match r.string("backend").as_deref().unwrap_or("analytical") {
            "analytical" => {
                if co.get("profile").is_some() || co.get("profile_layers").is_some() {
                    return Err(r.err("profile", "only valid with backend = profile"));
                }
                let f: f64 = r.or("others_fraction", crate::costmodel::DEFAULT_OTHERS_FRACTION)?;
                if !(f >= 0.0 && f.is_finite()) {
                    return Err(r.err("others_fraction", "must be a non-negative number"));
                }
                CostConfig::Analytical { others_fraction: f }
            }
            "profile" => {
                if co.get("others_fraction").is_some() {
                    return Err(r.err("others_fraction", "only valid with backend = analytical"));
                }
                let raw: PathBuf = r.req::<String>("profile")?.into();
                let path_resolved = match base_dir {
                    Some(dir) if raw.is_relative() => dir.join(raw),
                    _ => raw,
                };
                let layers: u64 = r.or("profile_layers", 1)?;
                if layers == 0 {
                    return Err(r.err("profile_layers", "must be >= 1"));
                }
                CostConfig::Profile {
                    path: path_resolved,
                    profiled_layers: layers,
                }
            }
            other => return Err(r.err("backend", format!("unknown backend `{other}`"))),
        };

        let en = section("engine");
        let r = Reader::new(&en, path, &["bubble_attribution"])?;
        let attribution = r.or("bubble_attribution", Attribution::Full)?;

        let sweep = match doc.section("sweep") {
            None => None,
            Some(sw) => {
                let r = Reader::new(sw, path, &["axis", "values"])?;
                let axis: SweepAxis = r.req("axis")?;
                let raw: String = r.req("values")?;
                let values = raw
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| r.err("values", format!("cannot parse `{raw}` as a number list")))?;
                if values.is_empty() {
                    return Err(r.err("values", "empty sweep"));
                }
                for &v in &values {
                    let ok = match axis {
                        SweepAxis::PdRatio => v > 0.0 && v.is_finite(),
                        SweepAxis::ChunkSize | SweepAxis::BatchSize => v >= 1.0 && v.fract() == 0.0 && v < 1e12,
                    };
                    if !ok {
                        return Err(r.err("values", format!("{v} is not valid for axis {}", axis.as_str())));
                    }
                }
                if axis == SweepAxis::ChunkSize && !matches!(policy, SchedulerPolicy::DecodeMaximal { .. }) {
                    return Err(r.err("axis", "chunk_size sweeps need the decode-maximal policy"));
                }
                Some(SweepSpec { axis, values })
            }
        };

        let out = section("output");
        let r = Reader::new(&out, path, &["dir"])?;
        let output_dir = r.string("dir").map(PathBuf::from).map(|p| match base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p,
        });

        Ok(ExperimentConfig {
            name,
            model,
            cluster,
            capacity,
            policy,
            cost,
            workload,
            attribution,
            sweep,
            output_dir,
        })
    }

    /// Fully resolved config text; parsing it yields `self` again.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let g = &self.cluster.gpu;
        let c = &self.cluster;
        let w = &self.workload;
        let _ = writeln!(s, "[experiment]\nname = {}\n", self.name);
        let _ = writeln!(
            s,
            "[model]\nname = {}\nnum_layers = {}\nnum_heads = {}\nhidden_size = {}\nffn_hidden = {}\nbytes_per_param = {}\nmax_seq_len = {}\nvocab_size = {}\n",
            m.name, m.num_layers, m.num_heads, m.hidden_size, m.ffn_hidden, m.bytes_per_param, m.max_seq_len, m.vocab_size
        );
        let _ = writeln!(
            s,
            "[gpu]\nname = {}\npeak_flops = {}\nmem_bandwidth = {}\nmem_capacity = {}\ntile_size = {}\ncompute_efficiency = {}\nmemory_efficiency = {}\nkernel_overhead = {}\n",
            g.name, g.peak_flops, g.mem_bandwidth, g.mem_capacity, g.tile_size, g.compute_efficiency, g.memory_efficiency, g.kernel_overhead
        );
        let _ = writeln!(
            s,
            "[cluster]\ntp = {}\npp = {}\nreplicas = {}\nintra_node_bw = {}\ninter_node_bw = {}\nlink_latency = {}\n",
            c.tp_degree, c.pp_degree, c.num_replicas, c.intra_node_bw, c.inter_node_bw, c.link_latency
        );
        let _ = write!(
            s,
            "[capacity]\nseq_len = {}\nreserve_fraction = {}\n",
            self.capacity.seq_len, self.capacity.reserve_fraction
        );
        if let Some(b) = self.capacity.max_batch {
            let _ = writeln!(s, "max_batch = {b}");
        }
        s.push('\n');
        let _ = writeln!(s, "[policy]\nname = {}", self.policy.name());
        if let SchedulerPolicy::DecodeMaximal { chunk_size, tile_adjust } = self.policy {
            let _ = writeln!(s, "chunk_size = {chunk_size}\ntile_adjust = {tile_adjust}");
        }
        s.push('\n');
        match &self.cost {
            CostConfig::Analytical { others_fraction } => {
                let _ = writeln!(s, "[cost]\nbackend = analytical\nothers_fraction = {others_fraction}\n");
            }
            CostConfig::Profile { path, profiled_layers } => {
                let _ = writeln!(
                    s,
                    "[cost]\nbackend = profile\nprofile = {}\nprofile_layers = {profiled_layers}\n",
                    path.display()
                );
            }
        }
        let _ = write!(
            s,
            "[workload]\nnum_requests = {}\nmin_len = {}\nmax_len = {}\nzipf_theta = {}\npd_ratio = {}\npd_mode = {}\n",
            w.num_requests,
            w.min_len,
            w.max_len,
            w.zipf_theta,
            w.pd_ratio.value(),
            w.pd_mode
        );
        match w.arrival {
            Arrival::AllAtZero => s.push_str("arrival = all_at_zero\n"),
            Arrival::Poisson { rate } => {
                let _ = writeln!(s, "arrival = poisson\nrate = {rate}");
            }
        }
        let _ = writeln!(s, "seed = {}\n", w.seed);
        let _ = writeln!(s, "[engine]\nbubble_attribution = {}", self.attribution.as_str());
        if let Some(sw) = &self.sweep {
            let _ = writeln!(s, "\n[sweep]\naxis = {}\nvalues = {}", sw.axis.as_str(), format_list(&sw.values));
        }
        if let Some(dir) = &self.output_dir {
            let _ = writeln!(s, "\n[output]\ndir = {}", dir.display());
        }
        s
    }

    /// Copy of this config with one sweep point applied and the sweep removed.
    pub fn with_sweep_value(&self, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
        let mut c = self.clone();
        c.sweep = None;
        match axis {
            SweepAxis::PdRatio => c.workload.pd_ratio = PdRatio::new(value)?,
            SweepAxis::ChunkSize => match &mut c.policy {
                SchedulerPolicy::DecodeMaximal { chunk_size, .. } => *chunk_size = value as u64,
                _ => return Err(Error::InvalidArgument("chunk_size sweep needs decode-maximal".into())),
            },
            SweepAxis::BatchSize => c.capacity.max_batch = Some(value as u64),
        }
        c.name = format!("{}_{}_{}", self.name, axis.as_str(), value);
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
[model]
preset = llama-13b
[gpu]
preset = a6000
[policy]
name = decode-maximal
chunk_size = 256
[workload]
num_requests = 4
min_len = 1024
max_len = 1024
pd_ratio = 10
";

    #[test]
    fn document_grammar() {
        let doc = Document::parse("# c\n; c\n[a]\nx = 1 \n y=two words \n[b]\n", "t").unwrap();
        assert_eq!(doc.sections.len(), 2);
        assert_eq!(doc.section("a").unwrap().get("x"), Some("1"));
        assert_eq!(doc.section("a").unwrap().get("y"), Some("two words"));
        assert_eq!(doc.section("a").unwrap().entries[1].line, 5);
        for bad in ["x = 1\n", "[a\n", "[a]\nnovalue\n", "[a]\n[a]\n", "[a]\nx=1\nx=2\n", "[a]\n=3\n", "[a b]\n"] {
            assert!(matches!(Document::parse(bad, "t"), Err(Error::Parse { .. })), "{bad:?}");
        }
    }

    #[test]
    fn minimal_config_defaults() {
        let c = ExperimentConfig::parse(MINIMAL, "min.cfg", None).unwrap();
        assert_eq!(c.model.name, "llama-13b");
        assert_eq!(c.cluster.tp_degree, 1);
        assert_eq!(c.capacity.seq_len, 1024);
        assert_eq!(c.capacity.reserve_fraction, DEFAULT_RESERVE_FRACTION);
        assert_eq!(c.attribution, Attribution::Full);
        assert!(matches!(c.cost, CostConfig::Analytical { .. }));
        assert_eq!(c.workload.arrival, Arrival::AllAtZero);
    }

    #[test]
    fn errors_name_path_and_key() {
        let text = MINIMAL.replace("pd_ratio = 10", "pd_ratio = ten");
        match ExperimentConfig::parse(&text, "exp.cfg", None) {
            Err(Error::Config { path, key, .. }) => {
                assert_eq!(path, "exp.cfg");
                assert_eq!(key, "workload.pd_ratio");
            }
            other => panic!("{other:?}"),
        }
        let text = format!("{MINIMAL}bogus = 1\n");
        assert!(matches!(
            ExperimentConfig::parse(&text, "exp.cfg", None),
            Err(Error::Config { key, .. }) if key == "workload.bogus"
        ));
        let text = format!("{MINIMAL}[extra]\n");
        assert!(ExperimentConfig::parse(&text, "exp.cfg", None).is_err());
        let text = MINIMAL.replace("[policy]\nname = decode-maximal\nchunk_size = 256\n", "");
        assert!(ExperimentConfig::parse(&text, "exp.cfg", None).is_err());
    }

    #[test]
    fn round_trip_is_identity() {
        let full = format!(
            "{}[cluster]\ntp = 2\npp = 4\nlink_latency = 0.0000031\n[cost]\nbackend = profile\nprofile = p.csv\nprofile_layers = 1\n\
             [engine]\nbubble_attribution = fractional\n[sweep]\naxis = pd_ratio\nvalues = 2, 5, 10.5\n[output]\ndir = out\n",
            MINIMAL.replace("pd_ratio = 10", "pd_ratio = 10\narrival = poisson\nrate = 2.5\nzipf_theta = 0.4\nseed = 9\npd_mode = aggregate")
        );
        let a = ExperimentConfig::parse(&full, "x.cfg", None).unwrap();
        let b = ExperimentConfig::parse(&a.to_config_string(), "x.cfg", None).unwrap();
        assert_eq!(a, b);
        let m = ExperimentConfig::parse(MINIMAL, "m.cfg", None).unwrap();
        assert_eq!(ExperimentConfig::parse(&m.to_config_string(), "m.cfg", None).unwrap(), m);
    }

    #[test]
    fn sweep_validation() {
        let bad = format!("{MINIMAL}[sweep]\naxis = chunk_size\nvalues = 128, 0\n");
        assert!(ExperimentConfig::parse(&bad, "s", None).is_err());
        let bad = format!("{MINIMAL}[sweep]\naxis = pd_ratio\nvalues = 2, -1\n");
        assert!(ExperimentConfig::parse(&bad, "s", None).is_err());
        let ok = format!("{MINIMAL}[sweep]\naxis = pd_ratio\nvalues = 2,5,10,20,50\n");
        let c = ExperimentConfig::parse(&ok, "s", None).unwrap();
        let pt = c.with_sweep_value(SweepAxis::PdRatio, 20.0).unwrap();
        assert_eq!(pt.workload.pd_ratio.value(), 20.0);
        assert!(pt.sweep.is_none());
    }

    #[test]
    fn inline_model_without_preset() {
        let text = MINIMAL.replace(
            "preset = llama-13b",
            "name = tiny\nnum_layers = 2\nnum_heads = 2\nhidden_size = 64\nffn_hidden = 256\nbytes_per_param = 2\nmax_seq_len = 2048\nvocab_size = 100",
        );
        let c = ExperimentConfig::parse(&text, "t", None).unwrap();
        assert_eq!(c.model.hidden_size, 64);
        let text = MINIMAL.replace("preset = llama-13b", "name = tiny\nnum_layers = 2");
        assert!(ExperimentConfig::parse(&text, "t", None).is_err());
    }
}
