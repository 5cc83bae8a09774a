//! Replays the checked-in fuzz seeds through the same checks the fuzz
//! targets make, so the seeds stay valid inputs as the parsers evolve.

use std::fs;
use std::path::PathBuf;

use chunkserve::config::ExperimentConfig;
use chunkserve::costmodel::ingest_profile;
use chunkserve::engine::{read_trace_jsonl, trace_to_jsonl};
use chunkserve::workload::{parse_workload_csv, workload_to_csv};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn profile_seeds() {
    for (name, bytes) in seeds("profile_csv") {
        let table = ingest_profile(bytes.as_slice(), &name).unwrap();
        let again = ingest_profile(table.to_csv().as_bytes(), &name).unwrap();
        assert_eq!(table, again, "{name}");
    }
}

#[test]
fn config_seeds() {
    for (name, bytes) in seeds("config") {
        let text = String::from_utf8(bytes).unwrap();
        let cfg = ExperimentConfig::parse(&text, &name, None).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_config_string(), &name, None).unwrap();
        assert_eq!(cfg, again, "{name}");
    }
}

#[test]
fn workload_seeds() {
    for (name, bytes) in seeds("workload_csv") {
        let reqs = parse_workload_csv(bytes.as_slice(), &name).unwrap();
        let again = parse_workload_csv(workload_to_csv(&reqs).as_bytes(), &name).unwrap();
        assert_eq!(reqs, again, "{name}");
    }
}

#[test]
fn trace_seeds() {
    for (name, bytes) in seeds("trace_jsonl") {
        let trace = read_trace_jsonl(bytes.as_slice(), &name).unwrap();
        let text = trace_to_jsonl(&trace).unwrap();
        assert_eq!(read_trace_jsonl(text.as_bytes(), &name).unwrap(), trace, "{name}");
    }
}
