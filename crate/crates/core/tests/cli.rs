use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chunkserve::experiment::ResultsDocument;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chunkserve"))
        .args(args)
        .output()
        .expect("spawn chunkserve")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn profiles_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/profiles")
}

const SMALL: &str = "[experiment]
name = small
[model]
preset = llama-13b
[gpu]
preset = a6000
[capacity]
seq_len = 1024
[policy]
name = decode-maximal
chunk_size = 256
[workload]
num_requests = 24
min_len = 512
max_len = 1024
zipf_theta = 0.4
pd_ratio = 10
seed = 3
";

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn read_doc(path: &Path) -> ResultsDocument {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn run_writes_document_with_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.cfg", SMALL);
    let out = tmp.path().join("out");
    let o = bin(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--trace"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_doc(&out.join("small.json"));
    assert_eq!(doc.seed, 3);
    assert!(doc.config.contains("num_requests = 24"));
    assert_eq!(doc.effective_chunk, Some(239));
    for f in ["small_bubble_cdf.csv", "small_completion_curve.csv", "small_trace_r0.jsonl"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert!(stdout(&o).contains("small: policy=decode-maximal"));
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.cfg", SMALL);
    let out = tmp.path().join("out");
    let o = bin(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "99"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc = read_doc(&out.join("small.json"));
    assert_eq!(doc.seed, 99);
    assert!(doc.config.contains("seed = 99"));
}

#[test]
fn missing_profile_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}[cost]\nbackend = profile\nprofile = nowhere.csv\n");
    let cfg = write_config(tmp.path(), "p.cfg", &text);
    let o = bin(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere.csv"), "{}", stderr(&o));
}

#[test]
fn config_errors_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.cfg", &SMALL.replace("pd_ratio = 10", "pd_ratio = -1"));
    let o = bin(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("workload.pd_ratio"), "{}", stderr(&o));

    let o = bin(&["run", "--config", tmp.path().join("absent.cfg").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn oversized_model_does_not_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL.replace("preset = llama-13b", "preset = llama-33b");
    let cfg = write_config(tmp.path(), "big.cfg", &text);
    let o = bin(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("does not fit"), "{}", stderr(&o));
}

#[test]
fn sweep_writes_every_point_and_parallel_matches_serial() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}[sweep]\naxis = pd_ratio\nvalues = 4, 8, 12, 15, 20\n");
    let cfg = write_config(tmp.path(), "sweep.cfg", &text);
    let serial = tmp.path().join("serial");
    let parallel = tmp.path().join("parallel");
    let o = bin(&["sweep", "--config", cfg.to_str().unwrap(), "--out", serial.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = bin(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        parallel.to_str().unwrap(),
        "--parallel",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let jsons: Vec<_> = fs::read_dir(&serial)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".json"))
        .collect();
    assert_eq!(jsons.len(), 5);
    let table = fs::read_to_string(serial.join("small_sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 6);
    assert!(table.starts_with("axis,value,throughput"));
    for name in jsons.iter().map(String::as_str).chain(["small_sweep.csv"]) {
        assert_eq!(
            fs::read(serial.join(name)).unwrap(),
            fs::read(parallel.join(name)).unwrap(),
            "{name} differs between serial and parallel sweeps"
        );
    }
}

#[test]
fn sweep_without_section_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "s.cfg", SMALL);
    let o = bin(&["sweep", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_chunking_reports_equivalence() {
    let o = bin(&["verify-chunking", "--prompt", "1024", "--chunk", "256", "--hidden", "8", "--seed", "42"]);
    assert_eq!(code(&o), 0);
    let line = stdout(&o);
    assert!(line.contains("chunks=4") && line.ends_with("OK\n"), "{line}");

    let o = bin(&["verify-chunking", "--prompt", "8", "--chunk", "0", "--hidden", "2"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn plan_prints_capacity_and_chunk_advice() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&["plan", "--seq-len", "1024", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let value = |key: &str| {
        text.lines()
            .find_map(|l| {
                let mut it = l.split_whitespace();
                (it.next() == Some(key)).then(|| it.next().unwrap().to_string())
            })
            .unwrap_or_else(|| panic!("{key} missing"))
    };
    assert_eq!(value("max_batch_size"), "18");
    assert_eq!(value("adjusted_chunk"), "239");
    assert_eq!(value("optimal_pd"), "15.0588");
    let csv = fs::read_to_string(tmp.path().join("plan.csv")).unwrap();
    assert!(csv.contains("max_batch_size,\"18\""));

    let o = bin(&["plan", "--model", "llama-33b", "--gpu", "a6000", "--seq-len", "1024"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("does not fit"));
}

#[test]
fn ingest_profile_round_trips_canonical_form() {
    let tmp = tempfile::tempdir().unwrap();
    let canon = tmp.path().join("canon.csv");
    let src = profiles_dir().join("per_token_table.csv");
    let o = bin(&["ingest-profile", "--profile", src.to_str().unwrap(), "--out", canon.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("15 entries"));
    let again = tmp.path().join("again.csv");
    let o = bin(&["ingest-profile", "--profile", canon.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&canon).unwrap(), fs::read(&again).unwrap());

    let broken = write_config(tmp.path(), "broken.csv", "op,phase,tokens\npreproj,prefill,abc\n");
    let o = bin(&["ingest-profile", "--profile", broken.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bundled_configs_parse() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = chunkserve::config::ExperimentConfig::from_file(&path).unwrap();
        chunkserve::experiment::size_deployment(&cfg).unwrap();
        n += 1;
    }
    assert_eq!(n, 4);
}
