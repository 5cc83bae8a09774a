#![no_main]

use chunkserve::engine::{read_trace_jsonl, trace_to_jsonl};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(trace) = read_trace_jsonl(data, "fuzz") {
        let text = trace_to_jsonl(&trace).expect("parsed trace serializes");
        let again = read_trace_jsonl(text.as_bytes(), "fuzz").expect("serialized trace reparses");
        assert_eq!(trace, again);
    }
});
