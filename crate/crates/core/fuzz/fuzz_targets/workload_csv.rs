#![no_main]

use chunkserve::workload::{parse_workload_csv, workload_to_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(reqs) = parse_workload_csv(data, "fuzz") {
        let csv = workload_to_csv(&reqs);
        let again = parse_workload_csv(csv.as_bytes(), "fuzz").expect("serialized workload reparses");
        assert_eq!(reqs, again);
    }
});
