#![no_main]

use libfuzzer_sys::fuzz_target;
use memcom_cli::commands::{parse_ids, parse_labels};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_ids(text, "fuzz");
        let _ = parse_labels(text);
    }
});
