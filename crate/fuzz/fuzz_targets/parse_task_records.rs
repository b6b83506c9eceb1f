#![no_main]

use libfuzzer_sys::fuzz_target;
use memcom::tasks::parse_task_records;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(records) = parse_task_records(text) {
            assert_eq!(parse_task_records(&records.to_text()).unwrap(), records);
        }
    }
});
