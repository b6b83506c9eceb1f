#![no_main]

use libfuzzer_sys::fuzz_target;
use memcom::cacheio::{decode_context, encode_context, inspect_context};

fuzz_target!(|data: &[u8]| {
    let header = inspect_context(data);
    if let Ok(ctx) = decode_context::<f32>(data) {
        assert!(header.is_ok());
        // Anything accepted re-encodes to the same bytes.
        assert_eq!(encode_context(&ctx).unwrap(), data);
    }
    let _ = decode_context::<f64>(data);
});
