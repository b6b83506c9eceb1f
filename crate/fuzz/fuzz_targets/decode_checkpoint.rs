#![no_main]

use libfuzzer_sys::fuzz_target;
use memcom::cacheio::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode_checkpoint::<f32>(data) {
        let _ = encode_checkpoint(&ck);
        let _ = ck.into_system();
    }
    let _ = decode_checkpoint::<f64>(data);
});
