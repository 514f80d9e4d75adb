#![no_main]

use libfuzzer_sys::fuzz_target;
use padloc::io_kitti::{decode_scan, encode_scan};

fuzz_target!(|data: &[u8]| {
    if let Ok(scan) = decode_scan(data) {
        // dropped non-finite records aside, decoding is lossless
        let again = decode_scan(&encode_scan(&scan.cloud)).expect("re-encoded scan decodes");
        assert_eq!(again.cloud, scan.cloud);
        assert_eq!(again.dropped, 0);
    }
});
