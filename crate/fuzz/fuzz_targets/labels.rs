#![no_main]

use libfuzzer_sys::fuzz_target;
use padloc::io_kitti::{decode_labels, encode_labels, SuperClassTable};

fuzz_target!(|data: &[u8]| {
    let table = SuperClassTable::default();
    let _ = decode_labels(data, Some(data.len() / 3), &table);
    if let Ok(labels) = decode_labels(data, None, &table) {
        assert_eq!(encode_labels(&labels), data);
    }
});
