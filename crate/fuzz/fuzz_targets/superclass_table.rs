#![no_main]

use libfuzzer_sys::fuzz_target;
use padloc::io_kitti::SuperClassTable;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(table) = SuperClassTable::parse(text) {
        assert_eq!(SuperClassTable::parse(&table.to_text()).unwrap(), table);
    }
});
