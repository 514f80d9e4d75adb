#![no_main]

use libfuzzer_sys::fuzz_target;
use padloc::io_kitti::{format_poses, parse_poses};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(poses) = parse_poses(text) {
        let again = parse_poses(&format_poses(&poses)).expect("formatted poses parse");
        assert_eq!(again, poses);
    }
});
