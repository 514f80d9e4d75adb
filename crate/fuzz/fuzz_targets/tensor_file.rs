#![no_main]

use libfuzzer_sys::fuzz_target;
use padloc::tensor_file::TensorFile;

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = TensorFile::decode(data) {
        let bytes = file.encode();
        let again = TensorFile::decode(&bytes).expect("re-encoded file decodes");
        assert_eq!(again.encode(), bytes);
    }
});
