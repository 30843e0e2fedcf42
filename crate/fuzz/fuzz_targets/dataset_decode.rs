#![no_main]

use libfuzzer_sys::fuzz_target;
use rlab::persist::Dataset;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = Dataset::decode(data) {
        let bytes = ds.encode();
        let again = Dataset::decode(&bytes).expect("re-encoded dataset decodes");
        assert_eq!(again.encode(), bytes);
    }
});
