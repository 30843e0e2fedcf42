#![no_main]

use libfuzzer_sys::fuzz_target;
use rlab::persist::{verify_checksums, Checkpoint};

fuzz_target!(|data: &[u8]| {
    let _ = verify_checksums(data);
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode();
        let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode(), bytes);
    }
});
