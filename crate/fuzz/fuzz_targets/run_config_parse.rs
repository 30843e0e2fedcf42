#![no_main]

use libfuzzer_sys::fuzz_target;
use rlab::pipeline::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::from_toml(text) {
        let _ = cfg.model.validate();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).expect("serialised config parses");
        assert_eq!(back.to_toml(), text);
    }
});
