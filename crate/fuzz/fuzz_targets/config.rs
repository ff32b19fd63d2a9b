#![no_main]

use ircam::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_toml(text) {
        let back = RunConfig::from_toml(&cfg.to_toml()).expect("own output parses");
        assert_eq!(back, cfg);
    }
});
