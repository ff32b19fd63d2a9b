#![no_main]

use ircam::sim::parse_trajectory_log;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_trajectory_log(text) {
        let mut out = String::new();
        for r in &records {
            out.push_str(&serde_json::to_string(r).unwrap());
            out.push('\n');
        }
        assert_eq!(parse_trajectory_log(&out).expect("own output parses"), records);
    }
});
