#![no_main]

use ircam::net::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let bytes = ckpt.to_bytes().expect("a parsed checkpoint serializes");
        let again = Checkpoint::from_bytes(&bytes).expect("own output parses");
        assert_eq!(again, ckpt);
        assert_eq!(again.to_bytes().unwrap(), bytes);
    }
});
