#![no_main]

use ircam::sim::GridWorld;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(world) = GridWorld::from_snapshot(text) {
        let snap = world.to_snapshot();
        let back = GridWorld::from_snapshot(&snap).expect("own output parses");
        assert_eq!(back, world);
        assert_eq!(back.to_snapshot(), snap);
    }
});
