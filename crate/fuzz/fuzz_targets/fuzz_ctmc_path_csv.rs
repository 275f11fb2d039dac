//! Chain-path CSV parsing must never panic; any accepted path must
//! satisfy the path invariants and round-trip exactly.

#![no_main]

use libfuzzer_sys::fuzz_target;
use mfg_lqg::ctmc::{parse_path_csv, write_path_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(path) = parse_path_csv(text) {
        assert!(path.jump_times.windows(2).all(|w| w[1] > w[0]));
        assert!(path.jump_times.iter().all(|&t| t > 0.0 && t <= path.horizon));
        assert_eq!(path.jump_times.len(), path.post_jump_states.len());
        let reparsed = parse_path_csv(&write_path_csv(&path)).expect("round trip");
        assert_eq!(path, reparsed);
    }
});
