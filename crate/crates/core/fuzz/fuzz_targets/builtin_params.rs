#![no_main]

use impulse_games::config::parse_params_json;
use impulse_games::make_builtin;
use libfuzzer_sys::fuzz_target;

const NAMES: [&str; 4] = ["constant", "linear1d", "impulse1d", "portfolio"];

fuzz_target!(|data: (u8, &str)| {
    let name = NAMES[data.0 as usize % NAMES.len()];
    if let Ok(params) = parse_params_json(data.1) {
        let _ = make_builtin(name, &params);
    }
});
