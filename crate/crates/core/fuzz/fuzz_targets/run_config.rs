#![no_main]

use impulse_games::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    // Parsing and building must report errors, never panic.
    if let Ok(cfg) = RunConfig::from_json_str(data) {
        if let (Ok(problem), Ok(grid)) = (cfg.build_problem(), cfg.build_grid()) {
            let _ = impulse_games::validate_problem(&problem, &grid);
        }
    }
});
