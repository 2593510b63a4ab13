#![no_main]
use libfuzzer_sys::fuzz_target;

// Accepts both the TOML and the JSON form.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = shiftsim_cli::RunConfig::parse(text) {
            let _ = cfg.check_scenarios();
        }
    }
});
