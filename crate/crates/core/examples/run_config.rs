//! Loads a TOML run configuration (or the defaults) and prints the full
//! effective configuration.
//!
//!     cargo run --example run_config -- [path.toml]

use ssod::config::{echo_config, load_config, parse_config};

fn main() {
    let cfg = match std::env::args().nth(1) {
        Some(path) => load_config(path),
        None => parse_config("[stage]\ntotal_iters = 1000\n\n[cost]\nlambda_l1 = 5.0\n"),
    };
    match cfg {
        Ok(cfg) => print!("{}", echo_config(&cfg)),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
