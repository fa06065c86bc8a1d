//! Print the desk-scale default run configuration as JSON.
//! cargo run -p vidflow-cli --example default_config -- [out_dir] [seed]

use std::path::Path;

use vidflow_cli::config::RunConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).cloned().unwrap_or_else(|| "out".into());
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = RunConfig::desk(Path::new(&out), seed);
    println!("{}", serde_json::to_string_pretty(&cfg).unwrap());
}
