//! Writes a simulated dataset as CSV.
//!
//! `cargo run -p psce-core --example simulate_csv -- out.csv 2000 7 [randomized]`

use psce_core::simulation_lab::simulate_dataset;
use psce_core::{ColumnSchema, Design};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let path = args.first().map(String::as_str).unwrap_or("simulated.csv");
    let n = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let design = match args.get(3).map(String::as_str) {
        Some("randomized") => Design::Randomized(0.5),
        _ => Design::Observational,
    };
    let ds = simulate_dataset(n, design, seed);
    let file = std::fs::File::create(path).expect("create output file");
    ds.write_csv(file, &ColumnSchema::default()).expect("write csv");
    eprintln!("wrote {n} rows to {path}");
}
