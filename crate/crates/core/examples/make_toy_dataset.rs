//! Writes a synthetic poster set (PPM images plus `manifest.tsv`).
//!
//! Usage: `cargo run --example make_toy_dataset -- <dir> [posters] [genres] [seed] [side]`

use std::path::PathBuf;
use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(dir) = args.first().map(PathBuf::from) else {
        eprintln!("usage: make_toy_dataset <dir> [posters=40] [genres=4] [seed=0] [side=64]");
        return ExitCode::from(2);
    };
    let num = |i: usize, default: u64| args.get(i).map_or(Ok(default), |s| s.parse::<u64>());
    let (Ok(n), Ok(d), Ok(seed), Ok(side)) = (num(1, 40), num(2, 4), num(3, 0), num(4, 64)) else {
        eprintln!("numeric arguments expected");
        return ExitCode::from(2);
    };
    match rdt_core::data::synth::write_synthetic_dataset(&dir, n as usize, d as usize, seed, side as usize) {
        Ok(m) => {
            println!("wrote {} posters to {}", m.len(), dir.join("manifest.tsv").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
