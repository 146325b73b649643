//! Re-measures `CALIBRATED_C_REF` on the calibration seed.
//!
//!     cargo run --release -p heavytail --example calibrate [trials]

use heavytail::distributions::EntryDistribution;
use heavytail::invertibility::{calibrate_inf2_constant, ExperimentConfig};

fn main() -> heavytail::Result<()> {
    let trials = std::env::args().nth(1).and_then(|t| t.parse().ok()).unwrap_or(2000);
    let mut cfg = ExperimentConfig::new(EntryDistribution::pareto(2.5)?, 128, trials, 0xca1b);
    cfg.delta = 0.25;
    for q in [0.5, 0.9, 0.99] {
        println!("q{q} = {:?}", calibrate_inf2_constant(&cfg, q)?);
    }
    Ok(())
}
