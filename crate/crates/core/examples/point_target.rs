//! Conditional flow matching onto a single point in the plane.
//!
//! `cargo run --release --example point_target [steps]`

use pflux::harness::pointflow::{self, PointField, PointFlowConfig};

fn main() {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let cfg = PointFlowConfig { steps, ..PointFlowConfig::default() };
    let before = pointflow::mean_distance(&PointField::new(cfg.hidden, cfg.seed), cfg.target, 256, 30, 17).unwrap();
    let run = pointflow::train(&cfg).unwrap();
    let after = pointflow::mean_distance(&run.field, cfg.target, 256, 30, 17).unwrap();
    println!("loss {:.4} -> {:.4} over {steps} steps", run.first_loss, run.last_loss);
    println!("mean distance to {:?}: untrained {before:.3}, trained {after:.4}", cfg.target);
}
