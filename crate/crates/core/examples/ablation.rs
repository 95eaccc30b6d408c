//! Runs every training mode over a handful of seeds on the shrunk toy
//! configuration and prints mean held-out mIoU per mode.
//!
//! ```text
//! cargo run --release -p maskrank-core --example ablation [seeds]
//! ```

use maskrank::config::{Mode, RunConfig, TrainConfig};
use maskrank::train_toy;

fn main() -> maskrank::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    println!("{:<28} {:>10} {:>10} {:>10} {:>12}", "mode", "seen", "unseen", "hIoU", "unseen→seen");
    for mode in Mode::ALL {
        let (mut s, mut u, mut h, mut r) = (0.0, 0.0, 0.0, 0.0);
        for seed in 0..seeds {
            let cfg = RunConfig {
                train: TrainConfig {
                    mode,
                    n_queries: 16,
                    seed,
                    ..TrainConfig::default()
                },
                ..RunConfig::default()
            };
            let out = train_toy(&cfg)?;
            let rep = &out.history.report;
            s += rep.miou_seen.unwrap_or(0.0);
            u += rep.miou_unseen.unwrap_or(0.0);
            h += rep.hiou.unwrap_or(0.0);
            r += out.history.unseen_to_seen_rate;
        }
        let n = seeds as f64;
        println!(
            "{:<28} {:>10.2} {:>10.2} {:>10.2} {:>12.3}",
            mode.name(),
            100.0 * s / n,
            100.0 * u / n,
            100.0 * h / n,
            r / n
        );
    }
    Ok(())
}
