//! Prints the warmup / constant / decayed learning-rate schedule.

use coldrec::train::{lr_at, TrainConfig};

fn main() {
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    for step in 0..=20 {
        let progress = step as f64 / 20.0;
        let lr = lr_at(progress, &cfg);
        println!("{progress:>5.2} {lr:.2e} {}", "#".repeat((lr / cfg.lr_peak * 40.0).round() as usize));
    }
}
