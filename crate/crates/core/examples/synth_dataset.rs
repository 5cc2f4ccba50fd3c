//! Generates a synthetic cold-start dataset and writes it to a directory.
//!
//! cargo run --example synth_dataset -- /tmp/synth

use coldrec::data::{synth_generate, write_synth, SynthConfig};

fn main() -> coldrec::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth-data".into());
    let cfg = SynthConfig {
        users: 100,
        items: 150,
        image_size: 16,
        seed: 7,
        ..SynthConfig::default()
    };
    let data = synth_generate(&cfg)?;
    let p = &data.provenance;
    println!(
        "{} users × {} items, {} positives (density {:.4}, threshold {:?})",
        p.users, p.items, p.positives, p.density, p.threshold
    );
    println!("config hash {}", p.config_hash);
    write_synth(std::path::Path::new(&out), &data)?;
    println!("written to {out}");
    Ok(())
}
