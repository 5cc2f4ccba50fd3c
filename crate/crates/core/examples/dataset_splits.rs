//! Loads a dataset directory and cuts it into cold item splits, both at
//! random and by first-interaction time.

use coldrec::data::{cold_split, load_dataset, synth_generate, temporal_split, write_synth, SynthConfig};

fn main() -> coldrec::Result<()> {
    let dir = tempfile::tempdir()?;
    write_synth(dir.path(), &synth_generate(&SynthConfig::default())?)?;
    let ds = load_dataset(dir.path(), 3.5, 5, false)?;
    println!(
        "{} ratings → {} positives from {} users over {} items; attributes {:?}",
        ds.ratings.len(),
        ds.interactions.len(),
        ds.interactions.users.len(),
        ds.interactions.items.len(),
        ds.modalities
    );
    let random = cold_split(&ds.interactions, (0.85, 0.075, 0.075), 0)?;
    let temporal = temporal_split(&ds.interactions, (600_000, 800_000))?;
    for (name, s) in [("random", random), ("temporal", temporal)] {
        println!(
            "{name:>8}: items {}/{}/{}, interactions {}/{}/{}",
            s.train_items.len(),
            s.val_items.len(),
            s.test_items.len(),
            s.train.len(),
            s.val.len(),
            s.test.len()
        );
    }
    Ok(())
}
