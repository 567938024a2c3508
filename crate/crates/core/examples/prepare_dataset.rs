//! Writes a synthetic interaction log, then loads, filters and splits it the
//! way raw Amazon or MovieLens files are handled.

use mrgsrec::data::{load_interactions, prepare, FilterMode, InputFormat};
use mrgsrec::synthetic::{SyntheticConfig, SyntheticData};

fn main() -> mrgsrec::Result<()> {
    let dir = std::env::temp_dir().join("mrgsrec-prepare-example");
    std::fs::create_dir_all(&dir).map_err(|e| mrgsrec::Error::io(&dir, e))?;
    let raw = dir.join("interactions.tsv");
    let data = SyntheticData::generate(&SyntheticConfig::default())?;
    std::fs::write(&raw, data.to_tsv()).map_err(|e| mrgsrec::Error::io(&raw, e))?;

    let log = load_interactions(&raw, &InputFormat::default())?;
    println!("raw: {} users, {} items, {} interactions", log.n_users(), log.n_items(), log.len());
    for mode in [FilterMode::Fixpoint, FilterMode::SinglePass] {
        let snap = prepare(&log, 5, mode)?;
        println!("{mode:?}: {} (dropped {} short users)", snap.stats, snap.dropped_short_users);
    }
    let snap = prepare(&log, 5, FilterMode::Fixpoint)?;
    let out = dir.join("dataset.snapshot");
    snap.save(&out)?;
    println!("wrote {} (fingerprint {})", out.display(), snap.fingerprint());
    let u = &snap.split.users[0];
    println!("user {}: {} train items, validation {}, test {}", snap.user_tokens[0], u.train.len(), snap.item_tokens[u.validation], snap.item_tokens[u.test]);
    Ok(())
}
