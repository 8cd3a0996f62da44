//! Regenerates the bundled sample pairs under `tests/data/samples`.

use std::path::PathBuf;

fn main() -> retifuse::Result<()> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/samples");
    let m = retifuse::synth::write_dataset(&root, 4, 2024, 96, 96, false)?;
    println!("wrote {} pairs to {}", m.len(), root.display());
    Ok(())
}
