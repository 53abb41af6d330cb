//! Writes a phantom dataset to disk and reads it back.
//!
//! cargo run --example generate_dataset -- /tmp/phantoms

use std::path::PathBuf;

use corrseg::synthetic::{make_dataset, Dataset, PhantomSpec};

fn main() -> corrseg::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("corrseg_phantoms"), PathBuf::from);
    let spec = PhantomSpec { size: 16, ..PhantomSpec::default() };
    let manifest = make_dataset(&spec, 8, 2, &dir)?;
    println!("spec hash {}", manifest.spec_hash);
    let data = Dataset::load(&dir)?;
    for s in data.train.iter().chain(&data.test) {
        let volume = s.labels.channel(0).iter().sum::<f32>();
        println!("sample {:>2}: complete tumour {volume} voxels", s.meta.index);
    }
    println!("written to {}", dir.display());
    Ok(())
}
