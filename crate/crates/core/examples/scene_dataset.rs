//! Generates a small procedural head dataset and writes it to disk.
//!
//! `cargo run --example scene_dataset -- /tmp/heads`

use std::path::PathBuf;

use tpde::scenes::{generate_dataset, DatasetOptions, SceneRanges};

fn main() -> tpde::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("tpde_heads"));
    let opts = DatasetOptions {
        views_per_scene: 4,
        resolution: 48,
        ..DatasetOptions::default()
    };
    let ds = generate_dataset(&SceneRanges::default(), 3, &opts)?;
    ds.write(&out)?;
    for (i, s) in ds.meta.scenes.iter().enumerate() {
        println!("scene {i}: head {:.2}x{:.2}x{:.2}, hair cap {:.2} rad", s.head_rx, s.head_ry, s.head_rz, s.hair_cap_angle);
    }
    println!("{} records in {}", ds.records.len(), out.display());
    Ok(())
}
