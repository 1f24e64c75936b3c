//! Fits the model to three procedural scenes and reports how much the
//! rendered reconstruction error dropped.
//!
//! `cargo run --release --example fit_smoke -- 300` runs the full smoke fit;
//! the default is a quick 40 steps.

use tpde::editing::render_latent;
use tpde::scenes::{generate_dataset, DatasetOptions, SceneRanges};
use tpde::training::{fit_with, TrainConfig, Trainer};

fn main() -> tpde::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let ds = generate_dataset(&SceneRanges::default(), 3, &DatasetOptions::default())?;
    let cfg = TrainConfig {
        iterations,
        ..TrainConfig::default()
    };
    let init = Trainer::new(cfg.clone(), ds.scene_count())?.into_checkpoint();
    let (ckpt, _) = fit_with(&ds, &cfg, |r| {
        if r.step % 10 == 0 {
            println!("step {:>4}  total {:.3}  l1 {:.4}  sim {:.4}", r.step, r.total, r.l1, r.sim);
        }
    })?;
    for s in 0..ds.scene_count() {
        let id = format!("scene_{s}");
        let (mut before, mut after) = (0.0, 0.0);
        for r in ds.records_of(s) {
            let l1 = |rgb: &[f32]| rgb.iter().zip(&r.rgb).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
            before += l1(&render_latent(&init, &id, &r.camera)?.rgb);
            after += l1(&render_latent(&ckpt, &id, &r.camera)?.rgb);
        }
        println!("{id}: rendered L1 at {:.0}% of its initial value", 100.0 * after / before);
    }
    let path = std::env::temp_dir().join("fit_smoke.tpde");
    ckpt.save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}
