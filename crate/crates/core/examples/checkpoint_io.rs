//! Saves a checkpoint, reloads it and checks that renders match bit for bit.

use tpde::editing::render_latent;
use tpde::renderer::Camera;
use tpde::checkpoint::Checkpoint;
use tpde::training::{TrainConfig, Trainer};

fn main() -> tpde::Result<()> {
    let ck = Trainer::new(TrainConfig::default(), 2)?.into_checkpoint();
    let path = std::env::temp_dir().join("checkpoint_io.tpde");
    ck.save(&path)?;
    let back = Checkpoint::load(&path)?;
    let cam = Camera::new(0.2, 0.0, 3.0, 32, 32);
    let a = render_latent(&ck, "scene_1", &cam)?;
    let b = render_latent(&back, "scene_1", &cam)?;
    println!("{} bytes, latents {:?}", std::fs::metadata(&path)?.len(), back.latents.ids());
    println!("renders identical: {}", a == b);
    Ok(())
}
