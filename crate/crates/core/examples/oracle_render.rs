//! Renders one procedural scene with the analytic oracle: color, class mask
//! and depth.

use tpde::imageio;
use tpde::renderer::Camera;
use tpde::scenes::{oracle_render, sample_scene_params, SceneRanges, CLASS_NAMES};
use rand::SeedableRng;

fn main() -> tpde::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let scene = sample_scene_params(&mut rng, &SceneRanges::default())?;
    let cam = Camera::new(0.4, 0.1, 3.0, 96, 96);
    let out = oracle_render(&scene, &cam, 64, [0.5; 3])?;
    let dir = std::env::temp_dir();
    imageio::write_rgb_png(&dir.join("oracle_rgb.png"), 96, 96, &out.rgb)?;
    imageio::write_mask_png(&dir.join("oracle_mask.png"), 96, 96, &out.argmax_mask())?;
    imageio::write_depth_png(&dir.join("oracle_depth.png"), 96, 96, &out.depth, cam.far_plane() as f32)?;
    let mask = out.argmax_mask();
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        let n = mask.iter().filter(|&&m| m as usize == c).count();
        println!("{name:>10}: {n} px");
    }
    println!("wrote oracle_{{rgb,mask,depth}}.png to {}", dir.display());
    Ok(())
}
