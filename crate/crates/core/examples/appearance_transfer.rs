//! Swaps appearance between fitted latents and measures how far each class's
//! mean color moved toward the reference.
//!
//! Run `fit_smoke` first, or pass a checkpoint path.

use std::path::PathBuf;

use tpde::checkpoint::Checkpoint;
use tpde::editing::{apply_appearance, class_color_distance, class_mean_colors, render_latent};
use tpde::imageio;
use tpde::renderer::Camera;

fn main() -> tpde::Result<()> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fit_smoke.tpde"));
    let ck = Checkpoint::load(&path)?;
    let cam = Camera::new(0.0, 0.0, 3.0, 64, 64);
    let ids = ck.latents.ids();
    for geo in &ids {
        for app in &ids {
            if geo == app {
                continue;
            }
            let own = render_latent(&ck, geo, &cam)?;
            let reference = render_latent(&ck, app, &cam)?;
            let swapped = apply_appearance(&ck, geo, app, &cam)?;
            let mask = own.argmax_mask();
            let target = class_mean_colors(&reference, &reference.argmax_mask());
            let pre = class_color_distance(&class_mean_colors(&own, &mask), &target);
            let post = class_color_distance(&class_mean_colors(&swapped, &mask), &target);
            match (pre, post) {
                (Some(pre), Some(post)) => println!(
                    "{geo} with {app}'s look: color distance {pre:.3} -> {post:.3}, depth kept: {}",
                    own.depth == swapped.depth
                ),
                _ => println!("{geo} and {app} share no foreground class in view; fit longer"),
            }
            let out = std::env::temp_dir().join(format!("swap_{geo}_{app}.png"));
            imageio::write_rgb_png(&out, 64, 64, &swapped.rgb)?;
        }
    }
    Ok(())
}
