//! Paints extra hair into a latent's rendered class mask and optimizes the
//! latent offset until the rendering follows the paint.
//!
//! Run `fit_smoke` first, or pass a checkpoint path.

use std::path::PathBuf;

use tpde::checkpoint::Checkpoint;
use tpde::editing::{commit_edit, optimize_edit, render_latent, EditRequest};
use tpde::imageio;
use tpde::renderer::Camera;
use tpde::scenes::HAIR;

fn main() -> tpde::Result<()> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fit_smoke.tpde"));
    let mut ck = Checkpoint::load(&path)?;
    let cam = Camera::new(0.0, 0.0, 3.0, 48, 48);
    let mut mask = render_latent(&ck, "scene_0", &cam)?.argmax_mask();
    // A fringe: the band just above the eyes.
    for row in 10..18 {
        for col in 14..34 {
            mask[row * 48 + col] = HAIR;
        }
    }
    let mut req = EditRequest::new("scene_0", cam, mask);
    req.steps = 100;
    let trace = optimize_edit(&ck, &req, |s, _| {
        if s.step % 20 == 0 {
            println!("step {:>3}  loss {:.4}  ce {:.4}", s.step, s.loss, s.ce);
        }
    })?;
    let id = commit_edit(&mut ck, "scene_0", &trace.delta)?;
    let dir = std::env::temp_dir();
    imageio::write_rgb_png(&dir.join("edit_before.png"), 48, 48, &trace.before.rgb)?;
    imageio::write_rgb_png(&dir.join("edit_after.png"), 48, 48, &trace.after.rgb)?;
    println!("new latent '{id}'; before/after written to {}", dir.display());
    Ok(())
}
