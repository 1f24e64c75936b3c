//! Tri-plane appearance statistics: normalizing a latent's planes and
//! re-styling them with another latent's statistics leaves density, depth
//! and the class mask untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpde::autodiff::Tensor;
use tpde::netmodels::{Model, ModelConfig};
use tpde::renderer::{render_image, Camera, RenderSettings};

fn main() -> tpde::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::init(ModelConfig::default(), &mut rng)?;
    let dim = model.config.latent_dim;
    let mut latent = || Tensor::new([dim], (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect());
    let (a, b) = (latent()?, latent()?);
    let cam = Camera::new(0.0, 0.0, 3.0, 32, 32);
    let settings = RenderSettings::default();
    let own = render_image(&model, &a, &model.appearance_of(&a)?, &cam, &settings)?;
    let swapped = render_image(&model, &a, &model.appearance_of(&b)?, &cam, &settings)?;
    let rgb_change = own.rgb.iter().zip(&swapped.rgb).map(|(x, y)| (x - y).abs()).sum::<f32>() / own.rgb.len() as f32;
    println!("mean |rgb change| {rgb_change:.4}");
    println!("depth identical: {}", own.depth == swapped.depth);
    println!("mask identical:  {}", own.argmax_mask() == swapped.argmax_mask());
    Ok(())
}
