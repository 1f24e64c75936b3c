//! Soft color histograms and the Hellinger distance between them.

use tpde::losses::{hellinger_distance, soft_histogram};

fn main() -> tpde::Result<()> {
    let solid = |c: [f32; 3], n: usize| c.repeat(n);
    let red = soft_histogram(&solid([0.9, 0.1, 0.1], 50), &[1.0; 50])?;
    let dark_red = soft_histogram(&solid([0.7, 0.1, 0.1], 50), &[1.0; 50])?;
    let blue = soft_histogram(&solid([0.1, 0.1, 0.9], 50), &[1.0; 50])?;
    println!("red vs red      {:.4}", hellinger_distance(&red, &red)?);
    println!("red vs dark red {:.4}", hellinger_distance(&red, &dark_red)?);
    println!("red vs blue     {:.4}", hellinger_distance(&red, &blue)?);
    Ok(())
}
