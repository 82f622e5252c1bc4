//! Scores generated latents against per-class Gaussians fitted to local
//! latents and turns the densities into replay weights.

use affcl::autodiff::Mat;
use affcl::replay::{correlation_density, weights_from_density, LatentClassStats};

fn main() -> affcl::Result<()> {
    // Local latents of two classes, centred at 0 and at 3.
    let local = Mat::from_shape_vec(
        (6, 2),
        vec![-0.5, 0.1, 0.4, -0.2, 0.1, 0.3, 3.2, 2.9, 2.7, 3.1, 3.1, 3.0],
    )
    .unwrap();
    let labels = [0, 0, 0, 1, 1, 1];
    let stats = LatentClassStats::from_latents(&local, &labels)?;
    for (c, g) in &stats.per_class {
        println!("class {c}: mean {:?} var {:?}", g.mean, g.var);
    }

    let generated = [([0.0, 0.0], 0), ([3.0, 3.0], 1), ([3.0, 3.0], 0), ([8.0, -4.0], 1), ([1.0, 1.0], 5)];
    let logd: Vec<f64> = generated
        .iter()
        .map(|(u, y)| correlation_density(&stats, u, *y))
        .collect();
    let weights = weights_from_density(&logd)?;
    for (((u, y), l), w) in generated.iter().zip(&logd).zip(&weights) {
        println!("u={u:?} y={y}  log-density {l:9.3}  weight {w:.3e}");
    }
    Ok(())
}
