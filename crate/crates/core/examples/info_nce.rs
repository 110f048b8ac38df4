//! InfoNCE with in-batch negatives: aligned pairs score low, shuffled pairs
//! high, and the temperature sharpens the gap.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tplf::objectives::info_nce;

fn main() -> tplf::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = Array2::from_shape_fn((16, 24), |_| rng.random_range(-1.0..1.0));
    let noisy = z.mapv(|v| v + rng.random_range(-0.2..0.2));
    let mut shuffled = noisy.clone();
    for i in 0..16 {
        shuffled.row_mut(i).assign(&noisy.row((i + 5) % 16));
    }
    for tau in [0.5, 0.1, 0.05] {
        println!(
            "tau {tau:<4}  aligned {:.4}  shuffled {:.4}  chance ln(B) {:.4}",
            info_nce(&z, &noisy, tau)?,
            info_nce(&z, &shuffled, tau)?,
            (16f64).ln()
        );
    }
    Ok(())
}
