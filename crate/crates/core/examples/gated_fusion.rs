//! The gate that blends audio latents with motion-flow features, frame by frame.

use kmtalk::cmc::gated_fuse;
use kmtalk::nn::Mat;

fn main() -> kmtalk::Result<()> {
    let d = 2;
    // audio says "open", motion flow says "closed"
    let a = Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]])?;
    let phi = Mat::from_rows(&[vec![-1.0, -1.0], vec![0.0, 0.0], vec![4.0, -4.0]])?;
    for (name, scale) in [("neutral", 0.0), ("audio-leaning", 2.0), ("flow-leaning", -2.0)] {
        // W is 2d x d: the first d rows read A, the rest read the flow
        let mut w = Mat::zeros(2 * d, d);
        for j in 0..d {
            w.set(j, j, scale);
        }
        let (g, z) = gated_fuse(&a, &phi, &w)?;
        println!("{name}:");
        for t in 0..3 {
            println!("  t={t} gate {:.3?} -> {:.3?}", g.row(t), z.row(t));
        }
    }
    Ok(())
}
