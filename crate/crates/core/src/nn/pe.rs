use crate::error::{Error, Result};
use crate::nn::tensor::Mat;

/// Parameter-free sinusoidal encoding: column `2i` holds
/// `sin(p / 10000^(2i/dim))` and column `2i + 1` the matching cosine.
pub fn sinusoidal_pe(positions: &[usize], dim: usize) -> Result<Mat> {
    if dim % 2 != 0 {
        return Err(Error::shape(format!(
            "positional encoding width must be even, got {dim}"
        )));
    }
    let mut out = Mat::zeros(positions.len(), dim);
    for (r, &p) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for i in 0..dim / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
            let angle = p as f64 * freq;
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
    }
    Ok(out)
}
