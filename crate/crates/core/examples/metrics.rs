//! Lip vertex error, upper-face dynamics deviation, the lip-offset curve and
//! how well key frames reconstruct it by linear interpolation.

use kmtalk::audio::{locate_key_frames, uniform_sample_indices};
use kmtalk::eval::{error_map, fdd, fdd_with, interp_reconstruct, lip_offset_curve, lve, lve_with, rms_error, MetricOptions};
use kmtalk::synth::{generate_corpus, CorpusConfig};
use kmtalk::types::MotionSequence;

fn main() -> kmtalk::Result<()> {
    let corpus = generate_corpus(&CorpusConfig {
        n_sequences: 6,
        ..Default::default()
    })?;
    let mesh = &corpus.mesh;
    let s = &corpus.train[0];
    let gt = &s.motion;

    // a prediction that lags one frame behind and moves 20% less
    let n = gt.n_frames();
    let mut frames = gt.frames.gather_rows(&(0..n).map(|t| t.saturating_sub(1)).collect::<Vec<_>>())?;
    frames = frames.map(|x| 0.8 * x);
    let pred = MotionSequence::new(frames, gt.fps, &gt.mesh)?;
    let norm = MetricOptions {
        lve_norm: true,
        fdd_variance: true,
    };
    println!("LVE {:.4} mm^2 (unsquared {:.4} mm)", lve(&pred, gt, mesh)?, lve_with(&pred, gt, mesh, norm)?);
    println!("FDD {:.4} (variance form {:.4})", fdd(&pred, gt, mesh)?, fdd_with(&pred, gt, mesh, norm)?);
    let map = error_map(&pred, gt)?;
    let worst = (0..map.cols()).max_by(|&a, &b| {
        let col = |v| (0..map.rows()).map(|t| map.get(t, v)).sum::<f64>();
        col(a).total_cmp(&col(b))
    });
    println!("vertex with the largest summed error: {worst:?}");

    let curve = lip_offset_curve(gt, mesh)?;
    let phon = locate_key_frames(&s.alignment, gt.fps, n)?;
    let stride = (n as f64 / phon.len() as f64).round().max(1.0) as usize;
    let uni = uniform_sample_indices(n, stride)?;
    println!(
        "interpolation rms: {} phoneme keys {:.4}, {} uniform keys {:.4}",
        phon.len(),
        rms_error(&curve, &interp_reconstruct(&curve, &phon)?),
        uni.len(),
        rms_error(&curve, &interp_reconstruct(&curve, &uni)?)
    );
    Ok(())
}
