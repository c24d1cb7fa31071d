//! Waveform to frame-aligned features at two frame rates, via a WAV round trip.

use kmtalk::audio::{featurize, read_wav, write_wav, AudioSource};

fn main() -> kmtalk::Result<()> {
    let sr = 16_000u32;
    // two seconds of a gliding tone with a pause in the middle
    let samples: Vec<f64> = (0..2 * sr as usize)
        .map(|i| {
            let t = i as f64 / sr as f64;
            let gate = if (0.9..1.1).contains(&t) { 0.0 } else { 0.4 };
            gate * (2.0 * std::f64::consts::PI * (200.0 + 300.0 * t) * t).sin()
        })
        .collect();
    let path = std::env::temp_dir().join("kmtalk_glide.wav");
    write_wav(&path, &samples, sr)?;
    let source = read_wav(&path)?;
    if let AudioSource::Waveform { samples, sample_rate } = &source {
        println!("read {} samples at {sample_rate} Hz", samples.len());
    }

    for fps in [25.0, 30.0] {
        let f = featurize(&source, fps, 16)?;
        let energy: Vec<String> = (0..f.n_frames())
            .step_by(5)
            .map(|t| format!("{:.1}", f.features.row(t).iter().sum::<f64>() / 16.0))
            .collect();
        println!("{fps} fps: {} frames x {} dims; mean log energy every 5th frame: {}", f.n_frames(), f.dim(), energy.join(" "));
    }
    Ok(())
}
