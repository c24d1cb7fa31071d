//! Cuts a 90-second utterance into clips of at most 4 seconds at phone
//! boundaries and checks that the clips tile every frame.

use kmtalk::audio::{segment_long_audio, AudioSource};
use kmtalk::nn::Mat;
use kmtalk::types::{AudioFeatureSequence, Phone, PhonemeAlignment};

fn main() -> kmtalk::Result<()> {
    let fps = 25.0;
    let mut phones = Vec::new();
    let mut t = 0.0;
    let mut i = 0usize;
    while t < 90.0 {
        let d = (0.06 + 0.08 * ((i * 37 % 11) as f64 / 10.0)).min(90.0 - t);
        phones.push(Phone {
            label: format!("p{}", i % 9),
            start: t,
            end: t + d,
        });
        t += d;
        i += 1;
    }
    let tokens = (0..phones.len()).map(|i| i % 9 + 1).collect();
    let alignment = PhonemeAlignment::new(phones, tokens, 90.0)?;
    let n = 90 * fps as usize;
    let source = AudioSource::Precomputed(AudioFeatureSequence::new(Mat::zeros(n, 8), fps)?);

    let clips = segment_long_audio(&source, &alignment, 4.0, fps)?;
    let mut next = 0;
    for c in &clips {
        assert_eq!(c.frames.start, next);
        assert!(c.alignment.duration <= 4.0 + 1e-9);
        next = c.frames.end;
    }
    assert_eq!(next, n);
    println!("{} phones, {n} frames -> {} clips", alignment.phones.len(), clips.len());
    for c in clips.iter().take(3) {
        println!("  frames {:?}, {} phones, {:.2} s", c.frames, c.alignment.phones.len(), c.alignment.duration);
    }
    Ok(())
}
