//! Trains the completion model from ground-truth keys, then fills a test
//! sequence in from its phoneme-boundary keys with and without audio.

use kmtalk::eval::lve;
use kmtalk::harness::{train_cmc, ExperimentConfig};
use kmtalk::model::ModelConfig;
use kmtalk::synth::{generate_corpus, CorpusConfig};
use kmtalk::train::{KeySource, TrainConfig};
use kmtalk::types::{KeyMotionSet, MotionSequence};

fn main() -> kmtalk::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let cfg = ExperimentConfig {
        seeds: vec![0],
        corpus: CorpusConfig {
            n_sequences: 16,
            vertex_count: 80,
            feature_dim: 16,
            ..Default::default()
        },
        model: ModelConfig {
            d: 32,
            f: 32,
            ..Default::default()
        },
        train: TrainConfig {
            epochs,
            ..Default::default()
        },
        ..Default::default()
    }
    .resolved()?;
    let corpus = generate_corpus(&cfg.corpus)?;
    let (with_audio, _) = train_cmc(&corpus, &cfg, 0, KeySource::Phoneme, true, None, None)?;
    let (without, _) = train_cmc(&corpus, &cfg, 0, KeySource::Phoneme, false, None, None)?;

    for s in &corpus.test {
        let idx = KeySource::Phoneme.indices(s)?;
        let keys = KeyMotionSet::from_sequence(&s.motion.frames, &idx)?;
        let mut row = format!("{}: {} of {} frames are keys", s.id, idx.len(), s.motion.n_frames());
        for (name, m) in [("audio", &with_audio), ("no audio", &without)] {
            let a = m.encode_audio(&s.audio.features, Some(s.speaker))?;
            let y = MotionSequence::new(m.complete(&a, &keys)?, s.motion.fps, &s.motion.mesh)?;
            row += &format!(", LVE {name} {:.3}", lve(&y, &s.motion, &corpus.mesh)?);
        }
        println!("{row}");
    }
    Ok(())
}
