//! Trains the key-motion model briefly and compares its key predictions with
//! ground truth at the phoneme-boundary frames.

use kmtalk::harness::{train_lkma, ExperimentConfig};
use kmtalk::model::ModelConfig;
use kmtalk::synth::{generate_corpus, CorpusConfig};
use kmtalk::train::{KeySource, TrainConfig};

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
    let (model, log) = train_lkma(&corpus, &cfg, 0, KeySource::Phoneme)?;
    for r in log.split_rows("val") {
        println!("epoch {:>3}  rec {:.4}  vel {:.4}  lat {:.4}  ctc {:.3}  total {:.3}", r.epoch, r.rec, r.vel, r.lat, r.ctc, r.total);
    }
    println!("best epoch {}", log.best_epoch);

    let s = &corpus.test[0];
    let idx = KeySource::Phoneme.indices(s)?;
    let pred = model.predict_keys(&s.audio.features, Some(s.speaker), &idx)?;
    let gt = s.motion.frames.gather_rows(&idx)?;
    let rms = (pred.motions.data().iter().zip(gt.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / gt.len() as f64).sqrt();
    let scale = (gt.data().iter().map(|x| x * x).sum::<f64>() / gt.len() as f64).sqrt();
    println!("{}: {} keys, rms error {rms:.3} mm against rms motion {scale:.3} mm", s.id, idx.len());
    Ok(())
}
