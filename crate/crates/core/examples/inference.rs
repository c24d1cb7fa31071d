//! End to end: train both stages, then animate a WAV file with a phoneme
//! alignment, cutting it into short clips, and write motion plus OBJ frames.

use kmtalk::audio::{read_wav, write_alignment, write_wav};
use kmtalk::harness::{tone_waveform, train_cmc, train_lkma, ExperimentConfig};
use kmtalk::model::ModelConfig;
use kmtalk::obj::export_obj_sequence;
use kmtalk::pipeline::Pipeline;
use kmtalk::synth::{generate_corpus, CorpusConfig};
use kmtalk::train::{KeySource, TrainConfig};

fn main() -> kmtalk::Result<()> {
    let cfg = ExperimentConfig {
        seeds: vec![0],
        corpus: CorpusConfig {
            n_sequences: 10,
            vertex_count: 60,
            feature_dim: 16,
            ..Default::default()
        },
        model: ModelConfig {
            d: 32,
            f: 32,
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 5,
            ..Default::default()
        },
        ..Default::default()
    }
    .resolved()?;
    let corpus = generate_corpus(&cfg.corpus)?;
    let (lkma, _) = train_lkma(&corpus, &cfg, 0, KeySource::Phoneme)?;
    let (cmc, _) = train_cmc(&corpus, &cfg, 0, KeySource::Phoneme, true, None, None)?;

    let dir = std::env::temp_dir().join("kmtalk_inference");
    std::fs::create_dir_all(&dir)?;
    let s = &corpus.test[0];
    let kmtalk::audio::AudioSource::Waveform { samples, .. } = tone_waveform(s, 16_000.0) else {
        unreachable!()
    };
    write_wav(&dir.join("speech.wav"), &samples, 16_000)?;
    write_alignment(&dir.join("alignment.json"), &s.alignment)?;

    let audio = read_wav(&dir.join("speech.wav"))?;
    let alignment = kmtalk::audio::read_alignment(&dir.join("alignment.json"))?;
    let motion = Pipeline::new(&lkma, &cmc).infer_full(&audio, &alignment, 25.0, Some(s.speaker), Some(1.5), &corpus.mesh.name)?;
    motion.save(&dir.join("motion.kmtf"), s.speaker)?;
    let n = export_obj_sequence(&motion, &corpus.mesh, &dir.join("obj"))?;
    println!("{:.2} s of audio -> {} frames, {n} OBJ files in {}", alignment.duration, motion.n_frames(), dir.display());
    Ok(())
}
