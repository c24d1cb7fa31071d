//! Generates a small synthetic corpus, writes it to disk and reloads it.
//!
//! `cargo run --example generate_corpus -- [out_dir]`

use kmtalk::audio::locate_key_frames;
use kmtalk::synth::{generate_corpus, load_corpus, save_corpus, CorpusConfig};

fn main() -> kmtalk::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("kmtalk_corpus").display().to_string());
    let cfg = CorpusConfig {
        n_sequences: 12,
        seed: 7,
        ..Default::default()
    };
    let corpus = generate_corpus(&cfg)?;
    save_corpus(&corpus, out.as_ref())?;
    let back = load_corpus(out.as_ref())?;
    assert_eq!(back.train, corpus.train);

    println!("mesh {} with {} vertices, {} lip", corpus.mesh.name, corpus.mesh.vertex_count(), corpus.mesh.lip_vertices.len());
    println!("vocabulary: {}", corpus.visemes.vocabulary.join(" "));
    for s in corpus.train.iter().take(4) {
        let keys = locate_key_frames(&s.alignment, s.motion.fps, s.motion.n_frames())?;
        println!(
            "{}: {} frames, {} phones, {} key frames, speaker {}",
            s.id,
            s.motion.n_frames(),
            s.alignment.phones.len(),
            keys.len(),
            s.speaker.0
        );
    }
    println!("written to {out}");
    Ok(())
}
