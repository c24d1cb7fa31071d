//! Runs the full variant grid on a small corpus and prints the comparison
//! table and ordering verdicts. Short training, so expect some verdicts to
//! fail; `kmsynth ablate` with the default config is the real experiment.
//!
//! `cargo run --release --example ablation -- [epochs] [out_dir]`

use kmtalk::harness::{run_ablation_suite, ExperimentConfig};
use kmtalk::model::ModelConfig;
use kmtalk::synth::CorpusConfig;
use kmtalk::train::TrainConfig;

fn main() -> kmtalk::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let out = args.next().map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("kmtalk_ablation"));
    let cfg = ExperimentConfig {
        name: "ablation-demo".into(),
        seeds: vec![0],
        corpus: CorpusConfig {
            n_sequences: 12,
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
            epochs,
            ..Default::default()
        },
        ..Default::default()
    };
    let report = run_ablation_suite(&cfg, &out)?;
    println!("{:<20} {:>6} {:>10} {:>10}", "variant", "seed", "LVE", "FDD");
    for r in &report.rows {
        println!("{:<20} {:>6} {:>10.4} {:>10.4}", r.variant, r.seed, r.lve, r.fdd);
    }
    for v in &report.verdicts {
        println!("[{}] {} ({:.4} vs {:.4})", if v.pass { "pass" } else { "FAIL" }, v.name, v.lhs, v.rhs);
    }
    println!("run directory: {} (config {})", out.display(), report.hash);
    Ok(())
}
