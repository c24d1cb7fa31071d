//! Per-stage inference wall clock on untrained default-size models.

use kmtalk::cmc::CmcModel;
use kmtalk::harness::{run_timing, ExperimentConfig};
use kmtalk::lkma::LkmaModel;
use kmtalk::pipeline::Pipeline;
use kmtalk::synth::generate_corpus;

fn main() -> kmtalk::Result<()> {
    let cfg = ExperimentConfig::default().resolved()?;
    let corpus = generate_corpus(&cfg.corpus)?;
    let mc = cfg.model_config(&corpus);
    let lkma = LkmaModel::new(mc.clone())?;
    let cmc = CmcModel::new(mc)?;
    let report = run_timing(&Pipeline::new(&lkma, &cmc), &corpus.test, cfg.fps)?;
    print!("{}", report.to_csv());
    let secs: f64 = corpus.test.iter().map(|s| s.alignment.duration).sum::<f64>() / corpus.test.len() as f64;
    println!("mean clip {secs:.2} s, {:.1} ms per second of audio", report.mean("total") / secs);
    Ok(())
}
