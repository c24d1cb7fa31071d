use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kmtalk::audio::{read_alignment, read_wav, AudioSource};
use kmtalk::cmc::{BaselineModel, CmcModel};
use kmtalk::eval::MetricOptions;
use kmtalk::harness::{
    self, emit_plots, evaluate_dirs, load_features, load_motion, loss_log_path, run_ablation_suite, run_experiment, run_timing,
    train_baseline, train_cmc, train_lkma, write_loss_log, ExperimentConfig,
};
use kmtalk::lkma::LkmaModel;
use kmtalk::obj::export_obj_sequence;
use kmtalk::pipeline::{CmcAudio, Pipeline};
use kmtalk::synth::{generate_corpus, load_corpus, save_corpus, Corpus};
use kmtalk::train::KeySource;
use kmtalk::types::{MeshSpec, SpeakerId};
use kmtalk::{Error, Result};

#[derive(Parser)]
#[command(name = "kmsynth", version, about = "Key-motion-first facial animation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint path; the loss log goes next to it as `<stem>_loss.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the key-motion model.
    TrainLkma(TrainArgs),
    /// Train the completion model.
    TrainCmc {
        #[command(flatten)]
        train: TrainArgs,
        /// Key-motion checkpoint whose encoder is frozen (required when `cmc_audio = "lkma_encoder"`).
        #[arg(long)]
        lkma: Option<PathBuf>,
        /// Baseline checkpoint supplying the key motions (required when `keys = "baseline-extracted"`).
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Train the direct-regression baseline.
    TrainBaseline(TrainArgs),
    /// Predict a motion sequence from audio and a phoneme alignment.
    Infer {
        /// A WAV file or a feature container (`.kmtf`).
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        alignment: PathBuf,
        #[arg(long)]
        lkma: PathBuf,
        #[arg(long)]
        cmc: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25.0)]
        fps: f64,
        #[arg(long)]
        speaker: Option<usize>,
        /// Longest clip in seconds; longer input is cut at phone boundaries.
        #[arg(long)]
        max_clip: Option<f64>,
        #[arg(long, value_enum, default_value = "own")]
        cmc_audio: CliCmcAudio,
        /// Read key motions off this baseline's prediction (integration mode).
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Also write one OBJ per frame (needs --mesh).
        #[arg(long)]
        obj: bool,
        #[arg(long)]
        mesh: Option<PathBuf>,
    },
    /// Score predictions against ground truth, matching sequences by directory name.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Unsquared lip distance.
        #[arg(long)]
        lve_norm: bool,
        /// Variance instead of standard deviation for upper-face dynamics.
        #[arg(long)]
        fdd_variance: bool,
    },
    /// Run the full variant grid and check the ordering verdicts.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured variant and the baseline only.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-stage inference wall clock over a corpus split.
    Timing {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        lkma: PathBuf,
        #[arg(long)]
        cmc: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25.0)]
        fps: f64,
    },
    /// Write a motion file as one OBJ per frame.
    ExportObj {
        #[arg(long)]
        motion: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit plot-data CSVs for a run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliCmcAudio {
    Own,
    LkmaEncoder,
}

fn config(path: Option<&Path>) -> Result<(ExperimentConfig, String)> {
    let c = harness::load_or_default(path)?;
    let hash = c.hash()?;
    Ok((c.resolved()?, hash))
}

/// Single-model commands train with the first configured seed.
fn first_seed(c: &ExperimentConfig) -> u64 {
    c.seeds[0]
}

fn corpus_and_config(args: &TrainArgs) -> Result<(Corpus, ExperimentConfig, String)> {
    let (c, hash) = config(args.config.as_deref())?;
    Ok((load_corpus(&args.corpus)?, c, hash))
}

fn mesh_file(path: &Path) -> Result<MeshSpec> {
    MeshSpec::load(path)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenerateData { config: path, out } => {
            let (c, hash) = config(path.as_deref())?;
            let corpus = generate_corpus(&c.corpus)?;
            save_corpus(&corpus, &out)?;
            println!(
                "corpus {hash}: {} train, {} val, {} test sequences, {} vertices -> {}",
                corpus.train.len(),
                corpus.val.len(),
                corpus.test.len(),
                corpus.mesh.vertex_count(),
                out.display()
            );
        }
        Command::TrainLkma(args) => {
            let (corpus, c, hash) = corpus_and_config(&args)?;
            let keys = harness::training_keys(c.keys);
            let (model, log) = train_lkma(&corpus, &c, first_seed(&c), keys)?;
            model.save(&args.out, &hash)?;
            write_loss_log(&loss_log_path(&args.out), &hash, &log)?;
            println!("lkma best epoch {} -> {}", log.best_epoch, args.out.display());
        }
        Command::TrainCmc {
            train: args,
            lkma,
            baseline,
        } => {
            let (corpus, c, hash) = corpus_and_config(&args)?;
            let frozen = match (c.cmc_audio, lkma) {
                (CmcAudio::LkmaEncoder, Some(p)) => Some(LkmaModel::load(&p)?),
                (CmcAudio::LkmaEncoder, None) => {
                    return Err(Error::Config("cmc_audio = \"lkma_encoder\" needs --lkma".into()));
                }
                (CmcAudio::Own, _) => None,
            };
            let keys = harness::completion_keys(c.keys);
            let donor = match (keys, baseline) {
                (KeySource::BaselineExtracted, Some(p)) => Some(BaselineModel::load(&p)?),
                (KeySource::BaselineExtracted, None) => {
                    return Err(Error::Config("keys = \"baseline-extracted\" needs --baseline".into()));
                }
                _ => None,
            };
            let (model, log) = train_cmc(&corpus, &c, first_seed(&c), keys, c.audio_guidance, frozen.as_ref(), donor.as_ref())?;
            model.save(&args.out, &hash)?;
            write_loss_log(&loss_log_path(&args.out), &hash, &log)?;
            println!("cmc best epoch {} -> {}", log.best_epoch, args.out.display());
        }
        Command::TrainBaseline(args) => {
            let (corpus, c, hash) = corpus_and_config(&args)?;
            let (model, log) = train_baseline(&corpus, &c, first_seed(&c))?;
            model.save(&args.out, &hash)?;
            write_loss_log(&loss_log_path(&args.out), &hash, &log)?;
            println!("baseline best epoch {} -> {}", log.best_epoch, args.out.display());
        }
        Command::Infer {
            audio,
            alignment,
            lkma,
            cmc,
            out,
            fps,
            speaker,
            max_clip,
            cmc_audio,
            baseline,
            obj,
            mesh,
        } => {
            let lkma = LkmaModel::load(&lkma)?;
            let cmc = CmcModel::load(&cmc)?;
            let baseline = baseline.as_deref().map(BaselineModel::load).transpose()?;
            let source = if audio.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                read_wav(&audio)?
            } else {
                AudioSource::Precomputed(load_features(&audio)?)
            };
            let alignment = read_alignment(&alignment)?;
            let speaker = speaker.map(|i| SpeakerId::checked(i, cmc.config.speakers)).transpose()?;
            let pipeline = Pipeline {
                cmc_audio: match cmc_audio {
                    CliCmcAudio::Own => CmcAudio::Own,
                    CliCmcAudio::LkmaEncoder => CmcAudio::LkmaEncoder,
                },
                baseline: baseline.as_ref(),
                ..Pipeline::new(&lkma, &cmc)
            };
            let mesh_spec = mesh.as_deref().map(mesh_file).transpose()?;
            let mesh_name = mesh_spec.as_ref().map_or("mesh", |m| m.name.as_str());
            let motion = pipeline.infer_full(&source, &alignment, fps, speaker, max_clip, mesh_name)?;
            fs::create_dir_all(&out)?;
            motion.save(&out.join("motion.kmtf"), speaker.unwrap_or(SpeakerId(0)))?;
            if obj {
                let m = mesh_spec.ok_or_else(|| Error::Config("--obj needs --mesh".into()))?;
                export_obj_sequence(&motion, &m, &out.join("obj"))?;
            }
            println!("{} frames -> {}", motion.n_frames(), out.join("motion.kmtf").display());
        }
        Command::Evaluate {
            pred,
            gt,
            mesh,
            out,
            lve_norm,
            fdd_variance,
        } => {
            let mesh = mesh_file(&mesh)?;
            let opts = MetricOptions { lve_norm, fdd_variance };
            let report = evaluate_dirs(&pred, &gt, &mesh, opts)?;
            report.write(&out)?;
            println!("lve {:.6} fdd {:.6} over {} sequences", report.lve, report.fdd, report.sequences.len());
        }
        Command::Ablate { config: path, out } => {
            let c = harness::load_or_default(path.as_deref())?;
            let report = run_ablation_suite(&c, &out)?;
            for v in &report.verdicts {
                println!("{} {}: {:.4} vs {:.4}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.lhs, v.rhs);
            }
            return Ok(report.all_pass());
        }
        Command::Run { config: path, out } => {
            let c = harness::load_or_default(path.as_deref())?;
            for r in run_experiment(&c, &out)? {
                println!("{} seed {}: lve {:.6} fdd {:.6}", r.variant, r.seed, r.lve, r.fdd);
            }
        }
        Command::Timing {
            corpus,
            lkma,
            cmc,
            out,
            fps,
        } => {
            let corpus = load_corpus(&corpus)?;
            let lkma = LkmaModel::load(&lkma)?;
            let cmc = CmcModel::load(&cmc)?;
            let report = run_timing(&Pipeline::new(&lkma, &cmc), &corpus.test, fps)?;
            if let Some(dir) = out.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, report.to_csv())?;
            print!("{}", report.to_csv());
        }
        Command::ExportObj { motion, mesh, out } => {
            let m = mesh_file(&mesh)?;
            let n = export_obj_sequence(&load_motion(&motion)?, &m, &out)?;
            println!("{n} OBJ files -> {}", out.display());
        }
        Command::Plot { run } => {
            for p in emit_plots(&run)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
