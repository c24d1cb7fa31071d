//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The trained-ordering criteria (AC-3 to AC-8) share one ablation grid over
//! three seeds at the full epoch budget; that grid dominates the runtime.
//! `KMTALK_ACCEPTANCE_EPOCHS` overrides the budget for quick local runs, and
//! the run directory is kept under the cargo target tmp dir for inspection.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kmtalk::audio::{locate_key_frames, uniform_sample_indices};
use kmtalk::cmc::{arrangement, gated_fuse, CmcModel};
use kmtalk::container::{decode, encode, TensorRecord};
use kmtalk::eval::{error_map, evaluate_corpus, fdd, interp_reconstruct, lip_offset_curve, lve, rms_error, MetricOptions};
use kmtalk::harness::{
    run_experiment, run_suite_in, ExperimentConfig, Lab, SuiteReport, Variant, VERDICT_AUDIO, VERDICT_BUDGET, VERDICT_INTEGRATION,
    VERDICT_LOCALIZATION, VERDICT_OFFSET, VERDICT_PIPELINE,
};
use kmtalk::lkma::{build_pseudo_complete, LkmaModel, LossWeights};
use kmtalk::model::ModelConfig;
use kmtalk::nn::gradcheck::{grad_check, GradCheckOptions};
use kmtalk::nn::Mat;
use kmtalk::pipeline::sample_source;
use kmtalk::synth::{generate_corpus, render, CorpusConfig, PhonePlan};
use kmtalk::train::TrainConfig;
use kmtalk::types::{KeyMotionSet, MeshSpec, MotionSequence, SpeakerId};

/// Training epochs for the ordering grid.
const EPOCHS: usize = 200;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

// ---- AC-1 -------------------------------------------------------------

fn at(s: &MotionSequence, t: usize, v: usize, c: usize) -> f64 {
    s.frames.get(t, 3 * v + c)
}

fn lve_oracle(p: &MotionSequence, g: &MotionSequence, m: &MeshSpec) -> f64 {
    let mut total = 0.0;
    for t in 0..g.n_frames() {
        let mut worst = 0.0f64;
        for &v in &m.lip_vertices {
            let mut e = 0.0;
            for c in 0..3 {
                let d = at(p, t, v, c) - at(g, t, v, c);
                e += d * d;
            }
            worst = worst.max(e);
        }
        total += worst;
    }
    total / g.n_frames() as f64
}

fn dyn_oracle(s: &MotionSequence, v: usize) -> f64 {
    let n = s.n_frames();
    let mut norms = Vec::new();
    for t in 0..n {
        let mut e = 0.0;
        for c in 0..3 {
            e += at(s, t, v, c) * at(s, t, v, c);
        }
        norms.push(e.sqrt());
    }
    let mut mean = 0.0;
    for x in &norms {
        mean += x;
    }
    mean /= n as f64;
    let mut var = 0.0;
    for x in &norms {
        var += (x - mean) * (x - mean);
    }
    (var / n as f64).sqrt()
}

fn fdd_oracle(p: &MotionSequence, g: &MotionSequence, m: &MeshSpec) -> f64 {
    let mut total = 0.0;
    for &v in &m.upper_face_vertices {
        total += dyn_oracle(p, v) - dyn_oracle(g, v);
    }
    total / m.upper_face_vertices.len() as f64
}

fn ac1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = Vec::new();
    for case in 0..100 {
        let n = rng.gen_range(2..=10);
        let v = rng.gen_range(3..=12);
        let template = Mat::from_vec(v, 3, (0..3 * v).map(|_| rng.gen_range(-50.0..50.0)).collect()).unwrap();
        let lips: Vec<usize> = (0..v / 3).collect();
        let upper: Vec<usize> = (v / 3..v).collect();
        let mesh = MeshSpec::new("m", template, lips.clone(), upper).unwrap();
        let mut seq = || {
            let d = (0..n * 3 * v).map(|_| rng.gen_range(-5.0..5.0)).collect();
            MotionSequence::new(Mat::from_vec(n, 3 * v, d).unwrap(), 25.0, "m").unwrap()
        };
        let (p, g) = (seq(), seq());

        let mut ok = lve(&p, &g, &mesh).unwrap() == lve_oracle(&p, &g, &mesh);
        ok &= fdd(&p, &g, &mesh).unwrap() == fdd_oracle(&p, &g, &mesh);
        let map = error_map(&p, &g).unwrap();
        let curve = lip_offset_curve(&p, &mesh).unwrap();
        for t in 0..n {
            for j in 0..v {
                let mut e = 0.0;
                for c in 0..3 {
                    let d = at(&p, t, j, c) - at(&g, t, j, c);
                    e += d * d;
                }
                ok &= map.get(t, j) == e.sqrt();
            }
            let mut s = 0.0;
            for &j in &lips {
                let mut e = 0.0;
                for c in 0..3 {
                    e += at(&p, t, j, c) * at(&p, t, j, c);
                }
                s += e.sqrt();
            }
            ok &= curve[t] == s;
        }
        ok &= lve(&p, &p, &mesh).unwrap() == 0.0 && fdd(&p, &p, &mesh).unwrap() == 0.0;
        ok &= error_map(&p, &p).unwrap().data().iter().all(|&e| e == 0.0);
        if !ok {
            mismatches.push(case);
        }
    }
    outcome(mismatches.is_empty(), format!("100 instances, mismatches {mismatches:?}"))
}

// ---- AC-2 -------------------------------------------------------------

fn tiny_model() -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        d: 8,
        f: 8,
        encoder_heads: 2,
        flow_heads: 2,
        decoder_heads: 2,
        pe_dim: 4,
        vertex_count: 5,
        lip_vertices: vec![0, 1],
        vocab: 4,
        speakers: 2,
        seed: 5,
        ..Default::default()
    }
}

fn wave(rows: usize, cols: usize, k: f64) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|i| (i as f64 * k).sin()).collect()).unwrap()
}

fn ac2() -> Outcome {
    let feats = wave(6, 4, 0.37);
    let gt = wave(6, 15, 0.13);
    let idx = [0usize, 2, 5];
    let key = KeyMotionSet::from_sequence(&gt, &idx).unwrap();
    let opts = GradCheckOptions {
        epsilon: 1e-4,
        coords_per_param: None,
        seed: 0,
    };
    let lkma = LkmaModel::new(tiny_model()).unwrap();
    let weights = LossWeights::default();
    let a = grad_check(
        &lkma.store,
        |g| Ok(lkma.loss_graph(g, &feats, Some(SpeakerId(1)), &idx, &gt, &[1, 2, 3], &weights)?.0),
        opts,
    );
    let cmc = CmcModel::new(ModelConfig { seed: 6, ..tiny_model() }).unwrap();
    let b = grad_check(&cmc.store, |g| Ok(cmc.loss_graph(g, &feats, Some(SpeakerId(0)), &key, &gt)?.0), opts);
    match (a, b) {
        (Ok(a), Ok(b)) => outcome(
            a.max_rel_error < 1e-3 && b.max_rel_error < 1e-3,
            format!(
                "key-motion loss: {} coords, max rel {:.2e}; completion loss: {} coords, max rel {:.2e}",
                a.checked, a.max_rel_error, b.checked, b.max_rel_error
            ),
        ),
        (a, b) => outcome(false, format!("gradcheck error: {:?} / {:?}", a.err(), b.err())),
    }
}

// ---- AC-3 .. AC-6, AC-8: the ablation grid ----------------------------

fn grid_config(epochs: usize) -> ExperimentConfig {
    ExperimentConfig {
        name: "acceptance".into(),
        seeds: vec![0, 1, 2],
        strides: vec![3],
        // 3 frames per phone on average, so phoneme keys and stride-3 keys spend the same budget
        corpus: CorpusConfig {
            min_phone_s: 0.08,
            max_phone_s: 0.16,
            ..Default::default()
        },
        train: TrainConfig {
            epochs,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn verdict_outcome(report: &SuiteReport, names: &[&str]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in names {
        match report.verdict(n) {
            Some(v) => {
                pass &= v.pass;
                parts.push(format!("{n}: {:.4} vs {:.4}", v.lhs, v.rhs));
            }
            None => {
                pass = false;
                parts.push(format!("{n}: missing"));
            }
        }
    }
    outcome(pass, parts.join("; "))
}

// ---- AC-7 -------------------------------------------------------------

fn ac7() -> Outcome {
    let corpus = generate_corpus(&CorpusConfig {
        n_sequences: 100,
        seed: 77,
        ..Default::default()
    })
    .unwrap();
    let mut wins = 0;
    let mut total = 0;
    for s in corpus.test.iter().chain(&corpus.val).chain(&corpus.train).take(20) {
        let n = s.motion.n_frames();
        let curve = lip_offset_curve(&s.motion, &corpus.mesh).unwrap();
        let phon = locate_key_frames(&s.alignment, s.motion.fps, n).unwrap();
        // the smallest stride whose key count does not exceed the phoneme count
        let uni = (1..n)
            .map(|k| uniform_sample_indices(n, k).unwrap())
            .find(|u| u.len() <= phon.len())
            .unwrap();
        let ep = rms_error(&curve, &interp_reconstruct(&curve, &phon).unwrap());
        let eu = rms_error(&curve, &interp_reconstruct(&curve, &uni).unwrap());
        wins += usize::from(ep < eu);
        total += 1;
    }
    outcome(wins >= 16 && total == 20, format!("phoneme keys win in {wins}/{total} sequences"))
}

// ---- AC-9 -------------------------------------------------------------

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Mat::from_vec(rows, cols, d).unwrap())
}

fn subset(n: usize, m: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle().prop_map(move |mut v| {
        v.truncate(m);
        v.sort_unstable();
        v
    })
}

fn ac9() -> Outcome {
    let cfg = PropConfig {
        cases: 200,
        failure_persistence: None,
        ..PropConfig::default()
    };
    let mut results = Vec::new();
    let mut check = |name: &str, r: Result<(), String>| results.push((name.to_string(), r));
    let v = 5;

    let keyed = (2usize..14).prop_flat_map(move |n| (mat(n, 3 * v), (1..=n).prop_flat_map(move |m| subset(n, m))));
    check(
        "pseudo-complete identity",
        TestRunner::new(cfg.clone())
            .run(&keyed, |(frames, idx)| {
                let gt = MotionSequence::new(frames.clone(), 25.0, "m").unwrap();
                let key = KeyMotionSet::from_sequence(&frames, &idx).unwrap();
                prop_assert_eq!(build_pseudo_complete(&gt, &key).unwrap(), gt);
                Ok(())
            })
            .map_err(|e| e.to_string()),
    );

    let fuse = (1usize..8, 1usize..6).prop_flat_map(|(n, d)| (mat(n, d), mat(n, d), mat(2 * d, d)));
    check(
        "gated-fusion convexity",
        TestRunner::new(cfg.clone())
            .run(&fuse, |(a, phi, w)| {
                let (_, z) = gated_fuse(&a, &phi, &w).unwrap();
                for i in 0..z.len() {
                    let (x, y) = (a.data()[i], phi.data()[i]);
                    prop_assert!(z.data()[i] >= x.min(y) - 1e-12 && z.data()[i] <= x.max(y) + 1e-12);
                }
                Ok(())
            })
            .map_err(|e| e.to_string()),
    );

    let arr = (1usize..40).prop_flat_map(|n| (Just(n), (1..=n).prop_flat_map(move |m| subset(n, m))));
    check(
        "arrangement permutation census",
        TestRunner::new(cfg.clone())
            .run(&arr, |(n, idx)| {
                let a = arrangement(&idx, n).unwrap();
                let mut census = vec![0; n];
                for &r in &a {
                    census[r] += 1;
                }
                prop_assert!(census.iter().all(|&c| c == 1));
                prop_assert_eq!(a.iter().filter(|&&r| r < idx.len()).count(), idx.len());
                for (j, &i) in idx.iter().enumerate() {
                    prop_assert_eq!(a[i], j);
                }
                Ok(())
            })
            .map_err(|e| e.to_string()),
    );

    let model = CmcModel::new(ModelConfig {
        speakers: 0,
        ..tiny_model()
    })
    .unwrap();
    let lengths = (2usize..16, 0usize..3).prop_flat_map(|(n, which)| {
        let m = match which {
            0 => 1,
            1 => n / 2,
            _ => n,
        }
        .max(1);
        (Just(n), subset(n, m))
    });
    check(
        "output-length law, m in {1, N/2, N}",
        TestRunner::new(cfg.clone())
            .run(&lengths, |(n, idx)| {
                let keys = KeyMotionSet::new(idx.clone(), Mat::filled(idx.len(), 15, 0.3), n).unwrap();
                let y = model.complete(&Mat::filled(n, 8, 0.1), &keys).unwrap();
                prop_assert_eq!(y.shape(), (n, 15));
                prop_assert!(y.is_finite());
                Ok(())
            })
            .map_err(|e| e.to_string()),
    );

    let recs = prop::collection::vec((prop::collection::vec(1usize..5, 0..4), any::<bool>(), any::<u64>()), 0..6);
    check(
        "KMTF round trip",
        TestRunner::new(cfg)
            .run(&recs, |recs| {
                let records: Vec<TensorRecord> = recs
                    .iter()
                    .enumerate()
                    .map(|(i, (shape, int, seed))| {
                        let len: usize = shape.iter().product();
                        if *int {
                            TensorRecord::from_i64(&format!("r{i}"), shape, (0..len as i64).map(|k| k ^ *seed as i64).collect())
                        } else {
                            let d: Vec<f64> = (0..len).map(|k| (seed.wrapping_add(k as u64) % 1000) as f64 / 8.0).collect();
                            TensorRecord::from_f64(&format!("r{i}"), shape, &d)
                        }
                    })
                    .collect();
                let bytes = encode(&records).unwrap();
                prop_assert_eq!(decode(&bytes, "mem".as_ref()).unwrap(), records);
                Ok(())
            })
            .map_err(|e| e.to_string()),
    );

    let failed: Vec<String> = results.iter().filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}"))).collect();
    let names: Vec<&str> = results.iter().map(|(n, _)| n.as_str()).collect();
    if failed.is_empty() {
        outcome(true, format!("200 cases each: {}", names.join(", ")))
    } else {
        outcome(false, failed.join("; "))
    }
}

// ---- AC-10 ------------------------------------------------------------

fn csv_files(dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>, root: &Path) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            csv_files(&p, out, root);
        } else if p.extension().is_some_and(|e| e == "csv") {
            out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
        }
    }
}

fn ac10() -> Outcome {
    let cfg = ExperimentConfig {
        name: "determinism".into(),
        seeds: vec![3],
        corpus: CorpusConfig {
            n_sequences: 8,
            vertex_count: 60,
            feature_dim: 16,
            ..Default::default()
        },
        model: ModelConfig {
            d: 16,
            f: 16,
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 3,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let dir = run_dir(&format!("determinism_{run}"));
        if let Err(e) = run_experiment(&cfg, &dir) {
            return outcome(false, format!("run {run} failed: {e}"));
        }
        let mut files = BTreeMap::new();
        csv_files(&dir, &mut files, &dir);
        trees.push(files);
    }
    let logs = trees[0].keys().filter(|p| p.to_string_lossy().ends_with("_loss.csv")).count();
    let metrics = trees[0].keys().filter(|p| p.starts_with("seed_3/metrics")).count();
    let same = trees[0] == trees[1];
    outcome(
        same && logs > 0 && metrics > 0,
        format!("{} CSVs ({logs} loss logs, {metrics} metric files) byte-identical: {same}", trees[0].len()),
    )
}

// ---- AC-11 ------------------------------------------------------------

fn ac11(lab: Option<&mut Lab>) -> Outcome {
    let Some(lab) = lab else {
        return outcome(false, "no trained models (grid failed)");
    };
    let seed = lab.config.seeds[0];
    let corpus = &lab.corpus;
    let cfg = &corpus.config;
    // 900 phones of 0.1 s: sil, 898 sounds, sil
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut plan = vec![PhonePlan {
        phone: 0,
        duration: 0.1,
        energy: 0.0,
    }];
    for _ in 0..898 {
        plan.push(PhonePlan {
            phone: rng.gen_range(1..cfg.phone_count),
            duration: 0.1,
            energy: rng.gen(),
        });
    }
    plan.push(plan[0]);
    let (audio, motion, alignment) = render(cfg, &corpus.mesh, &corpus.visemes, &corpus.styles[0], &plan, &mut rng).unwrap();
    let sample = kmtalk::synth::Sample {
        id: "long".into(),
        audio,
        motion,
        alignment,
        speaker: SpeakerId(0),
    };
    let mesh = corpus.mesh.clone();
    let fps = cfg.fps;
    let pipeline = match lab.pipeline(Variant::full(), seed) {
        Ok(p) => p,
        Err(e) => return outcome(false, format!("no trained pipeline: {e}")),
    };
    let expected = (sample.alignment.duration * fps).round() as usize;
    let r = pipeline.infer_full(&sample_source(&sample), &sample.alignment, fps, Some(sample.speaker), Some(4.0), &mesh.name);
    match r {
        Ok(pred) => {
            let report = evaluate_corpus(&[("long".into(), pred.clone(), sample.motion.clone())], &mesh, MetricOptions::default());
            match report {
                Ok(rep) => outcome(
                    pred.n_frames() == expected && rep.lve.is_finite() && rep.fdd.is_finite(),
                    format!(
                        "{:.1} s -> {} frames (expected {expected}), LVE {:.4}, FDD {:.4}",
                        sample.alignment.duration,
                        pred.n_frames(),
                        rep.lve,
                        rep.fdd
                    ),
                ),
                Err(e) => outcome(false, format!("metrics failed: {e}")),
            }
        }
        Err(e) => outcome(false, format!("inference failed: {e}")),
    }
}

fn main() {
    let epochs = std::env::var("KMTALK_ACCEPTANCE_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(EPOCHS);
    let mut results: Vec<(&str, &str, Outcome, f64)> = Vec::new();
    let mut timed = |id: &'static str, title: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!("{id} {} {title} ({secs:.1} s): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, title, o, secs));
    };

    timed("AC-1", "metric oracles", &mut ac1);
    timed("AC-2", "gradient fidelity", &mut ac2);

    let t = Instant::now();
    let grid_dir = run_dir("grid");
    let mut lab = Lab::new(&grid_config(epochs), &grid_dir);
    let suite = lab.as_mut().map_err(|e| e.to_string()).and_then(|l| run_suite_in(l).map_err(|e| e.to_string()));
    let grid_secs = t.elapsed().as_secs_f64();
    println!("ablation grid: {epochs} epochs x 3 seeds in {grid_secs:.0} s, run dir {}", grid_dir.display());
    let grid = |names: &[&str]| match &suite {
        Ok(r) => verdict_outcome(r, names),
        Err(e) => outcome(false, format!("grid failed: {e}")),
    };
    timed("AC-3", "progressive learning beats direct regression", &mut || grid(&[VERDICT_PIPELINE]));
    timed("AC-4", "phoneme keys beat uniform keys", &mut || grid(&[VERDICT_LOCALIZATION, VERDICT_BUDGET]));
    timed("AC-5", "completion refines baseline keys", &mut || grid(&[VERDICT_INTEGRATION]));
    timed("AC-6", "audio guidance matters", &mut || grid(&[VERDICT_AUDIO]));
    timed("AC-7", "keypoint descriptiveness", &mut ac7);
    timed("AC-8", "offset robustness", &mut || grid(&[VERDICT_OFFSET]));
    timed("AC-9", "structural invariants", &mut ac9);
    timed("AC-10", "determinism", &mut ac10);
    let mut lab_ref = lab.as_mut().ok();
    timed("AC-11", "long-sequence conservation", &mut || ac11(lab_ref.take()));

    let failed: Vec<&str> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing: {}", failed.join(", "));
        std::process::exit(1);
    }
}
