//! Experiment configs, the ablation grid with ordering verdicts, inference
//! timing and plot-data emission.
//!
//! Run directory layout:
//!
//! ```text
//! <out>/config.toml, manifest.json, results.csv | comparison.csv, verdicts.csv
//! <out>/corpus/...                        generated corpus
//! <out>/seed_<s>/checkpoints/*.kmtf       model weights (+ .json schema)
//! <out>/seed_<s>/logs/*_loss.csv          per-epoch losses
//! <out>/seed_<s>/metrics/<variant>/       per_sequence.csv, aggregate.csv
//! <out>/seed_<s>/predictions/<variant>/<id>/motion.kmtf
//! ```
//!
//! Every CSV written here starts with a `# config_hash=<hash>` line.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{featurize, locate_key_frames, AudioSource};
use crate::cmc::{BaselineModel, CmcModel};
use crate::error::{Error, Result};
use crate::eval::{curve_csv, error_map, evaluate_corpus, heatmap_csv, lip_offset_curve, MetricOptions, MetricReport};
use crate::lkma::LkmaModel;
use crate::model::ModelConfig;
use crate::pipeline::{predict_baseline, CmcAudio, Pipeline};
use crate::synth::{generate_corpus, load_corpus, load_sample, save_corpus, Corpus, CorpusConfig, Sample};
use crate::train::{attach_frozen_audio, fit, items, KeySource, TrainConfig, TrainLog};
use crate::types::{to_f32_precision, AudioFeatureSequence, MeshSpec, MotionSequence};

/// Replaces the configured seed list with a single seed.
pub const SEED_ENV: &str = "KMSYNTH_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Training seeds; ordering verdicts compare means over them.
    pub seeds: Vec<u64>,
    /// Overrides `corpus.fps`.
    pub fps: f64,
    pub keys: KeySource,
    /// Overrides `model.audio_guidance`.
    pub audio_guidance: bool,
    pub cmc_audio: CmcAudio,
    /// Overrides `model.faithful_depth`.
    pub faithful_depth: bool,
    /// Condition on the corpus speaker ids.
    pub use_speaker: bool,
    pub max_clip_seconds: f64,
    /// Frame shift of the offset-robustness variant.
    pub offset: i64,
    /// Uniform strides of the key-quantity sweep.
    pub strides: Vec<usize>,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "default".into(),
            seeds: vec![0, 1, 2],
            fps: 25.0,
            keys: KeySource::Phoneme,
            audio_guidance: true,
            cmc_audio: CmcAudio::Own,
            faithful_depth: false,
            use_speaker: true,
            max_clip_seconds: 4.0,
            offset: 1,
            strides: vec![2, 3, 4],
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and applies the seed environment override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)?.with_env_seed()
    }

    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.seeds = vec![seed];
        }
        Ok(self)
    }

    /// Copies the top-level overrides into the nested sections and validates.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.corpus.fps = c.fps;
        c.model.faithful_depth = c.faithful_depth;
        c.model.audio_guidance = c.audio_guidance;
        c.model.feature_dim = c.corpus.feature_dim;
        if c.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if c.strides.contains(&0) {
            return Err(Error::Config("uniform strides must be at least 1".into()));
        }
        if !(c.max_clip_seconds > 0.0) {
            return Err(Error::Config("max_clip_seconds must be positive".into()));
        }
        c.corpus.validate()?;
        Ok(c)
    }

    /// First 16 hex digits of the SHA-256 of the resolved config's TOML text.
    pub fn hash(&self) -> Result<String> {
        let text = self.resolved()?.to_toml_string()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string())
    }

    /// Model dimensions completed from a corpus.
    pub fn model_config(&self, corpus: &Corpus) -> ModelConfig {
        ModelConfig {
            vocab: corpus.vocab_size(),
            speakers: if self.use_speaker { corpus.config.speakers } else { 0 },
            feature_dim: corpus.config.feature_dim,
            ..self.model.clone()
        }
        .for_mesh(&corpus.mesh)
    }
}

/// Prefixes a CSV body with the provenance line.
pub fn stamp(hash: &str, body: &str) -> String {
    format!("# config_hash={hash}\n{body}")
}

fn write_stamped(path: &Path, hash: &str, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, stamp(hash, body))?;
    Ok(())
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// One row of the comparison grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    /// `None` is the direct-regression baseline.
    pub keys: Option<KeySource>,
    pub audio_guidance: bool,
}

impl Variant {
    pub const BASELINE: Variant = Variant {
        keys: None,
        audio_guidance: true,
    };

    pub fn keys(keys: KeySource) -> Self {
        Variant {
            keys: Some(keys),
            audio_guidance: true,
        }
    }

    pub fn full() -> Self {
        Self::keys(KeySource::Phoneme)
    }

    pub fn no_audio() -> Self {
        Variant {
            keys: Some(KeySource::Phoneme),
            audio_guidance: false,
        }
    }

    pub fn name(&self) -> String {
        match (self.keys, self.audio_guidance) {
            (None, _) => "baseline".into(),
            (Some(KeySource::Phoneme), true) => "full".into(),
            (Some(k), true) => k.to_string(),
            (Some(k), false) => format!("{k}+no-audio"),
        }
    }
}

/// Index source the key-motion model of a variant is trained with.
pub fn training_keys(k: KeySource) -> KeySource {
    match k {
        KeySource::Uniform(s) => KeySource::Uniform(s),
        _ => KeySource::Phoneme,
    }
}

/// Key source the completion model of a variant is trained with. Only
/// integration mode differs from [`training_keys`]: its completion model
/// learns from keys read off the baseline's predictions.
pub fn completion_keys(k: KeySource) -> KeySource {
    match k {
        KeySource::BaselineExtracted => KeySource::BaselineExtracted,
        k => training_keys(k),
    }
}

fn model_seed(seed: u64, slot: u64) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(slot)
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.train.clone()
    }
}

/// Trains a key-motion model for one seed; weights come back rounded to
/// checkpoint precision so in-memory and reloaded models agree.
pub fn train_lkma(corpus: &Corpus, cfg: &ExperimentConfig, seed: u64, keys: KeySource) -> Result<(LkmaModel, TrainLog)> {
    let mc = ModelConfig {
        seed: model_seed(seed, 1),
        ..cfg.model_config(corpus)
    };
    let mut model = LkmaModel::new(mc)?;
    let train = items(&corpus.train, keys, cfg.use_speaker)?;
    let val = items(&corpus.val, keys, cfg.use_speaker)?;
    let log = fit(&mut model, &train, &val, &train_config(cfg, seed))?;
    model.round_to_checkpoint()?;
    Ok((model, log))
}

/// Trains a completion model; with `frozen` set its audio latents come from
/// that model's encoder instead of its own. `KeySource::BaselineExtracted`
/// needs `donor`, whose predictions supply the key motions.
#[allow(clippy::too_many_arguments)]
pub fn train_cmc(
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    seed: u64,
    keys: KeySource,
    audio_guidance: bool,
    frozen: Option<&LkmaModel>,
    donor: Option<&BaselineModel>,
) -> Result<(CmcModel, TrainLog)> {
    let mc = ModelConfig {
        seed: model_seed(seed, 2),
        audio_guidance,
        ..cfg.model_config(corpus)
    };
    let mut model = CmcModel::new(mc)?;
    let mut train = items(&corpus.train, keys, cfg.use_speaker)?;
    let mut val = items(&corpus.val, keys, cfg.use_speaker)?;
    if let Some(l) = frozen {
        attach_frozen_audio(l, &mut train)?;
        attach_frozen_audio(l, &mut val)?;
    }
    match (keys, donor) {
        (KeySource::BaselineExtracted, Some(b)) => {
            for (items, samples) in [(&mut train, &corpus.train), (&mut val, &corpus.val)] {
                for (item, s) in items.iter_mut().zip(samples) {
                    item.key_source = Some(predict_baseline(b, s)?.frames);
                }
            }
        }
        (KeySource::BaselineExtracted, None) => {
            return Err(Error::Config("baseline-extracted keys need a trained baseline".into()));
        }
        _ => {}
    }
    let log = fit(&mut model, &train, &val, &train_config(cfg, seed))?;
    model.round_to_checkpoint()?;
    Ok((model, log))
}

pub fn train_baseline(corpus: &Corpus, cfg: &ExperimentConfig, seed: u64) -> Result<(BaselineModel, TrainLog)> {
    let mc = ModelConfig {
        seed: model_seed(seed, 3),
        ..cfg.model_config(corpus)
    };
    let mut model = BaselineModel::new(mc)?;
    let train = items(&corpus.train, KeySource::Phoneme, cfg.use_speaker)?;
    let val = items(&corpus.val, KeySource::Phoneme, cfg.use_speaker)?;
    let log = fit(&mut model, &train, &val, &train_config(cfg, seed))?;
    model.round_to_checkpoint()?;
    Ok((model, log))
}

/// Loss log path written next to a checkpoint: `<stem>_loss.csv`.
pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    checkpoint.with_file_name(format!("{stem}_loss.csv"))
}

/// Writes a stamped loss log, creating parent directories.
pub fn write_loss_log(path: &Path, hash: &str, log: &TrainLog) -> Result<()> {
    write_stamped(path, hash, &log.to_csv())
}

/// A corpus plus lazily trained models, shared by every variant of a run.
pub struct Lab {
    pub config: ExperimentConfig,
    pub hash: String,
    pub corpus: Corpus,
    pub out: PathBuf,
    lkma: HashMap<(u64, KeySource), LkmaModel>,
    cmc: HashMap<(u64, KeySource, bool), CmcModel>,
    baseline: HashMap<u64, BaselineModel>,
}

impl Lab {
    /// Generates the corpus and writes config, manifest and corpus into `out`.
    pub fn new(config: &ExperimentConfig, out: &Path) -> Result<Self> {
        let resolved = config.resolved()?;
        let hash = config.hash()?;
        let corpus = generate_corpus(&resolved.corpus)?;
        Self::with_corpus(resolved, hash, corpus, out)
    }

    pub fn with_corpus(config: ExperimentConfig, hash: String, corpus: Corpus, out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        fs::write(out.join("config.toml"), config.to_toml_string()?)?;
        let manifest = serde_json::json!({ "config_hash": hash, "name": config.name, "seeds": config.seeds });
        fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        save_corpus(&corpus, &out.join("corpus"))?;
        Ok(Lab {
            config,
            hash,
            corpus,
            out: out.to_path_buf(),
            lkma: HashMap::new(),
            cmc: HashMap::new(),
            baseline: HashMap::new(),
        })
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed_{seed}"))
    }

    fn finish(&self, seed: u64, name: &str, log: &TrainLog, save: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let dir = self.seed_dir(seed);
        write_stamped(&dir.join("logs").join(format!("{name}_loss.csv")), &self.hash, &log.to_csv())?;
        save(&dir.join("checkpoints").join(format!("{name}.kmtf")))
    }

    fn stage<T>(&self, stage: &str, r: Result<T>) -> Result<T> {
        r.map_err(|e| Error::Stage {
            stage: stage.to_string(),
            config_hash: self.hash.clone(),
            source: Box::new(e),
        })
    }

    pub fn lkma(&mut self, seed: u64, keys: KeySource) -> Result<&LkmaModel> {
        let keys = training_keys(keys);
        if !self.lkma.contains_key(&(seed, keys)) {
            let name = format!("lkma_{}", slug(&keys.to_string()));
            let r = train_lkma(&self.corpus, &self.config, seed, keys)
                .and_then(|(m, log)| self.finish(seed, &name, &log, |p| m.save(p, &self.hash)).map(|_| m));
            let model = self.stage(&format!("train {name} (seed {seed})"), r)?;
            self.lkma.insert((seed, keys), model);
        }
        Ok(&self.lkma[&(seed, keys)])
    }

    pub fn cmc(&mut self, seed: u64, keys: KeySource, audio_guidance: bool) -> Result<&CmcModel> {
        let keys = completion_keys(keys);
        let id = (seed, keys, audio_guidance);
        if !self.cmc.contains_key(&id) {
            let frozen = match self.config.cmc_audio {
                CmcAudio::LkmaEncoder => Some(self.lkma(seed, keys)?.clone()),
                CmcAudio::Own => None,
            };
            let donor = match keys {
                KeySource::BaselineExtracted => Some(self.baseline(seed)?.clone()),
                _ => None,
            };
            let suffix = if audio_guidance { "" } else { "_no-audio" };
            let name = format!("cmc_{}{suffix}", slug(&keys.to_string()));
            let r = train_cmc(&self.corpus, &self.config, seed, keys, audio_guidance, frozen.as_ref(), donor.as_ref())
                .and_then(|(m, log)| self.finish(seed, &name, &log, |p| m.save(p, &self.hash)).map(|_| m));
            let model = self.stage(&format!("train {name} (seed {seed})"), r)?;
            self.cmc.insert(id, model);
        }
        Ok(&self.cmc[&id])
    }

    pub fn baseline(&mut self, seed: u64) -> Result<&BaselineModel> {
        if !self.baseline.contains_key(&seed) {
            let r = train_baseline(&self.corpus, &self.config, seed)
                .and_then(|(m, log)| self.finish(seed, "baseline", &log, |p| m.save(p, &self.hash)).map(|_| m));
            let model = self.stage(&format!("train baseline (seed {seed})"), r)?;
            self.baseline.insert(seed, model);
        }
        Ok(&self.baseline[&seed])
    }

    /// Trains whatever `variant` needs for `seed`.
    pub fn prepare(&mut self, variant: Variant, seed: u64) -> Result<()> {
        match variant.keys {
            None => {
                self.baseline(seed)?;
            }
            Some(k) => {
                self.lkma(seed, k)?;
                self.cmc(seed, k, variant.audio_guidance)?;
                if k == KeySource::BaselineExtracted {
                    self.baseline(seed)?;
                }
            }
        }
        Ok(())
    }

    /// Inference pipeline of a keyed variant, training it first if needed.
    pub fn pipeline(&mut self, variant: Variant, seed: u64) -> Result<Pipeline<'_>> {
        let k = variant.keys.ok_or_else(|| Error::Config("the baseline has no key-motion pipeline".into()))?;
        self.prepare(variant, seed)?;
        Ok(self.prepared_pipeline(k, variant.audio_guidance, seed))
    }

    fn prepared_pipeline(&self, k: KeySource, audio_guidance: bool, seed: u64) -> Pipeline<'_> {
        Pipeline {
            lkma: &self.lkma[&(seed, training_keys(k))],
            cmc: &self.cmc[&(seed, completion_keys(k), audio_guidance)],
            cmc_audio: self.config.cmc_audio,
            baseline: (k == KeySource::BaselineExtracted).then(|| &self.baseline[&seed]),
        }
    }

    /// Test-split predictions of a prepared variant.
    pub fn predict(&self, variant: Variant, seed: u64, sample: &Sample) -> Result<MotionSequence> {
        let Some(k) = variant.keys else {
            return predict_baseline(&self.baseline[&seed], sample);
        };
        self.prepared_pipeline(k, variant.audio_guidance, seed).predict_sample(sample, k)
    }

    /// Trains, predicts the test split, saves predictions and metrics.
    pub fn evaluate(&mut self, variant: Variant, seed: u64) -> Result<MetricReport> {
        self.prepare(variant, seed)?;
        let name = slug(&variant.name());
        let r = (|| {
            let dir = self.seed_dir(seed);
            let mut pairs = Vec::with_capacity(self.corpus.test.len());
            for s in &self.corpus.test {
                // metrics are computed on exactly what is written to disk
                let mut pred = self.predict(variant, seed, s)?;
                pred.frames = to_f32_precision(&pred.frames);
                pred.save(&dir.join("predictions").join(&name).join(&s.id).join("motion.kmtf"), s.speaker)?;
                pairs.push((s.id.clone(), pred, s.motion.clone()));
            }
            let mut report = evaluate_corpus(&pairs, &self.corpus.mesh, self.config.metrics)?;
            report.meta = vec![
                ("variant".into(), variant.name()),
                ("seed".into(), seed.to_string()),
                ("config_hash".into(), self.hash.clone()),
                ("corpus".into(), self.corpus.mesh.name.clone()),
            ];
            let mdir = dir.join("metrics").join(&name);
            write_stamped(&mdir.join("per_sequence.csv"), &self.hash, &report.sequences_csv())?;
            write_stamped(&mdir.join("aggregate.csv"), &self.hash, &report.aggregate_csv())?;
            Ok(report)
        })();
        self.stage(&format!("evaluate {} (seed {seed})", variant.name()), r)
    }

    /// Mean `|I| / N` of a key source over the test split.
    pub fn key_fraction(&self, keys: KeySource) -> Result<f64> {
        key_fraction(&self.corpus.test, keys)
    }
}

pub fn key_fraction(samples: &[Sample], keys: KeySource) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += keys.indices(s)?.len() as f64 / s.motion.n_frames() as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub seed: u64,
    pub lve: f64,
    pub fdd: f64,
    pub key_fraction: f64,
}

fn results_csv(rows: &[VariantResult]) -> String {
    let mut s = String::from("variant,seed,lve,fdd,key_fraction\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.variant, r.seed, r.lve, r.fdd, r.key_fraction);
    }
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    for v in order {
        let (lve, fdd, kf) = means(rows, v);
        let _ = writeln!(s, "{v},mean,{lve},{fdd},{kf}");
    }
    s
}

fn means(rows: &[VariantResult], variant: &str) -> (f64, f64, f64) {
    let sel: Vec<&VariantResult> = rows.iter().filter(|r| r.variant == variant).collect();
    let k = sel.len().max(1) as f64;
    (
        sel.iter().map(|r| r.lve).sum::<f64>() / k,
        sel.iter().map(|r| r.fdd).sum::<f64>() / k,
        sel.iter().map(|r| r.key_fraction).sum::<f64>() / k,
    )
}

fn configured_variant(cfg: &ExperimentConfig) -> Variant {
    Variant {
        keys: Some(cfg.keys),
        audio_guidance: cfg.audio_guidance,
    }
}

fn run_variants(lab: &mut Lab, variants: &[Variant]) -> Result<Vec<VariantResult>> {
    let mut rows = Vec::new();
    for &seed in &lab.config.seeds.clone() {
        for &v in variants {
            let report = lab.evaluate(v, seed)?;
            let kf = match v.keys {
                Some(k) => lab.key_fraction(k)?,
                None => 0.0,
            };
            rows.push(VariantResult {
                variant: v.name(),
                seed,
                lve: report.lve,
                fdd: report.fdd,
                key_fraction: kf,
            });
        }
    }
    Ok(rows)
}

/// The configured variant and the direct baseline over every seed; writes
/// `results.csv` with per-seed and mean rows.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<Vec<VariantResult>> {
    let mut lab = Lab::new(config, out)?;
    let variants = [configured_variant(&lab.config), Variant::BASELINE];
    let rows = run_variants(&mut lab, &variants)?;
    write_stamped(&out.join("results.csv"), &lab.hash, &results_csv(&rows))?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub hash: String,
    pub rows: Vec<VariantResult>,
    pub verdicts: Vec<Verdict>,
}

impl SuiteReport {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn mean_lve(&self, variant: &str) -> f64 {
        means(&self.rows, variant).0
    }

    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }

    pub fn verdicts_csv(&self) -> String {
        let mut s = String::from("verdict,lhs,rhs,pass\n");
        for v in &self.verdicts {
            let _ = writeln!(s, "{},{},{},{}", v.name, v.lhs, v.rhs, v.pass);
        }
        s
    }
}

pub const VERDICT_PIPELINE: &str = "full < baseline by >=5% on LVE";
pub const VERDICT_LOCALIZATION: &str = "phoneme < uniform:3 on LVE";
pub const VERDICT_BUDGET: &str = "phoneme key count within 15% of uniform:3";
pub const VERDICT_INTEGRATION: &str = "baseline-extracted <= baseline on LVE";
pub const VERDICT_AUDIO: &str = "no-audio > full by >=10% on LVE";
pub const VERDICT_OFFSET: &str = "offset within 10% of full on LVE";

/// The variant grid of the ablation suite, in run order.
pub fn suite_variants(cfg: &ExperimentConfig) -> Vec<Variant> {
    let mut v = vec![Variant::full(), Variant::BASELINE];
    let mut strides = cfg.strides.clone();
    if !strides.contains(&3) {
        strides.push(3);
    }
    v.extend(strides.iter().map(|&s| Variant::keys(KeySource::Uniform(s))));
    v.push(Variant::keys(KeySource::BaselineExtracted));
    v.push(Variant::no_audio());
    v.push(Variant::keys(KeySource::PhonemeOffset(cfg.offset)));
    v
}

/// Ordering verdicts over seed means.
pub fn verdicts(rows: &[VariantResult], offset: i64) -> Vec<Verdict> {
    let lve = |v: &str| means(rows, v).0;
    let full = lve("full");
    let base = lve("baseline");
    let uni = lve("uniform:3");
    let off = lve(&KeySource::PhonemeOffset(offset).to_string());
    let kf_ph = means(rows, "full").2;
    let kf_u = means(rows, "uniform:3").2;
    vec![
        Verdict {
            name: VERDICT_PIPELINE.into(),
            lhs: full,
            rhs: base,
            pass: full <= 0.95 * base,
        },
        Verdict {
            name: VERDICT_LOCALIZATION.into(),
            lhs: full,
            rhs: uni,
            pass: full < uni,
        },
        Verdict {
            name: VERDICT_BUDGET.into(),
            lhs: kf_ph,
            rhs: kf_u,
            pass: (kf_ph - kf_u).abs() <= 0.15 * kf_u,
        },
        Verdict {
            name: VERDICT_INTEGRATION.into(),
            lhs: lve("baseline-extracted"),
            rhs: base,
            pass: lve("baseline-extracted") <= base,
        },
        Verdict {
            name: VERDICT_AUDIO.into(),
            lhs: lve("phoneme+no-audio"),
            rhs: full,
            pass: lve("phoneme+no-audio") >= 1.1 * full,
        },
        Verdict {
            name: VERDICT_OFFSET.into(),
            lhs: off,
            rhs: full,
            pass: (off - full).abs() < 0.1 * full,
        },
    ]
}

/// Every suite variant over every seed; writes `comparison.csv` and `verdicts.csv`.
pub fn run_ablation_suite(config: &ExperimentConfig, out: &Path) -> Result<SuiteReport> {
    let mut lab = Lab::new(config, out)?;
    run_suite_in(&mut lab)
}

pub fn run_suite_in(lab: &mut Lab) -> Result<SuiteReport> {
    let variants = suite_variants(&lab.config);
    let rows = run_variants(lab, &variants)?;
    for v in &variants {
        let n = rows.iter().filter(|r| r.variant == v.name()).count();
        if n != lab.config.seeds.len() {
            return Err(Error::invalid(format!("variant {} ran for {n} of {} seeds", v.name(), lab.config.seeds.len())));
        }
    }
    let report = SuiteReport {
        hash: lab.hash.clone(),
        verdicts: verdicts(&rows, lab.config.offset),
        rows,
    };
    write_stamped(&lab.out.join("comparison.csv"), &lab.hash, &results_csv(&report.rows))?;
    write_stamped(&lab.out.join("verdicts.csv"), &lab.hash, &report.verdicts_csv())?;
    Ok(report)
}

/// Inference stages in the order they run.
pub const STAGES: [&str; 4] = ["featurize", "localize", "lkma", "cmc"];

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    /// Milliseconds per clip for each stage, then the end-to-end total.
    pub samples: BTreeMap<String, Vec<f64>>,
}

fn p95(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let i = ((s.len() as f64 * 0.95).ceil() as usize).clamp(1, s.len()) - 1;
    s[i]
}

impl TimingReport {
    pub fn mean(&self, stage: &str) -> f64 {
        let v = &self.samples[stage];
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,mean_ms,p95_ms,clips\n");
        for name in STAGES.iter().copied().chain(["total"]) {
            let v = &self.samples[name];
            let _ = writeln!(s, "{name},{:.4},{:.4},{}", self.mean(name), p95(v), v.len());
        }
        s
    }
}

/// A deterministic test waveform: one tone per phone, pitch set by the phone id.
pub fn tone_waveform(sample: &Sample, sample_rate: f64) -> AudioSource {
    let duration = sample.alignment.duration;
    let n = (duration * sample_rate).round() as usize;
    let mut samples = vec![0.0; n.max(1)];
    for (p, &tok) in sample.alignment.phones.iter().zip(&sample.alignment.tokens) {
        let a = (p.start * sample_rate) as usize;
        let b = ((p.end * sample_rate) as usize).min(n);
        let f = 150.0 + 40.0 * tok as f64;
        for (i, x) in samples.iter_mut().enumerate().take(b).skip(a) {
            *x = 0.3 * (2.0 * std::f64::consts::PI * f * i as f64 / sample_rate).sin();
        }
    }
    AudioSource::Waveform { samples, sample_rate }
}

/// Times featurize, localize, key prediction and completion on each sample,
/// starting from a synthesized waveform of the sample's duration.
pub fn run_timing(pipeline: &Pipeline<'_>, samples: &[Sample], fps: f64) -> Result<TimingReport> {
    let mut out: BTreeMap<String, Vec<f64>> = STAGES.iter().chain(&["total"]).map(|s| (s.to_string(), Vec::new())).collect();
    let d = pipeline.lkma.config.feature_dim;
    for s in samples {
        let wave = tone_waveform(s, 16000.0);
        let speaker = Some(s.speaker);
        let t0 = Instant::now();
        let features = featurize(&wave, fps, d)?;
        let t1 = Instant::now();
        let idx = locate_key_frames(&s.alignment, fps, features.n_frames())?;
        let t2 = Instant::now();
        let key = pipeline.key_motions(&features.features, speaker, &idx)?;
        let t3 = Instant::now();
        let audio = pipeline.audio_latent(&features.features, speaker)?;
        let y = pipeline.cmc.complete(&audio, &key)?;
        let t4 = Instant::now();
        if !y.is_finite() {
            return Err(Error::invalid(format!("non-finite prediction for {}", s.id)));
        }
        let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
        for (name, v) in STAGES.iter().zip([ms(t0, t1), ms(t1, t2), ms(t2, t3), ms(t3, t4)]) {
            out.get_mut(*name).expect("stage").push(v);
        }
        out.get_mut("total").expect("total").push(ms(t0, t4));
    }
    Ok(TimingReport { samples: out })
}

fn find_files(dir: &Path, name: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_files(&p, name, out)?;
        } else if p.file_name().and_then(|f| f.to_str()).is_some_and(|f| f.ends_with(name)) {
            out.push(p);
        }
    }
    Ok(())
}

fn read_hash(run: &Path) -> String {
    fs::read_to_string(run.join("manifest.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["config_hash"].as_str().map(str::to_string))
        .unwrap_or_else(|| "unknown".into())
}

fn strip_stamp(text: &str) -> &str {
    match text.strip_prefix("# config_hash=") {
        Some(rest) => rest.split_once('\n').map_or("", |(_, body)| body),
        None => text,
    }
}

/// Writes `plots/loss_curves.csv` and, when predictions exist, a lip-offset
/// curve with key markers and an error heatmap for the first test sample of
/// the first variant found. Returns the written paths.
pub fn emit_plots(run: &Path) -> Result<Vec<PathBuf>> {
    if !run.is_dir() {
        return Err(Error::invalid(format!("{} is not a run directory", run.display())));
    }
    let hash = read_hash(run);
    let mut logs = Vec::new();
    find_files(run, "_loss.csv", &mut logs)?;
    if logs.is_empty() {
        return Err(Error::invalid(format!("{} holds no loss logs", run.display())));
    }
    let plots = run.join("plots");
    let mut written = Vec::new();
    let mut body = String::from("run,model,epoch,rec,vel,lat,ctc,total,split\n");
    for p in &logs {
        let rel = p.strip_prefix(run).unwrap_or(p);
        let run_name = rel.components().next().map(|c| c.as_os_str().to_string_lossy().into_owned()).unwrap_or_default();
        let model = p.file_name().and_then(|f| f.to_str()).unwrap_or("").trim_end_matches("_loss.csv").to_string();
        let text = fs::read_to_string(p)?;
        for line in strip_stamp(&text).lines().skip(1) {
            let _ = writeln!(body, "{run_name},{model},{line}");
        }
    }
    let path = plots.join("loss_curves.csv");
    write_stamped(&path, &hash, &body)?;
    written.push(path);

    let mut preds = Vec::new();
    find_files(run, "motion.kmtf", &mut preds)?;
    let preds: Vec<PathBuf> = preds.into_iter().filter(|p| p.components().any(|c| c.as_os_str() == "predictions")).collect();
    if let (Some(pred_path), true) = (preds.first(), run.join("corpus").is_dir()) {
        let corpus = load_corpus(&run.join("corpus"))?;
        let id = pred_path
            .parent()
            .and_then(|d| d.file_name())
            .and_then(|f| f.to_str())
            .unwrap_or_default()
            .to_string();
        let sample = corpus
            .test
            .iter()
            .chain(&corpus.val)
            .chain(&corpus.train)
            .find(|s| s.id == id)
            .ok_or_else(|| Error::invalid(format!("prediction {id} has no corpus sample")))?;
        let (pred, _) = MotionSequence::load(pred_path)?;
        let keys = locate_key_frames(&sample.alignment, sample.motion.fps, sample.motion.n_frames())?;
        let gt_curve = lip_offset_curve(&sample.motion, &corpus.mesh)?;
        let pred_curve = lip_offset_curve(&pred, &corpus.mesh)?;
        let mut curve = String::from("frame,gt_lip_offset,pred_lip_offset,is_key\n");
        for (line, p) in curve_csv(&gt_curve, &keys).lines().skip(1).zip(&pred_curve) {
            let (t, rest) = line.split_once(',').unwrap_or((line, ""));
            let (g, k) = rest.split_once(',').unwrap_or((rest, "0"));
            let _ = writeln!(curve, "{t},{g},{p},{k}");
        }
        let path = plots.join(format!("lip_curve_{id}.csv"));
        write_stamped(&path, &hash, &curve)?;
        written.push(path);
        let path = plots.join(format!("heatmap_{id}.csv"));
        write_stamped(&path, &hash, &heatmap_csv(&error_map(&pred, &sample.motion)?))?;
        written.push(path);
    }
    Ok(written)
}

/// Motion files under `dir`, keyed by their parent directory name.
pub fn collect_motions(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut files = Vec::new();
    find_files(dir, "motion.kmtf", &mut files)?;
    let mut out = BTreeMap::new();
    for f in files {
        let id = f
            .parent()
            .and_then(|d| d.file_name())
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        if out.insert(id.clone(), f).is_some() {
            return Err(Error::invalid(format!("two motion files for sequence {id} under {}", dir.display())));
        }
    }
    Ok(out)
}

/// Loads a prediction (`motion.kmtf` + sidecar) or a corpus sample's motion
/// (`motion.kmtf` + `meta.json`).
pub fn load_motion(path: &Path) -> Result<MotionSequence> {
    let dir = path.parent().unwrap_or(Path::new("."));
    if !crate::container::sidecar_path(path).is_file() && dir.join("meta.json").is_file() {
        let id = dir.file_name().and_then(|f| f.to_str()).unwrap_or_default();
        return Ok(load_sample(dir, id)?.motion);
    }
    Ok(MotionSequence::load(path)?.0)
}

/// Audio features from a standalone container or a corpus sample directory.
pub fn load_features(path: &Path) -> Result<AudioFeatureSequence> {
    let dir = path.parent().unwrap_or(Path::new("."));
    if !crate::container::sidecar_path(path).is_file() && dir.join("meta.json").is_file() {
        let id = dir.file_name().and_then(|f| f.to_str()).unwrap_or_default();
        return Ok(load_sample(dir, id)?.audio);
    }
    AudioFeatureSequence::load(path)
}

/// Metrics of every ground-truth sequence under `gt` against the prediction
/// with the same sequence id under `pred`.
pub fn evaluate_dirs(pred: &Path, gt: &Path, mesh: &MeshSpec, opts: MetricOptions) -> Result<MetricReport> {
    let preds = collect_motions(pred)?;
    let gts = collect_motions(gt)?;
    if gts.is_empty() {
        return Err(Error::invalid(format!("no motion.kmtf under {}", gt.display())));
    }
    let mut pairs = Vec::new();
    for (id, g) in &gts {
        let p = preds.get(id).ok_or_else(|| Error::MissingFile {
            sample: id.clone(),
            path: pred.join(id).join("motion.kmtf"),
        })?;
        pairs.push((id.clone(), load_motion(p)?, load_motion(g)?));
    }
    evaluate_corpus(&pairs, mesh, opts)
}

/// Reads a config that may be absent (defaults), applying the seed override.
pub fn load_or_default(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => ExperimentConfig::default().with_env_seed(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            seeds: vec![0],
            corpus: CorpusConfig {
                n_sequences: 5,
                vertex_count: 40,
                feature_dim: 8,
                min_phones: 3,
                max_phones: 5,
                ..Default::default()
            },
            model: ModelConfig {
                d: 16,
                f: 16,
                ..Default::default()
            },
            train: TrainConfig {
                epochs: 1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn config_toml_round_trip_and_hash() {
        let c = ExperimentConfig::default();
        let text = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
        let partial = ExperimentConfig::from_toml_str("keys = \"uniform:3\"\n[train]\nepochs = 7\n").unwrap();
        assert_eq!(partial.keys, KeySource::Uniform(3));
        assert_eq!(partial.train.epochs, 7);
        assert_eq!(partial.train.adam.lr, 1e-4);
        assert_eq!(c.hash().unwrap(), ExperimentConfig::default().hash().unwrap());
        assert_ne!(c.hash().unwrap(), partial.hash().unwrap());
        assert_eq!(c.hash().unwrap().len(), 16);
        assert!(ExperimentConfig::from_toml_str("keys = \"sometimes\"").is_err());
    }

    #[test]
    fn variant_names() {
        assert_eq!(Variant::full().name(), "full");
        assert_eq!(Variant::no_audio().name(), "phoneme+no-audio");
        assert_eq!(Variant::BASELINE.name(), "baseline");
        assert_eq!(Variant::keys(KeySource::PhonemeOffset(1)).name(), "phoneme+offset:1");
        let names: Vec<String> = suite_variants(&ExperimentConfig::default()).iter().map(Variant::name).collect();
        assert_eq!(
            names,
            ["full", "baseline", "uniform:2", "uniform:3", "uniform:4", "baseline-extracted", "phoneme+no-audio", "phoneme+offset:1"]
        );
    }

    #[test]
    fn verdict_arithmetic() {
        let row = |v: &str, lve: f64, kf: f64| VariantResult {
            variant: v.into(),
            seed: 0,
            lve,
            fdd: 0.0,
            key_fraction: kf,
        };
        let rows = vec![
            row("full", 10.0, 0.38),
            row("baseline", 11.0, 0.0),
            row("uniform:3", 10.5, 0.35),
            row("baseline-extracted", 11.0, 0.38),
            row("phoneme+no-audio", 11.0, 0.38),
            row("phoneme+offset:1", 10.9, 0.38),
        ];
        let v = verdicts(&rows, 1);
        let get = |n: &str| v.iter().find(|x| x.name == n).unwrap().pass;
        assert!(get(VERDICT_PIPELINE));
        assert!(get(VERDICT_LOCALIZATION));
        assert!(get(VERDICT_BUDGET));
        assert!(get(VERDICT_INTEGRATION));
        assert!(get(VERDICT_AUDIO));
        assert!(get(VERDICT_OFFSET));
        let rows2: Vec<_> = rows.iter().cloned().map(|mut r| {
            if r.variant == "phoneme+offset:1" {
                r.lve = 11.5;
            }
            r
        }).collect();
        assert!(!verdicts(&rows2, 1).iter().find(|x| x.name == VERDICT_OFFSET).unwrap().pass);
    }

    #[test]
    fn experiment_is_deterministic_and_stamped() {
        let cfg = tiny_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_experiment(&cfg, a.path()).unwrap();
        let rb = run_experiment(&cfg, b.path()).unwrap();
        assert_eq!(ra, rb);
        let hash = cfg.hash().unwrap();
        for rel in ["results.csv", "seed_0/logs/lkma_phoneme_loss.csv", "seed_0/metrics/full/per_sequence.csv"] {
            let x = fs::read_to_string(a.path().join(rel)).unwrap();
            assert_eq!(x, fs::read_to_string(b.path().join(rel)).unwrap(), "{rel}");
            assert!(x.starts_with(&format!("# config_hash={hash}\n")), "{rel}");
        }
        let results = fs::read_to_string(a.path().join("results.csv")).unwrap();
        assert!(results.contains("\nfull,0,") && results.contains("\nbaseline,mean,"));

        let lkma = LkmaModel::load(&a.path().join("seed_0/checkpoints/lkma_phoneme.kmtf")).unwrap();
        let cmc = CmcModel::load(&a.path().join("seed_0/checkpoints/cmc_phoneme.kmtf")).unwrap();
        let corpus = load_corpus(&a.path().join("corpus")).unwrap();
        let s = &corpus.test[0];
        let pred = Pipeline::new(&lkma, &cmc).predict_sample(s, KeySource::Phoneme).unwrap();
        let (saved, _) = MotionSequence::load(&a.path().join("seed_0/predictions/full").join(&s.id).join("motion.kmtf")).unwrap();
        assert!(pred.frames.max_abs_diff(&saved.frames) < 1e-4);

        let plots = emit_plots(a.path()).unwrap();
        assert_eq!(plots.len(), 3);
        let curve = fs::read_to_string(&plots[1]).unwrap();
        assert_eq!(strip_stamp(&curve).lines().count(), 1 + s.motion.n_frames());
        let report = evaluate_dirs(&a.path().join("seed_0/predictions/full"), &a.path().join("corpus/test"), &corpus.mesh, MetricOptions::default()).unwrap();
        let csv = fs::read_to_string(a.path().join("seed_0/metrics/full/aggregate.csv")).unwrap();
        assert!(csv.contains(&format!("lve,{}", report.lve)));
    }

    #[test]
    fn plots_need_a_run() {
        let d = tempfile::tempdir().unwrap();
        assert!(emit_plots(d.path()).is_err());
        assert!(emit_plots(&d.path().join("absent")).is_err());
    }

    #[test]
    fn timing_accounts_for_every_stage() {
        let cfg = tiny_config();
        let corpus = generate_corpus(&cfg.resolved().unwrap().corpus).unwrap();
        let mc = cfg.model_config(&corpus);
        let lkma = LkmaModel::new(mc.clone()).unwrap();
        let cmc = CmcModel::new(mc).unwrap();
        let t = run_timing(&Pipeline::new(&lkma, &cmc), &corpus.train, 25.0).unwrap();
        let sum: f64 = STAGES.iter().map(|s| t.mean(s)).sum();
        assert!((sum - t.mean("total")).abs() <= 0.05 * t.mean("total") + 1e-3);
        let csv = t.to_csv();
        let stages: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(stages, ["featurize", "localize", "lkma", "cmc", "total"]);
    }
}
