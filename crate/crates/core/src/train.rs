//! Seeded single-sample training loops for the key-motion model, the
//! completion model and the direct-regression baseline.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{locate_key_frames, offset_indices, uniform_sample_indices};
use crate::cmc::{motion_loss, BaselineModel, CmcModel};
use crate::error::{Error, Result};
use crate::lkma::{LkmaModel, LossWeights};
use crate::nn::{Adam, AdamConfig, Graph, Mat, ParamStore, Var};
use crate::synth::Sample;
use crate::types::{KeyMotionSet, SpeakerId};

/// Where key indices come from. Written as `phoneme`, `uniform:<stride>`,
/// `phoneme+offset:<delta>` or `baseline-extracted` in configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum KeySource {
    /// Start and end frame of every phone.
    Phoneme,
    /// Every `stride`-th frame plus the last one.
    Uniform(usize),
    /// Phone boundaries shifted by a signed frame count.
    PhonemeOffset(i64),
    /// Phone boundaries, with key motions read off a baseline prediction.
    BaselineExtracted,
}

impl KeySource {
    pub fn indices(&self, sample: &Sample) -> Result<Vec<usize>> {
        let n = sample.motion.n_frames();
        let fps = sample.motion.fps;
        match *self {
            KeySource::Phoneme | KeySource::BaselineExtracted => locate_key_frames(&sample.alignment, fps, n),
            KeySource::Uniform(stride) => uniform_sample_indices(n, stride),
            KeySource::PhonemeOffset(delta) => Ok(offset_indices(&locate_key_frames(&sample.alignment, fps, n)?, delta, n)),
        }
    }
}

impl fmt::Display for KeySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeySource::Phoneme => f.write_str("phoneme"),
            KeySource::Uniform(k) => write!(f, "uniform:{k}"),
            KeySource::PhonemeOffset(d) => write!(f, "phoneme+offset:{d}"),
            KeySource::BaselineExtracted => f.write_str("baseline-extracted"),
        }
    }
}

impl FromStr for KeySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown key source {s:?}"));
        match s {
            "phoneme" => Ok(KeySource::Phoneme),
            "baseline-extracted" => Ok(KeySource::BaselineExtracted),
            _ => {
                if let Some(k) = s.strip_prefix("uniform:") {
                    let k: usize = k.parse().map_err(|_| bad())?;
                    if k == 0 {
                        return Err(Error::Config("uniform stride must be at least 1".into()));
                    }
                    Ok(KeySource::Uniform(k))
                } else if let Some(d) = s.strip_prefix("phoneme+offset:") {
                    Ok(KeySource::PhonemeOffset(d.parse().map_err(|_| bad())?))
                } else {
                    Err(bad())
                }
            }
        }
    }
}

impl TryFrom<String> for KeySource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<KeySource> for String {
    fn from(k: KeySource) -> String {
        k.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Seed of the epoch shuffle.
    pub seed: u64,
    /// Key-motion loss weights; unused by the other models.
    pub weights: LossWeights,
    /// Probability that a training step moves an aligner-derived key index one
    /// frame left or right, standing in for forced-alignment error.
    pub key_jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            adam: AdamConfig::default(),
            seed: 0,
            weights: LossWeights::default(),
            key_jitter: 0.3,
        }
    }
}

/// Everything one training step needs from a sample.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub features: Mat,
    pub speaker: Option<SpeakerId>,
    pub indices: Vec<usize>,
    /// Whether the indices come from an alignment and may be jittered.
    pub aligned: bool,
    pub gt: Mat,
    pub tokens: Vec<usize>,
    /// Precomputed audio latents; when set the completion model skips its own encoder.
    pub audio_latent: Option<Mat>,
    /// Sequence the completion model reads its key motions from; the ground
    /// truth when `None`.
    pub key_source: Option<Mat>,
}

impl TrainItem {
    pub fn from_sample(sample: &Sample, keys: KeySource, use_speaker: bool) -> Result<Self> {
        Ok(TrainItem {
            id: sample.id.clone(),
            features: sample.audio.features.clone(),
            speaker: use_speaker.then_some(sample.speaker),
            indices: keys.indices(sample)?,
            aligned: !matches!(keys, KeySource::Uniform(_)),
            gt: sample.motion.frames.clone(),
            tokens: sample.alignment.tokens.clone(),
            audio_latent: None,
            key_source: None,
        })
    }

    /// Each index moves by one frame with probability `p`, either way equally
    /// likely, clamped to the sequence; collisions merge.
    pub fn jittered(&self, p: f64, rng: &mut impl Rng) -> TrainItem {
        let n = self.gt.rows();
        let mut indices: Vec<usize> = self
            .indices
            .iter()
            .map(|&i| {
                if rng.gen::<f64>() >= p {
                    i
                } else if rng.gen::<bool>() {
                    (i + 1).min(n - 1)
                } else {
                    i.saturating_sub(1)
                }
            })
            .collect();
        // neighbours one frame apart can cross
        indices.sort_unstable();
        indices.dedup();
        TrainItem {
            indices,
            ..self.clone()
        }
    }

    pub fn key_motions(&self) -> Result<KeyMotionSet> {
        KeyMotionSet::from_sequence(self.key_source.as_ref().unwrap_or(&self.gt), &self.indices)
    }
}

pub fn items(samples: &[Sample], keys: KeySource, use_speaker: bool) -> Result<Vec<TrainItem>> {
    samples.iter().map(|s| TrainItem::from_sample(s, keys, use_speaker)).collect()
}

/// Mean loss components over one split for one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub rec: f64,
    pub vel: f64,
    pub lat: f64,
    pub ctc: f64,
    pub total: f64,
    pub split: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochLog>,
    /// Epoch whose parameters were kept; 0 means the initial ones.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn split_rows<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a EpochLog> + 'a {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,rec,vel,lat,ctc,total,split\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.epoch, r.rec, r.vel, r.lat, r.ctc, r.total, r.split);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// A model trainable by [`fit`].
pub trait Objective {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Total loss and the `[rec, vel, lat, ctc]` components it has.
    fn loss(&self, g: &mut Graph<'_>, item: &TrainItem, weights: &LossWeights) -> Result<(Var, [Option<Var>; 4])>;
}

impl Objective for LkmaModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn loss(&self, g: &mut Graph<'_>, item: &TrainItem, weights: &LossWeights) -> Result<(Var, [Option<Var>; 4])> {
        let (total, [rec, vel, lat, ctc]) =
            self.loss_graph(g, &item.features, item.speaker, &item.indices, &item.gt, &item.tokens, weights)?;
        Ok((total, [Some(rec), Some(vel), Some(lat), Some(ctc)]))
    }
}

impl Objective for CmcModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn loss(&self, g: &mut Graph<'_>, item: &TrainItem, _: &LossWeights) -> Result<(Var, [Option<Var>; 4])> {
        let key = item.key_motions()?;
        let audio = match &item.audio_latent {
            Some(a) => g.constant(a.clone()),
            None => self.encoder.forward(g, &item.features, item.speaker)?,
        };
        let y = self.complete_graph(g, audio, &key)?;
        let (total, [rec, vel]) = motion_loss(g, y, &item.gt)?;
        Ok((total, [Some(rec), Some(vel), None, None]))
    }
}

impl Objective for BaselineModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn loss(&self, g: &mut Graph<'_>, item: &TrainItem, _: &LossWeights) -> Result<(Var, [Option<Var>; 4])> {
        let (total, [rec, vel]) = self.loss_graph(g, &item.features, item.speaker, &item.gt)?;
        Ok((total, [Some(rec), Some(vel), None, None]))
    }
}

fn evaluate_item<M: Objective>(model: &M, item: &TrainItem, weights: &LossWeights) -> Result<[f64; 5]> {
    let mut g = Graph::new(model.params());
    let (total, parts) = model.loss(&mut g, item, weights)?;
    let mut out = [0.0; 5];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.map_or(0.0, |v| g.value(v).item());
    }
    out[4] = g.value(total).item();
    Ok(out)
}

fn mean_row(sums: [f64; 5], count: usize, epoch: usize, split: &str) -> EpochLog {
    let c = count.max(1) as f64;
    EpochLog {
        epoch,
        rec: sums[0] / c,
        vel: sums[1] / c,
        lat: sums[2] / c,
        ctc: sums[3] / c,
        total: sums[4] / c,
        split: split.to_string(),
    }
}

/// Mean loss components of `model` over `items` without updating anything.
pub fn evaluate_loss<M: Objective>(model: &M, items: &[TrainItem], weights: &LossWeights, epoch: usize, split: &str) -> Result<EpochLog> {
    let mut sums = [0.0; 5];
    for item in items {
        let v = evaluate_item(model, item, weights)?;
        if !v[4].is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                sample: item.id.clone(),
            });
        }
        for (s, x) in sums.iter_mut().zip(v) {
            *s += x;
        }
    }
    Ok(mean_row(sums, items.len(), epoch, split))
}

/// Adam with batch size 1 over a seeded per-epoch shuffle. Logs the mean
/// training loss of each epoch (accumulated during the pass) and the
/// validation loss after it, and leaves `model` holding the parameters with
/// the lowest validation total (training total when `val` is empty).
pub fn fit<M: Objective>(model: &mut M, train: &[TrainItem], val: &[TrainItem], cfg: &TrainConfig) -> Result<TrainLog> {
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut adam = Adam::new(model.params(), cfg.adam);
    if !(0.0..=1.0).contains(&cfg.key_jitter) {
        return Err(Error::Config(format!("key_jitter {} outside [0, 1]", cfg.key_jitter)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a17);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        for &i in &order {
            let jittered = (cfg.key_jitter > 0.0 && train[i].aligned).then(|| train[i].jittered(cfg.key_jitter, &mut jitter_rng));
            let item = jittered.as_ref().unwrap_or(&train[i]);
            let grads = {
                let mut g = Graph::new(model.params());
                let (total, parts) = model.loss(&mut g, item, &cfg.weights)?;
                let value = g.value(total).item();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        sample: item.id.clone(),
                    });
                }
                for (s, p) in sums.iter_mut().zip(parts) {
                    *s += p.map_or(0.0, |v| g.value(v).item());
                }
                sums[4] += value;
                g.backward(total)
            };
            adam.step(model.params_mut(), &grads)?;
        }
        let train_row = mean_row(sums, train.len(), epoch, "train");
        let mut score = train_row.total;
        log.rows.push(train_row);
        if !val.is_empty() {
            let row = evaluate_loss(model, val, &cfg.weights, epoch, "val")?;
            score = row.total;
            log.rows.push(row);
        }
        if best.as_ref().map_or(true, |(b, _)| score < *b) {
            best = Some((score, model.params().clone()));
            log.best_epoch = epoch;
        }
    }
    if let Some((_, store)) = best {
        *model.params_mut() = store;
    }
    Ok(log)
}

/// Audio latents of a frozen key-motion encoder, attached to each item.
pub fn attach_frozen_audio(lkma: &LkmaModel, items: &mut [TrainItem]) -> Result<()> {
    for item in items {
        item.audio_latent = Some(lkma.encode_audio(&item.features, item.speaker)?);
    }
    Ok(())
}
