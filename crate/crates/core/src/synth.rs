//! Procedural paired corpus: phone strings, audio-like features, alignments and
//! face motion whose articulation targets sit on phone boundaries.
//!
//! Motion model: during phone `i` the face eases (smoothstep) from the keypose
//! of phone `i - 1` to the keypose of phone `i`, reaching it at the phone's
//! end. A phone-specific bump, scaled by the phone's energy and shaped as
//! `sin(pi u)`, rides on top and vanishes at both boundaries. Energy is visible
//! in the audio features but not in the keyposes. Every sequence is padded with
//! a leading and trailing `sil` phone whose keypose is the rest pose.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{frame_count, read_alignment, write_alignment};
use crate::container::{self, Sidecar, TensorRecord};
use crate::error::{Error, Result};
use crate::nn::Mat;
use crate::types::{to_f32_precision, AudioFeatureSequence, MeshSpec, MotionSequence, PhonemeAlignment, SpeakerId};

pub const SILENCE: &str = "sil";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_sequences: usize,
    /// Train, validation, test.
    pub splits: [f64; 3],
    pub fps: f64,
    pub vertex_count: usize,
    pub feature_dim: usize,
    /// Vocabulary size including `sil`.
    pub phone_count: usize,
    pub min_phone_s: f64,
    pub max_phone_s: f64,
    /// Phones per sequence, excluding the two `sil` pads.
    pub min_phones: usize,
    pub max_phones: usize,
    pub noise: f64,
    pub speakers: usize,
    /// Keypose amplitude in millimetres.
    pub keypose_scale: f64,
    /// Bump amplitude relative to `keypose_scale`.
    pub bump_scale: f64,
    /// Weight of the energy direction in the audio features.
    pub energy_scale: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_sequences: 80,
            splits: [0.6, 0.2, 0.2],
            fps: 25.0,
            vertex_count: 200,
            feature_dim: 64,
            phone_count: 20,
            min_phone_s: 0.06,
            max_phone_s: 0.14,
            min_phones: 28,
            max_phones: 48,
            noise: 0.1,
            speakers: 4,
            keypose_scale: 3.0,
            bump_scale: 0.3,
            energy_scale: 0.5,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_sequences == 0 || self.speakers == 0 || self.feature_dim == 0 {
            return bad("sequence count, speaker count and feature dimension must be positive");
        }
        if self.phone_count < 2 {
            return bad("vocabulary needs sil plus at least one phone");
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if !(self.min_phone_s > 0.0 && self.min_phone_s <= self.max_phone_s) {
            return bad("phone duration range must satisfy 0 < min <= max");
        }
        if self.min_phones == 0 || self.min_phones > self.max_phones {
            return bad("phone count range must satisfy 1 <= min <= max");
        }
        if self.splits.iter().any(|&s| s < 0.0) || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split fractions must be non-negative and sum to 1");
        }
        if !(self.noise >= 0.0) {
            return bad("noise level must be non-negative");
        }
        Ok(())
    }

    /// Train, validation and test counts; the test split takes the remainder.
    pub fn split_counts(&self) -> [usize; 3] {
        let n = self.n_sequences as f64;
        let train = (n * self.splits[0]).round() as usize;
        let val = ((n * self.splits[1]).round() as usize).min(self.n_sequences - train.min(self.n_sequences));
        let train = train.min(self.n_sequences);
        [train, val, self.n_sequences - train - val]
    }
}

/// Ellipsoid template; the lowest quarter of vertices by z are lips, the highest quarter upper face.
pub fn build_mesh_spec(vertex_count: usize, seed: u64) -> Result<MeshSpec> {
    if vertex_count < 30 {
        return Err(Error::invalid(format!(
            "need at least 30 vertices to populate lip and upper-face regions, got {vertex_count}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axes = [75.0, 95.0, 110.0];
    let mut template = Mat::zeros(vertex_count, 3);
    for v in 0..vertex_count {
        let dir: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for c in 0..3 {
            template.set(v, c, (axes[c] * dir[c] / norm) as f32 as f64);
        }
    }
    let mut by_z: Vec<usize> = (0..vertex_count).collect();
    by_z.sort_by(|&a, &b| template.get(a, 2).total_cmp(&template.get(b, 2)).then(a.cmp(&b)));
    let q = vertex_count / 4;
    let mut lip = by_z[..q].to_vec();
    let mut upper = by_z[vertex_count - q..].to_vec();
    lip.sort_unstable();
    upper.sort_unstable();
    MeshSpec::new(&format!("ellipsoid{vertex_count}_s{seed}"), template, lip, upper)
}

/// Per-vertex region weight: lips move most, upper face least.
pub fn region_weights(mesh: &MeshSpec) -> Vec<f64> {
    let mut w = vec![0.5; mesh.vertex_count()];
    for &v in &mesh.lip_vertices {
        w[v] = 1.0;
    }
    for &v in &mesh.upper_face_vertices {
        w[v] = 0.3;
    }
    w
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisemeTable {
    /// Index 0 is `sil`.
    pub vocabulary: Vec<String>,
    /// `P x 3V`; row 0 is the rest pose.
    pub keyposes: Mat,
    /// `P x 3V` mid-phone bump fields; row 0 is zero.
    pub bumps: Mat,
    /// `P x d` audio signature per phone.
    pub signatures: Mat,
    /// `1 x d` direction along which phone energy shows in the audio.
    pub energy_direction: Mat,
    pub seed: u64,
}

impl VisemeTable {
    /// Keyposes are non-negative mixtures of two shared basis fields plus a
    /// little per-phone detail, weighted by region.
    pub fn generate(config: &CorpusConfig, mesh: &MeshSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = config.phone_count;
        let v3 = 3 * mesh.vertex_count();
        let d = config.feature_dim;
        let weights = region_weights(mesh);
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let basis = [normal(v3), normal(v3)];
        let detail = normal(p * v3);
        let bump_raw = normal(p * v3);
        let signatures = Mat::from_vec(p, d, normal(p * d)).expect("sized");
        let energy_direction = Mat::from_vec(1, d, normal(d)).expect("sized");
        let coefs: Vec<[f64; 2]> = (0..p).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect();

        let mut keyposes = Mat::zeros(p, v3);
        let mut bumps = Mat::zeros(p, v3);
        for ph in 1..p {
            for j in 0..v3 {
                let w = weights[j / 3] * config.keypose_scale;
                let k = coefs[ph][0] * basis[0][j] + coefs[ph][1] * basis[1][j] + 0.15 * detail[ph * v3 + j];
                keyposes.set(ph, j, w * k);
                bumps.set(ph, j, w * config.bump_scale * bump_raw[ph * v3 + j]);
            }
        }
        let mut vocabulary = vec![SILENCE.to_string()];
        vocabulary.extend((1..p).map(|i| format!("ph{i:02}")));
        VisemeTable {
            vocabulary,
            keyposes: to_f32_precision(&keyposes),
            bumps: to_f32_precision(&bumps),
            signatures: to_f32_precision(&signatures),
            energy_direction: to_f32_precision(&energy_direction),
            seed,
        }
    }

    pub fn phone_count(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn id_of(&self, label: &str) -> Option<usize> {
        self.vocabulary.iter().position(|l| l == label)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerStyle {
    pub amplitude: f64,
    /// One weight per vertex.
    pub vertex_weights: Vec<f64>,
}

pub fn speaker_styles(count: usize, vertex_count: usize, seed: u64) -> Vec<SpeakerStyle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| SpeakerStyle {
            amplitude: rng.gen_range(0.7f32..=1.3) as f64,
            vertex_weights: (0..vertex_count).map(|_| rng.gen_range(0.8f32..=1.2) as f64).collect(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhonePlan {
    pub phone: usize,
    pub duration: f64,
    /// In `[0, 1]`; scales the bump and the audio energy component.
    pub energy: f64,
}

pub fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub audio: AudioFeatureSequence,
    pub motion: MotionSequence,
    pub alignment: PhonemeAlignment,
    pub speaker: SpeakerId,
}

/// Renders a phone plan into features, motion and alignment. Frame `n` samples
/// time `n / fps`.
pub fn render(
    config: &CorpusConfig,
    mesh: &MeshSpec,
    visemes: &VisemeTable,
    style: &SpeakerStyle,
    plan: &[PhonePlan],
    rng: &mut impl Rng,
) -> Result<(AudioFeatureSequence, MotionSequence, PhonemeAlignment)> {
    if plan.is_empty() {
        return Err(Error::invalid("empty phone plan"));
    }
    let mut starts = Vec::with_capacity(plan.len());
    let mut t = 0.0;
    for p in plan {
        if p.phone >= visemes.phone_count() || !(p.duration > 0.0) {
            return Err(Error::invalid(format!("bad phone plan entry {p:?}")));
        }
        starts.push(t);
        t += p.duration;
    }
    let duration = t;
    let n = frame_count(duration, config.fps).max(1);
    let v3 = visemes.keyposes.cols();
    let d = visemes.signatures.cols();

    let mut motion = Mat::zeros(n, v3);
    let mut feats = Mat::zeros(n, d);
    let mut i = 0;
    for f in 0..n {
        let time = f as f64 / config.fps;
        while i + 1 < plan.len() && time >= starts[i] + plan[i].duration {
            i += 1;
        }
        let cur = plan[i];
        let u = ((time - starts[i]) / cur.duration).clamp(0.0, 1.0);
        let s = smoothstep(u);
        let bump = cur.energy * (std::f64::consts::PI * u).sin();
        let prev = if i == 0 { 0 } else { plan[i - 1].phone };
        let (kp, kc, b) = (
            visemes.keyposes.row(prev),
            visemes.keyposes.row(cur.phone),
            visemes.bumps.row(cur.phone),
        );
        for (j, m) in motion.row_mut(f).iter_mut().enumerate() {
            let raw = kp[j] + s * (kc[j] - kp[j]) + bump * b[j];
            *m = raw * style.amplitude * style.vertex_weights[j / 3];
        }
        let sig = visemes.signatures.row(cur.phone);
        let dir = visemes.energy_direction.row(0);
        for (c, a) in feats.row_mut(f).iter_mut().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            *a = sig[c] + config.energy_scale * cur.energy * dir[c] + config.noise * noise;
        }
    }
    let phones = plan
        .iter()
        .zip(&starts)
        .map(|(p, &s)| crate::types::Phone {
            label: visemes.vocabulary[p.phone].clone(),
            start: s,
            end: s + p.duration,
        })
        .collect();
    let tokens = plan.iter().map(|p| p.phone).collect();
    let alignment = PhonemeAlignment::new(phones, tokens, duration)?;
    let audio = AudioFeatureSequence::new(to_f32_precision(&feats), config.fps)?;
    let motion = MotionSequence::new(to_f32_precision(&motion), config.fps, &mesh.name)?;
    Ok((audio, motion, alignment))
}

/// Random phone string padded with `sil` on both sides.
pub fn sample_plan(config: &CorpusConfig, rng: &mut impl Rng) -> Vec<PhonePlan> {
    let count = rng.gen_range(config.min_phones..=config.max_phones);
    let dur = |rng: &mut _| {
        if config.min_phone_s == config.max_phone_s {
            config.min_phone_s
        } else {
            Rng::gen_range(rng, config.min_phone_s..config.max_phone_s)
        }
    };
    let mut plan = Vec::with_capacity(count + 2);
    plan.push(PhonePlan {
        phone: 0,
        duration: dur(rng),
        energy: 0.0,
    });
    for _ in 0..count {
        plan.push(PhonePlan {
            phone: rng.gen_range(1..config.phone_count),
            duration: dur(rng),
            energy: rng.gen::<f64>(),
        });
    }
    plan.push(PhonePlan {
        phone: 0,
        duration: dur(rng),
        energy: 0.0,
    });
    plan
}

pub fn generate_sequence(
    config: &CorpusConfig,
    mesh: &MeshSpec,
    visemes: &VisemeTable,
    styles: &[SpeakerStyle],
    speaker: SpeakerId,
    id: &str,
    seed: u64,
) -> Result<Sample> {
    let style = styles.get(speaker.0).ok_or(Error::UnknownSpeaker {
        id: speaker.0,
        count: styles.len(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = sample_plan(config, &mut rng);
    let (audio, motion, alignment) = render(config, mesh, visemes, style, &plan, &mut rng)?;
    Ok(Sample {
        id: id.to_string(),
        audio,
        motion,
        alignment,
        speaker,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub mesh: MeshSpec,
    pub visemes: VisemeTable,
    pub styles: Vec<SpeakerStyle>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.visemes.phone_count()
    }
}

/// Sequence `i` gets speaker `i % speakers`; the split assignment is a seeded
/// shuffle, so every split keeps speakers balanced to within one sequence overall.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mesh_seed: u64 = master.gen();
    let viseme_seed: u64 = master.gen();
    let style_seed: u64 = master.gen();
    let split_seed: u64 = master.gen();
    let child_seeds: Vec<u64> = (0..config.n_sequences).map(|_| master.gen()).collect();

    let mesh = build_mesh_spec(config.vertex_count, mesh_seed)?;
    let visemes = VisemeTable::generate(config, &mesh, viseme_seed);
    let styles = speaker_styles(config.speakers, config.vertex_count, style_seed);

    let mut samples = Vec::with_capacity(config.n_sequences);
    for (i, &seed) in child_seeds.iter().enumerate() {
        let speaker = SpeakerId(i % config.speakers);
        samples.push(generate_sequence(config, &mesh, &visemes, &styles, speaker, &format!("seq_{i:04}"), seed)?);
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let [n_train, n_val, _] = config.split_counts();
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| {
        let mut idx: Vec<usize> = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| slots[i].take().expect("each index once")).collect::<Vec<_>>()
    };
    let train = take(0..n_train);
    let val = take(n_train..n_train + n_val);
    let test = take(n_train + n_val..order.len());
    Ok(Corpus {
        config: config.clone(),
        mesh,
        visemes,
        styles,
        train,
        val,
        test,
    })
}

#[derive(Serialize, Deserialize)]
struct CorpusIndex {
    config: CorpusConfig,
    mesh: String,
    viseme_seed: u64,
    vocabulary: Vec<String>,
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    #[serde(flatten)]
    sidecar: Sidecar,
    id: String,
}

fn sample_dir(root: &Path, split: Split, id: &str) -> PathBuf {
    root.join(split.name()).join(id)
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    corpus.mesh.save(&dir.join("mesh.kmtf"))?;
    let v = &corpus.visemes;
    let s = corpus.styles.len();
    let nv = corpus.mesh.vertex_count();
    let weights: Vec<f64> = corpus.styles.iter().flat_map(|st| st.vertex_weights.iter().copied()).collect();
    let amps: Vec<f64> = corpus.styles.iter().map(|st| st.amplitude).collect();
    container::write_container(
        dir.join("visemes.kmtf"),
        &[
            TensorRecord::from_f64("keyposes", &[v.keyposes.rows(), v.keyposes.cols()], v.keyposes.data()),
            TensorRecord::from_f64("bumps", &[v.bumps.rows(), v.bumps.cols()], v.bumps.data()),
            TensorRecord::from_f64("signatures", &[v.signatures.rows(), v.signatures.cols()], v.signatures.data()),
            TensorRecord::from_f64("energy_direction", &[v.energy_direction.cols()], v.energy_direction.data()),
            TensorRecord::from_f64("speaker_amplitude", &[s], &amps),
            TensorRecord::from_f64("speaker_weights", &[s, nv], &weights),
        ],
    )?;
    let ids = |split: Split| corpus.split(split).iter().map(|s| s.id.clone()).collect();
    let index = CorpusIndex {
        config: corpus.config.clone(),
        mesh: corpus.mesh.name.clone(),
        viseme_seed: v.seed,
        vocabulary: v.vocabulary.clone(),
        train: ids(Split::Train),
        val: ids(Split::Val),
        test: ids(Split::Test),
    };
    fs::write(dir.join("corpus.json"), serde_json::to_string_pretty(&index)?)?;
    for split in Split::ALL {
        for sample in corpus.split(split) {
            save_sample(sample, &sample_dir(dir, split, &sample.id))?;
        }
    }
    Ok(())
}

pub fn save_sample(sample: &Sample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    container::write_container(dir.join("audio.kmtf"), &[sample.audio.to_record()])?;
    container::write_container(dir.join("motion.kmtf"), &[sample.motion.to_record()])?;
    write_alignment(&dir.join("alignment.json"), &sample.alignment)?;
    let meta = SampleMeta {
        sidecar: Sidecar {
            fps: sample.motion.fps,
            mesh: sample.motion.mesh.clone(),
            speaker: sample.speaker.0,
        },
        id: sample.id.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_sample(dir: &Path, id: &str) -> Result<Sample> {
    let need = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingFile {
                sample: id.to_string(),
                path: p,
            })
        }
    };
    let meta: SampleMeta = serde_json::from_str(&fs::read_to_string(need("meta.json")?)?)?;
    let alignment = read_alignment(&need("alignment.json")?)?;
    let audio_recs = container::read_container(need("audio.kmtf")?)?;
    let motion_recs = container::read_container(need("motion.kmtf")?)?;
    let schema = |m: &str| Error::invalid(format!("sample {id}: {m}"));
    let a = container::find(&audio_recs, "audio").ok_or_else(|| schema("audio.kmtf lacks an audio record"))?;
    let m = container::find(&motion_recs, "motion").ok_or_else(|| schema("motion.kmtf lacks a motion record"))?;
    let (n, d) = match a.shape.as_slice() {
        [n, d] => (*n, *d),
        s => return Err(schema(&format!("audio shape {s:?}"))),
    };
    let (mn, v) = match m.shape.as_slice() {
        [n, v, 3] => (*n, *v),
        s => return Err(schema(&format!("motion shape {s:?}"))),
    };
    let audio = AudioFeatureSequence::new(Mat::from_vec(n, d, a.to_f64()?)?, meta.sidecar.fps)?;
    let motion = MotionSequence::new(Mat::from_vec(mn, 3 * v, m.to_f64()?)?, meta.sidecar.fps, &meta.sidecar.mesh)?;
    audio.check_pairs_with(&motion)?;
    Ok(Sample {
        id: meta.id,
        audio,
        motion,
        alignment,
        speaker: SpeakerId(meta.sidecar.speaker),
    })
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let index_path = dir.join("corpus.json");
    if !index_path.is_file() {
        return Err(Error::MissingFile {
            sample: "corpus".into(),
            path: index_path,
        });
    }
    let index: CorpusIndex = serde_json::from_str(&fs::read_to_string(&index_path)?)?;
    let mesh = MeshSpec::load(&dir.join("mesh.kmtf"))?;
    let recs = container::read_container(dir.join("visemes.kmtf"))?;
    let get = |name: &str| -> Result<&TensorRecord> {
        container::find(&recs, name).ok_or_else(|| Error::invalid(format!("visemes.kmtf lacks {name:?}")))
    };
    let mat = |name: &str| -> Result<Mat> {
        let r = get(name)?;
        let (rows, cols) = match r.shape.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            s => return Err(Error::shape(format!("{name} has shape {s:?}"))),
        };
        Mat::from_vec(rows, cols, r.to_f64()?)
    };
    let amps = mat("speaker_amplitude")?;
    let weights = mat("speaker_weights")?;
    let styles = (0..amps.cols())
        .map(|s| SpeakerStyle {
            amplitude: amps.get(0, s),
            vertex_weights: weights.row(s).to_vec(),
        })
        .collect();
    let visemes = VisemeTable {
        vocabulary: index.vocabulary.clone(),
        keyposes: mat("keyposes")?,
        bumps: mat("bumps")?,
        signatures: mat("signatures")?,
        energy_direction: mat("energy_direction")?,
        seed: index.viseme_seed,
    };
    let load_split = |split: Split, ids: &[String]| -> Result<Vec<Sample>> {
        ids.iter().map(|id| load_sample(&sample_dir(dir, split, id), id)).collect()
    };
    Ok(Corpus {
        train: load_split(Split::Train, &index.train)?,
        val: load_split(Split::Val, &index.val)?,
        test: load_split(Split::Test, &index.test)?,
        config: index.config,
        mesh,
        visemes,
        styles,
    })
}
