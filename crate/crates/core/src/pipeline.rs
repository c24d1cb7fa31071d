//! End-to-end inference: audio and alignment in, full motion sequence out.

use serde::{Deserialize, Serialize};

use crate::audio::{featurize, locate_key_frames, segment_long_audio, AudioSource};
use crate::cmc::{extract_key_from_baseline, BaselineModel, CmcModel};
use crate::error::{Error, Result};
use crate::lkma::LkmaModel;
use crate::nn::Mat;
use crate::synth::Sample;
use crate::train::KeySource;
use crate::types::{AudioFeatureSequence, KeyMotionSet, MotionSequence, PhonemeAlignment, SpeakerId};

/// Which encoder supplies the completion model's audio latents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmcAudio {
    /// The completion model's own encoder, trained jointly with it.
    #[default]
    Own,
    /// The frozen key-motion encoder, used both in training and inference.
    LkmaEncoder,
}

#[derive(Clone, Copy, Debug)]
pub struct Pipeline<'a> {
    pub lkma: &'a LkmaModel,
    pub cmc: &'a CmcModel,
    pub cmc_audio: CmcAudio,
    /// Supplies key motions instead of the key-motion model when set.
    pub baseline: Option<&'a BaselineModel>,
}

impl<'a> Pipeline<'a> {
    pub fn new(lkma: &'a LkmaModel, cmc: &'a CmcModel) -> Self {
        Pipeline {
            lkma,
            cmc,
            cmc_audio: CmcAudio::Own,
            baseline: None,
        }
    }

    fn speaker(&self, s: Option<SpeakerId>) -> Option<SpeakerId> {
        s.filter(|_| self.cmc.config.speakers > 0)
    }

    pub fn key_motions(&self, features: &Mat, speaker: Option<SpeakerId>, indices: &[usize]) -> Result<KeyMotionSet> {
        let speaker = self.speaker(speaker);
        match self.baseline {
            Some(b) => {
                let full = MotionSequence::new(b.forward(features, speaker)?, 1.0, "baseline")?;
                extract_key_from_baseline(&full, indices)
            }
            None => self.lkma.predict_keys(features, speaker, indices),
        }
    }

    pub fn audio_latent(&self, features: &Mat, speaker: Option<SpeakerId>) -> Result<Mat> {
        let speaker = self.speaker(speaker);
        match self.cmc_audio {
            CmcAudio::Own => self.cmc.encode_audio(features, speaker),
            CmcAudio::LkmaEncoder => self.lkma.encode_audio(features, speaker),
        }
    }

    /// Keys at `indices`, then completion; returns `N x 3V` frames.
    pub fn run_features(&self, features: &Mat, speaker: Option<SpeakerId>, indices: &[usize]) -> Result<Mat> {
        let key = self.key_motions(features, speaker, indices)?;
        let audio = self.audio_latent(features, speaker)?;
        self.cmc.complete(&audio, &key)
    }

    pub fn predict_sample(&self, sample: &Sample, keys: KeySource) -> Result<MotionSequence> {
        let indices = keys.indices(sample)?;
        let frames = self.run_features(&sample.audio.features, Some(sample.speaker), &indices)?;
        MotionSequence::new(frames, sample.motion.fps, &sample.motion.mesh)
    }

    /// Featurizes `source`, cuts it into clips of at most `max_clip_seconds`
    /// (no cut when `None`) and concatenates per-clip predictions.
    pub fn infer_full(
        &self,
        source: &AudioSource,
        alignment: &PhonemeAlignment,
        fps: f64,
        speaker: Option<SpeakerId>,
        max_clip_seconds: Option<f64>,
        mesh: &str,
    ) -> Result<MotionSequence> {
        let features = featurize(source, fps, self.lkma.config.feature_dim)?;
        let whole = AudioSource::Precomputed(features.clone());
        let clips = match max_clip_seconds {
            Some(max) => segment_long_audio(&whole, alignment, max, fps)?,
            None => segment_long_audio(&whole, alignment, alignment.duration.max(1e-9), fps)?,
        };
        let motion_dim = self.cmc.config.motion_dim();
        let mut out = Vec::with_capacity(features.n_frames() * motion_dim);
        for clip in &clips {
            if clip.frames.is_empty() {
                continue;
            }
            let rows: Vec<usize> = clip.frames.clone().collect();
            let f = features.features.gather_rows(&rows)?;
            let y = if clip.alignment.phones.is_empty() {
                // a clip of pure silence: complete from its two end frames
                let idx = if rows.len() > 1 { vec![0, rows.len() - 1] } else { vec![0] };
                self.run_features(&f, speaker, &idx)?
            } else {
                let idx = locate_key_frames(&clip.alignment, fps, rows.len())?;
                self.run_features(&f, speaker, &idx)?
            };
            out.extend_from_slice(y.data());
        }
        let n = out.len() / motion_dim;
        if n != features.n_frames() {
            return Err(Error::shape(format!("clips produced {n} frames, expected {}", features.n_frames())));
        }
        MotionSequence::new(Mat::from_vec(n, motion_dim, out)?, fps, mesh)
    }
}

pub fn predict_baseline(model: &BaselineModel, sample: &Sample) -> Result<MotionSequence> {
    let speaker = Some(sample.speaker).filter(|_| model.config.speakers > 0);
    MotionSequence::new(model.forward(&sample.audio.features, speaker)?, sample.motion.fps, &sample.motion.mesh)
}

/// Features at the sample's own frame rate, as a precomputed source.
pub fn sample_source(sample: &Sample) -> AudioSource {
    AudioSource::Precomputed(AudioFeatureSequence {
        features: sample.audio.features.clone(),
        fps: sample.audio.fps,
    })
}
