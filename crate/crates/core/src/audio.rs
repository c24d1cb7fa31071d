//! Frame-rate-aligned audio features, key-frame localization and alignment I/O.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mat;
use crate::types::{AudioFeatureSequence, Phone, PhonemeAlignment};

/// Energies below this are clamped before the log.
pub const ENERGY_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub enum AudioSource {
    Waveform { samples: Vec<f64>, sample_rate: f64 },
    Precomputed(AudioFeatureSequence),
}

impl AudioSource {
    pub fn duration(&self) -> f64 {
        match self {
            AudioSource::Waveform {
                samples,
                sample_rate,
            } => samples.len() as f64 / sample_rate,
            AudioSource::Precomputed(a) => a.n_frames() as f64 / a.fps,
        }
    }
}

/// Reads a PCM or float WAV file as a mono waveform in `[-1, 1]`; channels are averaged.
pub fn read_wav(path: &Path) -> Result<AudioSource> {
    let wav = |e: hound::Error| Error::invalid(format!("{}: {e}", path.display()));
    let mut reader = hound::WavReader::open(path).map_err(wav)?;
    let spec = reader.spec();
    let raw: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().map(|x| x.map(f64::from)).collect::<Result<_, _>>().map_err(wav)?,
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader.samples::<i32>().map(|x| x.map(|v| v as f64 / scale)).collect::<Result<_, _>>().map_err(wav)?
        }
    };
    let ch = spec.channels.max(1) as usize;
    let samples: Vec<f64> = raw.chunks(ch).map(|c| c.iter().sum::<f64>() / ch as f64).collect();
    if samples.is_empty() {
        return Err(Error::invalid(format!("{} holds no samples", path.display())));
    }
    Ok(AudioSource::Waveform {
        samples,
        sample_rate: spec.sample_rate as f64,
    })
}

/// Writes a mono 16-bit PCM WAV; samples are clamped to `[-1, 1]`.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let wav = |e: hound::Error| Error::invalid(format!("{}: {e}", path.display()));
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav)?;
    for &x in samples {
        w.write_sample((x.clamp(-1.0, 1.0) * 32767.0).round() as i16).map_err(wav)?;
    }
    w.finalize().map_err(wav)
}

/// `floor(x + 0.5)` with a small tolerance so `0.2 * 25` lands on 5.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

pub fn frame_count(duration: f64, fps: f64) -> usize {
    round_half_up(duration * fps)
}

/// Band edges in Hz for `d` equal-width bands from 0 to `top`.
pub fn band_edges(d: usize, top: f64) -> Vec<f64> {
    (0..=d).map(|b| top * b as f64 / d as f64).collect()
}

/// Log band energies per frame. Frame `t` is centred on `t / fps` and spans two
/// hops, Hann-weighted and zero-padded at the ends. Bands split `[0, sr/2]`.
pub fn featurize_waveform(samples: &[f64], sample_rate: f64, fps: f64, d: usize) -> Result<Mat> {
    if samples.is_empty() {
        return Err(Error::invalid("empty waveform"));
    }
    if !(sample_rate > 0.0) || !(fps > 0.0) || d == 0 {
        return Err(Error::invalid(format!(
            "featurize needs positive sample rate, fps and band count (got {sample_rate}, {fps}, {d})"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("waveform contains non-finite samples"));
    }
    let n = frame_count(samples.len() as f64 / sample_rate, fps).max(1);
    let hop = sample_rate / fps;
    let win = ((2.0 * hop).round() as usize).max(2);
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();
    let top = sample_rate / 2.0;
    let bin_hz = sample_rate / win as f64;
    // Bin k belongs to band floor(k * bin_hz / top * d); the Nyquist bin joins the last band.
    let bin_band: Vec<usize> = (0..=win / 2)
        .map(|k| (((k as f64 * bin_hz) / top * d as f64) as usize).min(d - 1))
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut out = Mat::zeros(n, d);
    for t in 0..n {
        let start = (t as f64 * hop).round() as isize - (win / 2) as isize;
        for (i, c) in buf.iter_mut().enumerate() {
            let s = start + i as isize;
            let x = if s >= 0 && (s as usize) < samples.len() {
                samples[s as usize]
            } else {
                0.0
            };
            *c = Complex::new(x * hann[i], 0.0);
        }
        fft.process(&mut buf);
        let row = out.row_mut(t);
        for (k, &b) in bin_band.iter().enumerate() {
            row[b] += buf[k].norm_sqr();
        }
        for v in row.iter_mut() {
            *v = v.max(ENERGY_FLOOR).ln();
        }
    }
    Ok(out)
}

/// Linear resampling along time. Output frame `j` samples source time `j / target_fps`.
pub fn resample(features: &AudioFeatureSequence, target_fps: f64) -> Result<AudioFeatureSequence> {
    if !(target_fps > 0.0) {
        return Err(Error::invalid(format!("fps must be positive, got {target_fps}")));
    }
    if features.fps == target_fps {
        return Ok(features.clone());
    }
    let src = &features.features;
    let n_in = src.rows();
    let n_out = frame_count(n_in as f64 / features.fps, target_fps).max(1);
    let mut out = Mat::zeros(n_out, src.cols());
    for j in 0..n_out {
        let pos = (j as f64 * features.fps / target_fps).min((n_in - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let w = pos - i0 as f64;
        let (a, b) = (src.row(i0), src.row(i1));
        for (c, o) in out.row_mut(j).iter_mut().enumerate() {
            *o = (1.0 - w) * a[c] + w * b[c];
        }
    }
    AudioFeatureSequence::new(out, target_fps)
}

pub fn featurize(source: &AudioSource, target_fps: f64, d: usize) -> Result<AudioFeatureSequence> {
    if !(target_fps > 0.0) {
        return Err(Error::invalid(format!("fps must be positive, got {target_fps}")));
    }
    match source {
        AudioSource::Waveform {
            samples,
            sample_rate,
        } => AudioFeatureSequence::new(featurize_waveform(samples, *sample_rate, target_fps, d)?, target_fps),
        AudioSource::Precomputed(a) => resample(a, target_fps),
    }
}

/// Start and end frame of every phone, clamped to `[0, n_frames)`, sorted and unique.
pub fn locate_key_frames(alignment: &PhonemeAlignment, fps: f64, n_frames: usize) -> Result<Vec<usize>> {
    if alignment.phones.is_empty() {
        return Err(Error::EmptyAlignment);
    }
    if n_frames == 0 {
        return Err(Error::invalid("cannot locate keys in a zero-frame sequence"));
    }
    let set: BTreeSet<usize> = alignment
        .phones
        .iter()
        .flat_map(|p| [p.start, p.end])
        .map(|t| round_half_up(t * fps).min(n_frames - 1))
        .collect();
    Ok(set.into_iter().collect())
}

/// `{0, s, 2s, ...}` plus the last frame.
pub fn uniform_sample_indices(n_frames: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if n_frames == 0 {
        return Ok(Vec::new());
    }
    let mut idx: Vec<usize> = (0..n_frames).step_by(stride).collect();
    if *idx.last().expect("n_frames >= 1") != n_frames - 1 {
        idx.push(n_frames - 1);
    }
    Ok(idx)
}

pub fn offset_indices(indices: &[usize], delta: i64, n_frames: usize) -> Vec<usize> {
    if n_frames == 0 {
        return Vec::new();
    }
    let hi = n_frames as i64 - 1;
    let set: BTreeSet<usize> = indices
        .iter()
        .map(|&i| (i as i64 + delta).clamp(0, hi) as usize)
        .collect();
    set.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub source: AudioSource,
    /// Re-timed so the clip starts at zero.
    pub alignment: PhonemeAlignment,
    /// Global frame range at the given fps; ranges of consecutive clips tile `[0, N)`.
    pub frames: Range<usize>,
}

fn slice_source(source: &AudioSource, start: f64, end: f64, frames: &Range<usize>) -> Result<AudioSource> {
    Ok(match source {
        AudioSource::Waveform {
            samples,
            sample_rate,
        } => {
            let a = round_half_up(start * sample_rate).min(samples.len());
            let b = round_half_up(end * sample_rate).min(samples.len());
            AudioSource::Waveform {
                samples: samples[a..b].to_vec(),
                sample_rate: *sample_rate,
            }
        }
        AudioSource::Precomputed(f) => {
            let idx: Vec<usize> = frames.clone().collect();
            AudioSource::Precomputed(AudioFeatureSequence::new(f.features.gather_rows(&idx)?, f.fps)?)
        }
    })
}

/// Splits at phone boundaries so no clip exceeds `max_clip_seconds`. Each cut
/// is the furthest boundary within reach of the current clip start.
pub fn segment_long_audio(
    source: &AudioSource,
    alignment: &PhonemeAlignment,
    max_clip_seconds: f64,
    fps: f64,
) -> Result<Vec<Clip>> {
    if !(max_clip_seconds > 0.0) {
        return Err(Error::invalid("max clip length must be positive"));
    }
    if let Some(p) = alignment.phones.iter().find(|p| p.end - p.start > max_clip_seconds) {
        return Err(Error::invalid(format!(
            "phone {:?} lasts {:.3} s, longer than the {max_clip_seconds} s clip limit",
            p.label,
            p.end - p.start
        )));
    }
    let duration = alignment.duration;
    let n_total = match source {
        AudioSource::Precomputed(f) => f.n_frames(),
        AudioSource::Waveform { .. } => frame_count(duration, fps),
    };
    let boundaries: Vec<f64> = alignment
        .phones
        .iter()
        .flat_map(|p| [p.start, p.end])
        .collect::<Vec<_>>();
    let inside_phone = |t: f64| alignment.phones.iter().any(|p| p.start < t && t < p.end);

    let mut cuts = vec![0.0];
    let mut s = 0.0;
    while duration - s > max_clip_seconds + 1e-9 {
        let limit = s + max_clip_seconds + 1e-9;
        let best = boundaries
            .iter()
            .copied()
            .filter(|&b| b > s + 1e-9 && b <= limit)
            .fold(None, |acc: Option<f64>, b| Some(acc.map_or(b, |a| a.max(b))));
        let cut = if !inside_phone(s + max_clip_seconds) {
            // A silence gap reaches the limit; cutting there keeps every phone whole.
            best.map_or(s + max_clip_seconds, |b| b.max(s + max_clip_seconds))
        } else {
            best.ok_or_else(|| Error::invalid(format!("no phone boundary within {max_clip_seconds} s of {s:.3} s")))?
        };
        cuts.push(cut);
        s = cut;
    }
    cuts.push(duration);

    let per_phone_tokens = alignment.tokens.len() == alignment.phones.len();
    let mut clips = Vec::with_capacity(cuts.len() - 1);
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let fa = round_half_up(a * fps).min(n_total);
        let fb = if b == duration { n_total } else { round_half_up(b * fps).min(n_total) };
        let frames = fa..fb;
        let mut phones = Vec::new();
        let mut tokens = Vec::new();
        for (i, p) in alignment.phones.iter().enumerate() {
            if p.start >= a - 1e-9 && p.end <= b + 1e-9 {
                phones.push(Phone {
                    label: p.label.clone(),
                    start: (p.start - a).max(0.0),
                    end: (p.end - a).min(b - a),
                });
                if per_phone_tokens {
                    tokens.push(alignment.tokens[i]);
                }
            }
        }
        clips.push(Clip {
            source: slice_source(source, a, b, &frames)?,
            alignment: PhonemeAlignment::new(phones, tokens, b - a)?,
            frames,
        });
    }
    Ok(clips)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentFile {
    pub text: String,
    pub tokens: Vec<usize>,
    pub phones: Vec<Phone>,
    pub duration: f64,
}

impl AlignmentFile {
    pub fn from_alignment(a: &PhonemeAlignment) -> Self {
        AlignmentFile {
            text: a.phones.iter().map(|p| p.label.as_str()).collect::<Vec<_>>().join(" "),
            tokens: a.tokens.clone(),
            phones: a.phones.clone(),
            duration: a.duration,
        }
    }

    pub fn into_alignment(self) -> Result<PhonemeAlignment> {
        PhonemeAlignment::new(self.phones, self.tokens, self.duration)
    }
}

pub fn read_alignment(path: &Path) -> Result<PhonemeAlignment> {
    let file: AlignmentFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    file.into_alignment()
}

pub fn write_alignment(path: &Path, a: &PhonemeAlignment) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(&AlignmentFile::from_alignment(a))?)?;
    Ok(())
}

/// Labels forced aligners emit for silence and spoken noise.
const SILENCE_LABELS: [&str; 4] = ["", "sil", "sp", "spn"];

/// Converts a Praat TextGrid (long text format) to an alignment. Intervals of
/// the tier named `tier` become phones; silence intervals are dropped. Each
/// label must appear in `vocab`, whose ids become the transcript tokens.
pub fn textgrid_to_alignment(text: &str, tier: &str, vocab: &HashMap<String, usize>) -> Result<PhonemeAlignment> {
    fn value<'a>(line: &'a str, key: &str) -> Option<&'a str> {
        let rest = line.trim().strip_prefix(key)?.trim_start();
        Some(rest.strip_prefix('=')?.trim())
    }
    fn number(s: &str) -> Result<f64> {
        s.parse().map_err(|_| Error::invalid(format!("bad number {s:?} in TextGrid")))
    }
    fn unquote(s: &str) -> String {
        s.trim().trim_matches('"').replace("\"\"", "\"")
    }

    let mut duration = None;
    let mut in_tier = false;
    let mut seen_tier = false;
    let mut cur: (Option<f64>, Option<f64>) = (None, None);
    let mut phones = Vec::new();
    let mut tokens = Vec::new();
    for line in text.lines() {
        let l = line.trim();
        if l.starts_with("item [") {
            in_tier = false;
            continue;
        }
        if let Some(v) = value(l, "name") {
            in_tier = unquote(v) == tier;
            seen_tier |= in_tier;
            continue;
        }
        if duration.is_none() && !seen_tier {
            if let Some(v) = value(l, "xmax") {
                duration = Some(number(v)?);
                continue;
            }
        }
        if !in_tier {
            continue;
        }
        if let Some(v) = value(l, "xmin") {
            cur.0 = Some(number(v)?);
        } else if let Some(v) = value(l, "xmax") {
            cur.1 = Some(number(v)?);
        } else if let Some(v) = value(l, "text") {
            let label = unquote(v);
            if let (Some(s), Some(e)) = cur {
                if !SILENCE_LABELS.contains(&label.as_str()) && e > s {
                    let id = *vocab
                        .get(&label)
                        .ok_or_else(|| Error::invalid(format!("phone label {label:?} not in vocabulary")))?;
                    phones.push(Phone { label, start: s, end: e });
                    tokens.push(id);
                }
            }
            cur = (None, None);
        }
    }
    if !seen_tier {
        return Err(Error::invalid(format!("TextGrid has no tier named {tier:?}")));
    }
    let duration = duration
        .or_else(|| phones.last().map(|p| p.end))
        .ok_or_else(|| Error::invalid("TextGrid has no xmax"))?;
    PhonemeAlignment::new(phones, tokens, duration)
}
