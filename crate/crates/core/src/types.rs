//! Shared domain types. Motion rows are flattened as `[v0.x, v0.y, v0.z, v1.x, ...]`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, Sidecar, TensorRecord};
use crate::error::{Error, Result};
use crate::nn::Mat;

/// Rounds through `f32`, the precision of every stored tensor.
pub fn to_f32_precision(m: &Mat) -> Mat {
    m.map(|v| v as f32 as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpeakerId(pub usize);

impl SpeakerId {
    pub fn checked(id: usize, count: usize) -> Result<Self> {
        if id >= count {
            return Err(Error::UnknownSpeaker { id, count });
        }
        Ok(SpeakerId(id))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshSpec {
    pub name: String,
    /// `V x 3`, millimetres.
    pub template: Mat,
    pub lip_vertices: Vec<usize>,
    pub upper_face_vertices: Vec<usize>,
}

impl MeshSpec {
    pub fn new(
        name: &str,
        template: Mat,
        lip_vertices: Vec<usize>,
        upper_face_vertices: Vec<usize>,
    ) -> Result<Self> {
        let mesh = MeshSpec {
            name: name.to_string(),
            template,
            lip_vertices,
            upper_face_vertices,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn vertex_count(&self) -> usize {
        self.template.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vertex_count();
        if v == 0 || self.template.cols() != 3 {
            return Err(Error::shape(format!(
                "template must be V x 3 with V >= 1, got {:?}",
                self.template.shape()
            )));
        }
        if !self.template.is_finite() {
            return Err(Error::invalid("template contains non-finite values"));
        }
        if self.lip_vertices.is_empty() || self.upper_face_vertices.is_empty() {
            return Err(Error::invalid("lip and upper-face vertex sets must be non-empty"));
        }
        for &i in self.lip_vertices.iter().chain(&self.upper_face_vertices) {
            if i >= v {
                return Err(Error::IndexOutOfRange { index: i, len: v });
            }
        }
        let lip: BTreeSet<_> = self.lip_vertices.iter().collect();
        if self.upper_face_vertices.iter().any(|i| lip.contains(i)) {
            return Err(Error::invalid("lip and upper-face vertex sets overlap"));
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        let idx = |v: &[usize]| v.iter().map(|&i| i as i64).collect::<Vec<_>>();
        vec![
            TensorRecord::from_f64("template", &[self.vertex_count(), 3], self.template.data()),
            TensorRecord::from_i64("lip_vertices", &[self.lip_vertices.len()], idx(&self.lip_vertices)),
            TensorRecord::from_i64(
                "upper_face_vertices",
                &[self.upper_face_vertices.len()],
                idx(&self.upper_face_vertices),
            ),
        ]
    }

    pub fn from_records(name: &str, records: &[TensorRecord]) -> Result<Self> {
        let get = |n: &str| {
            container::find(records, n).ok_or_else(|| Error::invalid(format!("mesh lacks record {n:?}")))
        };
        let t = get("template")?;
        let rows = t.shape.first().copied().unwrap_or(0);
        let template = Mat::from_vec(rows, 3, t.to_f64()?)?;
        let idx = |r: &TensorRecord| -> Result<Vec<usize>> {
            r.to_i64()?
                .iter()
                .map(|&i| usize::try_from(i).map_err(|_| Error::invalid(format!("negative vertex index {i}"))))
                .collect()
        };
        MeshSpec::new(name, template, idx(get("lip_vertices")?)?, idx(get("upper_face_vertices")?)?)
    }

    /// Writes `<path>` (tensors) and its sidecar JSON holding the name.
    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_container(path, &self.to_records())?;
        let meta = serde_json::json!({ "name": self.name });
        fs::write(container::sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records = container::read_container(path)?;
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(container::sidecar_path(path))?)?;
        let name = meta["name"].as_str().unwrap_or("mesh");
        MeshSpec::from_records(name, &records)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    /// `N x 3V` displacements from the template, millimetres.
    pub frames: Mat,
    pub fps: f64,
    pub mesh: String,
}

impl MotionSequence {
    pub fn new(frames: Mat, fps: f64, mesh: &str) -> Result<Self> {
        if frames.rows() == 0 || frames.cols() % 3 != 0 || frames.cols() == 0 {
            return Err(Error::shape(format!(
                "motion must be N x 3V with N >= 1, got {:?}",
                frames.shape()
            )));
        }
        if !(fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        if !frames.is_finite() {
            return Err(Error::invalid("motion contains non-finite values"));
        }
        Ok(MotionSequence {
            frames,
            fps,
            mesh: mesh.to_string(),
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn vertex_count(&self) -> usize {
        self.frames.cols() / 3
    }

    pub fn offset(&self, t: usize, v: usize) -> [f64; 3] {
        let r = self.frames.row(t);
        [r[3 * v], r[3 * v + 1], r[3 * v + 2]]
    }

    pub fn check_mesh(&self, mesh: &MeshSpec) -> Result<()> {
        if self.vertex_count() != mesh.vertex_count() {
            return Err(Error::shape(format!(
                "motion has {} vertices, mesh {:?} has {}",
                self.vertex_count(),
                mesh.name,
                mesh.vertex_count()
            )));
        }
        Ok(())
    }

    pub fn check_same_shape(&self, other: &MotionSequence) -> Result<()> {
        if self.frames.shape() != other.frames.shape() {
            return Err(Error::shape(format!(
                "motion shapes differ: {:?} vs {:?}",
                self.frames.shape(),
                other.frames.shape()
            )));
        }
        Ok(())
    }

    pub fn to_record(&self) -> TensorRecord {
        TensorRecord::from_f64("motion", &[self.n_frames(), self.vertex_count(), 3], self.frames.data())
    }

    pub fn save(&self, path: &Path, speaker: SpeakerId) -> Result<()> {
        container::write_container(path, &[self.to_record()])?;
        let side = Sidecar {
            fps: self.fps,
            mesh: self.mesh.clone(),
            speaker: speaker.0,
        };
        fs::write(container::sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, SpeakerId)> {
        let records = container::read_container(path)?;
        let rec = container::find(&records, "motion")
            .ok_or_else(|| Error::invalid(format!("{} has no motion record", path.display())))?;
        let (n, v) = match rec.shape.as_slice() {
            [n, v, 3] => (*n, *v),
            s => return Err(Error::shape(format!("motion record shape {s:?}, expected [N, V, 3]"))),
        };
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(container::sidecar_path(path))?)?;
        let frames = Mat::from_vec(n, 3 * v, rec.to_f64()?)?;
        Ok((MotionSequence::new(frames, side.fps, &side.mesh)?, SpeakerId(side.speaker)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureSequence {
    /// `N x d`.
    pub features: Mat,
    pub fps: f64,
}

impl AudioFeatureSequence {
    pub fn new(features: Mat, fps: f64) -> Result<Self> {
        if features.rows() == 0 || features.cols() == 0 {
            return Err(Error::shape(format!(
                "audio features must be N x d with N, d >= 1, got {:?}",
                features.shape()
            )));
        }
        if !(fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        if !features.is_finite() {
            return Err(Error::invalid("audio features contain non-finite values"));
        }
        Ok(AudioFeatureSequence { features, fps })
    }

    pub fn n_frames(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn check_pairs_with(&self, motion: &MotionSequence) -> Result<()> {
        if self.n_frames() != motion.n_frames() {
            return Err(Error::shape(format!(
                "audio has {} frames, motion has {}",
                self.n_frames(),
                motion.n_frames()
            )));
        }
        Ok(())
    }

    pub fn to_record(&self) -> TensorRecord {
        TensorRecord::from_f64("audio", &[self.n_frames(), self.dim()], self.features.data())
    }

    pub fn save(&self, path: &Path, mesh: &str, speaker: SpeakerId) -> Result<()> {
        container::write_container(path, &[self.to_record()])?;
        let side = Sidecar {
            fps: self.fps,
            mesh: mesh.to_string(),
            speaker: speaker.0,
        };
        fs::write(container::sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records = container::read_container(path)?;
        let rec = container::find(&records, "audio")
            .ok_or_else(|| Error::invalid(format!("{} has no audio record", path.display())))?;
        let (n, d) = match rec.shape.as_slice() {
            [n, d] => (*n, *d),
            s => return Err(Error::shape(format!("audio record shape {s:?}, expected [N, d]"))),
        };
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(container::sidecar_path(path))?)?;
        AudioFeatureSequence::new(Mat::from_vec(n, d, rec.to_f64()?)?, side.fps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phone {
    pub label: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeAlignment {
    pub phones: Vec<Phone>,
    pub tokens: Vec<usize>,
    pub duration: f64,
}

impl PhonemeAlignment {
    pub fn new(phones: Vec<Phone>, tokens: Vec<usize>, duration: f64) -> Result<Self> {
        let a = PhonemeAlignment {
            phones,
            tokens,
            duration,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::invalid(format!("audio duration must be positive, got {}", self.duration)));
        }
        let mut prev_end = 0.0;
        for (i, p) in self.phones.iter().enumerate() {
            if !(p.start >= 0.0 && p.start < p.end && p.end <= self.duration + 1e-9) {
                return Err(Error::invalid(format!(
                    "phone {i} ({:?}) has invalid span [{}, {}] for duration {}",
                    p.label, p.start, p.end, self.duration
                )));
            }
            if p.start < prev_end - 1e-9 {
                return Err(Error::invalid(format!(
                    "phone {i} ({:?}) starts at {} before the previous phone ends at {prev_end}",
                    p.label, p.start
                )));
            }
            prev_end = p.end;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyMotionSet {
    pub indices: Vec<usize>,
    /// `m x 3V`, row `j` is the motion at `indices[j]`.
    pub motions: Mat,
    pub n_frames: usize,
}

impl KeyMotionSet {
    pub fn new(indices: Vec<usize>, motions: Mat, n_frames: usize) -> Result<Self> {
        if indices.len() != motions.rows() {
            return Err(Error::shape(format!(
                "{} key indices but {} key motion rows",
                indices.len(),
                motions.rows()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("key indices must be sorted and unique"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n_frames) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: n_frames,
            });
        }
        Ok(KeyMotionSet {
            indices,
            motions,
            n_frames,
        })
    }

    /// Keys taken from a full sequence at `indices`.
    pub fn from_sequence(seq: &Mat, indices: &[usize]) -> Result<Self> {
        KeyMotionSet::new(indices.to_vec(), seq.gather_rows(indices)?, seq.rows())
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Non-key indices, ascending.
    pub fn complement(&self) -> Vec<usize> {
        complement(&self.indices, self.n_frames)
    }
}

/// `[0, n) \ indices` for sorted `indices`.
pub fn complement(indices: &[usize], n: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n.saturating_sub(indices.len()));
    let mut k = indices.iter().peekable();
    for i in 0..n {
        if k.peek() == Some(&&i) {
            k.next();
        } else {
            out.push(i);
        }
    }
    out
}
