//! Lip vertex error, upper-face dynamics deviation, error maps, lip-offset
//! curves and piecewise-linear curve reconstruction.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mat;
use crate::types::{MeshSpec, MotionSequence};

/// Metric conventions. The defaults use squared distances for the lip error
/// and the standard deviation for facial dynamics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricOptions {
    /// Plain Euclidean distance instead of its square.
    pub lve_norm: bool,
    /// Variance of offset norms instead of their standard deviation.
    pub fdd_variance: bool,
}

fn check_pair(pred: &MotionSequence, gt: &MotionSequence, mesh: &MeshSpec) -> Result<()> {
    pred.check_same_shape(gt)?;
    gt.check_mesh(mesh)?;
    if (pred.fps - gt.fps).abs() > 1e-9 {
        return Err(Error::shape(format!("fps {} vs {}", pred.fps, gt.fps)));
    }
    Ok(())
}

fn sq_dist(a: &Mat, b: &Mat, t: usize, v: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..3 {
        let d = a.get(t, 3 * v + c) - b.get(t, 3 * v + c);
        s += d * d;
    }
    s
}

/// Per frame, the largest lip-vertex error; averaged over frames.
pub fn lve(pred: &MotionSequence, gt: &MotionSequence, mesh: &MeshSpec) -> Result<f64> {
    lve_with(pred, gt, mesh, MetricOptions::default())
}

pub fn lve_with(pred: &MotionSequence, gt: &MotionSequence, mesh: &MeshSpec, opts: MetricOptions) -> Result<f64> {
    let per_frame = max_lip_errors(pred, gt, mesh, opts)?;
    Ok(per_frame.iter().sum::<f64>() / per_frame.len() as f64)
}

/// The per-frame maxima that [`lve`] averages.
pub fn max_lip_errors(pred: &MotionSequence, gt: &MotionSequence, mesh: &MeshSpec, opts: MetricOptions) -> Result<Vec<f64>> {
    check_pair(pred, gt, mesh)?;
    Ok((0..gt.n_frames())
        .map(|t| {
            let mut worst = 0.0f64;
            for &v in &mesh.lip_vertices {
                let e = sq_dist(&pred.frames, &gt.frames, t, v);
                worst = worst.max(if opts.lve_norm { e.sqrt() } else { e });
            }
            worst
        })
        .collect())
}

/// Temporal spread of each upper-face vertex's offset norm.
pub fn upper_face_dynamics(seq: &MotionSequence, mesh: &MeshSpec, variance: bool) -> Result<Vec<f64>> {
    seq.check_mesh(mesh)?;
    let n = seq.n_frames();
    if n < 2 {
        return Err(Error::invalid("facial dynamics need at least 2 frames"));
    }
    Ok(mesh
        .upper_face_vertices
        .iter()
        .map(|&v| {
            let norms: Vec<f64> = (0..n)
                .map(|t| {
                    let o = seq.offset(t, v);
                    (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt()
                })
                .collect();
            let mean = norms.iter().sum::<f64>() / n as f64;
            let var = norms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            if variance {
                var
            } else {
                var.sqrt()
            }
        })
        .collect())
}

/// Mean over upper-face vertices of `dyn(pred) - dyn(gt)`; signed.
pub fn fdd(pred: &MotionSequence, gt: &MotionSequence, mesh: &MeshSpec) -> Result<f64> {
    fdd_with(pred, gt, mesh, MetricOptions::default())
}

pub fn fdd_with(pred: &MotionSequence, gt: &MotionSequence, mesh: &MeshSpec, opts: MetricOptions) -> Result<f64> {
    check_pair(pred, gt, mesh)?;
    let dp = upper_face_dynamics(pred, mesh, opts.fdd_variance)?;
    let dg = upper_face_dynamics(gt, mesh, opts.fdd_variance)?;
    Ok(dp.iter().zip(&dg).map(|(p, g)| p - g).sum::<f64>() / dp.len() as f64)
}

/// `N x V` Euclidean distances between corresponding vertex offsets.
pub fn error_map(pred: &MotionSequence, gt: &MotionSequence) -> Result<Mat> {
    pred.check_same_shape(gt)?;
    let (n, v) = (gt.n_frames(), gt.vertex_count());
    let mut out = Mat::zeros(n, v);
    for t in 0..n {
        for j in 0..v {
            out.set(t, j, sq_dist(&pred.frames, &gt.frames, t, j).sqrt());
        }
    }
    Ok(out)
}

/// Per frame, the summed offset length of all lip vertices.
pub fn lip_offset_curve(seq: &MotionSequence, mesh: &MeshSpec) -> Result<Vec<f64>> {
    seq.check_mesh(mesh)?;
    Ok((0..seq.n_frames())
        .map(|t| {
            let mut s = 0.0;
            for &v in &mesh.lip_vertices {
                let o = seq.offset(t, v);
                s += (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt();
            }
            s
        })
        .collect())
}

/// Piecewise-linear interpolation of `curve` through the samples at `keys`.
/// The first and last index are always used as anchors.
pub fn interp_reconstruct(curve: &[f64], keys: &[usize]) -> Result<Vec<f64>> {
    let n = curve.len();
    if n < 2 {
        return Err(Error::invalid("interpolation needs at least 2 samples"));
    }
    if let Some(&k) = keys.iter().find(|&&k| k >= n) {
        return Err(Error::IndexOutOfRange { index: k, len: n });
    }
    let mut anchors: Vec<usize> = keys.iter().copied().chain([0, n - 1]).collect();
    anchors.sort_unstable();
    anchors.dedup();
    let mut out = vec![0.0; n];
    for w in anchors.windows(2) {
        let (a, b) = (w[0], w[1]);
        let span = (b - a) as f64;
        for (t, o) in out.iter_mut().enumerate().take(b).skip(a) {
            let u = (t - a) as f64 / span;
            *o = curve[a] + u * (curve[b] - curve[a]);
        }
        out[b] = curve[b];
    }
    Ok(out)
}

pub fn rms_error(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(1) as f64;
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub seq_id: String,
    pub lve: f64,
    pub fdd: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub lve: f64,
    pub fdd: f64,
    /// Per-frame lip maxima of all sequences, concatenated in input order.
    pub per_frame_max_lip_err: Vec<f64>,
    /// Mean Euclidean error of each vertex over all frames of all sequences.
    pub per_vertex_mean_err: Vec<f64>,
    pub sequences: Vec<SequenceMetrics>,
    pub meta: Vec<(String, String)>,
}

/// Per-sequence metrics and their means over `(id, pred, gt)` triples.
pub fn evaluate_corpus(pairs: &[(String, MotionSequence, MotionSequence)], mesh: &MeshSpec, opts: MetricOptions) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("no sequences to evaluate"));
    }
    let mut report = MetricReport {
        per_vertex_mean_err: vec![0.0; mesh.vertex_count()],
        ..Default::default()
    };
    let mut frames = 0usize;
    for (id, pred, gt) in pairs {
        let seq = SequenceMetrics {
            seq_id: id.clone(),
            lve: lve_with(pred, gt, mesh, opts)?,
            fdd: fdd_with(pred, gt, mesh, opts)?,
        };
        report.per_frame_max_lip_err.extend(max_lip_errors(pred, gt, mesh, opts)?);
        let map = error_map(pred, gt)?;
        for t in 0..map.rows() {
            for (acc, e) in report.per_vertex_mean_err.iter_mut().zip(map.row(t)) {
                *acc += e;
            }
        }
        frames += map.rows();
        report.sequences.push(seq);
    }
    for acc in &mut report.per_vertex_mean_err {
        *acc /= frames as f64;
    }
    let k = report.sequences.len() as f64;
    report.lve = report.sequences.iter().map(|s| s.lve).sum::<f64>() / k;
    report.fdd = report.sequences.iter().map(|s| s.fdd).sum::<f64>() / k;
    Ok(report)
}

impl MetricReport {
    pub fn sequences_csv(&self) -> String {
        let mut s = String::from("seq_id,lve,fdd\n");
        for r in &self.sequences {
            let _ = writeln!(s, "{},{},{}", r.seq_id, r.lve, r.fdd);
        }
        s
    }

    pub fn aggregate_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "lve,{}", self.lve);
        let _ = writeln!(s, "fdd,{}", self.fdd);
        let _ = writeln!(s, "sequences,{}", self.sequences.len());
        for (k, v) in &self.meta {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    /// Writes `per_sequence.csv` and `aggregate.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("per_sequence.csv"), self.sequences_csv())?;
        fs::write(dir.join("aggregate.csv"), self.aggregate_csv())?;
        Ok(())
    }
}

pub fn heatmap_csv(map: &Mat) -> String {
    let mut s = String::from("frame,vertex,err\n");
    for t in 0..map.rows() {
        for v in 0..map.cols() {
            let _ = writeln!(s, "{t},{v},{}", map.get(t, v));
        }
    }
    s
}

/// `frame,lip_offset,is_key` rows.
pub fn curve_csv(curve: &[f64], keys: &[usize]) -> String {
    let mut s = String::from("frame,lip_offset,is_key\n");
    for (t, c) in curve.iter().enumerate() {
        let _ = writeln!(s, "{t},{c},{}", u8::from(keys.binary_search(&t).is_ok()));
    }
    s
}
