//! Cross-modal motion completion: motion-flow encoder, gated audio fusion and
//! the motion decoder, plus the direct-regression baseline that shares its
//! encoder and decoder.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{load_weights, read_schema, save_checkpoint, AudioEncoder, ModelConfig, MotionDecoder};
use crate::nn::graph::sigmoid;
use crate::nn::layers::{encoder_stack, run_stack, Conv1d, EncoderBlock, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::nn::pe::sinusoidal_pe;
use crate::nn::{Graph, Mat, ParamId, ParamStore, Var};
use crate::types::{complement, KeyMotionSet, MotionSequence, SpeakerId};

pub const KIND: &str = "cmc";
pub const BASELINE_KIND: &str = "baseline";

/// `G = sigmoid([A, Phi] W)`, `Z = G * A + (1 - G) * Phi`; returns `(G, Z)`.
pub fn gated_fuse(a: &Mat, phi: &Mat, w: &Mat) -> Result<(Mat, Mat)> {
    let (n, d) = a.shape();
    if phi.shape() != (n, d) || w.shape() != (2 * d, d) {
        return Err(Error::shape(format!(
            "gated fusion needs A and Phi of equal shape and W of 2d x d; got {:?}, {:?}, {:?}",
            a.shape(),
            phi.shape(),
            w.shape()
        )));
    }
    let mut g = Mat::zeros(n, d);
    let mut z = Mat::zeros(n, d);
    for t in 0..n {
        for j in 0..d {
            let mut s = 0.0;
            for i in 0..d {
                s += a.get(t, i) * w.get(i, j) + phi.get(t, i) * w.get(d + i, j);
            }
            let gate = sigmoid(s);
            g.set(t, j, gate);
            z.set(t, j, gate * a.get(t, j) + (1.0 - gate) * phi.get(t, j));
        }
    }
    Ok((g, z))
}

/// For each of `n` frames, the row of the stacked `[key rows; non-key rows]`
/// placed there by the motion flow encoder: key `j` lands at `indices[j]`,
/// non-key frames follow in time order. Always a permutation of `0..n`.
pub fn arrangement(indices: &[usize], n: usize) -> Result<Vec<usize>> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    if indices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("key indices must be strictly increasing"));
    }
    let mut out = vec![0; n];
    for (j, &i) in indices.iter().enumerate() {
        out[i] = j;
    }
    for (r, i) in complement(indices, n).into_iter().enumerate() {
        out[i] = indices.len() + r;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionFlowFeatures {
    /// `N x d`.
    pub phi: Mat,
    /// True where the row was produced from a key token.
    pub from_key: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct CmcModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: AudioEncoder,
    pub key_embed: Linear,
    pub key_merge: Linear,
    pub key_blocks: Vec<EncoderBlock>,
    pub query_embed: Linear,
    pub query_blocks: Vec<EncoderBlock>,
    pub cross: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub key_ffn: FeedForward,
    pub fuse_in: Conv1d,
    pub fuse_blocks: Vec<EncoderBlock>,
    pub fuse_out: Conv1d,
    pub flow_out: Linear,
    pub gate: ParamId,
    pub decoder: MotionDecoder,
}

fn check_keys(key: &KeyMotionSet, motion_dim: usize) -> Result<()> {
    if key.is_empty() {
        return Err(Error::invalid("motion completion needs at least one key"));
    }
    if key.motions.cols() != motion_dim {
        return Err(Error::shape(format!(
            "key motions have {} columns, model expects {motion_dim}",
            key.motions.cols()
        )));
    }
    Ok(())
}

impl CmcModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new(c.seed);
        let s = &mut store;
        let (f, d, depth, h) = (c.f, c.d, c.flow_depth(), c.flow_heads);
        let encoder = AudioEncoder::new(s, "audio_encoder", c)?;
        let key_embed = Linear::new(s, "flow.key_embed", c.motion_dim(), f);
        let key_merge = Linear::new(s, "flow.key_merge", f + c.pe_dim, f);
        let key_blocks = encoder_stack(s, "flow.key_block", depth, f, h, 2 * f)?;
        let query_embed = Linear::new(s, "flow.query_embed", c.pe_dim, f);
        let query_blocks = encoder_stack(s, "flow.query_block", depth, f, h, 2 * f)?;
        let cross = MultiHeadAttention::new(s, "flow.cross", f, h)?;
        let cross_norm = LayerNorm::new(s, "flow.cross_norm", f);
        let key_ffn = FeedForward::new(s, "flow.key_ffn", f, 2 * f);
        let fuse_in = Conv1d::new(s, "flow.fuse_in", f, f, c.conv_width)?;
        let fuse_blocks = encoder_stack(s, "flow.fuse_block", depth, f, h, 2 * f)?;
        let fuse_out = Conv1d::new(s, "flow.fuse_out", f, f, c.conv_width)?;
        let flow_out = Linear::new(s, "flow.output", f, d);
        let gate = s.add_uniform("gate.weight", 2 * d, d, 1.0 / ((2 * d) as f64).sqrt());
        let decoder = MotionDecoder::new(s, "motion_decoder", c)?;
        Ok(CmcModel {
            config,
            store,
            encoder,
            key_embed,
            key_merge,
            key_blocks,
            query_embed,
            query_blocks,
            cross,
            cross_norm,
            key_ffn,
            fuse_in,
            fuse_blocks,
            fuse_out,
            flow_out,
            gate,
            decoder,
        })
    }

    /// Phi (`N x d`) from key motions placed at `indices` on an `n`-frame timeline.
    pub fn motion_flow_graph(&self, g: &mut Graph<'_>, keys: Var, indices: &[usize], n: usize) -> Result<Var> {
        let c = &self.config;
        if indices.is_empty() {
            return Err(Error::invalid("motion completion needs at least one key"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        let k = self.key_embed.forward(g, keys)?;
        let pe_k = g.constant(sinusoidal_pe(indices, c.pe_dim)?);
        let k = g.concat_cols(k, pe_k)?;
        let k = self.key_merge.forward(g, k)?;
        let phi_k = run_stack(&self.key_blocks, g, k)?;
        let key_rows = self.key_ffn.forward(g, phi_k)?;

        let base = g.constant(Mat::zeros(n, c.f));
        let mut grid = g.scatter_rows(base, indices, key_rows)?;
        let others = complement(indices, n);
        if !others.is_empty() {
            let pe_q = g.constant(sinusoidal_pe(&others, c.pe_dim)?);
            let q = self.query_embed.forward(g, pe_q)?;
            let q = run_stack(&self.query_blocks, g, q)?;
            let att = self.cross.forward(g, q, phi_k)?;
            let q = g.add(q, att)?;
            let phi_non = self.cross_norm.forward(g, q)?;
            grid = g.scatter_rows(grid, &others, phi_non)?;
        }
        let h = self.fuse_in.forward(g, grid)?;
        let h = run_stack(&self.fuse_blocks, g, h)?;
        let h = self.fuse_out.forward(g, h)?;
        self.flow_out.forward(g, h)
    }

    /// Gated fusion of audio and motion flow, then decoding to `N x 3V`.
    pub fn fuse_and_decode_graph(&self, g: &mut Graph<'_>, audio: Var, phi: Var) -> Result<Var> {
        let audio = if self.config.audio_guidance {
            audio
        } else {
            let (r, c) = g.shape(audio);
            g.constant(Mat::zeros(r, c))
        };
        let cat = g.concat_cols(audio, phi)?;
        let w = g.param(self.gate);
        let s = g.matmul(cat, w)?;
        let gate = g.sigmoid(s);
        let diff = g.sub(audio, phi)?;
        let gated = g.mul(gate, diff)?;
        let z = g.add(phi, gated)?;
        self.decoder.forward(g, z)
    }

    /// Completion given precomputed audio features `audio` (`N x d`).
    pub fn complete_graph(&self, g: &mut Graph<'_>, audio: Var, key: &KeyMotionSet) -> Result<Var> {
        check_keys(key, self.config.motion_dim())?;
        let n = g.shape(audio).0;
        if key.n_frames != n {
            return Err(Error::shape(format!("key set spans {} frames, audio has {n}", key.n_frames)));
        }
        let k = g.constant(key.motions.clone());
        let phi = self.motion_flow_graph(g, k, &key.indices, n)?;
        self.fuse_and_decode_graph(g, audio, phi)
    }

    pub fn forward_graph(&self, g: &mut Graph<'_>, features: &Mat, speaker: Option<SpeakerId>, key: &KeyMotionSet) -> Result<Var> {
        let audio = self.encoder.forward(g, features, speaker)?;
        self.complete_graph(g, audio, key)
    }

    pub fn loss_graph(
        &self,
        g: &mut Graph<'_>,
        features: &Mat,
        speaker: Option<SpeakerId>,
        key: &KeyMotionSet,
        gt: &Mat,
    ) -> Result<(Var, [Var; 2])> {
        let y = self.forward_graph(g, features, speaker, key)?;
        motion_loss(g, y, gt)
    }

    pub fn encode_motion_flow(&self, key: &KeyMotionSet) -> Result<MotionFlowFeatures> {
        check_keys(key, self.config.motion_dim())?;
        let mut g = Graph::new(&self.store);
        let k = g.constant(key.motions.clone());
        let phi = self.motion_flow_graph(&mut g, k, &key.indices, key.n_frames)?;
        let m = key.indices.len();
        let from_key = arrangement(&key.indices, key.n_frames)?.into_iter().map(|r| r < m).collect();
        Ok(MotionFlowFeatures {
            phi: g.value(phi).clone(),
            from_key,
        })
    }

    pub fn encode_audio(&self, features: &Mat, speaker: Option<SpeakerId>) -> Result<Mat> {
        let mut g = Graph::new(&self.store);
        let a = self.encoder.forward(&mut g, features, speaker)?;
        Ok(g.value(a).clone())
    }

    pub fn decode_motion(&self, z: &Mat) -> Result<Mat> {
        let mut g = Graph::new(&self.store);
        let zv = g.constant(z.clone());
        let y = self.decoder.forward(&mut g, zv)?;
        Ok(g.value(y).clone())
    }

    /// Completion from already-encoded audio (for example a frozen encoder's output).
    pub fn complete(&self, audio: &Mat, key: &KeyMotionSet) -> Result<Mat> {
        let mut g = Graph::new(&self.store);
        let a = g.constant(audio.clone());
        let y = self.complete_graph(&mut g, a, key)?;
        Ok(g.value(y).clone())
    }

    pub fn forward(&self, features: &Mat, speaker: Option<SpeakerId>, key: &KeyMotionSet) -> Result<Mat> {
        let mut g = Graph::new(&self.store);
        let y = self.forward_graph(&mut g, features, speaker, key)?;
        Ok(g.value(y).clone())
    }
}

impl CmcModel {
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        save_checkpoint(path, KIND, &self.config, &self.store, config_hash)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let schema = read_schema(path)?;
        let mut model = Self::new(schema.config)?;
        load_weights(path, KIND, &mut model.store)?;
        Ok(model)
    }

    /// Rounds every parameter to what a checkpoint would store.
    pub fn round_to_checkpoint(&mut self) -> Result<()> {
        let records = self.store.to_records();
        self.store.load_records(&records)
    }
}

/// Reconstruction and velocity MSE; the total is their sum.
pub fn motion_loss(g: &mut Graph<'_>, y: Var, gt: &Mat) -> Result<(Var, [Var; 2])> {
    let gt_v = g.constant(gt.clone());
    let rec = g.mse(y, gt_v)?;
    let dy = g.row_diff(y);
    let dg = g.row_diff(gt_v);
    let vel = g.mse(dy, dg)?;
    let total = g.weighted_sum(&[(rec, 1.0), (vel, 1.0)])?;
    Ok((total, [rec, vel]))
}

/// Audio encoder straight into the motion decoder, with no key path.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: AudioEncoder,
    pub decoder: MotionDecoder,
}

impl BaselineModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let encoder = AudioEncoder::new(&mut store, "audio_encoder", &config)?;
        let decoder = MotionDecoder::new(&mut store, "motion_decoder", &config)?;
        Ok(BaselineModel {
            config,
            store,
            encoder,
            decoder,
        })
    }

    pub fn forward_graph(&self, g: &mut Graph<'_>, features: &Mat, speaker: Option<SpeakerId>) -> Result<Var> {
        let a = self.encoder.forward(g, features, speaker)?;
        self.decoder.forward(g, a)
    }

    pub fn loss_graph(&self, g: &mut Graph<'_>, features: &Mat, speaker: Option<SpeakerId>, gt: &Mat) -> Result<(Var, [Var; 2])> {
        let y = self.forward_graph(g, features, speaker)?;
        motion_loss(g, y, gt)
    }

    pub fn forward(&self, features: &Mat, speaker: Option<SpeakerId>) -> Result<Mat> {
        let mut g = Graph::new(&self.store);
        let y = self.forward_graph(&mut g, features, speaker)?;
        Ok(g.value(y).clone())
    }
}

impl BaselineModel {
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        save_checkpoint(path, BASELINE_KIND, &self.config, &self.store, config_hash)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let schema = read_schema(path)?;
        let mut model = Self::new(schema.config)?;
        load_weights(path, BASELINE_KIND, &mut model.store)?;
        Ok(model)
    }

    /// Rounds every parameter to what a checkpoint would store.
    pub fn round_to_checkpoint(&mut self) -> Result<()> {
        let records = self.store.to_records();
        self.store.load_records(&records)
    }
}

/// Rows of a full-sequence prediction at `indices`, used as key motions.
pub fn extract_key_from_baseline(pred: &MotionSequence, indices: &[usize]) -> Result<KeyMotionSet> {
    KeyMotionSet::from_sequence(&pred.frames, indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, GradCheckOptions};

    fn tiny() -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            d: 8,
            f: 8,
            encoder_heads: 2,
            decoder_heads: 2,
            flow_heads: 2,
            pe_dim: 4,
            depth: 1,
            vertex_count: 5,
            lip_vertices: vec![0, 1],
            vocab: 3,
            speakers: 2,
            seed: 9,
            ..Default::default()
        }
    }

    fn wave(rows: usize, cols: usize, k: f64) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|i| (i as f64 * k).sin()).collect()).unwrap()
    }

    #[test]
    fn gated_fuse_examples() {
        let a = wave(3, 2, 0.4);
        let w = wave(4, 2, 1.3);
        let (_, z) = gated_fuse(&a, &a, &w).unwrap();
        assert!(z.max_abs_diff(&a) < 1e-15);

        let phi = wave(3, 2, 0.9);
        let (g, z) = gated_fuse(&a, &phi, &Mat::zeros(4, 2)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.5));
        for i in 0..6 {
            assert!((z.data()[i] - 0.5 * (a.data()[i] + phi.data()[i])).abs() < 1e-15);
        }
        assert!(gated_fuse(&a, &phi, &Mat::zeros(3, 2)).is_err());
    }

    #[test]
    fn gate_in_graph_matches_elementwise_loop() {
        let model = CmcModel::new(tiny()).unwrap();
        let a = wave(5, 8, 0.21);
        let phi = wave(5, 8, 0.57);
        let w = model.store.get(model.gate).clone();
        let (_, z) = gated_fuse(&a, &phi, &w).unwrap();
        let expect = model.decode_motion(&z).unwrap();

        let mut g = Graph::new(&model.store);
        let av = g.constant(a);
        let pv = g.constant(phi);
        let y = model.fuse_and_decode_graph(&mut g, av, pv).unwrap();
        assert!(g.value(y).max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn output_length_for_every_key_count() {
        let model = CmcModel::new(tiny()).unwrap();
        let n = 8;
        let feats = wave(n, 4, 0.3);
        let gt = wave(n, 15, 0.11);
        for m in 1..=n {
            let idx: Vec<usize> = (0..m).map(|j| j * n / m).collect();
            let key = KeyMotionSet::from_sequence(&gt, &idx).unwrap();
            let y = model.forward(&feats, Some(SpeakerId(0)), &key).unwrap();
            assert_eq!(y.shape(), (n, 15));
            assert_eq!(y, model.forward(&feats, Some(SpeakerId(0)), &key).unwrap());
        }
    }

    #[test]
    fn all_keys_skips_the_query_branch() {
        let model = CmcModel::new(tiny()).unwrap();
        let gt = wave(4, 15, 0.2);
        let key = KeyMotionSet::from_sequence(&gt, &[0, 1, 2, 3]).unwrap();
        let flow = model.encode_motion_flow(&key).unwrap();
        assert!(flow.from_key.iter().all(|&k| k));
        assert_eq!(flow.phi.shape(), (4, 8));
    }

    #[test]
    fn single_key_flow_varies_with_position() {
        let model = CmcModel::new(tiny()).unwrap();
        let gt = wave(5, 15, 0.2);
        let key = KeyMotionSet::from_sequence(&gt, &[2]).unwrap();
        let flow = model.encode_motion_flow(&key).unwrap();
        assert_eq!(flow.from_key, vec![false, false, true, false, false]);
        assert_ne!(flow.phi.row(0), flow.phi.row(4));
    }

    #[test]
    fn no_audio_variant_ignores_features() {
        let model = CmcModel::new(ModelConfig {
            audio_guidance: false,
            ..tiny()
        })
        .unwrap();
        let gt = wave(6, 15, 0.2);
        let key = KeyMotionSet::from_sequence(&gt, &[0, 3, 5]).unwrap();
        let a = model.forward(&wave(6, 4, 0.3), None, &key).unwrap();
        let b = model.forward(&wave(6, 4, 0.8), None, &key).unwrap();
        assert_eq!(a, b);
        let full = CmcModel::new(tiny()).unwrap();
        assert_ne!(full.forward(&wave(6, 4, 0.3), None, &key).unwrap(), full.forward(&wave(6, 4, 0.8), None, &key).unwrap());
    }

    #[test]
    fn key_count_and_range_errors() {
        let model = CmcModel::new(tiny()).unwrap();
        let mut g = Graph::new(&model.store);
        let k = g.constant(Mat::zeros(1, 15));
        assert!(model.motion_flow_graph(&mut g, k, &[5], 5).is_err());
        let empty = KeyMotionSet::new(vec![], Mat::zeros(0, 15), 5).unwrap();
        assert!(model.encode_motion_flow(&empty).is_err());
    }

    #[test]
    fn baseline_extraction() {
        let gt = MotionSequence::new(wave(5, 15, 0.2), 25.0, "m").unwrap();
        let k = extract_key_from_baseline(&gt, &[1, 3]).unwrap();
        assert_eq!(k, KeyMotionSet::from_sequence(&gt.frames, &[1, 3]).unwrap());
        let all: Vec<usize> = (0..5).collect();
        assert_eq!(extract_key_from_baseline(&gt, &all).unwrap().motions, gt.frames);
    }

    #[test]
    fn baseline_shapes() {
        let model = BaselineModel::new(tiny()).unwrap();
        let y = model.forward(&wave(7, 4, 0.3), Some(SpeakerId(1))).unwrap();
        assert_eq!(y.shape(), (7, 15));
    }

    #[test]
    fn full_stack_gradient_check() {
        let model = CmcModel::new(ModelConfig {
            vertex_count: 5,
            ..tiny()
        })
        .unwrap();
        let feats = wave(6, 4, 0.37);
        let gt = wave(6, 15, 0.13);
        let key = KeyMotionSet::from_sequence(&gt, &[0, 2, 5]).unwrap();
        let report = grad_check(
            &model.store,
            |g| Ok(model.loss_graph(g, &feats, Some(SpeakerId(1)), &key, &gt)?.0),
            GradCheckOptions {
                coords_per_param: Some(4),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
