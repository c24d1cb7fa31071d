//! Key-motion acquisition: audio encoder, key-motion decoder and the
//! pseudo-complete training objective.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{load_weights, read_schema, save_checkpoint, AudioEncoder, KeyMemory, ModelConfig};
use crate::nn::layers::{DecoderBlock, EncoderBlock, Linear};
use crate::nn::pe::sinusoidal_pe;
use crate::nn::{Graph, Mat, ParamStore, Var};
use crate::types::{KeyMotionSet, MotionSequence, SpeakerId};

pub const KIND: &str = "lkma";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub vel: f64,
    pub lat: f64,
    pub ctc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1000.0,
            vel: 1000.0,
            lat: 0.001,
            ctc: 0.0001,
        }
    }
}

/// Loss components and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub rec: f64,
    pub vel: f64,
    pub lat: f64,
    pub ctc: f64,
    pub total: f64,
}

pub fn lkma_total_loss(w: &LossWeights, rec: f64, vel: f64, lat: f64, ctc: f64) -> f64 {
    w.rec * rec + w.vel * vel + w.lat * lat + w.ctc * ctc
}

/// Mean squared difference over all entries.
pub fn loss_rec(pred: &Mat, gt: &Mat) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.len() as f64)
}

fn diff_rows(m: &Mat) -> Mat {
    let n = m.rows().saturating_sub(1);
    let mut out = Mat::zeros(n, m.cols());
    for t in 0..n {
        for (o, (a, b)) in out.row_mut(t).iter_mut().zip(m.row(t + 1).iter().zip(m.row(t))) {
            *o = a - b;
        }
    }
    out
}

/// MSE between first temporal differences; 0 for single-frame inputs.
pub fn loss_vel(pred: &Mat, gt: &Mat) -> Result<f64> {
    loss_rec(&diff_rows(pred), &diff_rows(gt))
}

pub fn loss_lat(audio_latent: &Mat, lip_latent: &Mat) -> Result<f64> {
    loss_rec(audio_latent, lip_latent)
}

/// Ground truth everywhere except the key rows, which take the key motions.
pub fn build_pseudo_complete(gt: &MotionSequence, key: &KeyMotionSet) -> Result<MotionSequence> {
    if key.n_frames != gt.n_frames() {
        return Err(Error::shape(format!(
            "key set spans {} frames, ground truth has {}",
            key.n_frames,
            gt.n_frames()
        )));
    }
    if key.motions.cols() != gt.frames.cols() {
        return Err(Error::shape("key motions and ground truth differ in vertex count"));
    }
    let mut frames = gt.frames.clone();
    for (j, &i) in key.indices.iter().enumerate() {
        frames.row_mut(i).copy_from_slice(key.motions.row(j));
    }
    MotionSequence::new(frames, gt.fps, &gt.mesh)
}

pub fn select_key_features(a: &Mat, indices: &[usize]) -> Result<Mat> {
    a.gather_rows(indices)
}

/// One attention block over flattened lip coordinates.
#[derive(Clone, Debug)]
pub struct LipNet {
    pub input: Linear,
    pub block: EncoderBlock,
    pub output: Option<Linear>,
}

impl LipNet {
    pub fn forward(&self, g: &mut Graph<'_>, lips: Var) -> Result<Var> {
        let h = self.input.forward(g, lips)?;
        let h = self.block.forward(g, h)?;
        match &self.output {
            Some(o) => o.forward(g, h),
            None => Ok(h),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LkmaModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: AudioEncoder,
    pub key_input: Linear,
    pub key_block: DecoderBlock,
    pub key_output: Linear,
    pub lip_encoder: LipNet,
    pub lip_reader: LipNet,
}

/// Nodes of one forward pass that training and inspection need.
pub struct LkmaForward {
    pub audio: Var,
    pub keys: Var,
    pub pseudo: Option<Var>,
}

impl LkmaModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new(c.seed);
        let s = &mut store;
        let lips = 3 * c.lip_vertices.len();
        let encoder = AudioEncoder::new(s, "audio_encoder", c)?;
        let key_input = Linear::new(s, "key_decoder.input", c.d, c.f);
        let key_block = DecoderBlock::new(s, "key_decoder.block", c.f, c.decoder_heads, 2 * c.f)?;
        let key_output = Linear::new(s, "key_decoder.output", c.f, c.motion_dim());
        let lip_encoder = LipNet {
            input: Linear::new(s, "lip_encoder.input", lips, c.d),
            block: EncoderBlock::new(s, "lip_encoder.block", c.d, c.encoder_heads, 2 * c.d)?,
            output: None,
        };
        let lip_reader = LipNet {
            input: Linear::new(s, "lip_reader.input", lips, c.f),
            block: EncoderBlock::new(s, "lip_reader.block", c.f, c.decoder_heads, 2 * c.f)?,
            output: Some(Linear::new(s, "lip_reader.output", c.f, c.vocab + 1)),
        };
        Ok(LkmaModel {
            config,
            store,
            encoder,
            key_input,
            key_block,
            key_output,
            lip_encoder,
            lip_reader,
        })
    }

    pub fn encode_audio_graph(&self, g: &mut Graph<'_>, features: &Mat, speaker: Option<SpeakerId>) -> Result<Var> {
        self.encoder.forward(g, features, speaker)
    }

    /// Key motions (`m x 3V`) from key audio rows `a_k` located at `indices`.
    /// `audio` is the full sequence, used only with full-audio memory.
    pub fn decode_keys_graph(&self, g: &mut Graph<'_>, a_k: Var, indices: &[usize], audio: Var) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::invalid("key decoder needs at least one key"));
        }
        let f = self.config.f;
        let h = self.key_input.forward(g, a_k)?;
        let pe = g.constant(sinusoidal_pe(indices, f)?);
        let h = g.add(h, pe)?;
        let memory = match self.config.key_memory {
            KeyMemory::KeyRows => h,
            KeyMemory::FullAudio => {
                let n = g.shape(audio).0;
                let m = self.key_input.forward(g, audio)?;
                let positions: Vec<usize> = (0..n).collect();
                let pe = g.constant(sinusoidal_pe(&positions, f)?);
                g.add(m, pe)?
            }
        };
        let h = self.key_block.forward(g, h, memory)?;
        self.key_output.forward(g, h)
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph<'_>,
        features: &Mat,
        speaker: Option<SpeakerId>,
        indices: &[usize],
        gt: Option<&Mat>,
    ) -> Result<LkmaForward> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= features.rows()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: features.rows(),
            });
        }
        let audio = self.encode_audio_graph(g, features, speaker)?;
        let a_k = g.gather_rows(audio, indices)?;
        let keys = self.decode_keys_graph(g, a_k, indices, audio)?;
        let pseudo = match gt {
            Some(gt) => {
                if gt.rows() != features.rows() {
                    return Err(Error::shape(format!(
                        "audio has {} frames, motion has {}",
                        features.rows(),
                        gt.rows()
                    )));
                }
                let base = g.constant(gt.clone());
                Some(g.scatter_rows(base, indices, keys)?)
            }
            None => None,
        };
        Ok(LkmaForward { audio, keys, pseudo })
    }

    /// Builds the weighted training loss; returns the total node and the four components.
    pub fn loss_graph(
        &self,
        g: &mut Graph<'_>,
        features: &Mat,
        speaker: Option<SpeakerId>,
        indices: &[usize],
        gt: &Mat,
        tokens: &[usize],
        weights: &LossWeights,
    ) -> Result<(Var, [Var; 4])> {
        let fwd = self.forward_graph(g, features, speaker, indices, Some(gt))?;
        let yp = fwd.pseudo.expect("ground truth supplied");
        let gt_v = g.constant(gt.clone());
        let rec = g.mse(yp, gt_v)?;
        let dp = g.row_diff(yp);
        let dg = g.row_diff(gt_v);
        let vel = g.mse(dp, dg)?;
        let lips = g.gather_cols(yp, &self.config.lip_columns())?;
        let lip_latent = self.lip_encoder.forward(g, lips)?;
        let lat = g.mse(fwd.audio, lip_latent)?;
        let logits = self.lip_reader.forward(g, lips)?;
        let ctc = g.ctc_loss(logits, tokens)?;
        let total = g.weighted_sum(&[(rec, weights.rec), (vel, weights.vel), (lat, weights.lat), (ctc, weights.ctc)])?;
        Ok((total, [rec, vel, lat, ctc]))
    }

    pub fn encode_audio(&self, features: &Mat, speaker: Option<SpeakerId>) -> Result<Mat> {
        let mut g = Graph::new(&self.store);
        let a = self.encode_audio_graph(&mut g, features, speaker)?;
        Ok(g.value(a).clone())
    }

    pub fn predict_keys(&self, features: &Mat, speaker: Option<SpeakerId>, indices: &[usize]) -> Result<KeyMotionSet> {
        let mut g = Graph::new(&self.store);
        let fwd = self.forward_graph(&mut g, features, speaker, indices, None)?;
        KeyMotionSet::new(indices.to_vec(), g.value(fwd.keys).clone(), features.rows())
    }

    /// Lip-reading logits (`N x (vocab + 1)`) for a motion sequence.
    pub fn lip_logits(&self, motion: &Mat) -> Result<Mat> {
        let mut g = Graph::new(&self.store);
        let m = g.constant(motion.clone());
        let lips = g.gather_cols(m, &self.config.lip_columns())?;
        let out = self.lip_reader.forward(&mut g, lips)?;
        Ok(g.value(out).clone())
    }

    pub fn loss_parts(
        &self,
        features: &Mat,
        speaker: Option<SpeakerId>,
        indices: &[usize],
        gt: &Mat,
        tokens: &[usize],
        weights: &LossWeights,
    ) -> Result<LossParts> {
        let mut g = Graph::new(&self.store);
        let (total, [rec, vel, lat, ctc]) = self.loss_graph(&mut g, features, speaker, indices, gt, tokens, weights)?;
        Ok(LossParts {
            rec: g.value(rec).item(),
            vel: g.value(vel).item(),
            lat: g.value(lat).item(),
            ctc: g.value(ctc).item(),
            total: g.value(total).item(),
        })
    }
}

impl LkmaModel {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ctc::ctc_loss;

    fn tiny() -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            d: 8,
            f: 8,
            encoder_heads: 2,
            decoder_heads: 2,
            flow_heads: 2,
            vertex_count: 5,
            lip_vertices: vec![0, 1],
            vocab: 3,
            speakers: 2,
            seed: 5,
            ..Default::default()
        }
    }

    fn wave(rows: usize, cols: usize, k: f64) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|i| (i as f64 * k).sin()).collect()).unwrap()
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(lkma_total_loss(&w, 0.0, 0.0, 0.0, 0.0), 0.0);
        assert!((lkma_total_loss(&w, 1.0, 1.0, 1.0, 1.0) - 2000.0011).abs() < 1e-9);
        let (r, v, l, c) = (0.3, 1.7, 42.0, 9.5);
        let expect = 1000.0 * r + 1000.0 * v + 0.001 * l + 0.0001 * c;
        assert_eq!(lkma_total_loss(&w, r, v, l, c), expect);
    }

    #[test]
    fn weighted_terms_fit_in_f32_range() {
        let w = LossWeights::default();
        let total = lkma_total_loss(&w, 1e6, 1e6, 1e6, 1e6);
        assert!(total.is_finite() && (total as f32).is_finite());
    }

    #[test]
    fn loss_rec_and_vel_examples() {
        let gt = wave(4, 6, 0.3);
        assert_eq!(loss_rec(&gt, &gt).unwrap(), 0.0);
        let shifted = gt.map(|v| v + 0.5);
        assert!((loss_rec(&shifted, &gt).unwrap() - 0.25).abs() < 1e-12);
        assert!(loss_vel(&shifted, &gt).unwrap().abs() < 1e-12);
        assert_eq!(loss_vel(&wave(1, 6, 0.1), &wave(1, 6, 0.7)).unwrap(), 0.0);
        assert_eq!(loss_lat(&Mat::zeros(3, 2), &Mat::filled(3, 2, 1.0)).unwrap(), 1.0);
    }

    #[test]
    fn loss_oracles() {
        let (p, q) = (wave(5, 6, 0.3), wave(5, 6, 0.71));
        let mut acc = 0.0;
        for t in 0..5 {
            for c in 0..6 {
                acc += (p.get(t, c) - q.get(t, c)).powi(2);
            }
        }
        assert!((loss_rec(&p, &q).unwrap() - acc / 30.0).abs() < 1e-7);
        let mut acc = 0.0;
        for t in 1..5 {
            for c in 0..6 {
                let dp = p.get(t, c) - p.get(t - 1, c);
                let dq = q.get(t, c) - q.get(t - 1, c);
                acc += (dp - dq).powi(2);
            }
        }
        assert!((loss_vel(&p, &q).unwrap() - acc / 24.0).abs() < 1e-7);
    }

    #[test]
    fn pseudo_complete_examples() {
        let gt = MotionSequence::new(wave(6, 6, 0.2), 25.0, "m").unwrap();
        let ident = KeyMotionSet::from_sequence(&gt.frames, &[1, 4]).unwrap();
        assert_eq!(build_pseudo_complete(&gt, &ident).unwrap(), gt);

        let all: Vec<usize> = (0..6).collect();
        let k = KeyMotionSet::new(all, Mat::filled(6, 6, 9.0), 6).unwrap();
        assert!(build_pseudo_complete(&gt, &k).unwrap().frames.data().iter().all(|&v| v == 9.0));

        let k = KeyMotionSet::new(vec![0, 3], Mat::filled(2, 6, -1.0), 6).unwrap();
        let yp = build_pseudo_complete(&gt, &k).unwrap();
        for t in 0..6 {
            let expect = if t == 0 || t == 3 { vec![-1.0; 6] } else { gt.frames.row(t).to_vec() };
            assert_eq!(yp.frames.row(t), expect.as_slice());
        }
        let short = KeyMotionSet::new(vec![0], Mat::zeros(1, 6), 5).unwrap();
        assert!(build_pseudo_complete(&gt, &short).is_err());
    }

    #[test]
    fn select_key_features_examples() {
        let a = wave(5, 3, 0.4);
        let all: Vec<usize> = (0..5).collect();
        assert_eq!(select_key_features(&a, &all).unwrap(), a);
        assert_eq!(select_key_features(&a, &[0]).unwrap().row(0), a.row(0));
        let idx = [4, 1, 3];
        let got = select_key_features(&a, &idx).unwrap();
        for (j, &i) in idx.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(got.get(j, c), a.get(i, c));
            }
        }
        assert!(select_key_features(&a, &[5]).is_err());
    }

    #[test]
    fn decoder_matches_layer_by_layer_evaluation() {
        for memory in [KeyMemory::FullAudio, KeyMemory::KeyRows] {
            let model = LkmaModel::new(ModelConfig {
                key_memory: memory,
                ..tiny()
            })
            .unwrap();
            let feats = wave(7, 4, 0.9);
            let idx = [0, 3, 6];
            let keys = model.predict_keys(&feats, Some(SpeakerId(1)), &idx).unwrap();
            assert_eq!(keys.motions.shape(), (3, 15));

            // Re-run each stage in its own graph, passing values across as constants.
            let a = model.encode_audio(&feats, Some(SpeakerId(1))).unwrap();
            let project = |rows: Mat, positions: &[usize]| {
                let mut g = Graph::new(&model.store);
                let x = g.constant(rows);
                let h = model.key_input.forward(&mut g, x).unwrap();
                let mut h = g.value(h).clone();
                h.add_assign(&sinusoidal_pe(positions, 8).unwrap());
                h
            };
            let h = project(select_key_features(&a, &idx).unwrap(), &idx);
            let m = match memory {
                KeyMemory::KeyRows => h.clone(),
                KeyMemory::FullAudio => project(a.clone(), &(0..7).collect::<Vec<_>>()),
            };
            let mut g = Graph::new(&model.store);
            let (x, m) = (g.constant(h), g.constant(m));
            let h = model.key_block.forward(&mut g, x, m).unwrap();
            let h = model.key_output.forward(&mut g, h).unwrap();
            assert!(g.value(h).max_abs_diff(&keys.motions) < 1e-5, "{memory:?}");
        }
    }

    #[test]
    fn single_key_and_equivariance() {
        let model = LkmaModel::new(tiny()).unwrap();
        let feats = wave(6, 4, 0.5);
        let one = model.predict_keys(&feats, None, &[2]).unwrap();
        assert_eq!(one.motions.rows(), 1);

        // Decoding rows in a different order permutes the output rows.
        let a = model.encode_audio(&feats, None).unwrap();
        let run = |idx: &[usize]| {
            let mut g = Graph::new(&model.store);
            let a_k = g.constant(a.gather_rows(idx).unwrap());
            let full = g.constant(a.clone());
            let k = model.decode_keys_graph(&mut g, a_k, idx, full).unwrap();
            g.value(k).clone()
        };
        let fwd = run(&[1, 3, 5]);
        let rev = run(&[5, 3, 1]);
        for j in 0..3 {
            for c in 0..15 {
                assert!((fwd.get(j, c) - rev.get(2 - j, c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn forced_lip_reader_ctc_is_zero_on_valid_path() {
        let mut logits = Mat::filled(4, 4, -50.0);
        for (t, &k) in [1, 3, 0, 0].iter().enumerate() {
            logits.set(t, k, 50.0);
        }
        assert!(ctc_loss(&logits, &[1, 0]).unwrap() < 1e-12);
        let blank = Mat::from_vec(3, 4, vec![-50.0, -50.0, -50.0, 50.0].repeat(3)).unwrap();
        assert!(ctc_loss(&blank, &[]).unwrap() < 1e-12);

        let model = LkmaModel::new(tiny()).unwrap();
        let motion = wave(6, 15, 0.3);
        let lg = model.lip_logits(&motion).unwrap();
        assert_eq!(lg.shape(), (6, 4));
        assert!(ctc_loss(&lg, &[0, 2, 1]).unwrap() > 0.0);
    }

    #[test]
    fn loss_components_match_standalone_functions() {
        let model = LkmaModel::new(tiny()).unwrap();
        let feats = wave(6, 4, 0.5);
        let gt = wave(6, 15, 0.13);
        let idx = [0, 2, 5];
        let w = LossWeights::default();
        let parts = model.loss_parts(&feats, Some(SpeakerId(0)), &idx, &gt, &[0, 1], &w).unwrap();
        let keys = model.predict_keys(&feats, Some(SpeakerId(0)), &idx).unwrap();
        let gts = MotionSequence::new(gt.clone(), 25.0, "m").unwrap();
        let yp = build_pseudo_complete(&gts, &keys).unwrap();
        assert!((parts.rec - loss_rec(&yp.frames, &gt).unwrap()).abs() < 1e-12);
        assert!((parts.vel - loss_vel(&yp.frames, &gt).unwrap()).abs() < 1e-12);
        let ctc = ctc_loss(&model.lip_logits(&yp.frames).unwrap(), &[0, 1]).unwrap();
        assert!((parts.ctc - ctc).abs() < 1e-9);
        assert!((parts.total - lkma_total_loss(&w, parts.rec, parts.vel, parts.lat, parts.ctc)).abs() < 1e-9);
    }
}
