//! Configuration, layers shared by the key-motion and completion models, and
//! checkpoint files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::nn::layers::{encoder_stack, run_stack, Conv1d, DecoderBlock, EncoderBlock, Linear};
use crate::nn::pe::sinusoidal_pe;
use crate::nn::{Graph, Mat, ParamId, ParamStore, Var};
use crate::types::{MeshSpec, SpeakerId};

/// Cross-attention memory of the key-motion decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyMemory {
    /// The key rows themselves.
    KeyRows,
    /// Every audio frame, projected and position-encoded.
    FullAudio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub d: usize,
    pub f: usize,
    /// Block count of the motion-flow stacks.
    pub depth: usize,
    /// Overrides `depth` with 6.
    pub faithful_depth: bool,
    pub encoder_blocks: usize,
    pub encoder_heads: usize,
    pub flow_heads: usize,
    pub decoder_heads: usize,
    pub pe_dim: usize,
    pub conv_width: usize,
    /// Width of the audio encoder's convolutional position embedding; 0 disables it.
    pub pos_conv_width: usize,
    pub vertex_count: usize,
    pub lip_vertices: Vec<usize>,
    /// Transcript vocabulary; the CTC blank is one past the end.
    pub vocab: usize,
    /// Speaker-table size; 0 disables the speaker embedding.
    pub speakers: usize,
    pub key_memory: KeyMemory,
    /// When false the completion model sees zeros instead of audio features.
    pub audio_guidance: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 64,
            d: 64,
            f: 32,
            depth: 2,
            faithful_depth: false,
            encoder_blocks: 2,
            encoder_heads: 4,
            flow_heads: 8,
            decoder_heads: 4,
            pe_dim: 16,
            conv_width: 3,
            pos_conv_width: 7,
            vertex_count: 200,
            lip_vertices: Vec::new(),
            vocab: 20,
            speakers: 4,
            key_memory: KeyMemory::FullAudio,
            audio_guidance: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn for_mesh(mut self, mesh: &MeshSpec) -> Self {
        self.vertex_count = mesh.vertex_count();
        self.lip_vertices = mesh.lip_vertices.clone();
        self
    }

    pub fn flow_depth(&self) -> usize {
        if self.faithful_depth {
            6
        } else {
            self.depth
        }
    }

    pub fn motion_dim(&self) -> usize {
        3 * self.vertex_count
    }

    /// Columns of a flattened motion row that belong to lip vertices.
    pub fn lip_columns(&self) -> Vec<usize> {
        self.lip_vertices.iter().flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.f == 0 || self.feature_dim == 0 || self.vertex_count == 0 {
            return bad("model dimensions must be positive".into());
        }
        for (name, width, heads) in [
            ("encoder", self.d, self.encoder_heads),
            ("flow", self.f, self.flow_heads),
            ("decoder", self.f, self.decoder_heads),
        ] {
            if heads == 0 || width % heads != 0 {
                return bad(format!("{name} width {width} is not divisible by {heads} heads"));
            }
        }
        if self.f % 2 != 0 || self.pe_dim % 2 != 0 {
            return bad("positional encodings need even widths".into());
        }
        if self.conv_width % 2 == 0 || (self.pos_conv_width > 0 && self.pos_conv_width % 2 == 0) {
            return bad("conv widths must be odd".into());
        }
        if self.lip_vertices.is_empty() {
            return bad("lip vertex set is empty".into());
        }
        if let Some(&v) = self.lip_vertices.iter().find(|&&v| v >= self.vertex_count) {
            return bad(format!("lip vertex {v} outside {} vertices", self.vertex_count));
        }
        Ok(())
    }
}

/// Projects features to width `d`, adds a convolutional position embedding
/// `h + gelu(conv(h))` so attention can tell neighbours apart, runs
/// self-attention blocks and adds an optional per-speaker embedding to every
/// frame.
#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub input: Linear,
    pub position: Option<Conv1d>,
    pub blocks: Vec<EncoderBlock>,
    pub speaker_table: Option<ParamId>,
    pub speakers: usize,
}

impl AudioEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let input = Linear::new(store, &format!("{name}.input"), cfg.feature_dim, cfg.d);
        let position = match cfg.pos_conv_width {
            0 => None,
            w => Some(Conv1d::new(store, &format!("{name}.position"), cfg.d, cfg.d, w)?),
        };
        let blocks = encoder_stack(store, &format!("{name}.block"), cfg.encoder_blocks, cfg.d, cfg.encoder_heads, 2 * cfg.d)?;
        let speaker_table = (cfg.speakers > 0).then(|| {
            store.add_uniform(&format!("{name}.speaker"), cfg.speakers, cfg.d, 1.0 / (cfg.d as f64).sqrt())
        });
        Ok(AudioEncoder {
            input,
            position,
            blocks,
            speaker_table,
            speakers: cfg.speakers,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, features: &Mat, speaker: Option<SpeakerId>) -> Result<Var> {
        let x = g.constant(features.clone());
        let mut h = self.input.forward(g, x)?;
        if let Some(conv) = &self.position {
            let p = conv.forward(g, h)?;
            let p = g.gelu(p);
            h = g.add(h, p)?;
        }
        let mut h = run_stack(&self.blocks, g, h)?;
        if let (Some(table), Some(s)) = (self.speaker_table, speaker) {
            if s.0 >= self.speakers {
                return Err(Error::UnknownSpeaker {
                    id: s.0,
                    count: self.speakers,
                });
            }
            let t = g.param(table);
            let e = g.gather_rows(t, &vec![s.0; features.rows()])?;
            h = g.add(h, e)?;
        }
        Ok(h)
    }
}

/// Linear `d -> f`, frame-position encoding, one decoder block whose memory is
/// its own input, linear `f -> 3V`.
#[derive(Clone, Debug)]
pub struct MotionDecoder {
    pub input: Linear,
    pub block: DecoderBlock,
    pub output: Linear,
    pub f: usize,
}

impl MotionDecoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(MotionDecoder {
            input: Linear::new(store, &format!("{name}.input"), cfg.d, cfg.f),
            block: DecoderBlock::new(store, &format!("{name}.block"), cfg.f, cfg.decoder_heads, 2 * cfg.f)?,
            output: Linear::new(store, &format!("{name}.output"), cfg.f, cfg.motion_dim()),
            f: cfg.f,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        let n = g.shape(z).0;
        let h = self.input.forward(g, z)?;
        let positions: Vec<usize> = (0..n).collect();
        let pe = g.constant(sinusoidal_pe(&positions, self.f)?);
        let h = g.add(h, pe)?;
        let h = self.block.forward(g, h, h)?;
        self.output.forward(g, h)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointSchema {
    pub kind: String,
    pub config: ModelConfig,
    pub layers: Vec<LayerEntry>,
    #[serde(default)]
    pub config_hash: String,
}

pub fn schema_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(path: &Path, kind: &str, config: &ModelConfig, store: &ParamStore, config_hash: &str) -> Result<()> {
    container::write_container(path, &store.to_records())?;
    let schema = CheckpointSchema {
        kind: kind.to_string(),
        config: config.clone(),
        layers: store
            .iter()
            .map(|(_, name, m)| LayerEntry {
                name: name.to_string(),
                shape: [m.rows(), m.cols()],
            })
            .collect(),
        config_hash: config_hash.to_string(),
    };
    fs::write(schema_path(path), serde_json::to_string_pretty(&schema)?)?;
    Ok(())
}

pub fn read_schema(path: &Path) -> Result<CheckpointSchema> {
    Ok(serde_json::from_str(&fs::read_to_string(schema_path(path))?)?)
}

/// Loads weights into `store` after checking the schema kind.
pub fn load_weights(path: &Path, kind: &str, store: &mut ParamStore) -> Result<()> {
    let schema = read_schema(path)?;
    if schema.kind != kind {
        return Err(Error::invalid(format!(
            "{} holds a {} checkpoint, expected {kind}",
            path.display(),
            schema.kind
        )));
    }
    store.load_records(&container::read_container(path)?)
}
