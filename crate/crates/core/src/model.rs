//! End-to-end captioning model: encoders, fusion and DMA decoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Segment, Vocabulary, EOS, IMU_CHANNELS};
use crate::decoder::{Attention, AttentionTrace, DecoderDims, DmaConfig, GenerateOptions, Modality};
use crate::encoders::{
    resample_sensor, sample_frames, BoundaryConfig, LstmEncoder, VisualReadout,
};
use crate::error::{Error, Result};
use crate::fusion::{Ammt, EncodedRepresentations, FusionMode};
use crate::params::{Bound, ParamStore};
use crate::rng::SplitRng;
use crate::tensor::Tensor;
use crate::decoder::Decoder;

/// Sensor streams are interpolated to this rate before index resampling.
pub const SENSOR_RESAMPLE_HZ: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub sensor_channels: usize,
    /// Frames per segment after sampling.
    pub k_frames: usize,
    /// Sensor rows per segment after resampling.
    pub t_sensor: usize,
    pub h_v: usize,
    pub h_s: usize,
    pub h_dec: usize,
    pub emb_dim: usize,
    /// Common DMA width; the decoder width when `None`.
    pub att_dim: Option<usize>,
    pub fusion: FusionMode,
    pub attention: Attention,
    pub dma: DmaConfig,
    pub boundary: BoundaryConfig,
    pub readout: VisualReadout,
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => ModelConfig {
                feature_dim: 32,
                sensor_channels: IMU_CHANNELS,
                k_frames: 80,
                t_sensor: 240,
                h_v: 500,
                h_s: 120,
                h_dec: 512,
                emb_dim: 256,
                att_dim: None,
                fusion: FusionMode::LinearOnS,
                attention: Attention::Dynamic,
                dma: DmaConfig::default(),
                boundary: BoundaryConfig::default(),
                readout: VisualReadout::FinalState,
            },
            Preset::Desk => ModelConfig {
                feature_dim: 32,
                sensor_channels: IMU_CHANNELS,
                k_frames: 16,
                t_sensor: 48,
                h_v: 64,
                h_s: 32,
                h_dec: 64,
                emb_dim: 256,
                att_dim: None,
                fusion: FusionMode::LinearOnS,
                attention: Attention::Dynamic,
                dma: DmaConfig::default(),
                boundary: BoundaryConfig::default(),
                readout: VisualReadout::FinalState,
            },
        }
    }

    pub fn att(&self) -> usize {
        self.att_dim.unwrap_or(self.h_dec)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feature_dim,
            self.sensor_channels,
            self.k_frames,
            self.t_sensor,
            self.h_v,
            self.h_s,
            self.h_dec,
            self.emb_dim,
            self.att(),
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        self.dma.validate()
    }

    fn uses_sensor(&self) -> bool {
        !matches!(self.attention, Attention::Fixed(Modality::V))
    }
}

/// Fixed-size model inputs for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSegment {
    pub id: String,
    pub frames: Tensor,
    pub sensors: Tensor,
    /// Caption token ids, no BOS/EOS.
    pub tokens: Vec<usize>,
}

impl PreparedSegment {
    /// Caption ids followed by EOS.
    pub fn targets(&self) -> Vec<usize> {
        let mut t = self.tokens.clone();
        t.push(EOS);
        t
    }
}

/// Loss terms for one caption.
#[derive(Debug, Clone)]
pub struct SequenceLoss {
    /// Sum of token cross-entropies over unmasked positions.
    pub loss: Var,
    pub tokens: usize,
    pub correct: usize,
    pub logits: Vec<Var>,
    pub zetas: Vec<Var>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Generated {
    pub tokens: Vec<usize>,
    pub trace: AttentionTrace,
}

#[derive(Debug, Clone)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    visual: LstmEncoder,
    sensor: LstmEncoder,
    ammt: Ammt,
    decoder: Decoder,
}

impl CaptionModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitRng::new(seed);
        let mut params = ParamStore::new();
        let visual = LstmEncoder::new(&mut params, "visual", config.feature_dim, config.h_v, true, &mut rng);
        let sensor = LstmEncoder::new(&mut params, "sensor", config.sensor_channels, config.h_s, false, &mut rng);
        let ammt = Ammt::new(&mut params, config.fusion, config.h_v, config.h_s);
        let dims = DecoderDims {
            vocab: vocab.len(),
            emb: config.emb_dim,
            hidden: config.h_dec,
            att: config.att(),
            rep: [config.h_v, config.h_s, config.h_v + config.h_s],
        };
        let decoder = Decoder::new(&mut params, dims, config.attention, &mut rng);
        Ok(CaptionModel {
            config,
            vocab,
            params,
            visual,
            sensor,
            ammt,
            decoder,
        })
    }

    /// Rebuild the layout from `config` and `vocab`, then install `params`.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ParamStore) -> Result<Self> {
        let mut m = CaptionModel::new(config, vocab, 0)?;
        if !m.params.same_layout(&params) {
            return Err(Error::Data("parameter layout does not match the model configuration".into()));
        }
        m.params = params;
        Ok(m)
    }

    pub fn ammt(&self) -> &Ammt {
        &self.ammt
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn visual_encoder(&self) -> &LstmEncoder {
        &self.visual
    }

    pub fn sensor_encoder(&self) -> &LstmEncoder {
        &self.sensor
    }

    pub fn prepare(&self, seg: &Segment) -> Result<PreparedSegment> {
        let frames = sample_frames(&seg.frames, self.config.k_frames)?;
        if frames.cols() != self.config.feature_dim {
            return Err(Error::dim("frame features", frames.shape(), &[self.config.k_frames, self.config.feature_dim]));
        }
        let sensors = resample_sensor(&seg.sensors, SENSOR_RESAMPLE_HZ, self.config.t_sensor)?;
        if sensors.cols() != self.config.sensor_channels {
            return Err(Error::dim("sensor channels", sensors.shape(), &[self.config.t_sensor, self.config.sensor_channels]));
        }
        Ok(PreparedSegment {
            id: seg.id.clone(),
            frames,
            sensors,
            tokens: self.vocab.encode(&seg.caption),
        })
    }

    pub fn encode_visual(&self, tape: &mut Tape, p: &Bound, frames: Var) -> Result<Var> {
        let run = self.visual.encode(tape, p, frames, self.config.boundary)?;
        Ok(match self.config.readout {
            VisualReadout::FinalState => run.final_hidden,
            VisualReadout::SummaryMean => run.summary_mean,
        })
    }

    pub fn encode_sensor(&self, tape: &mut Tape, p: &Bound, signals: Var) -> Result<Var> {
        Ok(self.sensor.encode(tape, p, signals, self.config.boundary)?.final_hidden)
    }

    /// Encoders followed by fusion. A vision-only model skips the sensor
    /// encoder and feeds zeros in its place.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, seg: &PreparedSegment) -> Result<EncodedRepresentations> {
        let frames = tape.constant(seg.frames.clone());
        let h_v = self.encode_visual(tape, p, frames)?;
        let h_s = if self.config.uses_sensor() {
            let sensors = tape.constant(seg.sensors.clone());
            self.encode_sensor(tape, p, sensors)?
        } else {
            tape.constant(Tensor::zeros(&[self.config.h_s]))
        };
        self.ammt.fuse(tape, p, h_v, h_s)
    }

    /// Teacher-forced caption loss. `targets` may be padded; positions after
    /// the first EOS are unrolled but excluded from the loss. With `rng`
    /// supplied, stochastic DMA variants draw Gumbel noise and each input
    /// after the first is replaced by the previous prediction with
    /// probability `1 - p_tf`.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: &EncodedRepresentations,
        targets: &[usize],
        p_tf: f64,
        mut rng: Option<&mut SplitRng>,
    ) -> Result<SequenceLoss> {
        if targets.is_empty() {
            return Err(Error::Data("empty target sequence".into()));
        }
        let cfg = &self.config.dma;
        let mut state = self.decoder.initial_state(tape);
        let mut prev = crate::data::BOS;
        let mut terms = Vec::new();
        let mut logits_out = Vec::with_capacity(targets.len());
        let mut zetas = Vec::with_capacity(targets.len());
        let mut correct = 0;
        let mut live = true;
        for (i, &target) in targets.iter().enumerate() {
            let out = self.decoder.decode_step(tape, p, prev, state, z, cfg, rng.as_deref_mut())?;
            let predicted = tape.value(out.logits).argmax();
            if live {
                terms.push(tape.cross_entropy(out.logits, target)?);
                correct += (predicted == target) as usize;
                if target == EOS {
                    live = false;
                }
            }
            logits_out.push(out.logits);
            zetas.push(out.zeta);
            state = out.state;
            prev = target;
            if i + 1 < targets.len() && p_tf < 1.0 {
                if let Some(r) = rng.as_deref_mut() {
                    if r.bernoulli(1.0 - p_tf) {
                        prev = predicted;
                    }
                }
            }
        }
        let tokens = terms.len();
        let stacked = tape.concat(&terms)?;
        let loss = tape.sum(stacked);
        if !tape.value(loss).is_finite() {
            return Err(Error::Numeric("caption loss".into()));
        }
        Ok(SequenceLoss {
            loss,
            tokens,
            correct,
            logits: logits_out,
            zetas,
        })
    }

    /// Caption one prepared segment without recording gradients.
    pub fn generate(&self, seg: &PreparedSegment, opts: &GenerateOptions) -> Result<Generated> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let z = self.encode(&mut tape, &p, seg)?;
        let (tokens, trace) = self.decoder.generate(&mut tape, &p, &z, &self.config.dma, opts)?;
        Ok(Generated { tokens, trace })
    }

    pub fn caption_text(&self, tokens: &[usize]) -> String {
        self.vocab.decode(tokens).join(" ")
    }
}
