//! Dataset schema, vocabulary, on-disk format and the synthetic generator.

mod io;
mod synth;
mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, save_dataset};
pub use synth::{generate_synthetic, NounSpec, SensorSignature, SynthSpec, VerbSpec};
pub use vocab::{detokenize, tokenize, Vocabulary, BOS, EOS, PAD, UNK};

/// Longest caption in the source corpus, in words.
pub const MAX_CAPTION_WORDS: usize = 14;

/// 9-axis IMUs at seven body locations.
pub const IMU_CHANNELS: usize = 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Per-frame descriptors with their capture times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFeatureSeq {
    pub timestamps: Vec<f64>,
    pub features: Vec<Vec<f64>>,
}

impl FrameFeatureSeq {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Data("frames: empty sequence".into()));
        }
        if self.timestamps.len() != self.features.len() {
            return Err(Error::Data(format!(
                "frames: {} timestamps for {} features",
                self.timestamps.len(),
                self.features.len()
            )));
        }
        let d = self.dim();
        if d == 0 || self.features.iter().any(|f| f.len() != d) {
            return Err(Error::Data("frames: inconsistent feature width".into()));
        }
        if self.timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Data("frames: timestamps decrease".into()));
        }
        Ok(())
    }
}

/// Raw IMU stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSeq {
    pub sample_rate_hz: f64,
    pub timestamps: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
}

impl SensorSeq {
    pub fn channels(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Data("sensors: empty sequence".into()));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Data("sensors: sample rate must be positive".into()));
        }
        if self.timestamps.len() != self.samples.len() {
            return Err(Error::Data(format!(
                "sensors: {} timestamps for {} samples",
                self.timestamps.len(),
                self.samples.len()
            )));
        }
        let c = self.channels();
        if c == 0 || self.samples.iter().any(|s| s.len() != c) {
            return Err(Error::Data("sensors: inconsistent channel count".into()));
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("sensors: timestamps not strictly increasing".into()));
        }
        Ok(())
    }
}

/// One annotated activity clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub split: Split,
    pub caption: String,
    pub frames: FrameFeatureSeq,
    pub sensors: SensorSeq,
}

impl Segment {
    pub fn validate(&self) -> Result<()> {
        let words = tokenize(&self.caption);
        if words.is_empty() {
            return Err(Error::Data("caption: empty".into()));
        }
        if words.len() > MAX_CAPTION_WORDS {
            return Err(Error::Data(format!(
                "caption: {} words exceeds {MAX_CAPTION_WORDS}",
                words.len()
            )));
        }
        self.frames.validate()?;
        self.sensors.validate()
    }
}

pub fn split_of(segments: &[Segment], split: Split) -> Vec<&Segment> {
    segments.iter().filter(|s| s.split == split).collect()
}
