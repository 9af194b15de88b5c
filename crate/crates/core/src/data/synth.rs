use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{FrameFeatureSeq, SensorSeq, Segment, Split, IMU_CHANNELS};
use crate::error::{Error, Result};
use crate::rng::SplitRng;

const GROUP: usize = 9;

/// Per-verb IMU pattern: one oscillation per channel group plus a static
/// per-channel offset (posture).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSignature {
    pub amplitude: Vec<f64>,
    pub frequency_hz: Vec<f64>,
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbSpec {
    pub name: String,
    #[serde(default)]
    pub preposition: Option<String>,
    /// Drawn from the seed when absent.
    #[serde(default)]
    pub signature: Option<SensorSignature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NounSpec {
    pub name: String,
    pub determiner: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_segments: usize,
    pub seed: u64,
    pub verbs: Vec<VerbSpec>,
    pub objects: Vec<NounSpec>,
    pub places: Vec<NounSpec>,
    pub feature_dim: usize,
    pub sensor_channels: usize,
    pub sensor_rate_hz: f64,
    pub frame_rate_hz: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub sensor_noise_std: f64,
    /// Probability that a segment carries a high-variance burst.
    pub sensor_noise_rate: f64,
    pub burst_std: f64,
    pub visual_noise_std: f64,
    /// Per-frame probability of feature corruption.
    pub visual_blur_rate: f64,
    /// Weight of the verb prototype mixed into frame features.
    pub verb_leakage: f64,
    /// Values are rounded to this resolution; 0 disables rounding.
    pub quantum: f64,
}

fn noun(name: &str, det: &str) -> NounSpec {
    NounSpec {
        name: name.into(),
        determiner: det.into(),
    }
}

fn verb(name: &str, prep: Option<&str>) -> VerbSpec {
    VerbSpec {
        name: name.into(),
        preposition: prep.map(Into::into),
        signature: None,
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_segments: 600,
            seed: 0,
            verbs: vec![
                verb("take", Some("from")),
                verb("put", Some("on")),
                verb("pour", Some("into")),
                verb("open", None),
                verb("close", None),
                verb("stir", None),
            ],
            objects: vec![
                noun("fork", "a"),
                noun("knife", "a"),
                noun("cup", "a"),
                noun("spoon", "a"),
                noun("oil", "the"),
                noun("egg", "the"),
                noun("lid", "the"),
                noun("plate", "a"),
            ],
            places: vec![
                noun("drawer", "the"),
                noun("counter", "the"),
                noun("pan", "the"),
                noun("cabinet", "the"),
            ],
            feature_dim: 32,
            sensor_channels: IMU_CHANNELS,
            sensor_rate_hz: 50.0,
            frame_rate_hz: 10.0,
            min_duration_s: 2.0,
            max_duration_s: 3.5,
            sensor_noise_std: 0.1,
            sensor_noise_rate: 0.0,
            burst_std: 3.0,
            visual_noise_std: 0.3,
            visual_blur_rate: 0.0,
            verb_leakage: 0.0,
            quantum: 1e-5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, rate) in [
            ("sensor_noise_rate", self.sensor_noise_rate),
            ("visual_blur_rate", self.visual_blur_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} = {rate} is outside [0, 1]")));
            }
        }
        if self.verbs.is_empty() || self.objects.is_empty() {
            return Err(Error::Config("verb and object inventories must be nonempty".into()));
        }
        if self.places.is_empty() && self.verbs.iter().any(|v| v.preposition.is_some()) {
            return Err(Error::Config("verbs with prepositions need a place inventory".into()));
        }
        if self.feature_dim == 0 || self.sensor_channels == 0 {
            return Err(Error::Config("feature_dim and sensor_channels must be positive".into()));
        }
        if !(self.sensor_rate_hz > 0.0 && self.frame_rate_hz > 0.0) {
            return Err(Error::Config("rates must be positive".into()));
        }
        if !(self.min_duration_s > 0.0 && self.max_duration_s >= self.min_duration_s) {
            return Err(Error::Config("invalid duration range".into()));
        }
        let groups = self.groups();
        for v in &self.verbs {
            if let Some(sig) = &v.signature {
                if sig.amplitude.len() != groups
                    || sig.frequency_hz.len() != groups
                    || sig.offset.len() != self.sensor_channels
                {
                    return Err(Error::Config(format!("signature of `{}` has wrong widths", v.name)));
                }
            }
        }
        Ok(())
    }

    fn groups(&self) -> usize {
        self.sensor_channels.div_ceil(GROUP)
    }

    fn draw_signature(&self, rng: &mut SplitRng) -> SensorSignature {
        let g = self.groups();
        SensorSignature {
            amplitude: (0..g).map(|_| rng.uniform(0.0, 1.0)).collect(),
            frequency_hz: (0..g).map(|_| rng.uniform(0.5, 3.0)).collect(),
            offset: (0..self.sensor_channels).map(|_| rng.normal(0.0, 0.5)).collect(),
        }
    }

    fn prototype(&self, rng: &mut SplitRng) -> Vec<f64> {
        (0..self.feature_dim).map(|_| rng.normal(0.0, 1.0)).collect()
    }

    fn round(&self, x: f64) -> f64 {
        if self.quantum > 0.0 {
            (x / self.quantum).round() * self.quantum
        } else {
            x
        }
    }
}

/// Deterministic function of `spec`, seed included.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<Segment>> {
    spec.validate()?;
    let mut rng = SplitRng::new(spec.seed);
    let mut proto_rng = rng.split();
    let signatures: Vec<SensorSignature> = spec
        .verbs
        .iter()
        .map(|v| {
            let drawn = spec.draw_signature(&mut proto_rng);
            v.signature.clone().unwrap_or(drawn)
        })
        .collect();
    let verb_protos: Vec<Vec<f64>> = spec.verbs.iter().map(|_| spec.prototype(&mut proto_rng)).collect();
    let object_protos: Vec<Vec<f64>> = spec.objects.iter().map(|_| spec.prototype(&mut proto_rng)).collect();
    let place_protos: Vec<Vec<f64>> = spec.places.iter().map(|_| spec.prototype(&mut proto_rng)).collect();

    let mut segments = Vec::with_capacity(spec.n_segments);
    for i in 0..spec.n_segments {
        let mut r = rng.split();
        let v = r.below(spec.verbs.len());
        let o = r.below(spec.objects.len());
        let verb = &spec.verbs[v];
        let place = verb.preposition.as_ref().map(|_| r.below(spec.places.len()));
        let duration = r.uniform(spec.min_duration_s, spec.max_duration_s);

        let sensors = sensor_stream(spec, &signatures[v], duration, &mut r);

        let n_frames = (duration * spec.frame_rate_hz).floor() as usize + 1;
        let switch = match place {
            Some(_) => (n_frames as f64 * r.uniform(0.3, 0.6)) as usize,
            None => n_frames,
        };
        let mut features = Vec::with_capacity(n_frames);
        for f in 0..n_frames {
            let mut x: Vec<f64> = object_protos[o]
                .iter()
                .zip(&verb_protos[v])
                .map(|(p, q)| p + spec.verb_leakage * q + r.normal(0.0, spec.visual_noise_std))
                .collect();
            if let (Some(p), true) = (place, f >= switch) {
                for (xi, pi) in x.iter_mut().zip(&place_protos[p]) {
                    *xi += pi;
                }
            }
            if r.bernoulli(spec.visual_blur_rate) {
                for xi in x.iter_mut() {
                    *xi = 0.2 * *xi + r.normal(0.0, 1.0);
                }
            }
            features.push(x.into_iter().map(|xi| spec.round(xi)).collect());
        }
        let frames = FrameFeatureSeq {
            timestamps: (0..n_frames).map(|f| f as f64 / spec.frame_rate_hz).collect(),
            features,
        };

        let object = &spec.objects[o];
        let mut caption = format!("{} {} {}", verb.name, object.determiner, object.name);
        if let (Some(prep), Some(p)) = (&verb.preposition, place) {
            let pl = &spec.places[p];
            caption.push_str(&format!(" {prep} {} {}", pl.determiner, pl.name));
        }
        segments.push(Segment {
            id: format!("syn-{i:05}"),
            split: Split::Train,
            caption,
            frames,
            sensors,
        });
    }

    let mut order: Vec<usize> = (0..segments.len()).collect();
    rng.shuffle(&mut order);
    let n = segments.len();
    let n_train = (0.60 * n as f64).round() as usize;
    let n_val = (0.15 * n as f64).round() as usize;
    for (rank, &idx) in order.iter().enumerate() {
        segments[idx].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(segments)
}

fn sensor_stream(spec: &SynthSpec, sig: &SensorSignature, duration: f64, r: &mut SplitRng) -> SensorSeq {
    let n = (duration * spec.sensor_rate_hz).floor() as usize + 1;
    let phases: Vec<f64> = (0..spec.sensor_channels).map(|_| r.uniform(0.0, 2.0 * PI)).collect();
    let burst = if r.bernoulli(spec.sensor_noise_rate) {
        let len = ((n as f64) * r.uniform(0.25, 0.5)).max(1.0) as usize;
        let start = r.below(n - len.min(n) + 1);
        Some(start..start + len)
    } else {
        None
    };
    let mut samples = Vec::with_capacity(n);
    let mut timestamps = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / spec.sensor_rate_hz;
        let in_burst = burst.as_ref().is_some_and(|b| b.contains(&i));
        let row = (0..spec.sensor_channels)
            .map(|c| {
                let g = c / GROUP;
                let mut x = sig.offset[c]
                    + sig.amplitude[g] * (2.0 * PI * sig.frequency_hz[g] * t + phases[c]).sin()
                    + r.normal(0.0, spec.sensor_noise_std);
                if in_burst {
                    x += r.normal(0.0, spec.burst_std);
                }
                spec.round(x)
            })
            .collect();
        samples.push(row);
        timestamps.push(t);
    }
    SensorSeq {
        sample_rate_hz: spec.sensor_rate_hz,
        timestamps,
        samples,
    }
}
