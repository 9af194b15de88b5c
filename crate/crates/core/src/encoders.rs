//! Modal stream preparation and the recurrent visual and sensor encoders.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{FrameFeatureSeq, SensorSeq};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SplitRng;
use crate::tensor::Tensor;

/// Source index for each of `target_len` output rows. Down-sampling picks
/// `round(j * n / target_len)`, up-sampling duplicates via `floor(j * n / target_len)`.
pub fn index_map(n: usize, target_len: usize) -> Vec<usize> {
    (0..target_len)
        .map(|j| {
            let x = j as f64 * n as f64 / target_len as f64;
            let i = if n > target_len { x.round() } else { x.floor() } as usize;
            i.min(n - 1)
        })
        .collect()
}

/// Pick or duplicate frames so exactly `target_len` rows remain.
pub fn sample_frames(v: &FrameFeatureSeq, target_len: usize) -> Result<Tensor> {
    if v.is_empty() || target_len == 0 {
        return Err(Error::Data("sample_frames: empty input or target".into()));
    }
    let d = v.dim();
    let mut data = Vec::with_capacity(target_len * d);
    for i in index_map(v.len(), target_len) {
        let f = &v.features[i];
        if f.len() != d {
            return Err(Error::Data("sample_frames: inconsistent feature width".into()));
        }
        data.extend_from_slice(f);
    }
    Tensor::matrix(target_len, d, data)
}

/// Piecewise-linear interpolation onto a uniform `target_hz` grid spanning
/// the first to last timestamp. Returns grid times and rows.
pub fn interpolate_uniform(s: &SensorSeq, target_hz: f64) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if s.samples.is_empty() || s.samples.len() != s.timestamps.len() {
        return Err(Error::Data("resample: empty or misaligned sensor stream".into()));
    }
    if !(target_hz > 0.0) {
        return Err(Error::Config(format!("resample rate {target_hz} must be positive")));
    }
    let ts = &s.timestamps;
    if ts.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Data("resample: timestamps not strictly increasing".into()));
    }
    let (t0, t1) = (ts[0], ts[ts.len() - 1]);
    let m = ((t1 - t0) * target_hz + 1e-9).floor() as usize + 1;
    let mut times = Vec::with_capacity(m);
    let mut rows = Vec::with_capacity(m);
    let mut k = 0;
    for j in 0..m {
        let t = (t0 + j as f64 / target_hz).min(t1);
        while k + 1 < ts.len() - 1 && ts[k + 1] <= t {
            k += 1;
        }
        let row = if ts.len() == 1 {
            s.samples[0].clone()
        } else {
            let (ta, tb) = (ts[k], ts[k + 1]);
            let w = (t - ta) / (tb - ta);
            s.samples[k]
                .iter()
                .zip(&s.samples[k + 1])
                .map(|(a, b)| a + w * (b - a))
                .collect()
        };
        times.push(t);
        rows.push(row);
    }
    Ok((times, rows))
}

/// Interpolate to `target_hz`, then index-resample to exactly `target_len` rows.
pub fn resample_sensor(s: &SensorSeq, target_hz: f64, target_len: usize) -> Result<Tensor> {
    if target_len == 0 {
        return Err(Error::Config("resample target length must be positive".into()));
    }
    let (_, rows) = interpolate_uniform(s, target_hz)?;
    let c = rows[0].len();
    let mut data = Vec::with_capacity(target_len * c);
    for i in index_map(rows.len(), target_len) {
        data.extend_from_slice(&rows[i]);
    }
    Tensor::matrix(target_len, c, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    Learned,
    /// Test hook: reset before every step.
    AlwaysOn,
    /// Test hook: never reset (plain LSTM).
    AlwaysOff,
}

/// How the binarized boundary gate is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Surrogate {
    /// Identity gradient through the 0.5 threshold.
    StraightThrough,
    /// Treat the binary decision as a constant (exact gradient almost everywhere).
    Detached,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VisualReadout {
    FinalState,
    SummaryMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryConfig {
    pub mode: BoundaryMode,
    pub surrogate: Surrogate,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig {
            mode: BoundaryMode::Learned,
            surrogate: Surrogate::StraightThrough,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BoundaryGate {
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
}

/// Single-layer LSTM over a `[steps × input]` sequence, optionally with a
/// learned boundary gate that resets the state at detected discontinuities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmEncoder {
    input: usize,
    hidden: usize,
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
    gate: Option<BoundaryGate>,
}

/// Output of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderRun {
    pub final_hidden: Var,
    /// Mean of the states emitted at boundaries and the final state.
    pub summary_mean: Var,
    /// Whether the boundary fired before consuming each input.
    pub fired: Vec<bool>,
    /// `(hidden, cell)` entering each LSTM update.
    pub entering: Vec<(Var, Var)>,
}

impl LstmEncoder {
    /// Gate order inside the packed weights is input, forget, candidate, output.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        boundary: bool,
        rng: &mut SplitRng,
    ) -> Self {
        let fan = input + hidden;
        let w_x = store.add_uniform(format!("{name}.w_x"), &[input, 4 * hidden], fan, rng);
        let w_h = store.add_uniform(format!("{name}.w_h"), &[hidden, 4 * hidden], fan, rng);
        let mut bias = Tensor::zeros(&[4 * hidden]);
        for x in &mut bias.data_mut()[hidden..2 * hidden] {
            *x = 1.0;
        }
        let b = store.add(format!("{name}.b"), bias);
        let gate = boundary.then(|| BoundaryGate {
            w_x: store.add_uniform(format!("{name}.boundary.w_x"), &[input, 1], fan, rng),
            w_h: store.add_uniform(format!("{name}.boundary.w_h"), &[hidden, 1], fan, rng),
            b: store.add(format!("{name}.boundary.b"), Tensor::scalar(-2.0)),
        });
        LstmEncoder {
            input,
            hidden,
            w_x,
            w_h,
            b,
            gate,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn has_boundary(&self) -> bool {
        self.gate.is_some()
    }

    pub fn encode(&self, tape: &mut Tape, p: &Bound, x: Var, cfg: BoundaryConfig) -> Result<EncoderRun> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.input {
            return Err(Error::dim("lstm encoder input", &shape, &[shape[0], self.input]));
        }
        let steps = shape[0];
        let h_dim = self.hidden;
        let proj = tape.matmul(x, p[self.w_x])?;
        let gate_proj = match &self.gate {
            Some(g) => Some(tape.matmul(x, p[g.w_x])?),
            None => None,
        };
        let mut h = tape.constant(Tensor::zeros(&[h_dim]));
        let mut c = tape.constant(Tensor::zeros(&[h_dim]));
        let mut emitted: Option<Var> = None;
        let mut n_fired = 0usize;
        let mut fired = Vec::with_capacity(steps);
        let mut entering = Vec::with_capacity(steps);

        for t in 0..steps {
            if let (Some(gate), Some(gp)) = (&self.gate, gate_proj) {
                let b = match cfg.mode {
                    BoundaryMode::AlwaysOff => None,
                    BoundaryMode::AlwaysOn => Some(tape.constant(Tensor::scalar(1.0))),
                    BoundaryMode::Learned => {
                        let gx = tape.row(gp, t)?;
                        let gh = tape.matmul(h, p[gate.w_h])?;
                        let s = tape.add(gx, gh)?;
                        let s = tape.add(s, p[gate.b])?;
                        let g = tape.sigmoid(s);
                        Some(match cfg.surrogate {
                            Surrogate::StraightThrough => tape.straight_through_threshold(g)?,
                            Surrogate::Detached => {
                                let hard = if tape.value(g).item() >= 0.5 { 1.0 } else { 0.0 };
                                tape.constant(Tensor::scalar(hard))
                            }
                        })
                    }
                };
                match b {
                    Some(b) => {
                        let on = tape.value(b).item() == 1.0;
                        let out = tape.mul(b, h)?;
                        emitted = Some(match emitted {
                            Some(acc) => tape.add(acc, out)?,
                            None => out,
                        });
                        let nb = tape.neg(b);
                        let keep = tape.shift(nb, 1.0);
                        h = tape.mul(keep, h)?;
                        c = tape.mul(keep, c)?;
                        n_fired += on as usize;
                        fired.push(on);
                    }
                    None => fired.push(false),
                }
            } else {
                fired.push(false);
            }
            entering.push((h, c));

            let xt = tape.row(proj, t)?;
            let hh = tape.matmul(h, p[self.w_h])?;
            let z = tape.add(xt, hh)?;
            let z = tape.add(z, p[self.b])?;
            let i_g = tape.slice(z, 0, h_dim)?;
            let i_g = tape.sigmoid(i_g);
            let f_g = tape.slice(z, h_dim, h_dim)?;
            let f_g = tape.sigmoid(f_g);
            let g_g = tape.slice(z, 2 * h_dim, h_dim)?;
            let g_g = tape.tanh(g_g);
            let o_g = tape.slice(z, 3 * h_dim, h_dim)?;
            let o_g = tape.sigmoid(o_g);
            let fc = tape.mul(f_g, c)?;
            let ig = tape.mul(i_g, g_g)?;
            c = tape.add(fc, ig)?;
            let tc = tape.tanh(c);
            h = tape.mul(o_g, tc)?;
        }

        let summary_mean = match emitted {
            Some(acc) => {
                let total = tape.add(acc, h)?;
                tape.scale(total, 1.0 / (n_fired as f64 + 1.0))
            }
            None => h,
        };
        Ok(EncoderRun {
            final_hidden: h,
            summary_mean,
            fired,
            entering,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(times: &[f64], values: &[f64]) -> SensorSeq {
        SensorSeq {
            sample_rate_hz: 1.0,
            timestamps: times.to_vec(),
            samples: values.iter().map(|&v| vec![v, -v]).collect(),
        }
    }

    #[test]
    fn midpoint_is_linear() {
        let s = seq(&[0.0, 1.0], &[0.0, 10.0]);
        let (t, rows) = interpolate_uniform(&s, 2.0).unwrap();
        assert_eq!(t, vec![0.0, 0.5, 1.0]);
        assert_eq!(rows[1], vec![5.0, -5.0]);
    }

    #[test]
    fn constant_signal_stays_constant() {
        let s = seq(&[0.0, 0.3, 0.7, 2.0], &[4.5; 4]);
        for len in [1, 3, 17, 200] {
            let r = resample_sensor(&s, 30.0, len).unwrap();
            assert_eq!(r.shape(), &[len, 2]);
            assert!(r.data().chunks(2).all(|c| c == [4.5, -4.5]));
        }
    }

    #[test]
    fn single_sample_is_duplicated() {
        let s = seq(&[0.2], &[1.5]);
        let r = resample_sensor(&s, 30.0, 5).unwrap();
        assert!(r.data().chunks(2).all(|c| c == [1.5, -1.5]));
    }

    #[test]
    fn non_monotone_timestamps_rejected() {
        let s = seq(&[0.0, 1.0, 0.5], &[0.0, 1.0, 2.0]);
        assert!(matches!(resample_sensor(&s, 30.0, 4), Err(Error::Data(_))));
    }

    #[test]
    fn frame_sampling_cases() {
        let mk = |n: usize| FrameFeatureSeq {
            timestamps: (0..n).map(|i| i as f64).collect(),
            features: (0..n).map(|i| vec![i as f64, 0.5]).collect(),
        };
        let same = sample_frames(&mk(7), 7).unwrap();
        assert_eq!(same.data().chunks(2).map(|r| r[0]).collect::<Vec<_>>(), (0..7).map(|i| i as f64).collect::<Vec<_>>());

        let one = sample_frames(&mk(1), 80).unwrap();
        assert_eq!(one.shape(), &[80, 2]);
        assert!(one.data().chunks(2).all(|r| r == [0.0, 0.5]));

        let up = sample_frames(&mk(3), 7).unwrap();
        let idx: Vec<f64> = up.data().chunks(2).map(|r| r[0]).collect();
        assert_eq!(idx, vec![0.0, 0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);

        let empty = FrameFeatureSeq {
            timestamps: vec![],
            features: vec![],
        };
        assert!(matches!(sample_frames(&empty, 4), Err(Error::Data(_))));
    }

    fn zero_all(store: &mut ParamStore) {
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    #[test]
    fn zero_input_zero_params_gives_zero_state() {
        let mut rng = SplitRng::new(0);
        let mut store = ParamStore::new();
        let enc = LstmEncoder::new(&mut store, "v", 5, 4, true, &mut rng);
        zero_all(&mut store);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[6, 5]));
        let run = enc.encode(&mut tape, &p, x, BoundaryConfig::default()).unwrap();
        assert!(tape.value(run.final_hidden).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_width_is_a_dimension_error() {
        let mut rng = SplitRng::new(0);
        let mut store = ParamStore::new();
        let enc = LstmEncoder::new(&mut store, "s", 63, 4, false, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[6, 62]));
        assert!(matches!(
            enc.encode(&mut tape, &p, x, BoundaryConfig::default()),
            Err(Error::Dimension { .. })
        ));
    }
}
