//! Browser bindings for a few interactive views of the captioning model:
//! modality weights, sensor resampling and caption scoring.

use egocap::data::SensorSeq;
use egocap::decoder::{pi_from_eta, zeta_from_pi, DmaConfig, DmaVariant};
use egocap::encoders::{index_map, interpolate_uniform, resample_sensor};
use egocap::metrics::{bleu_all, cider_d_per_pair, EvalPair};
use egocap::rng::SplitRng;
use egocap::Error;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const TAU_CURVE: [f64; 9] = [2.0, 1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01, 0.001];

/// Modality weights for relevance scores `eta` under preferences `(1, 1, c_vs)`.
/// With a noise seed, the Gumbel draw is fixed and reused across the
/// temperature curve so only `tau` varies.
pub fn dma_view(eta: [f64; 3], c_vs: f64, tau: f64, variant: &str, noise_seed: Option<u64>) -> Result<Value, Error> {
    if eta.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
        return Err(Error::Config("relevance scores must lie in (0, 1)".into()));
    }
    let variant: DmaVariant = variant.parse()?;
    let cfg = DmaConfig {
        variant,
        tau,
        c: [1.0, 1.0, c_vs],
    };
    cfg.validate()?;
    let pi = pi_from_eta(eta, cfg.c);
    let noise = match (variant.uses_noise(), noise_seed) {
        (true, Some(seed)) => {
            let mut rng = SplitRng::new(seed);
            Some([rng.gumbel(), rng.gumbel(), rng.gumbel()])
        }
        _ => None,
    };
    let (soft, zeta) = zeta_from_pi(pi, &cfg, noise);
    let curve: Vec<Value> = TAU_CURVE
        .iter()
        .map(|&t| {
            let (_, z) = zeta_from_pi(pi, &DmaConfig { tau: t, ..cfg }, noise);
            json!({ "tau": t, "zeta": z })
        })
        .collect();
    Ok(json!({ "pi": pi, "zeta": zeta, "soft": soft, "noise": noise, "curve": curve }))
}

/// A sine sampled at `source_hz` for `duration` seconds, interpolated to
/// `grid_hz` and index-resampled to `target_len` rows.
pub fn resample_view(source_hz: f64, freq_hz: f64, duration: f64, grid_hz: f64, target_len: usize) -> Result<Value, Error> {
    if !(source_hz > 0.0 && duration > 0.0 && grid_hz > 0.0) || source_hz * duration > 100_000.0 {
        return Err(Error::Config("rates and duration must be positive and modest".into()));
    }
    let n = (source_hz * duration).floor() as usize + 1;
    let timestamps: Vec<f64> = (0..n).map(|i| i as f64 / source_hz).collect();
    let signal = |t: f64| (2.0 * std::f64::consts::PI * freq_hz * t).sin();
    let seq = SensorSeq {
        sample_rate_hz: source_hz,
        timestamps: timestamps.clone(),
        samples: timestamps.iter().map(|&t| vec![signal(t)]).collect(),
    };
    let (grid_t, grid_rows) = interpolate_uniform(&seq, grid_hz)?;
    let grid: Vec<f64> = grid_rows.iter().map(|r| r[0]).collect();
    let max_err = grid_t
        .iter()
        .zip(&grid)
        .map(|(&t, &v)| (v - signal(t)).abs())
        .fold(0.0, f64::max);
    let out = resample_sensor(&seq, grid_hz, target_len)?;
    let picks = index_map(grid.len(), target_len);
    let out_t: Vec<f64> = picks.iter().map(|&i| grid_t[i]).collect();
    Ok(json!({
        "source": { "t": timestamps, "v": seq.samples.iter().map(|r| r[0]).collect::<Vec<_>>() },
        "grid": { "t": grid_t, "v": grid },
        "output": { "t": out_t, "v": out.data() },
        "max_interp_error": max_err,
    }))
}

/// Score hypothesis/reference lines, one pair per line, separated by `|`.
pub fn score_view(text: &str) -> Result<Value, Error> {
    let pairs: Vec<EvalPair> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (h, r) = l
                .split_once('|')
                .ok_or_else(|| Error::Data(format!("missing `|` in line `{l}`")))?;
            Ok(EvalPair::from_text(&h.to_lowercase(), &r.to_lowercase()))
        })
        .collect::<Result<_, Error>>()?;
    let bleu = bleu_all(&pairs)?;
    let per_pair = cider_d_per_pair(&pairs)?;
    let cider = 100.0 * per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(json!({ "bleu": bleu, "cider_d": cider, "per_pair_raw": per_pair }))
}

fn to_js(r: Result<Value, Error>) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn dma(eta_v: f64, eta_s: f64, eta_vs: f64, c_vs: f64, tau: f64, variant: &str, noise_seed: Option<u32>) -> Result<String, JsError> {
    to_js(dma_view([eta_v, eta_s, eta_vs], c_vs, tau, variant, noise_seed.map(u64::from)))
}

#[wasm_bindgen]
pub fn resample(source_hz: f64, freq_hz: f64, duration: f64, grid_hz: f64, target_len: usize) -> Result<String, JsError> {
    to_js(resample_view(source_hz, freq_hz, duration, grid_hz, target_len))
}

#[wasm_bindgen]
pub fn score(text: &str) -> Result<String, JsError> {
    to_js(score_view(text))
}
