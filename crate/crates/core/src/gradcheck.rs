//! Central finite-difference checks of reverse-mode gradients.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale.
pub const ABS_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check a seeded random subset of at most this many coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn new(step: f64, tol: f64) -> Self {
        GradCheckOptions {
            step,
            tol,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

/// Check every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, &GradCheckOptions::new(step, tol))
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {}", opts.step)));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    let base = tape.value(out).item();
    let grads = tape.backward(out)?;

    let again = evaluate(&f, inputs)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Contract(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }

    let mut rng = SplitRng::new(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        coordinates: 0,
        tol: opts.tol,
        passed: true,
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut coords: Vec<usize> = (0..inputs[i].numel()).collect();
        if let Some(limit) = opts.max_coords_per_input {
            if coords.len() > limit {
                rng.shuffle(&mut coords);
                coords.truncate(limit);
                coords.sort_unstable();
            }
        }
        for c in coords {
            let x0 = inputs[i].data()[c];
            probe[i].data_mut()[c] = x0 + opts.step;
            let fp = evaluate(&f, &probe)?;
            probe[i].data_mut()[c] = x0 - opts.step;
            let fm = evaluate(&f, &probe)?;
            probe[i].data_mut()[c] = x0;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.data()[c];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            if !rel.is_finite() {
                return Err(Error::Numeric(format!("grad_check at input {i} coord {c}")));
            }
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((i, c));
            }
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}

/// One named entry of the standard gradient suite.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub end_to_end: bool,
    pub report: GradCheckReport,
}

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

fn rand_tensor(rng: &mut SplitRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).expect("shape and data agree")
}

type Primitive = (&'static str, fn(&mut Tape, &[Var]) -> Result<Var>, Vec<Tensor>);

fn primitives(rng: &mut SplitRng) -> Vec<Primitive> {
    let mut r = |shape: &[usize]| rand_tensor(rng, shape, -1.0, 1.0);
    let (a, b, m, m2, v3, v4) = (r(&[4]), r(&[4]), r(&[3, 4]), r(&[4, 2]), r(&[3]), r(&[4]));
    let (s, w) = (r(&[]), r(&[4]));
    let pos = Tensor::vector(&[0.6, 1.3, 2.2, 0.9]);
    vec![
        ("matmul", |t, x| { let y = t.matmul(x[0], x[1])?; Ok(t.sum(y)) }, vec![m.clone(), m2.clone()]),
        ("matvec", |t, x| { let y = t.matmul(x[0], x[1])?; let y = t.tanh(y); Ok(t.sum(y)) }, vec![m.clone(), v4.clone()]),
        ("vecmat", |t, x| { let y = t.matmul(x[0], x[1])?; let y = t.sigmoid(y); Ok(t.sum(y)) }, vec![v3.clone(), m.clone()]),
        ("add", |t, x| { let y = t.add(x[0], x[1])?; let y = t.mul(y, y)?; Ok(t.sum(y)) }, vec![a.clone(), b.clone()]),
        ("sub", |t, x| { let y = t.sub(x[0], x[1])?; let y = t.mul(y, y)?; Ok(t.sum(y)) }, vec![a.clone(), b.clone()]),
        ("mul", |t, x| { let y = t.mul(x[0], x[1])?; Ok(t.sum(y)) }, vec![a.clone(), b.clone()]),
        ("div", |t, x| { let y = t.div(x[0], x[1])?; Ok(t.sum(y)) }, vec![a.clone(), pos.clone()]),
        ("scalar-broadcast", |t, x| { let y = t.mul(x[0], x[1])?; let y = t.add(y, x[0])?; let y = t.tanh(y); Ok(t.sum(y)) }, vec![s.clone(), w.clone()]),
        ("scale-shift", |t, x| { let y = t.scale(x[0], -2.5); let y = t.shift(y, 0.3); let y = t.mul(y, y)?; Ok(t.mean(y)) }, vec![a.clone()]),
        ("sigmoid", |t, x| { let y = t.sigmoid(x[0]); Ok(t.sum(y)) }, vec![a.clone()]),
        ("tanh", |t, x| { let y = t.tanh(x[0]); let y = t.mul(y, y)?; Ok(t.sum(y)) }, vec![a.clone()]),
        ("exp", |t, x| { let y = t.exp(x[0]); Ok(t.mean(y)) }, vec![a.clone()]),
        ("log", |t, x| { let y = t.log(x[0]); Ok(t.sum(y)) }, vec![pos.clone()]),
        ("concat-slice", |t, x| { let y = t.concat(&[x[0], x[1]])?; let y = t.slice(y, 2, 5)?; let y = t.mul(y, y)?; Ok(t.sum(y)) }, vec![a.clone(), b.clone()]),
        ("row", |t, x| { let y = t.row(x[0], 1)?; let y = t.exp(y); Ok(t.sum(y)) }, vec![m.clone()]),
        ("embedding", |t, x| { let y = t.embedding_lookup(x[0], 2)?; let y = t.tanh(y); Ok(t.sum(y)) }, vec![m.clone()]),
        ("softmax", |t, x| { let y = t.softmax(x[0], 0.7)?; let y = t.mul(y, x[1])?; Ok(t.sum(y)) }, vec![a.clone(), b.clone()]),
        ("softmax-low-temperature", |t, x| { let y = t.softmax(x[0], 0.05)?; let y = t.mul(y, x[1])?; Ok(t.sum(y)) }, vec![Tensor::vector(&[0.01, 0.03, -0.02, 0.0]), b.clone()]),
        ("cross-entropy", |t, x| t.cross_entropy(x[0], 1), vec![a.clone()]),
    ]
}

fn end_to_end_case(readout: crate::encoders::VisualReadout, mode: crate::encoders::BoundaryMode, seed: u64) -> Result<(crate::model::CaptionModel, crate::model::PreparedSegment)> {
    use crate::data::Vocabulary;
    use crate::decoder::{Attention, DmaConfig, DmaVariant};
    use crate::encoders::{BoundaryConfig, Surrogate};
    use crate::fusion::FusionMode;
    use crate::model::{CaptionModel, ModelConfig, PreparedSegment};

    let config = ModelConfig {
        feature_dim: 5,
        sensor_channels: 6,
        k_frames: 4,
        t_sensor: 5,
        h_v: 4,
        h_s: 3,
        h_dec: 5,
        emb_dim: 3,
        att_dim: None,
        fusion: FusionMode::LinearOnS,
        attention: Attention::Dynamic,
        dma: DmaConfig {
            variant: DmaVariant::Softmax,
            ..DmaConfig::default()
        },
        boundary: BoundaryConfig {
            mode,
            surrogate: Surrogate::Detached,
        },
        readout,
    };
    let vocab = Vocabulary::build(&["open the drawer", "stir the pan"], 1)?;
    let mut model = CaptionModel::new(config, vocab, seed)?;
    // Move the AMMT map off the identity so its gradient is exercised generically.
    let mut rng = SplitRng::new(seed ^ 0x5eed);
    for t in model.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += rng.uniform(-0.1, 0.1));
    }
    let tokens = model.vocab.encode("open the drawer");
    let seg = PreparedSegment {
        id: "gradcheck".into(),
        frames: rand_tensor(&mut rng, &[4, 5], -1.0, 1.0),
        sensors: rand_tensor(&mut rng, &[5, 6], -1.0, 1.0),
        tokens,
    };
    Ok((model, seg))
}

/// Every primitive at [`PRIMITIVE_TOL`] plus the full encoder-fusion-DMA-decoder
/// caption loss (softmax variant) at [`END_TO_END_TOL`].
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = SplitRng::new(seed);
    let mut out = Vec::new();
    for (name, f, inputs) in primitives(&mut rng) {
        let report = grad_check(f, &inputs, 1e-6, PRIMITIVE_TOL)?;
        out.push(SuiteEntry {
            name: name.to_string(),
            end_to_end: false,
            report,
        });
    }
    use crate::encoders::{BoundaryMode, VisualReadout};
    for (name, readout, mode) in [
        ("caption-loss/final-state", VisualReadout::FinalState, BoundaryMode::Learned),
        ("caption-loss/summary-mean", VisualReadout::SummaryMean, BoundaryMode::AlwaysOn),
    ] {
        let (model, seg) = end_to_end_case(readout, mode, seed)?;
        let inputs: Vec<Tensor> = model.params.entries().iter().map(|e| e.tensor.clone()).collect();
        let targets = seg.targets();
        let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            let p = crate::params::Bound::from_vars(vars.to_vec());
            let z = model.encode(tape, &p, &seg)?;
            Ok(model.sequence_loss(tape, &p, &z, &targets, 1.0, None)?.loss)
        };
        let report = grad_check(f, &inputs, 1e-6, END_TO_END_TOL)?;
        out.push(SuiteEntry {
            name: name.to_string(),
            end_to_end: true,
            report,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(&[1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &[2.0, 4.0, 6.0]);

        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_error < 1e-6);
        assert_eq!(r.coordinates, 3);
    }

    fn square(x: f64) -> f64 {
        x * x
    }

    #[test]
    fn wrong_adjoint_is_reported() {
        // Derivative of x^2 deliberately given as x instead of 2x.
        let r = grad_check(
            |t, v| {
                let y = t.map(v[0], square, |x, _| x);
                Ok(t.sum(y))
            },
            &[Tensor::vector(&[1.0, -0.5, 2.0])],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn nondeterministic_function_is_a_contract_error() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let res = grad_check(
            |t, v| {
                calls.set(calls.get() + 1);
                let s = t.sum(v[0]);
                Ok(t.shift(s, calls.get() as f64))
            },
            &[Tensor::vector(&[1.0])],
            1e-5,
            1e-4,
        );
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn vector_output_is_rejected() {
        let res = grad_check(|_, v| Ok(v[0]), &[Tensor::vector(&[1.0, 2.0])], 1e-5, 1e-4);
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn standard_suite_passes() {
        for e in run_suite(0).unwrap() {
            assert!(e.report.passed, "{}: {:?}", e.name, e.report);
        }
    }
}
