//! One PASS/FAIL line per acceptance criterion. Runs as a plain binary
//! (`harness = false`) so the lines appear in order without `--nocapture`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use egocap::data::{generate_synthetic, SensorSeq, SynthSpec};
use egocap::decoder::{pi_from_eta, zeta_from_eta, DmaConfig, DmaVariant, GenerateOptions, Modality};
use egocap::encoders::interpolate_uniform;
use egocap::eval::{caption_all, evaluate};
use egocap::experiments::{build_vocab, cells, median, train_on, ExperimentId};
use egocap::fusion::FusionMode;
use egocap::gradcheck::{run_suite, END_TO_END_TOL, PRIMITIVE_TOL};
use egocap::metrics::{attn_report, bleu, cider_d_per_pair, EvalPair, WordType};
use egocap::model::{CaptionModel, ModelConfig, PreparedSegment, Preset};
use egocap::rng::SplitRng;
use egocap::training::{TrainConfig, Trainer};
use egocap::{Tape, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let suite = run_suite(0).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    for e in &suite {
        let want = if e.end_to_end { END_TO_END_TOL } else { PRIMITIVE_TOL };
        ensure!(e.report.tol <= want, "{} checked at {} (want {want})", e.name, e.report.tol);
        ensure!(e.report.passed, "{} max rel error {:.3e}", e.name, e.report.max_rel_error);
    }
    ensure!(took < Duration::from_secs(60), "took {took:?}");
    let worst = suite.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    Ok(format!("{} checks, worst rel error {worst:.2e}, {:.1}s", suite.len(), took.as_secs_f64()))
}

fn ammt_identity() -> Outcome {
    let mut checked = 0;
    for seed in 0..100u64 {
        let data = generate_synthetic(&SynthSpec {
            n_segments: 1,
            seed: 1000 + seed,
            ..SynthSpec::default()
        })
        .map_err(|e| e.to_string())?;
        let vocab = build_vocab(&data).map_err(|e| e.to_string())?;
        let base = ModelConfig::preset(Preset::Desk);
        let full = CaptionModel::new(base.clone(), vocab.clone(), seed).map_err(|e| e.to_string())?;
        let plain = CaptionModel::new(
            ModelConfig {
                fusion: FusionMode::Concat,
                ..base
            },
            vocab,
            seed,
        )
        .map_err(|e| e.to_string())?;
        let seg = full.prepare(&data[0]).map_err(|e| e.to_string())?;
        let run = |m: &CaptionModel| {
            let mut tape = Tape::new();
            let p = m.params.bind(&mut tape, false);
            let z = m.encode(&mut tape, &p, &seg).unwrap();
            let parts = [z.h_v, z.h_s, z.h_vs].map(|v| tape.value(v).data().to_vec());
            let loss = m.sequence_loss(&mut tape, &p, &z, &seg.targets(), 1.0, None).unwrap();
            let logits: Vec<Vec<f64>> = loss.logits.iter().map(|&l| tape.value(l).data().to_vec()).collect();
            (parts, logits)
        };
        let ([hv, hs, hvs], logits) = run(&full);
        let baseline: Vec<f64> = hv.iter().chain(&hs).copied().collect();
        ensure!(bits(&hvs) == bits(&baseline), "segment {seed}: h_vs differs from h_v ++ h_s");
        let (_, plain_logits) = run(&plain);
        ensure!(
            logits.iter().zip(&plain_logits).all(|(a, b)| bits(a) == bits(b)),
            "segment {seed}: logits differ from the concatenation model"
        );
        checked += 1;
    }
    Ok(format!("{checked} segments bit-exact (fused vector and decoder logits)"))
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

fn zeta(eta: [f64; 3], cfg: &DmaConfig, noise: Option<[f64; 3]>) -> [f64; 3] {
    let mut tape = Tape::new();
    let e = tape.constant(Tensor::vector(&eta));
    let out = zeta_from_eta(&mut tape, e, cfg, noise).unwrap();
    let z = tape.value(out.zeta).data();
    [z[0], z[1], z[2]]
}

fn dma_contracts() -> Outcome {
    const TAUS: [f64; 5] = [1.0, 0.5, 0.1, 0.05, 0.01];
    let mut rng = SplitRng::new(42);
    let mut worst_sum: f64 = 0.0;
    for variant in [DmaVariant::Softmax, DmaVariant::Gumbel, DmaVariant::StGumbel] {
        for draw in 0..10_000 {
            let eta = [0; 3].map(|_| rng.uniform(1e-3, 1.0 - 1e-3));
            let c_vs = rng.uniform(0.25, 3.0);
            let factor = rng.uniform(1.0, 3.0);
            let noise = variant.uses_noise().then(|| [rng.gumbel(), rng.gumbel(), rng.gumbel()]);
            let cfg = DmaConfig {
                variant,
                tau: TAUS[draw % TAUS.len()],
                c: [1.0, 1.0, c_vs],
            };
            let z = zeta(eta, &cfg, noise);
            let s: f64 = z.iter().sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
            ensure!((s - 1.0).abs() <= 1e-9, "{} draw {draw}: sum {s}", variant.name());
            if variant == DmaVariant::StGumbel {
                let mut sorted = z;
                sorted.sort_by(f64::total_cmp);
                ensure!(sorted == [0.0, 0.0, 1.0], "st-gumbel draw {draw}: {z:?}");
            }
            // properties of the soft weights (identical to the forward for the other variants)
            let soft_cfg = DmaConfig {
                variant: DmaVariant::Gumbel,
                ..cfg
            };
            let mut last = 0.0;
            for tau in TAUS {
                let z = zeta(eta, &DmaConfig { tau, ..soft_cfg }, noise);
                let top = z.iter().cloned().fold(0.0, f64::max);
                ensure!(top >= last - 1e-12, "{} draw {draw}: max weight fell at tau {tau}", variant.name());
                last = top;
            }
            let raised = DmaConfig {
                c: [1.0, 1.0, c_vs * factor],
                ..soft_cfg
            };
            let (a, b) = (zeta(eta, &soft_cfg, noise)[2], zeta(eta, &raised, noise)[2]);
            ensure!(b >= a - 1e-12, "{} draw {draw}: zeta_VS fell from {a} to {b}", variant.name());
            let pi = pi_from_eta(eta, cfg.c);
            ensure!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12, "pi off the simplex");
        }
    }
    Ok(format!("3 x 10000 draws, worst |sum - 1| = {worst_sum:.1e}"))
}

struct Overfit {
    trainer: Trainer,
    segments: Vec<PreparedSegment>,
    references: Vec<String>,
}

fn overfit_run() -> Result<(Overfit, String), String> {
    let data = generate_synthetic(&SynthSpec {
        n_segments: 50,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let captions: Vec<String> = data.iter().map(|s| s.caption.clone()).collect();
    let vocab = egocap::data::Vocabulary::build(&captions, 1).map_err(|e| e.to_string())?;
    let model = CaptionModel::new(ModelConfig::preset(Preset::Desk), vocab, 0).map_err(|e| e.to_string())?;
    let segments: Vec<PreparedSegment> = data.iter().map(|s| model.prepare(s)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        early_stopping: None,
        ..TrainConfig::preset(Preset::Desk)
    };
    let mut trainer = Trainer::new(model, cfg).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut outcome = None;
    while !trainer.finished {
        let m = trainer.step(&segments, None).map_err(|e| e.to_string())?;
        if m.token_accuracy >= 0.95 && trainer.epoch % 5 == 0 {
            let b1 = evaluate(&trainer.model, &segments, &captions, &GenerateOptions::default())
                .map_err(|e| e.to_string())?
                .summary
                .bleu[0];
            if b1 >= 90.0 {
                outcome = Some((trainer.epoch, m.token_accuracy, b1));
                break;
            }
        }
    }
    let took = start.elapsed();
    let run = Overfit {
        trainer,
        segments,
        references: captions,
    };
    match outcome {
        Some((epoch, acc, b1)) if took < Duration::from_secs(300) => Ok((
            run,
            format!("epoch {epoch}: token accuracy {:.1}%, BLEU-1 {b1:.1}, {:.0}s", 100.0 * acc, took.as_secs_f64()),
        )),
        Some(_) => Err(format!("reached the targets but took {took:?}")),
        None => Err(format!("targets not reached in {} epochs", run.trainer.epoch)),
    }
}

fn attention(run: &Overfit) -> Outcome {
    let records = caption_all(&run.trainer.model, &run.segments, &run.references, &GenerateOptions::default())
        .map_err(|e| e.to_string())?;
    let traces: Vec<_> = records.iter().map(|r| r.trace.clone()).collect();
    let words: Vec<Vec<String>> = records
        .iter()
        .map(|r| r.hypothesis.split_whitespace().map(str::to_string).collect())
        .collect();
    let report = attn_report(&traces, &words).map_err(|e| e.to_string())?;
    let rate = report.rate(WordType::Verb, Modality::VS).ok_or("no verbs generated")?;
    ensure!(rate >= 0.9, "verbs attend V+S in {:.1}% of steps", 100.0 * rate);
    Ok(format!("verbs attend V+S in {:.1}% of steps", 100.0 * rate))
}

fn fusion_helps_verbs() -> Outcome {
    let data = generate_synthetic(&SynthSpec {
        n_segments: 300,
        seed: 7,
        verb_leakage: 0.0,
        sensor_noise_rate: 0.1,
        ..SynthSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let base = ModelConfig::preset(Preset::Desk);
    let train = TrainConfig::preset(Preset::Desk);
    let rows = cells(ExperimentId::FusionAblation, &base);
    let mut verb = Vec::new();
    let mut cider = Vec::new();
    for label in ["(i)", "(ii)", "(v)"] {
        let cell = rows.iter().find(|c| c.label.starts_with(label)).expect("fusion row");
        let (mut v, mut c) = (Vec::new(), Vec::new());
        for seed in 0..3 {
            let cfg = TrainConfig { seed, ..train.clone() };
            let (trainer, splits) = train_on(cell.config.clone(), &cfg, &data, |_, _| Ok(())).map_err(|e| e.to_string())?;
            let s = evaluate(&trainer.model, &splits.test, &splits.test_refs, &GenerateOptions::default())
                .map_err(|e| e.to_string())?
                .summary;
            v.push(s.verb_accuracy);
            c.push(s.cider_d);
        }
        verb.push(median(v));
        cider.push(median(c));
    }
    let detail = format!(
        "median verb acc V {:.1} / V+S {:.1}; median CIDEr-D concat {:.1} / full {:.1}",
        verb[0], verb[1], cider[1], cider[2]
    );
    ensure!(verb[1] >= verb[0] + 10.0, "{detail}");
    ensure!(cider[2] >= cider[1], "{detail}");
    Ok(detail)
}

fn metric_oracles() -> Outcome {
    let corpus = common::ten_pair_corpus();
    let mut worst: f64 = 0.0;
    for n in 1..=5 {
        let got = bleu(&corpus, n).map_err(|e| e.to_string())?;
        worst = worst.max((got - common::bleu_oracle(&corpus, n)).abs());
    }
    let got = cider_d_per_pair(&corpus).map_err(|e| e.to_string())?;
    for (a, b) in got.iter().zip(common::cider_oracle(&corpus)) {
        worst = worst.max((a - b).abs());
    }
    ensure!(worst <= 1e-9, "largest deviation from the oracles {worst:.3e}");
    // every n-gram order needs at least one gram, so four words or more
    let identity: Vec<EvalPair> = corpus
        .iter()
        .filter(|p| p.references[0].len() >= 4)
        .map(|p| EvalPair {
            hypothesis: p.references[0].clone(),
            references: vec![p.references[0].clone()],
        })
        .collect();
    ensure!(identity.len() >= 5, "identity corpus too small");
    for n in 1..=5 {
        let b = bleu(&identity, n).map_err(|e| e.to_string())?;
        ensure!((b - 100.0).abs() < 1e-9, "identity BLEU-{n} = {b}");
    }
    for (i, c) in cider_d_per_pair(&identity).map_err(|e| e.to_string())?.iter().enumerate() {
        ensure!((c - 10.0).abs() < 1e-9, "identity pair {i}: raw CIDEr-D {c}");
    }
    Ok(format!(
        "10 pairs, largest deviation {worst:.1e}; {} identity pairs score BLEU 100, raw CIDEr-D 10",
        identity.len()
    ))
}

fn resampling() -> Outcome {
    let mut rng = SplitRng::new(5);
    let mut worst_affine: f64 = 0.0;
    for _ in 0..200 {
        let (a, b) = (rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0));
        let mut ts = vec![rng.uniform(0.0, 1.0)];
        for _ in 0..rng.range_inclusive(2, 80) {
            let gap = rng.uniform(0.004, 0.05);
            ts.push(ts.last().unwrap() + gap);
        }
        let s = SensorSeq {
            sample_rate_hz: 125.0,
            timestamps: ts.clone(),
            samples: ts.iter().map(|&t| vec![a * t + b]).collect(),
        };
        let (grid, rows) = interpolate_uniform(&s, 30.0).map_err(|e| e.to_string())?;
        for (t, r) in grid.iter().zip(&rows) {
            worst_affine = worst_affine.max((r[0] - (a * t + b)).abs());
        }
    }
    ensure!(worst_affine <= 1e-12, "affine error {worst_affine:.3e}");
    let f = |t: f64| (2.0 * std::f64::consts::PI * 2.0 * t).sin();
    let ts: Vec<f64> = (0..=1000).map(|i| i as f64 / 125.0).collect();
    let s = SensorSeq {
        sample_rate_hz: 125.0,
        timestamps: ts.clone(),
        samples: ts.iter().map(|&t| vec![f(t)]).collect(),
    };
    let (grid, rows) = interpolate_uniform(&s, 30.0).map_err(|e| e.to_string())?;
    let worst_sine = grid.iter().zip(&rows).map(|(&t, r)| (r[0] - f(t)).abs()).fold(0.0, f64::max);
    ensure!(worst_sine < 0.01, "sine error {worst_sine:.3e}");
    Ok(format!("affine error {worst_affine:.1e}, 2 Hz sine error {worst_sine:.1e}"))
}

fn egocap(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_egocap"))
        .args(args)
        .current_dir(dir)
        .env_remove("EGOCAP_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "egocap {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    egocap(d, &["gen-data", "--out", "d.jsonl", "--n-segments", "80", "--seed", "2"])?;
    for out in ["a", "b"] {
        egocap(d, &["train", "--data", "d.jsonl", "--out", out, "--seed", "7", "--epochs", "10", "--quiet"])?;
    }
    let mut bytes = 0;
    for f in ["checkpoint.json", "train.log.jsonl", "run.json"] {
        let a = std::fs::read(d.join("a").join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(d.join("b").join(f)).map_err(|e| e.to_string())?;
        ensure!(a == b, "{f} differs between runs");
        bytes += a.len();
    }
    Ok(format!("checkpoint, log and run config identical ({bytes} bytes)"))
}

fn report(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS  {name:<22} {detail} [{secs:.1}s]");
            true
        }
        Err(why) => {
            println!("FAIL  {name:<22} {why} [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    // `cargo test -- --list` and similar probes expect no work
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ok = true;
    ok &= report("gradients", gradients);
    ok &= report("ammt-identity", ammt_identity);
    ok &= report("dma-contracts", dma_contracts);
    let mut overfit = None;
    ok &= report("overfit", || {
        let (run, detail) = overfit_run()?;
        overfit = Some(run);
        Ok(detail)
    });
    ok &= report("fusion-helps-verbs", fusion_helps_verbs);
    ok &= report("metric-oracles", metric_oracles);
    ok &= report("resampling", resampling);
    ok &= report("determinism", determinism);
    ok &= report("attention", || match &overfit {
        Some(run) => attention(run),
        None => Err("needs a successful overfit run".into()),
    });
    if !ok {
        std::process::exit(1);
    }
}
