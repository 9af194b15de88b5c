use egocap::data::{
    generate_synthetic, load_dataset, save_dataset, split_of, FrameFeatureSeq, Segment, SensorSeq, Split, SynthSpec,
    Vocabulary, UNK,
};
use egocap::encoders::{BoundaryConfig, BoundaryMode, LstmEncoder};
use egocap::model::{CaptionModel, ModelConfig, Preset};
use egocap::params::ParamStore;
use egocap::rng::SplitRng;
use egocap::training::{adam_step, AdamConfig, AdamState};
use egocap::{Error, Tape, Tensor};

#[test]
fn vocabulary_examples() {
    let corpus = ["take a fork", "take a knife"];
    let v = Vocabulary::build(&corpus, 1).unwrap();
    assert_eq!(v.len(), 4 + 4);
    for w in ["take", "a", "fork", "knife"] {
        assert!(v.contains(w));
    }
    let v2 = Vocabulary::build(&corpus, 2).unwrap();
    assert_eq!(v2.len(), 4 + 2);
    assert_eq!(v2.encode("take a fork"), vec![v2.id("take"), v2.id("a"), UNK]);
    assert_eq!(v2.id("knife"), UNK);
}

fn cheap_spec(n: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        n_segments: n,
        seed,
        sensor_channels: 3,
        sensor_rate_hz: 5.0,
        frame_rate_hz: 2.0,
        feature_dim: 4,
        ..SynthSpec::default()
    }
}

#[test]
fn corpus_scale_generation_and_vocab_are_deterministic() {
    let a = generate_synthetic(&cheap_spec(5002, 11)).unwrap();
    let b = generate_synthetic(&cheap_spec(5002, 11)).unwrap();
    assert_eq!(a, b);
    let caps = |d: &[Segment]| d.iter().map(|s| s.caption.clone()).collect::<Vec<_>>();
    let va = Vocabulary::build(&caps(&a), 1).unwrap();
    let vb = Vocabulary::build(&caps(&b), 1).unwrap();
    assert_eq!(va.words(), vb.words());
    assert_ne!(a, generate_synthetic(&cheap_spec(5002, 12)).unwrap());
}

fn tiny(i: usize, split: Split) -> Segment {
    Segment {
        id: format!("seg-{i}"),
        split,
        caption: "take a cup from the drawer".into(),
        frames: FrameFeatureSeq {
            timestamps: vec![0.0],
            features: vec![vec![i as f64, 0.5]],
        },
        sensors: SensorSeq {
            sample_rate_hz: 50.0,
            timestamps: vec![0.0, 0.02],
            samples: vec![vec![0.1], vec![-0.1]],
        },
    }
}

#[test]
fn paper_split_counts_survive_a_file() {
    let segs: Vec<Segment> = (0..5002)
        .map(|i| {
            let split = match i {
                0..2923 => Split::Train,
                2923..3761 => Split::Val,
                _ => Split::Test,
            };
            tiny(i, split)
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mmac.jsonl");
    save_dataset(&segs, &path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.len(), 5002);
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| split_of(&back, s).len());
    assert_eq!(counts, [2923, 838, 1241]);
}

#[test]
fn synthetic_round_trip_is_bit_exact() {
    let data = generate_synthetic(&SynthSpec {
        n_segments: 12,
        seed: 4,
        quantum: 0.0,
        ..SynthSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_dataset(&data, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), data);
}

#[test]
fn missing_sensors_names_the_segment() {
    let mut v = serde_json::to_value(tiny(7, Split::Train)).unwrap();
    v.as_object_mut().unwrap().remove("sensors");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, format!("{v}\n")).unwrap();
    match load_dataset(&path) {
        Err(Error::Data(msg)) => assert!(msg.contains("seg-7") && msg.contains("sensors"), "{msg}"),
        other => panic!("expected data error, got {other:?}"),
    }
}

#[test]
fn bad_rates_are_config_errors() {
    let spec = SynthSpec {
        visual_blur_rate: 1.5,
        ..SynthSpec::default()
    };
    assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
}

/// LSTM encoder plus a linear verb classifier trained with Adam; returns
/// held-out verb accuracy.
fn probe(inputs: &[(Tensor, usize)], held_out: &[(Tensor, usize)], width: usize, classes: usize) -> f64 {
    let mut rng = SplitRng::new(0);
    let mut store = ParamStore::new();
    let enc = LstmEncoder::new(&mut store, "probe", width, 16, false, &mut rng);
    let w = store.add_uniform("probe.head.w", &[16, classes], 16, &mut rng);
    let b = store.add("probe.head.b", Tensor::zeros(&[classes]));
    let mut adam = AdamState::new(&store);
    let boundary = BoundaryConfig {
        mode: BoundaryMode::AlwaysOff,
        ..BoundaryConfig::default()
    };
    let logits = |tape: &mut Tape, store: &ParamStore, x: &Tensor, train: bool| {
        let p = store.bind(tape, train);
        let xv = tape.constant(x.clone());
        let h = enc.encode(tape, &p, xv, boundary).unwrap().final_hidden;
        let l = tape.matmul(h, p[w]).unwrap();
        (tape.add(l, p[b]).unwrap(), p)
    };
    for _ in 0..25 {
        for batch in inputs.chunks(10) {
            let mut grads: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
            for (x, y) in batch {
                let mut tape = Tape::new();
                let (l, p) = logits(&mut tape, &store, x, true);
                let loss = tape.cross_entropy(l, *y).unwrap();
                let g = tape.backward(loss).unwrap();
                for (acc, id) in grads.iter_mut().zip(store.ids()) {
                    for (a, d) in acc.iter_mut().zip(g.wrt(p[id]).data()) {
                        *a += d / batch.len() as f64;
                    }
                }
            }
            adam_step(&mut store, &grads, &mut adam, 3e-3, &AdamConfig::default()).unwrap();
        }
    }
    let hits = held_out
        .iter()
        .filter(|(x, y)| {
            let mut tape = Tape::new();
            let (l, _) = logits(&mut tape, &store, x, false);
            tape.value(l).argmax() == *y
        })
        .count();
    hits as f64 / held_out.len() as f64
}

#[test]
fn sensors_identify_verbs_and_frames_do_not() {
    let spec = SynthSpec {
        n_segments: 300,
        seed: 2,
        ..SynthSpec::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let caps: Vec<&str> = data.iter().map(|s| s.caption.as_str()).collect();
    let model = CaptionModel::new(ModelConfig::preset(Preset::Desk), Vocabulary::build(&caps, 1).unwrap(), 0).unwrap();
    let verbs: Vec<&str> = spec.verbs.iter().map(|v| v.name.as_str()).collect();
    let (mut sensor_sets, mut frame_sets) = ([vec![], vec![]], [vec![], vec![]]);
    for seg in &data {
        let p = model.prepare(seg).unwrap();
        let y = verbs.iter().position(|v| seg.caption.starts_with(v)).unwrap();
        let k = (seg.split != Split::Train) as usize;
        sensor_sets[k].push((p.sensors, y));
        frame_sets[k].push((p.frames, y));
    }
    let sensor = probe(&sensor_sets[0], &sensor_sets[1], spec.sensor_channels, verbs.len());
    let vision = probe(&frame_sets[0], &frame_sets[1], spec.feature_dim, verbs.len());
    eprintln!("probe accuracy: sensor {sensor:.3}, vision {vision:.3}");
    assert!(sensor > 0.9, "sensor probe {sensor}");
    // frames only reveal whether the caption has a location phrase, which
    // splits the six verbs into two groups of three
    assert!(vision < 1.0 / 3.0 + 0.12, "vision probe {vision}");
}
