use egocap::fusion::{Ammt, FusionMode};
use egocap::params::ParamStore;
use egocap::rng::SplitRng;
use egocap::{Error, Tape, Tensor};
use proptest::prelude::*;

fn fused(store: &ParamStore, ammt: &Ammt, hv: &[f64], hs: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let v = tape.constant(Tensor::vector(hv));
    let s = tape.constant(Tensor::vector(hs));
    let z = ammt.fuse(&mut tape, &p, v, s).unwrap();
    assert_eq!(tape.value(z.h_v).data(), hv);
    assert_eq!(tape.value(z.h_s).data(), hs);
    tape.value(z.h_vs).data().to_vec()
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

proptest! {
    #[test]
    fn every_mode_is_concat_at_init(
        hv in prop::collection::vec(-10.0f64..10.0, 4),
        hs in prop::collection::vec(-10.0f64..10.0, 3),
    ) {
        for mode in [FusionMode::Concat, FusionMode::Symmetric, FusionMode::LinearOnV, FusionMode::LinearOnS] {
            let mut store = ParamStore::new();
            let ammt = Ammt::new(&mut store, mode, 4, 3);
            prop_assert_eq!(fused(&store, &ammt, &hv, &hs), concat(&hv, &hs));
        }
    }

    #[test]
    fn linear_on_s_matches_matvec_oracle(seed in 0u64..1000) {
        let mut rng = SplitRng::new(seed);
        let mut store = ParamStore::new();
        let ammt = Ammt::new(&mut store, FusionMode::LinearOnS, 4, 3);
        let a = ammt.sensor_affine().unwrap();
        let w: Vec<f64> = (0..9).map(|_| rng.normal(0.0, 1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.normal(0.0, 1.0)).collect();
        *store.get_mut(a.w) = Tensor::matrix(3, 3, w.clone()).unwrap();
        *store.get_mut(a.b) = Tensor::vector(&b);
        let hv: Vec<f64> = (0..4).map(|_| rng.normal(0.0, 1.0)).collect();
        let hs: Vec<f64> = (0..3).map(|_| rng.normal(0.0, 1.0)).collect();
        let out = fused(&store, &ammt, &hv, &hs);
        prop_assert_eq!(&out[..4], &hv[..]);
        for i in 0..3 {
            let expect = (0..3).map(|j| w[i * 3 + j] * hs[j]).sum::<f64>() + b[i];
            prop_assert!((out[4 + i] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_sensor_gives_zero_tail() {
    let mut store = ParamStore::new();
    let ammt = Ammt::new(&mut store, FusionMode::LinearOnS, 2, 3);
    assert_eq!(fused(&store, &ammt, &[1.5, -2.0], &[0.0; 3]), vec![1.5, -2.0, 0.0, 0.0, 0.0]);
}

#[test]
fn visual_head_leaves_ammt_without_gradient() {
    let mut store = ParamStore::new();
    let ammt = Ammt::new(&mut store, FusionMode::Symmetric, 3, 2);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, true);
    let v = tape.param(Tensor::vector(&[0.3, -0.1, 0.7]));
    let s = tape.param(Tensor::vector(&[1.0, 2.0]));
    let z = ammt.fuse(&mut tape, &p, v, s).unwrap();
    let head = tape.sum(z.h_v);
    let g = tape.backward(head).unwrap();
    for a in [ammt.visual_affine().unwrap(), ammt.sensor_affine().unwrap()] {
        assert!(g.wrt(p[a.w]).data().iter().all(|&x| x == 0.0));
        assert!(g.wrt(p[a.b]).data().iter().all(|&x| x == 0.0));
    }
    // and through the fused vector the sensor map does receive gradient
    let tail = tape.sum(z.h_vs);
    let g = tape.backward(tail).unwrap();
    assert!(g.wrt(p[ammt.sensor_affine().unwrap().b]).data().iter().all(|&x| x == 1.0));
}

#[test]
fn shape_mismatch_and_unknown_mode() {
    let mut store = ParamStore::new();
    let ammt = Ammt::new(&mut store, FusionMode::LinearOnS, 3, 2);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let v = tape.constant(Tensor::vector(&[0.0; 3]));
    let s = tape.constant(Tensor::vector(&[0.0; 4]));
    assert!(matches!(ammt.fuse(&mut tape, &p, v, s), Err(Error::Dimension { .. })));
    assert!(matches!("gated".parse::<FusionMode>(), Err(Error::Config(_))));
}
