mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shadoc::numerics::{Bindings, ParamSet, Tape, Tensor};
use shadoc::refiner::{self, hypercolumn, se_reweight, spp, Backbone, BackboneSpec, RefinerConfig};

fn refiner_params(cfg: &RefinerConfig, spec: &BackboneSpec, seed: u64, live_out: bool) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    refiner::init_params(cfg, spec, &mut ChaCha8Rng::seed_from_u64(seed), &mut p);
    if live_out {
        // a zero output layer would hide every upstream gradient
        let w = p.get("refine.out.w").unwrap().shape().to_vec();
        *p.get_mut("refine.out.w").unwrap() = common::random_tensor(&w, seed + 100, -0.05, 0.05);
    }
    p
}

#[test]
fn full_stage_gradients_match_finite_differences() {
    let spec = BackboneSpec::default();
    let cfg = RefinerConfig::default();
    let p = refiner_params(&cfg, &spec, 3, true);
    let backbone = Backbone::<f64>::new(spec);
    let names: Vec<String> = p.names().map(str::to_owned).collect();
    let mut inputs: Vec<Tensor<f64>> = p.iter().map(|(_, t)| t.clone()).collect();
    // I₁ kept away from the clamp bounds
    inputs.push(common::random_tensor(&[3, 16, 16], 11, 0.3, 0.7));
    let img = common::random_tensor(&[3, 16, 16], 12, 0.0, 1.0);
    let mask = common::random_tensor(&[1, 16, 16], 13, 0.0, 1.0);
    let err = common::gradcheck(&inputs, Some(10), |tape, vars| {
        let (i1, weights) = vars.split_last().unwrap();
        let binds: Bindings = names.iter().cloned().zip(weights.iter().copied()).collect();
        let x = tape.constant(img.clone());
        let m = tape.constant(mask.clone());
        let out = refiner::refine(tape, &binds, &backbone, x, *i1, m, &cfg)?;
        common::project(tape, out, 14)
    });
    assert!(err < 1e-3, "refiner relative gradient error {err:e}");
}

#[test]
fn hypercolumn_gradient_reaches_the_image_but_not_the_backbone() {
    let spec = BackboneSpec {
        seed: 1,
        channels: vec![4, 6, 8],
    };
    let backbone = Backbone::<f64>::new(spec.clone());
    let mut tape = Tape::new();
    let img = tape.variable(common::random_tensor(&[3, 16, 16], 2, 0.0, 1.0));
    let fs = hypercolumn(&mut tape, img, &backbone).unwrap();
    assert_eq!(tape.shape(fs.hypercolumn), &[spec.hypercolumn_channels(), 16, 16]);
    let l = common::project(&mut tape, fs.hypercolumn, 3).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.wrt(&tape, img).data().iter().any(|&v| v != 0.0));
    assert!(tape.params().is_empty());
}

#[test]
fn hypercolumn_is_deterministic() {
    let backbone = Backbone::<f64>::new(BackboneSpec::default());
    let x = common::random_tensor(&[3, 20, 12], 4, 0.0, 1.0);
    let run = || {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let fs = hypercolumn(&mut tape, v, &backbone).unwrap();
        tape.value(fs.hypercolumn).clone()
    };
    assert_eq!(run(), run());
}

fn se_params(c: usize, r: usize, b2: f64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.insert("se.w1", Tensor::zeros([c, r]));
    p.insert("se.b1", Tensor::zeros([r]));
    p.insert("se.w2", Tensor::zeros([r, c]));
    p.insert("se.b2", Tensor::full([c], b2));
    p
}

#[test]
fn saturated_gate_is_almost_identity() {
    let p = se_params(4, 2, 50.0);
    let mut tape = Tape::new();
    let binds = p.bind(&mut tape, |_| false);
    let x = tape.constant(common::random_tensor(&[4, 5, 5], 1, -1.0, 1.0));
    let y = se_reweight(&mut tape, &binds, x, "se").unwrap();
    for (a, b) in tape.value(y).data().iter().zip(tape.value(x).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_logits_halve_every_channel() {
    let p = se_params(3, 1, 0.0);
    let mut tape = Tape::new();
    let binds = p.bind(&mut tape, |_| false);
    let x = tape.constant(common::random_tensor(&[3, 4, 4], 2, -1.0, 1.0));
    let y = se_reweight(&mut tape, &binds, x, "se").unwrap();
    for (a, b) in tape.value(y).data().iter().zip(tape.value(x).data()) {
        assert_eq!(*a, b * 0.5);
    }
}

#[test]
fn pyramid_of_a_constant_map_is_constant() {
    let c = 3;
    let mut p = ParamSet::new();
    p.insert("spp.w", common::random_tensor(&[c, 4 * c, 1, 1], 5, -1.0, 1.0));
    p.insert("spp.b", common::random_tensor(&[c], 6, -1.0, 1.0));
    let mut tape = Tape::new();
    let binds = p.bind(&mut tape, |_| false);
    let per_channel = [0.2, -0.7, 1.5];
    let data = per_channel.iter().flat_map(|&v| vec![v; 7 * 9]).collect();
    let x = tape.constant(Tensor::new([c, 7, 9], data).unwrap());
    let y = spp(&mut tape, &binds, x, &[1, 2, 4], "spp").unwrap();
    assert_eq!(tape.shape(y), &[c, 7, 9]);
    for plane in tape.value(y).data().chunks(63) {
        assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
    }
}

#[test]
fn pyramid_weights_must_cover_every_scale() {
    let mut p = ParamSet::new();
    p.insert("spp.w", Tensor::<f64>::zeros([2, 6, 1, 1]));
    p.insert("spp.b", Tensor::zeros([2]));
    let mut tape = Tape::new();
    let binds = p.bind(&mut tape, |_| false);
    let x = tape.constant(Tensor::zeros([2, 4, 4]));
    assert!(spp(&mut tape, &binds, x, &[1, 2, 4], "spp").is_err());
    assert!(spp(&mut tape, &binds, x, &[1, 2], "spp").is_ok());
}

#[test]
fn zero_initialized_refiner_is_identity_on_the_coarse_image() {
    let spec = BackboneSpec::default();
    let cfg = RefinerConfig::default();
    let p = refiner_params(&cfg, &spec, 9, false);
    let backbone = Backbone::new(spec);
    let mut tape = Tape::new();
    let binds = p.bind(&mut tape, |_| true);
    let img = tape.constant(common::random_tensor(&[3, 12, 20], 1, 0.0, 1.0));
    let i1 = tape.constant(common::random_tensor(&[3, 12, 20], 2, 0.0, 1.0));
    let m = tape.constant(common::random_tensor(&[1, 12, 20], 3, 0.0, 1.0));
    let i2 = refiner::refine(&mut tape, &binds, &backbone, img, i1, m, &cfg).unwrap();
    assert_eq!(tape.value(i2), tape.value(i1));
}

#[test]
fn mismatched_inputs_are_rejected() {
    let spec = BackboneSpec::default();
    let cfg = RefinerConfig::default();
    let p = refiner_params(&cfg, &spec, 9, false);
    let backbone = Backbone::new(spec);
    let mut tape = Tape::new();
    let binds = p.bind(&mut tape, |_| false);
    let img = tape.constant(Tensor::zeros([3, 8, 8]));
    let i1 = tape.constant(Tensor::zeros([3, 8, 6]));
    let m = tape.constant(Tensor::zeros([1, 8, 8]));
    assert!(refiner::refine(&mut tape, &binds, &backbone, img, i1, m, &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gate_is_strictly_between_zero_and_one(seed in 0u64..10_000, c in 2usize..6) {
        let mut p = ParamSet::new();
        p.insert("se.w1", common::random_tensor(&[c, 1], seed, -2.0, 2.0));
        p.insert("se.b1", common::random_tensor(&[1], seed + 1, -1.0, 1.0));
        p.insert("se.w2", common::random_tensor(&[1, c], seed + 2, -2.0, 2.0));
        p.insert("se.b2", common::random_tensor(&[c], seed + 3, -1.0, 1.0));
        let mut tape = Tape::new();
        let binds = p.bind(&mut tape, |_| false);
        let xt = common::random_tensor(&[c, 3, 3], seed + 4, 0.5, 1.0);
        let x = tape.constant(xt.clone());
        let y = se_reweight(&mut tape, &binds, x, "se").unwrap();
        let norm = |d: &[f64]| d.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(norm(tape.value(y).data()) <= norm(xt.data()));
        for (plane_y, plane_x) in tape.value(y).data().chunks(9).zip(xt.data().chunks(9)) {
            let s = plane_y[0] / plane_x[0];
            prop_assert!(s > 0.0 && s < 1.0);
            for (a, b) in plane_y.iter().zip(plane_x) {
                prop_assert!((a / b - s).abs() < 1e-12);
            }
        }
    }
}
