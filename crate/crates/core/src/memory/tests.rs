use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nnkit::{grad_check_sampled, Bound, ParamStore, Tape, Tensor, Var};

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn cell(kind: CellKind, channels: usize, levels: usize, seed: u64) -> MemoryCell<f64> {
    let config = CellConfig {
        kind,
        channels,
        levels,
        ..CellConfig::default()
    };
    MemoryCell::new(config, seed).unwrap()
}

/// Cell weights drawn at a scale where every gate and ReLU is exercised.
fn scrambled(kind: CellKind, channels: usize, levels: usize, seed: u64) -> MemoryCell<f64> {
    let mut c = cell(kind, channels, levels, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for (_, t) in c.params.iter_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    c
}

fn bound_pairs(names: &[String], vars: &[Var]) -> Bound {
    Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

#[test]
fn saturated_update_gate_overwrites_memory() {
    let mut c = scrambled(CellKind::Stmm, 3, 1, 1);
    c.params.get_mut("uz.w").unwrap().data_mut().fill(0.0);
    c.params.get_mut("wz.w").unwrap().data_mut().fill(0.0);
    c.params.get_mut("wz.b").unwrap().data_mut().fill(1e3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let p = c.bind(&mut tape, false);
    let m = tape.constant(random([1, 3, 5, 6], &mut rng, 1.0));
    let f = tape.constant(random([1, 3, 5, 6], &mut rng, 1.0));
    let tr = stmm_step(&mut tape, &p, "", m, f, GateKind::Sigmoid).unwrap();
    assert_eq!(tape.value(tr.memory), tape.value(tr.candidate));
}

#[test]
fn closed_update_gate_retains_memory() {
    let mut c = scrambled(CellKind::Stmm, 3, 1, 3);
    c.params.get_mut("uz.w").unwrap().data_mut().fill(0.0);
    c.params.get_mut("wz.w").unwrap().data_mut().fill(0.0);
    c.params.get_mut("wz.b").unwrap().data_mut().fill(-1e3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let p = c.bind(&mut tape, false);
    let m = tape.constant(random([1, 3, 5, 6], &mut rng, 1.0));
    let f = tape.constant(random([1, 3, 5, 6], &mut rng, 1.0));
    let tr = stmm_step(&mut tape, &p, "", m, f, GateKind::Sigmoid).unwrap();
    assert_eq!(tape.value(tr.memory), tape.value(m));
}

#[test]
fn stmm_rejects_mismatched_inputs() {
    let c = cell(CellKind::Stmm, 2, 1, 5);
    let mut tape = Tape::new();
    let p = c.bind(&mut tape, false);
    let m = tape.constant(Tensor::zeros([1, 2, 4, 4]));
    let f = tape.constant(Tensor::zeros([1, 2, 4, 3]));
    assert!(stmm_step(&mut tape, &p, "", m, f, GateKind::Sigmoid).is_err());
}

#[test]
fn stmm_gradients_match_finite_differences() {
    for gate in [GateKind::Sigmoid, GateKind::NormalizedRelu] {
        let c = scrambled(CellKind::Stmm, 3, 1, 6);
        let names: Vec<String> = c.params.iter().map(|(k, _)| k.clone()).collect();
        let mut inputs: Vec<Tensor<f64>> = c.params.iter().map(|(_, v)| v.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        inputs.push(random([1, 3, 4, 5], &mut rng, 1.0));
        inputs.push(random([1, 3, 4, 5], &mut rng, 1.0));
        let n = names.len();
        let report = grad_check_sampled(&inputs, 1e-5, 40, 8, |t, v| {
            let p = bound_pairs(&names, &v[..n]);
            Ok(stmm_step(t, &p, "", v[n], v[n + 1], gate)?.memory)
        })
        .unwrap();
        assert!(report.passed(1e-3), "{gate:?}: {report:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gates_stay_in_unit_interval(seed in 0u64..10_000, h in 1usize..6, w in 1usize..6, relu in any::<bool>()) {
        let gate = if relu { GateKind::NormalizedRelu } else { GateKind::Sigmoid };
        let c = scrambled(CellKind::Stmm, 2, 1, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let p = c.bind(&mut tape, false);
        let m = tape.constant(random([1, 2, h, w], &mut rng, 10.0));
        let f = tape.constant(random([1, 2, h, w], &mut rng, 10.0));
        let tr = stmm_step(&mut tape, &p, "", m, f, gate).unwrap();
        for g in [tr.update_gate, tr.reset_gate] {
            prop_assert!(tape.value(g).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        prop_assert!(tape.value(tr.memory).all_finite());
    }

    #[test]
    fn warp_is_a_convex_combination(seed in 0u64..10_000, h in 1usize..7, w in 1usize..7, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fp = random([1, 3, h, w], &mut rng, 2.0);
        let ft = random([1, 3, h, w], &mut rng, 2.0);
        let m = random([1, 2, h, w], &mut rng, 5.0);
        let a = affinity_field(&fp, &ft, k, 0.1).unwrap();
        let out = apply_affinity(&m, &a);
        let ki = k as isize;
        for y in 0..h {
            for x in 0..w {
                let wts = a.at(0, y, x);
                prop_assert!(wts.iter().all(|&v| v >= 0.0));
                prop_assert!((wts.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for c in 0..2 {
                    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                    for dy in -ki..=ki {
                        for dx in -ki..=ki {
                            let (py, px) = (y as isize + dy, x as isize + dx);
                            if py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w {
                                let v = m.at(0, c, py as usize, px as usize);
                                lo = lo.min(v);
                                hi = hi.max(v);
                            }
                        }
                    }
                    let v = out.at(0, c, y, x);
                    prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
                }
            }
        }
    }
}

#[test]
fn pyramid_dims_follow_ceil_halving() {
    assert_eq!(pyramid_dims(8, 8, 1).unwrap(), vec![(8, 8)]);
    assert_eq!(pyramid_dims(8, 8, 3).unwrap(), vec![(8, 8), (4, 4), (2, 2)]);
    assert_eq!(pyramid_dims(7, 7, 3).unwrap(), vec![(7, 7), (4, 4), (2, 2)]);
    assert!(pyramid_dims(1, 1, 2).is_err());
    assert!(pyramid_dims(8, 8, 0).is_err());

    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([1, 2, 7, 7], 1.0));
    let p = build_pyramid(&mut tape, x, 3).unwrap();
    let dims: Vec<_> = p.iter().map(|&v| tape.value(v).hw()).collect();
    assert_eq!(dims, vec![(7, 7), (4, 4), (2, 2)]);
    assert_eq!(build_pyramid(&mut tape, x, 1).unwrap(), vec![x]);
}

fn decode_shape(h: usize, w: usize, levels: usize) -> (usize, usize) {
    let c = cell(CellKind::LearnedAlign, 2, levels, 9);
    let mut tape = Tape::new();
    let p = c.bind(&mut tape, false);
    let f = tape.constant(Tensor::full([1, 2, h, w], 0.5));
    let skips = build_pyramid(&mut tape, f, levels).unwrap();
    let coarse = *skips.last().unwrap();
    let out = decode_upsample(&mut tape, &p, "", coarse, &skips).unwrap();
    tape.value(out).hw()
}

#[test]
fn decoder_restores_input_resolution() {
    assert_eq!(decode_shape(8, 8, 3), (8, 8));
    assert_eq!(decode_shape(7, 7, 3), (7, 7));
    for h in 4..=33 {
        for w in 4..=33 {
            assert_eq!(decode_shape(h, w, 3), (h, w), "{h}x{w}");
        }
    }
}

#[test]
fn one_level_decoder_is_identity() {
    let c = cell(CellKind::LearnedAlign, 2, 1, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new();
    let p = c.bind(&mut tape, false);
    let x = tape.constant(random([1, 2, 5, 5], &mut rng, 1.0));
    assert_eq!(decode_upsample(&mut tape, &p, "", x, &[x]).unwrap(), x);
}

#[test]
fn decoder_rejects_wrong_coarse_shape() {
    let c = cell(CellKind::LearnedAlign, 2, 3, 12);
    let mut tape = Tape::new();
    let p = c.bind(&mut tape, false);
    let f = tape.constant(Tensor::full([1, 2, 8, 8], 0.5));
    let skips = build_pyramid(&mut tape, f, 3).unwrap();
    assert!(decode_upsample(&mut tape, &p, "", skips[1], &skips).is_err());
}

#[test]
fn one_level_alignment_equals_plain_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let c = scrambled(CellKind::LearnedAlign, 4, 1, 14);
    for _ in 0..20 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let m = random([1, 4, h, w], &mut rng, 1.0);
        let f = random([1, 4, h, w], &mut rng, 1.0);
        let mut tape = Tape::new();
        let p = c.bind(&mut tape, false);
        let (mv, fv) = (tape.constant(m.clone()), tape.constant(f.clone()));
        let a = learned_align_step(&mut tape, &p, "", mv, fv, 1, GateKind::Sigmoid).unwrap();
        let b = stmm_step(&mut tape, &p, "", mv, fv, GateKind::Sigmoid).unwrap().memory;
        let (va, vb) = (tape.value(a), tape.value(b));
        assert!(va.data().iter().zip(vb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn full_width_alignment_step_shape() {
    let c = MemoryCell::<f32>::new(
        CellConfig {
            channels: 64,
            ..CellConfig::default()
        },
        15,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let m = Tensor::from_fn([1, 64, 16, 16], |_| rng.random_range(0.0f32..1.0));
    let f = Tensor::from_fn([1, 64, 16, 16], |_| rng.random_range(0.0f32..1.0));
    let out = c.forward(&MemoryState { memory: m, timestep: 3 }, None, &f).unwrap();
    assert_eq!(out.memory.shape(), [1, 64, 16, 16]);
    assert!(out.memory.all_finite());
    assert_eq!(out.timestep, 4);
}

#[test]
fn two_unrolled_alignment_steps_pass_grad_check() {
    let c = scrambled(CellKind::LearnedAlign, 2, 3, 17);
    let names: Vec<String> = c.params.iter().map(|(k, _)| k.clone()).collect();
    let mut inputs: Vec<Tensor<f64>> = c.params.iter().map(|(_, v)| v.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..3 {
        inputs.push(random([1, 2, 7, 6], &mut rng, 1.0));
    }
    let n = names.len();
    let report = grad_check_sampled(&inputs, 1e-5, 30, 19, |t, v| {
        let p = bound_pairs(&names, &v[..n]);
        let m1 = learned_align_step(t, &p, "", v[n], v[n + 1], 3, GateKind::Sigmoid)?;
        learned_align_step(t, &p, "", m1, v[n + 2], 3, GateKind::Sigmoid)
    })
    .unwrap();
    assert!(report.passed(1e-3), "{report:?}");
}

#[test]
fn matchtrans_cell_gradients_through_two_steps() {
    let c = scrambled(CellKind::StmmMatchTrans, 2, 1, 20);
    let names: Vec<String> = c.params.iter().map(|(k, _)| k.clone()).collect();
    let mut inputs: Vec<Tensor<f64>> = c.params.iter().map(|(_, v)| v.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..3 {
        inputs.push(random([1, 2, 5, 5], &mut rng, 1.0));
    }
    let n = names.len();
    let report = grad_check_sampled(&inputs, 1e-5, 30, 22, |t, v| {
        let p = bound_pairs(&names, &v[..n]);
        let m1 = c.step(t, &p, v[n], None, v[n + 1])?;
        c.step(t, &p, m1, Some(v[n + 1]), v[n + 2])
    })
    .unwrap();
    assert!(report.passed(1e-3), "{report:?}");
}

#[test]
fn parameter_and_receptive_field_scaling() {
    assert_eq!(cell_param_delta(64, 1).unwrap(), (0, 1));
    assert_eq!(cell_param_delta(64, 2).unwrap(), (73_792, 2));
    assert_eq!(cell_param_delta(64, 3).unwrap(), (147_584, 4));
    for c in [1, 8, 32] {
        let d: Vec<_> = (1..=5).map(|l| cell_param_delta(c, l).unwrap()).collect();
        for l in 1..5 {
            assert_eq!(d[l].0, l * d[1].0);
            assert_eq!(d[l].1, 1 << l);
        }
    }
    // The decoder convs are exactly the parameters a learned-alignment cell adds.
    for levels in 1..=4 {
        let la = cell(CellKind::LearnedAlign, 8, levels, 23);
        let plain = cell(CellKind::Stmm, 8, levels, 23);
        let delta = la.params.num_scalars() - plain.params.num_scalars();
        assert_eq!(delta, cell_param_delta(8, levels).unwrap().0);
    }
}

#[test]
fn fresh_cells_start_close_to_pass_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let f = Tensor::from_fn([1, 8, 9, 9], |_| rng.random_range(0.0..1.0));
    for kind in [CellKind::Stmm, CellKind::StmmMatchTrans, CellKind::LearnedAlign] {
        let c = cell(kind, 8, 3, 25);
        let out = c.forward(&MemoryState::zeros(f.shape()), None, &f).unwrap();
        let err = out.memory.zip_map(&f, |a, b| (a - b).abs()).max_abs();
        assert!(err < 0.2, "{kind}: {err}");
    }
    let none = cell(CellKind::None, 8, 3, 25);
    assert!(none.params.is_empty());
    let out = none.forward(&MemoryState::zeros(f.shape()), None, &f).unwrap();
    assert_eq!(out.memory, f);
}

#[test]
fn cell_kind_names_round_trip() {
    for k in CellKind::ALL {
        assert_eq!(k.as_str().parse::<CellKind>().unwrap(), k);
    }
    assert!("lstm".parse::<CellKind>().is_err());
    let _unused: ParamStore<f64> = ParamStore::new();
}
