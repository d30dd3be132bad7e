mod common;

use common::{generator, make_segments, held_out_nmse, nonlinear_truth, staircase};
use latsched::data::compute_nmse;
use latsched::sysid::{fit_hw, search_structure, simulate_hw, BlockKind, FitOptions, SearchGrid, Segment, StaticBlock, Structure};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn known_nonlinear_generator_is_recovered() {
    let truth = nonlinear_truth();
    let train = make_segments(&truth, 8, 500, 20.0, 0.0, 11);
    let st = Structure { input: BlockKind::Pwl(2), order: 2, output: BlockKind::Poly(2) };
    let fit = fit_hw(&train, &st, 3, &FitOptions::default()).unwrap();
    assert!(fit.training_nmse > 0.99, "train {}", fit.training_nmse);
    let test = held_out_nmse(&truth, &fit, 20.0, 99);
    assert!(test >= 0.99, "held-out NMSE {test}");
    assert!(fit.core.spectral_radius() < 1.0);
}

#[test]
fn linear_step_response_matches_generator() {
    let truth = generator(StaticBlock::Identity, &[-1.5, 0.56], &[0.2, 0.05], StaticBlock::Identity);
    let train = make_segments(&truth, 8, 500, 0.0, 0.0, 5);
    let st = Structure { input: BlockKind::Identity, order: 2, output: BlockKind::Identity };
    let fit = fit_hw(&train, &st, 0, &FitOptions::default()).unwrap();
    let step = vec![1.0; 200];
    let a = truth.rollout_siso(&step, 0.0).unwrap();
    let b = fit.rollout_siso(&step, 0.0).unwrap();
    let peak = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    assert!(err / peak < 1e-3, "relative step-response error {}", err / peak);
}

#[test]
fn white_noise_output_is_not_overclaimed() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = Normal::new(0.0, 1.0).unwrap();
    let segs: Vec<Segment> = (0..4)
        .map(|_| {
            let u = staircase(500, -1.0, 1.0, &mut rng);
            let y = (0..500).map(|_| d.sample(&mut rng)).collect();
            Segment { u, y, u_init: 0.0 }
        })
        .collect();
    let st = Structure { input: BlockKind::Identity, order: 2, output: BlockKind::Identity };
    let fit = fit_hw(&segs, &st, 0, &FitOptions::default()).unwrap();
    assert!(fit.training_nmse <= 0.1, "NMSE {}", fit.training_nmse);
}

#[test]
fn fit_invariants_hold() {
    let truth = nonlinear_truth();
    let train = make_segments(&truth, 4, 400, 20.0, 0.05, 21);
    for st in [
        Structure { input: BlockKind::Identity, order: 3, output: BlockKind::Pwl(3) },
        Structure { input: BlockKind::Poly(3), order: 5, output: BlockKind::Identity },
        Structure { input: BlockKind::Pwl(4), order: 2, output: BlockKind::Poly(2) },
    ] {
        let fit = fit_hw(&train, &st, 1, &FitOptions::default()).unwrap();
        assert!(fit.core.spectral_radius() < 1.0, "{}", st.label());
        // Independent rollout through the general state-space simulator.
        let mut r = Vec::new();
        let mut e = Vec::new();
        for s in &train {
            let r0 = fit.rest_state(&[s.u_init]).unwrap();
            let mut shifted: Vec<Vec<f64>> = s.u.iter().map(|v| vec![*v]).collect();
            shifted.push(vec![s.u_init]);
            let y = simulate_hw(&fit, &shifted, r0.as_slice()).unwrap();
            r.extend_from_slice(&s.y);
            e.extend_from_slice(&y[1..]);
        }
        let nmse = compute_nmse(&r, &e).unwrap();
        assert!((nmse - fit.training_nmse).abs() < 1e-9, "{nmse} vs {}", fit.training_nmse);
        // Refinement never ends worse than the least-squares start.
        let no_lm = FitOptions { max_iter: 0, starts: 1, ..FitOptions::default() };
        let init = fit_hw(&train, &st, 1, &no_lm).unwrap();
        assert!(fit.training_nmse >= init.training_nmse - 1e-12, "{}", st.label());
    }
}

#[test]
fn search_recovers_order_within_one() {
    let truth = generator(
        StaticBlock::Pwl { lo: 16.0, hi: 24.0, values: vec![-0.8, 0.0, 0.5] },
        &[-2.2, 1.59, -0.378],
        &[0.2, 0.1, -0.05],
        StaticBlock::Poly { coeffs: vec![0.0, 1.0, 0.01] },
    );
    let train = make_segments(&truth, 8, 500, 20.0, 0.05, 4);
    let (best, table) = search_structure(&train, &SearchGrid::default(), 0, &FitOptions::default()).unwrap();
    assert!((2..=4).contains(&best.order), "selected {}", best.label());
    assert!(table.windows(2).all(|w| w[0].naic <= w[1].naic));
    assert_eq!(table[0].structure, best);
}

#[test]
fn linear_generator_selects_affine_blocks() {
    let truth = generator(StaticBlock::Identity, &[-1.5, 0.56], &[0.2, 0.05], StaticBlock::Identity);
    let train = make_segments(&truth, 8, 500, 20.0, 0.02, 6);
    let (best, _) = search_structure(&train, &SearchGrid::default(), 0, &FitOptions::default()).unwrap();
    let affine = |b: BlockKind| matches!(b, BlockKind::Identity | BlockKind::Pwl(1));
    assert!(affine(best.input) && affine(best.output), "selected {}", best.label());
}
