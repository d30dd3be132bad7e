//! Known Hammerstein–Wiener generators and excitation shared by the
//! identification tests.
#![allow(dead_code)]

use latsched::data::compute_nmse;
use latsched::sysid::{HwModel, LinearSsCore, Segment, StaticBlock, Structure};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn generator(h: StaticBlock, den: &[f64], num: &[f64], w: StaticBlock) -> HwModel {
    let structure = Structure {
        input: h.kind(),
        order: den.len(),
        output: w.kind(),
    };
    HwModel {
        input_channels: vec!["u".into()],
        output_channel: "y".into(),
        input_blocks: vec![h],
        core: LinearSsCore::companion(den, num, 0.1),
        output_block: w,
        structure,
        training_nmse: 1.0,
        refined: true,
        projections: 0,
    }
}

/// Multi-level pseudo-random steps held for 5–30 samples.
pub fn staircase(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut u = Vec::with_capacity(n);
    while u.len() < n {
        let level = rng.random_range(lo..hi);
        let hold = rng.random_range(5..30);
        u.extend(std::iter::repeat_n(level, hold));
    }
    u.truncate(n);
    u
}

pub fn make_segments(model: &HwModel, n_seg: usize, len: usize, u_init: f64, noise: f64, seed: u64) -> Vec<Segment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (u_init - 4.0, u_init + 4.0);
    (0..n_seg)
        .map(|_| {
            let u = staircase(len, lo, hi, &mut rng);
            let clean = model.rollout_siso(&u, u_init).unwrap();
            let y = if noise > 0.0 {
                let d = Normal::new(0.0, noise).unwrap();
                clean.iter().map(|v| v + d.sample(&mut rng)).collect()
            } else {
                clean
            };
            Segment { u, y, u_init }
        })
        .collect()
}

pub fn held_out_nmse(truth: &HwModel, fit: &HwModel, u_init: f64, seed: u64) -> f64 {
    let segs = make_segments(truth, 2, 1000, u_init, 0.0, seed);
    let mut r = Vec::new();
    let mut e = Vec::new();
    for s in &segs {
        r.extend_from_slice(&s.y);
        e.extend(fit.rollout_siso(&s.u, u_init).unwrap());
    }
    compute_nmse(&r, &e).unwrap()
}

pub fn nonlinear_truth() -> HwModel {
    generator(
        StaticBlock::Pwl { lo: 16.0, hi: 24.0, values: vec![-1.0, 0.0, 0.4] },
        &[-1.6, 0.63],
        &[0.3, 0.1],
        StaticBlock::Poly { coeffs: vec![1.0, 0.5, 0.02] },
    )
}

/// Stable generator of order 2 to 4 with distinct real poles spread over (0.53, 0.93),
/// unit DC gain, a monotone piecewise-linear input block into [-1, 1] and a mild
/// quadratic output.
pub fn random_generator(seed: u64) -> HwModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = 2 + (seed % 3) as usize;
    let spacing = 0.36 / (order - 1) as f64;
    let poles: Vec<f64> = (0..order)
        .map(|k| 0.55 + spacing * k as f64 + rng.random_range(-0.02..0.02))
        .collect();
    // Expand the product of (z - p_i) into monic coefficients.
    let mut poly = vec![1.0];
    for p in &poles {
        let mut next = vec![0.0; poly.len() + 1];
        for (i, c) in poly.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * p;
        }
        poly = next;
    }
    let mut num: Vec<f64> = (0..order).map(|_| rng.random_range(0.05..0.3)).collect();
    let gain = num.iter().sum::<f64>() / poly.iter().sum::<f64>();
    num.iter_mut().for_each(|c| *c /= gain);
    let mid = rng.random_range(0.2..0.8);
    generator(
        StaticBlock::Pwl { lo: 16.0, hi: 24.0, values: vec![-1.0, mid - 0.5, 1.0] },
        &poly[1..],
        &num,
        StaticBlock::Poly { coeffs: vec![0.0, 1.0, rng.random_range(-0.05..0.05)] },
    )
}
