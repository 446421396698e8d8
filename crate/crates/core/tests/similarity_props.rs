use proptest::prelude::*;
use siamese_ctc::rng::SeededRng;
use siamese_ctc::similarity::*;
use siamese_ctc::tensor::{finite_diff_grad, max_rel_error, Tape};

fn random_vec(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.normal(0.0, 1.0)).collect()
}

fn random_dist(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..d).map(|_| rng.normal(0.0, 1.0).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// KL with no validation, so perturbed points off the simplex can be probed.
fn kl_raw(z1: &[f64], z2: &[f64]) -> f64 {
    z1.iter().zip(z2).map(|(a, b)| a * (a.ln() - b.ln())).sum()
}

#[test]
fn cosine_grad_matches_numeric_and_tape() {
    for seed in 0..100 {
        let mut rng = SeededRng::new(seed);
        let (z1, z2) = (random_vec(&mut rng, 8), random_vec(&mut rng, 8));
        let analytic = cosine_grad(&z1, &z2).unwrap();
        let numeric = finite_diff_grad(|x| cosine_sim(x, &z2).unwrap(), &z1, 1e-5);
        assert!(max_rel_error(&analytic, &numeric) < 1e-6, "seed {seed}");

        let tape = Tape::new();
        let a = tape.param(&[1, 8], z1.clone()).unwrap();
        let b = tape.constant(&[1, 8], z2.clone()).unwrap();
        cosine_rows(&a, &b).unwrap().sum().backward().unwrap();
        assert!(max_rel_error(&analytic, &a.grad().unwrap()) < 1e-10, "seed {seed}");
    }
}

#[test]
fn kl_grad_matches_tied_perturbation() {
    for seed in 0..100 {
        let mut rng = SeededRng::new(1000 + seed);
        let (z1, z2) = (random_dist(&mut rng, 8), random_dist(&mut rng, 8));
        let analytic = kl_grad(&z1, &z2).unwrap();
        let numeric: Vec<f64> = (0..8)
            .map(|j| {
                let shifted = |eps: f64| {
                    let (mut a, mut b) = (z1.clone(), z2.clone());
                    a[j] += eps;
                    b[j] += eps;
                    kl_raw(&a, &b)
                };
                let h = 1e-6;
                (shifted(h) - shifted(-h)) / (2.0 * h)
            })
            .collect();
        assert!(max_rel_error(&analytic, &numeric) < 1e-6, "seed {seed}");

        let tape = Tape::new();
        let a = tape.param(&[1, 8], z1.clone()).unwrap();
        let b = tape.param(&[1, 8], z2.clone()).unwrap();
        kl_sim_tensor(&a, &b).unwrap().backward().unwrap();
        let tied: Vec<f64> = a.grad().unwrap().iter().zip(b.grad().unwrap()).map(|(x, y)| x + y).collect();
        assert!(max_rel_error(&analytic, &tied) < 1e-10, "seed {seed}");
    }
}

#[test]
fn kl_grad_fixed_point() {
    for seed in 0..100 {
        let mut rng = SeededRng::new(seed);
        let z1 = random_dist(&mut rng, 6);
        let mut z2 = random_dist(&mut rng, 6);
        // copy two components of z1 into z2 and renormalise the rest
        let fixed = z1[1] + z1[4];
        let rest: f64 = [0, 2, 3, 5].iter().map(|&i| z2[i]).sum();
        for i in [0, 2, 3, 5] {
            z2[i] *= (1.0 - fixed) / rest;
        }
        z2[1] = z1[1];
        z2[4] = z1[4];
        let g = kl_grad(&z1, &z2).unwrap();
        for (j, gj) in g.iter().enumerate() {
            let equal = (z1[j] - z2[j]).abs() < 1e-12;
            assert_eq!(gj.abs() < 1e-12, equal, "seed {seed} component {j}");
        }
    }
}

#[test]
fn cosine_scale_invariance() {
    let mut rng = SeededRng::new(4);
    for _ in 0..100 {
        let (z1, z2) = (random_vec(&mut rng, 8), random_vec(&mut rng, 8));
        let c = rng.uniform_range(0.01, 100.0);
        let scaled: Vec<f64> = z1.iter().map(|v| v * c).collect();
        let diff = cosine_sim(&scaled, &z2).unwrap() - cosine_sim(&z1, &z2).unwrap();
        assert!(diff.abs() < 1e-12);
    }
}

fn scan_oracle(p: &[f64]) -> Vec<bool> {
    let sgn = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
    let mut out = Vec::with_capacity(p.len());
    for t in 0..p.len() {
        let l = if t == 0 { 0.0 } else { p[t - 1] };
        let r = if t + 1 == p.len() { 0.0 } else { p[t + 1] };
        let v = -(sgn(sgn((l - p[t]) * (p[t] - r)) + 0.1) - 1.0) / 2.0;
        out.push(v == 1.0);
    }
    out
}

#[test]
fn spike_filter_matches_scan_on_seeded_sequences() {
    let mut rng = SeededRng::new(77);
    for _ in 0..1000 {
        let n = rng.int_inclusive(1, 40);
        // coarse grid so plateaus and ties occur
        let p: Vec<f64> = (0..n).map(|_| rng.int_inclusive(0, 5) as f64 / 5.0).collect();
        assert_eq!(spike_filter(&p, DetectionMode::PaperExact), scan_oracle(&p), "{p:?}");
    }
}

proptest! {
    #[test]
    fn spike_filter_matches_scan(p in prop::collection::vec(0.0f64..1.0, 1..64)) {
        prop_assert_eq!(spike_filter(&p, DetectionMode::PaperExact), scan_oracle(&p));
    }

    #[test]
    fn unimodal_modes_agree(
        up in prop::collection::vec(0.01f64..1.0, 0..10),
        down in prop::collection::vec(0.01f64..1.0, 0..10),
    ) {
        // strictly increasing to a single peak, then strictly decreasing
        let mut p = Vec::new();
        let mut level = 0.0;
        for s in &up {
            level += s;
            p.push(level);
        }
        level += 1.0;
        p.push(level);
        for s in &down {
            level -= s / 10.0;
            p.push(level);
        }
        prop_assert_eq!(
            spike_filter(&p, DetectionMode::PaperExact),
            spike_filter(&p, DetectionMode::StrictMax)
        );
    }

    #[test]
    fn padded_frames_never_spike(row in prop::collection::vec(0.0f64..1.0, 1..20), pad in 0usize..6) {
        let len = row.len();
        let mut padded = row.clone();
        padded.extend(std::iter::repeat_n(0.0, pad));
        let sp = spike_filter_batch(&[padded], &[len], DetectionMode::PaperExact);
        prop_assert!(sp[0][len..].iter().all(|s| !s));
        let want = spike_filter(&row, DetectionMode::PaperExact);
        prop_assert_eq!(&sp[0][..len], want.as_slice());
    }
}

#[test]
fn loss_grows_as_branches_separate() {
    let mut rng = SeededRng::new(9);
    let cfg = SimilarityConfig::default();
    for _ in 0..50 {
        let z1 = random_vec(&mut rng, 12);
        let dir = random_vec(&mut rng, 12);
        let mut last = f64::NEG_INFINITY;
        for step in 0..20 {
            let c = step as f64 * 0.25;
            let z2: Vec<f64> = z1.iter().zip(&dir).map(|(a, d)| a + c * d).collect();
            let tape = Tape::new();
            let a = tape.constant(&[3, 4], z1.clone()).unwrap();
            let b = tape.constant(&[3, 4], z2).unwrap();
            let l = sim_loss(&a, &b, &[0.0; 3], &[0.0; 3], &cfg).unwrap().item();
            if step == 0 {
                assert!((l + 1.0).abs() < 1e-12);
            }
            assert!(l >= last - 1e-12);
            last = l;
        }
    }
}
