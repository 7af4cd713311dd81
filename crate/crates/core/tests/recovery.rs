use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recipcrystal_core::recovery::{coefficient_jacobian, perturb, stage3_newton};
use recipcrystal_core::*;

const EXACT: Acceptance = Acceptance::Absolute(1e-6);

fn single_species(pts: &[[u32; 3]], d: u32) -> Crystal {
    Crystal::new(
        LatticeMatrix::identity(),
        SpeciesSet::new(vec![(6, pts.len() as u32)]),
        vec![pts.to_vec()],
        d,
    )
    .unwrap()
}

fn column(pts: &[[u32; 3]], d: u32, ws: &WaveSet) -> Vec<Complex64> {
    fourier_forward(&single_species(pts, d), ws).column(0)
}

fn sorted(mut v: Vec<[u32; 3]>) -> Vec<[u32; 3]> {
    v.sort_unstable();
    v
}

/// Direct evaluation of the real density at one grid point.
fn density_at(col: &[Complex64], ws: &WaveSet, p: [u32; 3], g: u32) -> f64 {
    let mut acc = 0.0;
    for (w, f) in ws.vectors().iter().zip(col) {
        let t = (w[0] as f64 * p[0] as f64 + w[1] as f64 * p[1] as f64 + w[2] as f64 * p[2] as f64)
            / g as f64;
        acc += (f * Complex64::from_polar(1.0, std::f64::consts::TAU * t)).re;
    }
    acc
}

#[test]
fn density_matches_direct_evaluation() {
    let ws = build_wave_set(Truncation::Cubic, 3);
    let pts = [[2, 3, 4], [14, 18, 9]];
    let col = column(&pts, 24, &ws);
    let grid = density_grid(&col, &ws, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let p = [0; 3].map(|_| rng.random_range(0..24u32));
        assert!((grid.value(p) - density_at(&col, &ws, p, 24)).abs() < 1e-10);
    }
    let mut order: Vec<usize> = (0..grid.values.len()).collect();
    order.sort_by(|a, b| grid.values[*b].total_cmp(&grid.values[*a]));
    let top: Vec<[u32; 3]> = order[..2].iter().map(|&i| grid.point(i)).collect();
    assert_eq!(sorted(top), sorted(pts.to_vec()));
}

#[test]
fn simple_cubic_27_stage_one() {
    let mut pts = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                pts.push([16 * i, 16 * j, 16 * k]);
            }
        }
    }
    let ws = build_wave_set(Truncation::Cubic, 4);
    let out = stage1_peaks(&column(&pts, 48, &ws), &ws, 27, 48, EXACT);
    assert!(out.is_success());
    assert_eq!(sorted(out.coords().to_vec()), sorted(pts));
}

/// Collinear triples: the middle atom's peak stays put by symmetry while the
/// outer peaks are pulled off their sites. Subtracting the middle atom first
/// restores them.
#[test]
fn shifted_peak_escalates_to_stage_two() {
    let ws = build_wave_set(Truncation::Cubic, 4);
    let mut found = 0;
    for d in 1..16u32 {
        for e in 0..4u32 {
            let pts = vec![[20, 20, 20], [20 - d, 20, 20 - e], [20 + d, 20, 20 + e]];
            let col = column(&pts, 48, &ws);
            if stage1_peaks(&col, &ws, 3, 48, EXACT).is_success() {
                continue;
            }
            let s2 = stage2_greedy(&col, &ws, 3, 48, EXACT);
            if s2.is_success() {
                assert_eq!(sorted(s2.coords().to_vec()), sorted(pts.clone()));
                let fr = fourier_forward(&single_species(&pts, 48), &ws);
                let res = recover(&fr, &RecoveryConfig::new(48)).unwrap();
                assert_eq!(res[0].stage, Stage::Two);
                found += 1;
            }
        }
    }
    assert!(found > 0, "no stage-1 failure recovered by stage 2");
}

#[test]
fn stage_one_success_implies_stage_two_success() {
    let ws = build_wave_set(Truncation::Cubic, 4);
    let mut checked = 0;
    for seed in 0..80 {
        let c = synth_crystal(seed, 6, 12, 48).unwrap();
        let fr = fourier_forward(&c, &ws);
        for (s, pts) in c.coords.iter().enumerate() {
            let col = fr.column(s);
            if stage1_peaks(&col, &ws, pts.len(), 48, EXACT).is_success() {
                let s2 = stage2_greedy(&col, &ws, pts.len(), 48, EXACT);
                assert!(s2.is_success(), "seed {seed} slot {s}");
                assert_eq!(sorted(s2.coords().to_vec()), sorted(pts.clone()));
                checked += 1;
            }
        }
    }
    assert!(checked > 50);
}

/// On a coarse grid the implication above can break: after subtracting a
/// neighbour, the remaining peak moves one cell. Escalation still starts at
/// stage 1, so the full pipeline is unaffected.
#[test]
fn coarse_grid_greedy_counterexample() {
    let ws = build_wave_set(Truncation::Cubic, 3);
    let pts = vec![[10, 20, 1], [0, 2, 15], [2, 9, 16], [20, 4, 16], [10, 2, 15], [13, 0, 4]];
    let col = column(&pts, 24, &ws);
    assert!(stage1_peaks(&col, &ws, 6, 24, EXACT).is_success());
    let s2 = stage2_greedy(&col, &ws, 6, 24, EXACT);
    assert!(!s2.is_success());
    assert!(s2.coords().contains(&[23, 2, 15]));
    let fr = fourier_forward(&single_species(&pts, 24), &ws);
    assert_eq!(recover(&fr, &RecoveryConfig::new(24)).unwrap()[0].stage, Stage::One);
}

#[test]
fn later_stages_run_directly_recover_earlier_successes() {
    let ws = build_wave_set(Truncation::Cubic, 4);
    let cfg = RecoveryConfig::new(48);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for seed in 0..25 {
        let c = synth_crystal(seed, 4, 10, 48).unwrap();
        let fr = fourier_forward(&c, &ws);
        let results = recover(&fr, &cfg).unwrap();
        for (s, r) in results.iter().enumerate().take(c.species.len()) {
            assert!(r.stage.is_success());
            assert_eq!(r.coords.len(), fr.multiplicity(s).re.round() as usize);
            if r.stage == Stage::Three {
                continue;
            }
            let col = fr.column(s);
            let newton = stage3_newton(&col, &ws, &perturb(&r.coords, 48, &mut rng), &cfg);
            assert!(newton.outcome.is_success());
            assert_eq!(sorted(newton.outcome.coords().to_vec()), sorted(c.coords[s].clone()));
        }
    }
}

#[test]
fn random_init_usually_fails() {
    let ws = build_wave_set(Truncation::Cubic, 4);
    let cfg = RecoveryConfig::new(48);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut failures = 0;
    let trials = 10;
    for _ in 0..trials {
        let mut pts: Vec<[u32; 3]> = Vec::new();
        while pts.len() < 8 {
            let p = [0; 3].map(|_| rng.random_range(0..48u32));
            if !pts.contains(&p) {
                pts.push(p);
            }
        }
        let col = column(&pts, 48, &ws);
        let init: Vec<[f64; 3]> = (0..8).map(|_| [0.0; 3].map(|_| rng.random::<f64>())).collect();
        let out = stage3_newton(&col, &ws, &init, &cfg);
        if !out.outcome.is_success() {
            assert_eq!(out.iterations, 10);
            failures += 1;
        }
    }
    assert!(failures * 2 > trials, "{failures}/{trials}");
}

#[test]
fn jacobian_central_differences_random_configurations() {
    let ws = build_wave_set(Truncation::Cubic, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..5 {
        let n = rng.random_range(1..6);
        let u: Vec<[f64; 3]> = (0..n).map(|_| [0.0; 3].map(|_| rng.random::<f64>())).collect();
        let d = coefficient_jacobian(&u, &ws);
        let m = ws.len();
        let h = 1e-6;
        for col in 0..3 * n {
            let (a, k) = (col / 3, col % 3);
            let mut up = u.clone();
            let mut dn = u.clone();
            up[a][k] += h;
            dn[a][k] -= h;
            let fp = recipcrystal_core::reciprocal::encode_continuous_column(&up, &ws);
            let fm = recipcrystal_core::reciprocal::encode_continuous_column(&dn, &ws);
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for r in 0..m {
                let fd = (fp[r] - fm[r]) / (2.0 * h);
                num = num.max((d[(r, col)] - fd.re).abs()).max((d[(m + r, col)] - fd.im).abs());
                den = den.max(fd.norm());
            }
            assert!(num / den < 1e-5, "relative error {}", num / den);
        }
    }
}
