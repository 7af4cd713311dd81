use nalgebra::{Matrix3, SymmetricEigen};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recipcrystal_core::*;
use std::f64::consts::TAU;

/// `½ log(mᵀm)` through a symmetric eigendecomposition.
fn log_oracle(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(m.transpose() * m);
    let q = eig.eigenvectors;
    q * Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 0.5 * l.ln())) * q.transpose()
}

fn rotation_from(a: [f64; 9]) -> Matrix3<f64> {
    let qr = Matrix3::from_row_slice(&a).qr();
    let mut q = qr.q();
    if q.determinant() < 0.0 {
        q.set_column(0, &(-q.column(0)));
    }
    q
}

fn lattice_strategy() -> impl Strategy<Value = LatticeMatrix> {
    prop::array::uniform9(-1.0f64..1.0).prop_filter_map("well conditioned", |a| {
        let m = Matrix3::from_row_slice(&a) + Matrix3::identity() * 1.5;
        let svd = m.svd(false, false);
        let s = svd.singular_values;
        (m.determinant() > 0.0 && s.min() / s.max() > 0.05).then_some(LatticeMatrix(m))
    })
}

fn max_diff(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Coefficients summed directly from float fractional coordinates.
fn direct_coefficients(c: &Crystal, ws: &WaveSet) -> Vec<Vec<Complex64>> {
    (0..c.species.len())
        .map(|i| {
            let f = c.fractional(i);
            ws.vectors()
                .iter()
                .map(|w| {
                    let (mut re, mut im) = (0.0f64, 0.0f64);
                    for p in &f {
                        let t = w[0] as f64 * p[0] + w[1] as f64 * p[1] + w[2] as f64 * p[2];
                        re += (TAU * t).cos();
                        im -= (TAU * t).sin();
                    }
                    Complex64::new(re, im)
                })
                .collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_matches_eigen_oracle(m in lattice_strategy()) {
        let s = lattice_to_log(&m).unwrap();
        let o = LatticeLog::from_matrix(&log_oracle(&m.0));
        prop_assert!(max_diff(&s.coeffs(), &o.coeffs()) < 1e-10);
    }

    #[test]
    fn log_rotation_invariant(m in lattice_strategy(), a in prop::array::uniform9(-1.0f64..1.0)) {
        let q = rotation_from(a);
        prop_assume!((q.determinant() - 1.0).abs() < 1e-9);
        let s1 = lattice_to_log(&m).unwrap().coeffs();
        let s2 = lattice_to_log(&LatticeMatrix(q * m.0)).unwrap().coeffs();
        prop_assert!(max_diff(&s1, &s2) < 1e-10);
    }

    #[test]
    fn log_additive_under_scaling(m in lattice_strategy(), c in 0.2f64..5.0) {
        let s1 = lattice_to_log(&m).unwrap().coeffs();
        let s2 = lattice_to_log(&LatticeMatrix(m.0 * c)).unwrap().coeffs();
        let mut expect = s1;
        for v in expect.iter_mut().take(3) {
            *v += c.ln();
        }
        prop_assert!(max_diff(&s2, &expect) < 1e-10);
    }

    #[test]
    fn log_roundtrip(c in prop::array::uniform6(-1.0f64..1.0)) {
        let s = LatticeLog::from_coeffs(&c);
        let back = lattice_to_log(&log_to_lattice(&s)).unwrap();
        prop_assert!(max_diff(&back.coeffs(), &c) < 1e-9);
        let spd = log_to_lattice(&s);
        let again = log_to_lattice(&lattice_to_log(&spd).unwrap());
        prop_assert!((again.0 - spd.0).abs().max() < 1e-9);
    }

    #[test]
    fn snap_idempotent(raw in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 1..20),
                       d in prop::sample::select(vec![12u32, 24, 48])) {
        if let Ok(first) = snap_coords(&raw, d) {
            let as_float: Vec<[f64; 3]> = first.iter().map(|p| p.map(|k| k as f64 / d as f64)).collect();
            prop_assert_eq!(snap_coords(&as_float, d).unwrap(), first.clone());
            for (p, n) in raw.iter().zip(&first) {
                for k in 0..3 {
                    let err = (p[k] - n[k] as f64 / d as f64).rem_euclid(1.0);
                    prop_assert!(err.min(1.0 - err) <= 0.5 / d as f64 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn symmetry_output_valid(seed in any::<u64>(), op_seed in any::<u64>()) {
        let c = synth_crystal(seed, 6, 16, 48).unwrap();
        let op = SymmetryOp::random_signed_permutation(&mut ChaCha8Rng::seed_from_u64(op_seed));
        let t = apply_symmetry(&c, &op).unwrap();
        prop_assert!(validate_crystal(&t).is_empty());
        prop_assert_eq!(t.species.clone(), c.species.clone());
    }

    #[test]
    fn hermitian_and_multiplicity(seed in any::<u64>()) {
        let c = synth_crystal(seed, 6, 16, 24).unwrap();
        let ws = build_wave_set(Truncation::Cubic, 3);
        let fr = fourier_forward(&c, &ws);
        for (r, w) in ws.vectors().iter().enumerate() {
            let neg = ws.index_of([-w[0], -w[1], -w[2]]).unwrap();
            for s in 0..NUM_SLOTS {
                prop_assert!((fr.get(neg, s) - fr.get(r, s).conj()).norm() < 1e-12);
            }
        }
        for s in 0..NUM_SLOTS {
            let expect = c.coords.get(s).map_or(0, Vec::len) as f64;
            prop_assert!((fr.multiplicity(s) - Complex64::new(expect, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn translation_covariance(seed in any::<u64>(), t in prop::array::uniform3(0u32..48)) {
        let c = synth_crystal(seed, 4, 10, 48).unwrap();
        let ws = build_wave_set(Truncation::Cubic, 3);
        let shifted = Crystal::new(
            c.lattice,
            c.species.clone(),
            c.coords.iter().map(|l| l.iter().map(|p| [0, 1, 2].map(|k| (p[k] + t[k]) % 48)).collect()).collect(),
            48,
        ).unwrap();
        let a = fourier_forward(&c, &ws);
        let b = fourier_forward(&shifted, &ws);
        for (r, w) in ws.vectors().iter().enumerate() {
            let ph = Complex64::from_polar(1.0, -TAU * (0..3).map(|k| w[k] as f64 * t[k] as f64 / 48.0).sum::<f64>());
            for s in 0..NUM_SLOTS {
                prop_assert!((b.get(r, s) - ph * a.get(r, s)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn commuting_square(seed in any::<u64>(), op_seed in any::<u64>()) {
        let c = synth_crystal(seed, 6, 16, 48).unwrap();
        let op = SymmetryOp::random_signed_permutation(&mut ChaCha8Rng::seed_from_u64(op_seed));
        let ws = build_wave_set(Truncation::Cubic, 4);
        let lhs = symmetry_transform(&fourier_forward(&c, &ws), &op).unwrap();
        let rhs = fourier_forward(&apply_symmetry(&c, &op).unwrap(), &ws);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }
}

#[test]
fn forward_matches_direct_summation() {
    let ws = build_wave_set(Truncation::Cubic, 4);
    for seed in 0..20 {
        let c = synth_crystal(seed, 6, 16, 48).unwrap();
        let fr = fourier_forward(&c, &ws);
        for (s, col) in direct_coefficients(&c, &ws).iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                assert!((fr.get(r, s) - v).norm() < 1e-10);
            }
        }
    }
}

/// Closes a point set under `op` by following each orbit.
fn orbit_closure(seeds: &[[u32; 3]], op: &SymmetryOp, d: u32) -> Vec<[u32; 3]> {
    let mut pts: Vec<[u32; 3]> = Vec::new();
    for &p in seeds {
        let mut cur = p;
        loop {
            if pts.contains(&cur) {
                break;
            }
            pts.push(cur);
            let one = Crystal::new_unchecked(
                LatticeMatrix::identity(),
                SpeciesSet::new(vec![(1, 1)]),
                vec![vec![cur]],
                d,
            );
            cur = apply_symmetry(&one, op).unwrap().coords[0][0];
        }
    }
    pts
}

#[test]
fn symmetric_configuration_has_zero_residual() {
    let ws = build_wave_set(Truncation::Cubic, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let op = SymmetryOp::random_signed_permutation(&mut rng);
        let seeds = synth_crystal(rand::Rng::random(&mut rng), 1, 3, 48).unwrap().coords[0].clone();
        let pts = orbit_closure(&seeds, &op, 48);
        let c = Crystal::new(LatticeMatrix::identity(), SpeciesSet::new(vec![(8, pts.len() as u32)]), vec![pts], 48)
            .unwrap();
        let fr = fourier_forward(&c, &ws);
        assert!(symmetry_residual(&fr, &op).unwrap() <= 1e-10);
        assert_eq!(symmetry_residual(&fr, &SymmetryOp::identity()).unwrap(), 0.0);
    }
}

#[test]
fn generic_crystal_breaks_nontrivial_op() {
    let ws = build_wave_set(Truncation::Cubic, 4);
    let op = SymmetryOp::new([[0, 1, 0], [1, 0, 0], [0, 0, -1]], [6, 0, 3]).unwrap();
    for seed in 0..10 {
        let c = synth_crystal(seed, 3, 8, 48).unwrap();
        assert!(symmetry_residual(&fourier_forward(&c, &ws), &op).unwrap() > 0.1);
    }
}
