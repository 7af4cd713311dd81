use num_complex::Complex64 as C;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recipcrystal_core::synth_crystal;
use recipcrystal_model::diffusion::*;
use recipcrystal_model::nn::{grad_check, Cond};
use recipcrystal_model::params::complex_normal;
use recipcrystal_model::vae::*;
use recipcrystal_model::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn corpus(n: u64) -> Vec<Example> {
    let ws = VaeConfig::toy().wave_set();
    (0..n).map(|i| Example::new(&synth_crystal(i, 3, 3, 24).unwrap(), &ws).unwrap()).collect()
}

fn toy_space(seed: u64, pruned_every: Option<usize>) -> (Vae, LatentSpace) {
    let mut vae = Vae::new(VaeConfig::toy(), &mut rng(seed)).unwrap();
    if let Some(k) = pruned_every {
        for i in (0..vae.selector.len()).step_by(k) {
            vae.selector[i] = false;
        }
    }
    let scales = estimate_scales(&vae, &corpus(8)).unwrap();
    let space = LatentSpace::new(&vae, scales).unwrap();
    (vae, space)
}

#[test]
fn laplace_moments() {
    let mut g = rng(1);
    let n = 1_000_000;
    let draws = sample_radial_laplace(&vec![1.0; n], &mut g);
    let m1 = draws.iter().map(|z| z.norm()).sum::<f64>() / n as f64;
    let m2 = draws.iter().map(|z| z.norm_sqr()).sum::<f64>() / n as f64;
    assert!((m1 / 2.0 - 1.0).abs() < 0.01, "{m1}");
    assert!((m2 / 6.0 - 1.0).abs() < 0.02, "{m2}");
    // Uniform phase: the mean of the unit phasor vanishes.
    let ph: C = draws.iter().map(|z| z / z.norm()).sum::<C>() / n as f64;
    assert!(ph.norm() < 0.01);
    let tiny = sample_radial_laplace(&[1e-30; 100], &mut g);
    assert!(tiny.iter().all(|z| z.norm() < 1e-27));
    assert!(sample_radial_laplace(&[0.0; 10], &mut g).iter().all(|z| *z == C::new(0.0, 0.0)));
}

#[test]
fn scale_estimates() {
    let c = |v: f64| ComplexTensor::from_vec(1, 2, vec![C::from_polar(v, 0.3), C::from_polar(4.0, -1.0)]);
    let s = scales_from_latents(&[c(1.0), c(3.0)], &[true, true]).unwrap();
    assert!((s.varpi[0] - 1.0).abs() < 1e-15);
    assert!((s.varpi[1] - 2.0).abs() < 1e-15);
    assert!(s.frozen);
    let s = scales_from_latents(&[c(1.0)], &[true, false]).unwrap();
    assert_eq!(s.varpi[1], 0.0);
    assert!(matches!(scales_from_latents(&[], &[]), Err(ModelError::EmptyCorpus)));

    let vae = Vae::new(VaeConfig::toy(), &mut rng(2)).unwrap();
    let data = corpus(5);
    assert!(matches!(estimate_scales(&vae, &[]), Err(ModelError::EmptyCorpus)));
    let s = estimate_scales(&vae, &data).unwrap();
    let mut brute = vec![0.0; vae.cfg.ladder_channels()];
    let mut n = 0.0;
    for ex in &data {
        for start in 0..6 {
            let slots = SlotAssignment((0..ex.species.len()).map(|k| (start + k) % 6).collect());
            for (b, z) in brute.iter_mut().zip(vae.encode_mean(&ex.slotted(&slots)).data()) {
                *b += z.norm();
            }
            n += 1.0;
        }
    }
    for (w, b) in s.varpi.iter().zip(&brute) {
        assert!((w - 0.5 * b / n).abs() < 1e-12);
        assert!(*w > 0.0);
    }
}

#[test]
fn schedule_identities() {
    for r in [1e-3, 0.3, 3.0, 50.0, 1e4] {
        assert_eq!(schedule_coeffs(0.0, r), (1.0, 0.0));
        assert_eq!(schedule_coeffs(1.0, r), (0.0, 1.0));
        let mut prev = -1.0;
        for k in 0..=1000 {
            let phi = k as f64 / 1000.0;
            let (c, s) = schedule_coeffs(phi, r);
            assert!((c * c + s * s - 1.0).abs() < 1e-12);
            assert!((s * s * r - ((1.0 + r).powf(phi) - 1.0)).abs() < 1e-12 * (1.0 + r));
            assert!(s > prev);
            prev = s;
        }
    }
    let (_, s) = schedule_coeffs(0.5, 3.0);
    assert!((s * s - 1.0 / 3.0).abs() < 1e-15);
    let (_, s) = schedule_coeffs(0.37, 0.0);
    assert!((s * s - 0.37).abs() < 1e-15);
    let (_, s_small) = schedule_coeffs(0.37, 1e-9);
    assert!((s_small * s_small - 0.37).abs() < 1e-8);
}

#[test]
fn ratio_uses_gaussian_matched_variance() {
    // ω² = 3ϖ² and R = ω² / exp(2σ).
    for (w, ls) in [(0.5, -1.0), (2.0, 0.3), (1.0, 0.0)] {
        let omega2 = 3.0 * w * w;
        assert!((snr_ratio(w, ls) - omega2 / (2.0 * ls).exp()).abs() < 1e-12);
    }
}

#[test]
fn corruption_limits() {
    let (_, space) = toy_space(3, Some(5));
    let mut g = rng(4);
    let mu = complex_normal(space.rows, space.cols, 1.0, &mut g);
    let st = space.corrupt(&mu, PHI_MIN, &mut g).unwrap();
    for i in 0..space.len() {
        if space.selector[i] {
            let bound = st.s[i] * st.noise.data()[i].norm() + (1.0 - st.c[i]) * mu.data()[i].norm();
            assert!((st.z_phi.data()[i] - mu.data()[i]).norm() <= bound + 1e-15);
            assert!((st.c[i].powi(2) + st.s[i].powi(2) - 1.0).abs() < 1e-12);
            assert!(st.s[i] < 0.2);
        } else {
            assert_eq!(st.z_phi.data()[i], C::new(0.0, 0.0));
        }
    }
    let st = space.corrupt(&mu, 1.0, &mut g).unwrap();
    for i in 0..space.len() {
        assert_eq!(st.z_phi.data()[i], if space.selector[i] { st.noise.data()[i] } else { C::new(0.0, 0.0) });
    }
    let mut unfrozen = space.clone();
    unfrozen.scales.frozen = false;
    assert!(matches!(unfrozen.corrupt(&mu, 0.5, &mut g), Err(ModelError::ScalesNotFrozen)));
    let (vae, space) = toy_space(5, None);
    assert!(matches!(LatentSpace::new(&vae, NoiseScales { frozen: false, ..space.scales }), Err(ModelError::ScalesNotFrozen)));
}

#[test]
fn corrupted_second_moment() {
    let (_, space) = toy_space(6, None);
    let mut g = rng(7);
    let mu = complex_normal(space.rows, space.cols, 1.0, &mut g);
    let phi = 0.6;
    let n = 40_000;
    let chans = [0, 17, 93];
    let mut acc = [0.0; 3];
    for _ in 0..n {
        let st = space.corrupt(&mu, phi, &mut g).unwrap();
        for (a, &i) in acc.iter_mut().zip(&chans) {
            *a += st.z_phi.data()[i].norm_sqr();
        }
    }
    let (c, s) = space.coeffs(phi);
    for (a, &i) in acc.iter().zip(&chans) {
        let w = space.scales.varpi[i];
        let expect = c[i].powi(2) * mu.data()[i].norm_sqr() + s[i].powi(2) * 6.0 * w * w;
        assert!((a / n as f64 / expect - 1.0).abs() < 0.02, "channel {i}");
    }
}

#[test]
fn diffuser_contracts() {
    let (vae, space) = toy_space(8, Some(4));
    let diff = Diffuser::new(DiffuserConfig::toy(), &vae, space.clone(), &mut rng(9)).unwrap();
    let mut g = rng(10);
    let mu = complex_normal(space.rows, space.cols, 1.0, &mut g);
    let z = space.corrupt(&mu, 0.5, &mut g).unwrap().z_phi;
    let out = diff.predict(&z, 0.5);
    assert_eq!(out.shape(), (space.rows, space.cols));
    for i in 0..space.len() {
        if !space.selector[i] {
            assert_eq!(out.data()[i], C::new(0.0, 0.0));
        }
    }
    // Identical controls make the output independent of φ; distinct ones do not.
    assert!(diff.predict(&z, 0.0).max_abs_diff(&diff.predict(&z, 1.0)) < 1e-12);
    let mut d2 = diff.clone();
    for b in &diff.blocks {
        if let Some(Cond::Quad(ids)) = b.mlp.bias {
            let s = d2.store.value(ids[2]).shape();
            *d2.store.value_mut(ids[2]) = complex_normal(s.0, s.1, 1.0, &mut g);
        }
    }
    assert!(d2.predict(&z, 0.0).max_abs_diff(&d2.predict(&z, 1.0)) > 1e-6);
}

#[test]
fn noise_loss_examples() {
    let p = [C::new(1.0, 2.0), C::new(-0.5, 0.0)];
    assert_eq!(diffusion_loss(&p, &p, &[1.0, 2.0], &[true, true]), 0.0);
    let tau = 0.7;
    let loss = diffusion_loss(&[C::new(2.0 * tau, 0.0)], &[C::new(0.0, 0.0)], &[tau], &[true]);
    assert!((loss - 2f64.sqrt()).abs() < 1e-15);
    // Inactive channels are ignored entirely.
    let loss = diffusion_loss(
        &[C::new(2.0 * tau, 0.0), C::new(9.0, 9.0)],
        &[C::new(0.0, 0.0), C::new(0.0, 0.0)],
        &[tau, 1.0],
        &[true, false],
    );
    assert!((loss - 2f64.sqrt()).abs() < 1e-15);
}

fn batch(space: &LatentSpace, phi: f64, n: usize, seed: u64) -> Vec<DiffusionState> {
    let mut g = rng(seed);
    (0..n)
        .map(|_| {
            let mu = complex_normal(space.rows, space.cols, 1.0, &mut g);
            space.corrupt(&mu, phi, &mut g).unwrap()
        })
        .collect()
}

#[test]
fn batch_loss_matches_value_level() {
    let (vae, space) = toy_space(11, Some(3));
    let diff = Diffuser::new(DiffuserConfig::toy(), &vae, space.clone(), &mut rng(12)).unwrap();
    let b = batch(&space, 0.3, 3, 13);
    let (loss, _, preds) = diff.batch_loss_and_grads(&b);
    let tau: Vec<f64> = space.tau().iter().cycle().take(3 * space.len()).cloned().collect();
    let sel: Vec<bool> = space.selector.iter().cycle().take(3 * space.len()).cloned().collect();
    let pred: Vec<C> = preds.iter().flat_map(|p| p.data().to_vec()).collect();
    let truth: Vec<C> = b.iter().flat_map(|s| s.noise.data().to_vec()).collect();
    assert!((loss - diffusion_loss(&pred, &truth, &tau, &sel)).abs() < 1e-12);
}

#[test]
fn noise_loss_gradient_check() {
    let (vae, space) = toy_space(14, Some(7));
    let diff = Diffuser::new(DiffuserConfig::toy(), &vae, space.clone(), &mut rng(15)).unwrap();
    let b = batch(&space, 0.45, 2, 16);
    let loss = |s: &ParamStore| {
        let mut d = diff.clone();
        d.store = s.clone();
        let (l, g, _) = d.batch_loss_and_grads(&b);
        (l, g)
    };
    let err = grad_check(loss, &diff.store, 300, 1e-6, &mut rng(17));
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn bins_match_reporting_intervals() {
    assert_eq!(PHI_BINS, [(0.01, 0.2), (0.2, 0.4), (0.4, 0.6), (0.6, 0.8), (0.8, 0.99)]);
    assert_eq!(phi_bin(0.01), 0);
    assert_eq!(phi_bin(0.2), 1);
    assert_eq!(phi_bin(0.59), 2);
    assert_eq!(phi_bin(0.99), 4);
}

struct Oracle {
    space: LatentSpace,
    mu: ComplexTensor,
}

impl NoisePredictor for Oracle {
    fn predict(&self, z: &ComplexTensor, phi: f64) -> ComplexTensor {
        let (c, s) = self.space.coeffs(phi);
        ComplexTensor::from_fn(z.rows(), z.cols(), |r, col| {
            let i = r * z.cols() + col;
            if self.space.selector[i] {
                (z.data()[i] - self.mu.data()[i] * c[i]) / s[i]
            } else {
                C::new(0.0, 0.0)
            }
        })
    }
}

#[test]
fn oracle_sampler_recovers_planted_latent() {
    let (_, space) = toy_space(18, Some(6));
    let mut g = rng(19);
    let mu = complex_normal(space.rows, space.cols, 1.0, &mut g).zip_map(&space.selector_tensor(), |a, b| a * b);
    let oracle = Oracle { space: space.clone(), mu: mu.clone() };
    for steps in [1, 2, 25] {
        let out = generate(&oracle, &space, steps, &mut g).unwrap();
        assert!(out.max_abs_diff(&mu) < 1e-10, "{steps} steps");
    }
    assert!(generate(&oracle, &space, 0, &mut g).is_err());
}

struct Constant(ComplexTensor);

impl NoisePredictor for Constant {
    fn predict(&self, _: &ComplexTensor, _: f64) -> ComplexTensor {
        self.0.clone()
    }
}

#[test]
fn single_step_is_one_shot_reconstruction() {
    let (_, space) = toy_space(20, Some(2));
    let nu_hat = complex_normal(space.rows, space.cols, 1.0, &mut rng(21));
    let out = generate(&Constant(nu_hat.clone()), &space, 1, &mut rng(22)).unwrap();
    let z = space.corrupt(&ComplexTensor::zeros(space.rows, space.cols), PHI_MAX, &mut rng(22)).unwrap().z_phi;
    assert_eq!(out, space.reconstruct(&z, &nu_hat, PHI_MAX));
    for i in 0..space.len() {
        if !space.selector[i] {
            assert_eq!(out.data()[i], C::new(0.0, 0.0));
        }
    }
}

#[test]
fn training_is_deterministic() {
    let vae = Vae::new(VaeConfig::toy(), &mut rng(23)).unwrap();
    let data = corpus(16);
    let run = || train_diffuser(&vae, &data, &DiffuserConfig::toy(), &TrainConfig::toy(12), 24).unwrap().1;
    let a = run();
    assert_eq!(a, run());
    assert!(a.iter().all(|r| (PHI_MIN..=PHI_MAX).contains(&r.phi) && r.bin == phi_bin(r.phi)));
}

#[test]
fn signal_dominant_bin_is_hardest() {
    let vae = Vae::new(VaeConfig::toy(), &mut rng(26)).unwrap();
    let (_, trace) = train_diffuser(&vae, &corpus(32), &DiffuserConfig::toy(), &TrainConfig::toy(240), 27).unwrap();
    let late = bin_means(&trace[120..]);
    let means: Vec<f64> = late.iter().flatten().cloned().collect();
    let avg = means.iter().sum::<f64>() / means.len() as f64;
    assert!(late[0].unwrap() >= avg, "{late:?}");
}
