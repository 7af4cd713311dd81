use num_complex::Complex64 as C;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recipcrystal_core::{synth_crystal, SpeciesSet};
use recipcrystal_model::nn::grad_check;
use recipcrystal_model::params::complex_normal;
use recipcrystal_model::vae::*;
use recipcrystal_model::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn toy_vae(seed: u64) -> Vae {
    Vae::new(VaeConfig::toy(), &mut rng(seed)).unwrap()
}

fn example(seed: u64, vae: &Vae) -> Example {
    Example::new(&synth_crystal(seed, 3, 3, 24).unwrap(), vae.wave_set()).unwrap()
}

fn species(n: usize) -> SpeciesSet {
    SpeciesSet::new((0..n).map(|i| (i as u8 + 1, 1)).collect())
}

#[test]
fn slots_six_species_bijection() {
    let mut g = rng(1);
    for _ in 0..50 {
        let mut s = assign_slots(&species(6), &mut g, true).unwrap().0;
        s.sort();
        assert_eq!(s, vec![0, 1, 2, 3, 4, 5]);
    }
    assert_eq!(assign_slots(&species(3), &mut g, false).unwrap().0, vec![0, 1, 2]);
    assert!(assign_slots(&species(0), &mut g, true).is_err());
    assert!(assign_slots(&species(7), &mut g, true).is_err());
}

#[test]
fn slots_wrap_modulo_six() {
    let mut g = rng(2);
    let mut seen = false;
    for _ in 0..200 {
        let s = assign_slots(&species(2), &mut g, true).unwrap().0;
        assert_eq!(s[1], (s[0] + 1) % 6);
        if s[0] == 5 {
            assert_eq!(s, vec![5, 0]);
            seen = true;
        }
    }
    assert!(seen);
}

#[test]
fn start_slot_uniform() {
    let mut g = rng(3);
    let n = 6000;
    let mut counts = [0usize; 6];
    for _ in 0..n {
        counts[assign_slots(&species(1), &mut g, true).unwrap().0[0]] += 1;
    }
    let expect = n as f64 / 6.0;
    let sd = (n as f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    for &c in &counts {
        assert!((c as f64 - expect).abs() < 3.0 * sd, "{counts:?}");
    }
    // 0.999 quantile of chi-square with 5 degrees of freedom.
    assert!(chi2 < 20.52, "{chi2}");
}

#[test]
fn slot_rotation_permutes_fourier_columns() {
    let vae = toy_vae(4);
    let ex = example(5, &vae);
    let n = ex.species.len();
    let a = ex.slotted(&SlotAssignment((0..n).collect()));
    let b = ex.slotted(&SlotAssignment((0..n).map(|i| (i + 4) % 6).collect()));
    for r in 0..a.fourier.rows() {
        for s in 0..6 {
            assert_eq!(a.fourier.get(r, s), b.fourier.get(r, (s + 4) % 6));
        }
    }
    for s in 0..6 {
        assert_eq!(a.classes[s], b.classes[(s + 4) % 6]);
    }
}

#[test]
fn token_count_at_full_resolution() {
    let cfg = VaeConfig { jmax: 4, n_aux: 9, n_layers: 1, ..VaeConfig::toy() };
    let vae = Vae::new(cfg, &mut rng(6)).unwrap();
    assert_eq!(vae.num_tokens(), 739);
}

#[test]
fn zero_fourier_tokens_equal_bias() {
    let mut vae = toy_vae(7);
    let bias = complex_normal(1, 36, 1.0, &mut rng(8));
    *vae.store.value_mut(vae.p.b_fourier) = bias.clone();
    let ex = example(9, &vae);
    let mut x = ex.slotted(&SlotAssignment((0..ex.species.len()).collect()));
    x.fourier = ComplexTensor::zeros(x.fourier.rows(), 6);
    let mut t = Tape::new();
    let tok = vae.tokenize(&mut t, &x);
    let tok = t.value(tok);
    assert_eq!(tok.rows(), 2 + 1 + 27);
    for r in 3..tok.rows() {
        assert_eq!(tok.row(r), bias.row(0));
    }
}

#[test]
fn ladder_shape_single_layer() {
    let cfg = VaeConfig { n_layers: 1, ..VaeConfig::toy() };
    let vae = Vae::new(cfg, &mut rng(10)).unwrap();
    let ex = example(11, &vae);
    let x = ex.slotted(&SlotAssignment((0..ex.species.len()).collect()));
    let mut t = Tape::new();
    let mu = vae.encode(&mut t, &x);
    assert_eq!(t.value(mu).shape(), (2, 36));
}

#[test]
fn ladder_invariant_to_fourier_token_permutation() {
    let vae = toy_vae(12);
    let ex = example(13, &vae);
    let x = ex.slotted(&SlotAssignment((0..ex.species.len()).collect()));
    let mut t = Tape::new();
    let tok = vae.tokenize(&mut t, &x);
    let tokens = t.value(tok).clone();
    let base = t.constant(tokens.clone());
    let mu = vae.encode_tokens(&mut t, base, vae.tags());

    let (i, j) = (5, 20);
    let mut order: Vec<usize> = (0..tokens.rows()).collect();
    order.swap(i, j);
    let mut tags = vae.tags().to_vec();
    tags.swap(i, j);
    let perm = t.constant(ComplexTensor::from_fn(tokens.rows(), tokens.cols(), |r, c| tokens.get(order[r], c)));
    let mu2 = vae.encode_tokens(&mut t, perm, &tags);
    assert!(t.value(mu).max_abs_diff(t.value(mu2)) < 1e-10);
}

#[test]
fn identity_blocks_propagate_aux_constants() {
    let mut vae = toy_vae(14);
    for b in vae.enc_blocks.clone() {
        let (wo, wout) = (b.wo, b.mlp.w_out);
        let s = vae.store.value(wo).shape();
        *vae.store.value_mut(wo) = ComplexTensor::zeros(s.0, s.1);
        let s = vae.store.value(wout).shape();
        *vae.store.value_mut(wout) = ComplexTensor::zeros(s.0, s.1);
    }
    let ex = example(15, &vae);
    let x = ex.slotted(&SlotAssignment((0..ex.species.len()).collect()));
    let mut t = Tape::new();
    let mu = vae.encode(&mut t, &x);
    let aux = vae.store.value(vae.p.aux);
    let mu = t.value(mu);
    for l in 0..2 {
        assert_eq!(&mu.slice_rows(l * 2, 2), aux);
    }
}

#[test]
fn vanishing_sigma_gives_mean() {
    let mut g = rng(16);
    let mu = complex_normal(4, 36, 1.0, &mut g);
    let ls = ComplexTensor::filled(4, 36, C::new(-30.0, 0.0));
    let sel = vec![true; 144];
    let z = sample_latent(&mu, &ls, &sel, &mut g);
    assert!(z.max_abs_diff(&mu) < 1e-12);
    let a = sample_latent(&mu, &ls.map(|_| C::new(0.0, 0.0)), &sel, &mut rng(1));
    let b = sample_latent(&mu, &ls.map(|_| C::new(0.0, 0.0)), &sel, &mut rng(1));
    assert_eq!(a, b);
}

#[test]
fn pruned_channels_sample_zero() {
    let mut g = rng(17);
    let mu = complex_normal(2, 3, 1.0, &mut g);
    let ls = ComplexTensor::zeros(2, 3);
    let sel = vec![true, false, true, false, false, true];
    for _ in 0..20 {
        let z = sample_latent(&mu, &ls, &sel, &mut g);
        for (i, v) in z.data().iter().enumerate() {
            if !sel[i] {
                assert_eq!(*v, C::new(0.0, 0.0));
            }
        }
    }
}

#[test]
fn reparameterized_variance() {
    let mut g = rng(18);
    let sigmas = [-1.0, 0.0, 0.7];
    let mu = ComplexTensor::from_vec(1, 3, vec![C::new(1.0, -2.0), C::new(0.0, 0.0), C::new(3.0, 0.5)]);
    let ls = ComplexTensor::from_real(1, 3, &sigmas);
    let sel = vec![true; 3];
    let n = 100_000;
    let mut sum = [[0.0f64; 2]; 3];
    let mut sq = [[0.0f64; 2]; 3];
    for _ in 0..n {
        let z = sample_latent(&mu, &ls, &sel, &mut g);
        for c in 0..3 {
            let d = z.get(0, c) - mu.get(0, c);
            for (k, v) in [d.re, d.im].into_iter().enumerate() {
                sum[c][k] += v;
                sq[c][k] += v * v;
            }
        }
    }
    for c in 0..3 {
        let target = (2.0 * sigmas[c]).exp();
        for k in 0..2 {
            let m = sum[c][k] / n as f64;
            let var = sq[c][k] / n as f64 - m * m;
            assert!((var / target - 1.0).abs() < 0.02, "channel {c} part {k}: {var} vs {target}");
        }
    }
}

#[test]
fn decode_of_zero_latent_ignores_encoder() {
    let vae = toy_vae(19);
    let mut other = vae.clone();
    for b in other.enc_blocks.clone() {
        *other.store.value_mut(b.wq) = complex_normal(36, 36, 1.0, &mut rng(20));
    }
    *other.store.value_mut(other.p.aux) = complex_normal(2, 36, 1.0, &mut rng(21));
    let zero = ComplexTensor::zeros(4, 36);
    assert_eq!(vae.decode_value(&zero), other.decode_value(&zero));
}

#[test]
fn decoder_output_shapes_full_resolution() {
    let cfg = VaeConfig { jmax: 4, n_layers: 1, ..VaeConfig::toy() };
    let vae = Vae::new(cfg, &mut rng(22)).unwrap();
    let out = vae.decode_value(&ComplexTensor::zeros(2, 36));
    assert_eq!(out.lattice_coeffs.len(), 6);
    assert_eq!(out.species_logits.shape(), (6, 84));
    assert_eq!(out.fourier_pred.shape(), (729, 6));
}

#[test]
fn snr_penalty_formula() {
    let vae = toy_vae(23);
    let n = vae.cfg.ladder_channels();
    let mut vae = vae;
    *vae.store.value_mut(vae.p.log_sigma) = ComplexTensor::zeros(4, 36);
    let mut mu = ComplexTensor::zeros(4, 36);
    let mut t = Tape::new();
    let m = t.constant(mu.clone());
    let p = vae.snr_penalty(&mut t, m);
    assert_eq!(t.value(p).item(), 0.0);
    mu.set(1, 7, C::from_polar(2.0, 0.4));
    let m = t.constant(mu.clone());
    let p = vae.snr_penalty(&mut t, m);
    assert!((t.value(p).item() - 2.0 / n as f64).abs() < 1e-15);
    assert!((snr_penalty_value(&mu, vae.log_sigma()) - 2.0 / n as f64).abs() < 1e-15);
}

#[test]
fn snr_penalty_gradient_independent_of_modulus() {
    let mut vae = toy_vae(24);
    let mut g = rng(25);
    let ls = ComplexTensor::from_fn(4, 36, |_, _| C::new(g.random_range(-1.0..1.0), 0.0));
    *vae.store.value_mut(vae.p.log_sigma) = ls.clone();
    let n = 144.0;
    for scale in [0.3, 5.0] {
        let mu = complex_normal(4, 36, 1.0, &mut g).scale(scale);
        let mut t = Tape::new();
        let m = t.input(mu.clone());
        let p = vae.snr_penalty(&mut t, m);
        let grads = t.backward(p);
        let gm = grads.get(m).unwrap();
        for i in 0..mu.len() {
            let expect = 1.0 / (n * ls.data()[i].re.exp());
            assert!((gm.data()[i].norm() - expect).abs() < 1e-14);
            // Radial finite difference of the value-level penalty.
            let u = mu.data()[i] / mu.data()[i].norm();
            let h = 1e-6;
            let mut up = mu.clone();
            up.data_mut()[i] += u * h;
            let mut dn = mu.clone();
            dn.data_mut()[i] -= u * h;
            let fd = (snr_penalty_value(&up, &ls) - snr_penalty_value(&dn, &ls)) / (2.0 * h);
            assert!((fd - expect).abs() / expect < 1e-6);
        }
    }
}

#[test]
fn reconstruction_term_example() {
    assert!((reconstruction_loss(0.0009, 0.0016) - 0.05).abs() < 1e-15);
}

#[test]
fn perfect_reconstruction_leaves_only_softmax_floor() {
    let vae = toy_vae(26);
    let ex = example(27, &vae);
    let x = ex.slotted(&SlotAssignment((0..ex.species.len()).collect()));
    let mut t = Tape::new();
    let lattice = t.constant(ComplexTensor::from_real(1, 6, &x.lattice));
    let logits = t.constant(ComplexTensor::from_fn(6, NUM_CLASSES, |r, c| {
        C::new(if c == x.classes[r] { 50.0 } else { 0.0 }, 0.0)
    }));
    let fourier = t.constant(x.fourier.clone());
    let snr = t.constant(ComplexTensor::scalar(0.0));
    let h = Heads { lattice, logits, fourier };
    let v = vae_loss(&mut t, &h, &x, snr, 1.0, 0.1);
    let total = t.value(v.total).item();
    let ce = t.value(v.ce).item();
    assert_eq!(t.value(v.lat).item(), 0.0);
    assert_eq!(t.value(v.four).item(), 0.0);
    assert_eq!(total, ce);
    assert!(ce < 1e-19);
}

fn fixed_inputs(vae: &Vae, seed: u64) -> (Slotted, ComplexTensor) {
    let ex = example(seed, vae);
    let mut g = rng(seed);
    let slots = assign_slots(&ex.species, &mut g, true).unwrap();
    (ex.slotted(&slots), draw_eps(4, 36, &mut g))
}

#[test]
fn vae_loss_gradient_check() {
    let vae = toy_vae(28);
    let (x, eps) = fixed_inputs(&vae, 29);
    let loss = |s: &ParamStore| {
        let mut v = vae.clone();
        v.store = s.clone();
        let (p, g) = v.loss_and_grads(&x, &eps);
        (p.total, g)
    };
    let err = grad_check(loss, &vae.store, 300, 1e-6, &mut rng(30));
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn snr_penalty_gradient_check() {
    let vae = toy_vae(31);
    let (x, _) = fixed_inputs(&vae, 32);
    let loss = |s: &ParamStore| {
        let mut v = vae.clone();
        v.store = s.clone();
        let mut t = Tape::new();
        let mu = v.encode(&mut t, &x);
        let mm = v.masked_mu(&mut t, mu);
        let p = v.snr_penalty(&mut t, mm);
        let g = t.backward(p);
        (t.value(p).item(), t.param_grads(&g, &v.store))
    };
    let err = grad_check(loss, &vae.store, 300, 1e-6, &mut rng(33));
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn reconstruction_gradient_direction_matches_inner_sum() {
    let vae = toy_vae(34);
    let (x, eps) = fixed_inputs(&vae, 35);
    let grads = |root_sqrt: bool| {
        let mut t = Tape::new();
        let mu = vae.encode(&mut t, &x);
        let mm = vae.masked_mu(&mut t, mu);
        let z = vae.latent(&mut t, mm, &eps);
        let h = vae.decode(&mut t, z, Injection::Reverse);
        let snr = t.constant(ComplexTensor::scalar(0.0));
        let v = vae_loss(&mut t, &h, &x, snr, 0.0, 0.0);
        let root = if root_sqrt { v.total } else { t.add(v.lat, v.four) };
        let g = t.backward(root);
        t.param_grads(&g, &vae.store)
    };
    let flat = |g: ParamGrads| -> Vec<f64> { g.0.iter().flat_map(|t| t.data().iter().flat_map(|z| [z.re, z.im])).collect() };
    let (a, b) = (flat(grads(true)), flat(grads(false)));
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = a.iter().zip(&b).map(|(p, q)| (p / na - q / nb).powi(2)).sum::<f64>().sqrt();
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn nnz_schedule_endpoints_and_monotone() {
    assert_eq!(nnz_target(0, 100, 144, 40), 144);
    assert_eq!(nnz_target(100, 100, 144, 40), 40);
    assert_eq!(nnz_target(50, 100, 144, 40), 92);
    let mut g = rng(36);
    let mask = ComplexTensor::from_fn(4, 36, |_, _| C::new(g.random_range(-2.0..2.0), 0.0));
    let mut sel = vec![true; 144];
    let mut prev = sel.clone();
    assert_eq!(nnz_step(&mut sel, &mask, 0, 100, 40), 144);
    for step in 1..=100 {
        // Masks drift between steps; pruned channels must stay pruned.
        let drifted = mask.map(|z| z * (1.0 + 0.01 * step as f64 * ((step % 7) as f64 - 3.0)));
        let n = nnz_step(&mut sel, &drifted, step, 100, 40);
        assert_eq!(n, sel.iter().filter(|&&s| s).count());
        for i in 0..144 {
            assert!(prev[i] || !sel[i], "channel {i} reactivated at step {step}");
        }
        assert!(n <= prev.iter().filter(|&&s| s).count());
        prev = sel.clone();
    }
    assert_eq!(sel.iter().filter(|&&s| s).count(), 40);
}

#[test]
fn nnz_drops_smallest_masks_first() {
    let mask = ComplexTensor::from_real(1, 5, &[0.5, -0.1, 2.0, 0.3, -1.0]);
    let mut sel = vec![true; 5];
    nnz_step(&mut sel, &mask, 10, 10, 2);
    assert_eq!(sel, vec![false, false, true, false, true]);
}

#[test]
fn pruned_channels_are_zero_in_latent() {
    let mut vae = toy_vae(37);
    for i in (0..144).step_by(3) {
        vae.selector[i] = false;
    }
    let (x, eps) = fixed_inputs(&vae, 38);
    let mut t = Tape::new();
    let mu = vae.encode(&mut t, &x);
    let mm = vae.masked_mu(&mut t, mu);
    let z = vae.latent(&mut t, mm, &eps);
    for (i, v) in t.value(z).data().iter().enumerate() {
        if !vae.selector[i] {
            assert_eq!(*v, C::new(0.0, 0.0));
        }
    }
}

fn corpus() -> Vec<recipcrystal_core::Crystal> {
    (0..64).map(|i| synth_crystal(i, 3, 3, 24).unwrap()).collect()
}

#[test]
fn training_is_deterministic_and_prunes_to_target() {
    let data = prepare(&corpus(), &VaeConfig::toy().wave_set()).unwrap();
    let tcfg = TrainConfig { target_nnz: Some(100), ..TrainConfig::toy(16) };
    let run = || {
        let mut tr = VaeTrainer::new(VaeConfig::toy(), tcfg.clone(), 5).unwrap();
        tr.run(&data, |_| {}).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert_eq!(a.last().unwrap().active, 100);
    assert!(a.windows(2).all(|w| w[1].active <= w[0].active));
}

#[test]
fn empty_corpus_rejected() {
    assert!(matches!(
        train_vae(&[], &VaeConfig::toy(), &TrainConfig::toy(2), 0),
        Err(ModelError::EmptyCorpus)
    ));
}

#[test]
fn nan_parameters_report_divergence() {
    let data = prepare(&corpus()[..8], &VaeConfig::toy().wave_set()).unwrap();
    let mut tr = VaeTrainer::new(VaeConfig::toy(), TrainConfig::toy(4), 1).unwrap();
    let id = tr.vae.p.b_lattice;
    tr.vae.store.value_mut(id).set(0, 0, C::new(f64::NAN, 0.0));
    assert!(matches!(tr.step(&data), Err(ModelError::DivergenceDetected { step: 0 })));
}

/// Mean `|mu_masked| / exp(σ)` over the corpus.
fn corpus_snr(vae: &Vae, data: &[Example]) -> f64 {
    data.iter()
        .map(|ex| {
            let x = ex.slotted(&SlotAssignment((0..ex.species.len()).collect()));
            snr_penalty_value(&vae.encode_mean(&x), vae.log_sigma())
        })
        .sum::<f64>()
        / data.len() as f64
}

#[test]
fn snr_penalty_lowers_signal_to_noise() {
    let c = corpus();
    let data = prepare(&c, &VaeConfig::toy().wave_set()).unwrap();
    let tcfg = TrainConfig::toy(80);
    let (with, _) = train_vae(&c, &VaeConfig::toy(), &tcfg, 3).unwrap();
    let (without, _) = train_vae(&c, &VaeConfig { lambda_mu: 0.0, ..VaeConfig::toy() }, &tcfg, 3).unwrap();
    let (a, b) = (corpus_snr(&with, &data), corpus_snr(&without, &data));
    assert!(b > a, "without penalty {b}, with penalty {a}");
}

#[test]
fn injection_order_matters_after_training() {
    let (vae, _) = train_vae(&corpus()[..16], &VaeConfig::toy(), &TrainConfig::toy(30), 4).unwrap();
    let ex = example(40, &vae);
    let x = ex.slotted(&SlotAssignment((0..ex.species.len()).collect()));
    let z = vae.encode_mean(&x);
    let r = vae.decode_value_with(&z, Injection::Reverse);
    let f = vae.decode_value_with(&z, Injection::Forward);
    assert!(r.fourier_pred.max_abs_diff(&f.fourier_pred) > 1e-3);
}
