//! Radial-Laplace diffusion over the latent ladder.
//!
//! A clean ladder `μ` is mixed with noise as `z = c·μ + s·ν` where `ν` has an
//! isotropic radial-Laplace law per channel and `(c, s)` follow an
//! information-matched schedule in `φ ∈ [0, 1]`. A transformer conditioned on
//! `φ` predicts `ν` from `z`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use recipcrystal_core::WaveSet;

use crate::error::{ModelError, Result};
use crate::nn::{rope_angles, transformer_block, BlockConfig, BlockParams};
use crate::optim::Adam;
use crate::params::{complex_normal, ParamGrads, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{ComplexTensor, C64};
use crate::vae::{draw_batch, init_rng, training_rng, Example, SlotAssignment, TrainConfig, Vae};

pub const PHI_MIN: f64 = 0.01;
pub const PHI_MAX: f64 = 0.99;

/// Reporting bins in `φ`; each is closed on the left, the last also on the right.
pub const PHI_BINS: [(f64, f64); 5] = [(0.01, 0.2), (0.2, 0.4), (0.4, 0.6), (0.6, 0.8), (0.8, 0.99)];

/// Below this ratio the schedule uses its `R → 0` limit `s² = φ`.
const SMALL_RATIO: f64 = 1e-12;

/// Smallest scale assigned to an active channel.
const MIN_VARPI: f64 = 1e-12;

pub fn phi_bin(phi: f64) -> usize {
    PHI_BINS.iter().position(|&(_, hi)| phi < hi).unwrap_or(PHI_BINS.len() - 1)
}

/// `r·exp(iθ)` with `r = ϖ(E₁ + E₂)` and uniform `θ`; zero where `ϖ = 0`.
pub fn sample_radial_laplace(varpi: &[f64], rng: &mut impl Rng) -> Vec<C64> {
    varpi
        .iter()
        .map(|&w| {
            let e1: f64 = Exp1.sample(rng);
            let e2: f64 = Exp1.sample(rng);
            let theta = rng.random::<f64>() * std::f64::consts::TAU;
            if w > 0.0 {
                C64::from_polar(w * (e1 + e2), theta)
            } else {
                C64::new(0.0, 0.0)
            }
        })
        .collect()
}

/// Per-channel radial-Laplace scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseScales {
    pub varpi: Vec<f64>,
    pub frozen: bool,
}

/// `ϖ = ½·mean|μ|` per active channel over the given ladders; pruned channels get 0.
pub fn scales_from_latents(latents: &[ComplexTensor], selector: &[bool]) -> Result<NoiseScales> {
    let first = latents.first().ok_or(ModelError::EmptyCorpus)?;
    let mut acc = vec![0.0; first.len()];
    for l in latents {
        for (a, z) in acc.iter_mut().zip(l.data()) {
            *a += z.norm();
        }
    }
    let n = latents.len() as f64;
    let varpi = acc
        .iter()
        .zip(selector)
        .map(|(&a, &on)| if on { (0.5 * a / n).max(MIN_VARPI) } else { 0.0 })
        .collect();
    Ok(NoiseScales { varpi, frozen: true })
}

/// Masked ladder means for every example; with cyclic slots every start slot is included.
pub fn encode_corpus(vae: &Vae, data: &[Example]) -> Vec<ComplexTensor> {
    let starts = if vae.cfg.cyclic_slots { 6 } else { 1 };
    let jobs: Vec<(usize, usize)> = (0..data.len()).flat_map(|i| (0..starts).map(move |s| (i, s))).collect();
    jobs.par_iter()
        .map(|&(i, s)| {
            let ex = &data[i];
            let slots = SlotAssignment((0..ex.species.len()).map(|k| (s + k) % 6).collect());
            vae.encode_mean(&ex.slotted(&slots))
        })
        .collect()
}

/// Scales from one pass of the frozen encoder over the corpus.
pub fn estimate_scales(vae: &Vae, data: &[Example]) -> Result<NoiseScales> {
    if data.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    scales_from_latents(&encode_corpus(vae, data), &vae.selector)
}

/// `R = 3(ϖ / exp σ)²`.
pub fn snr_ratio(varpi: f64, log_sigma: f64) -> f64 {
    3.0 * (varpi / log_sigma.exp()).powi(2)
}

/// `(c, s)` with `s² = ((1 + R)^φ − 1) / R` and `c² = 1 − s²`.
pub fn schedule_coeffs(phi: f64, r: f64) -> (f64, f64) {
    if phi <= 0.0 {
        return (1.0, 0.0);
    }
    if phi >= 1.0 {
        return (0.0, 1.0);
    }
    let s2 = if r < SMALL_RATIO { phi } else { (phi * r.ln_1p()).exp_m1() / r };
    let s2 = s2.clamp(0.0, 1.0);
    ((1.0 - s2).sqrt(), s2.sqrt())
}

/// Frozen noise model for one trained autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSpace {
    pub rows: usize,
    pub cols: usize,
    pub scales: NoiseScales,
    /// Real parts carry the per-channel log-scale.
    pub log_sigma: ComplexTensor,
    pub selector: Vec<bool>,
}

/// A corrupted ladder with everything needed to undo it.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub z_phi: ComplexTensor,
    pub phi: f64,
    pub c: Vec<f64>,
    pub s: Vec<f64>,
    pub noise: ComplexTensor,
}

impl LatentSpace {
    pub fn new(vae: &Vae, scales: NoiseScales) -> Result<Self> {
        if !scales.frozen {
            return Err(ModelError::ScalesNotFrozen);
        }
        let ls = vae.log_sigma();
        Ok(Self { rows: ls.rows(), cols: ls.cols(), scales, log_sigma: ls.clone(), selector: vae.selector.clone() })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn active(&self) -> usize {
        self.selector.iter().filter(|&&s| s).count()
    }

    /// Per-channel ratio `R`; zero for pruned channels.
    pub fn ratios(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| if self.selector[i] { snr_ratio(self.scales.varpi[i], self.log_sigma.data()[i].re) } else { 0.0 })
            .collect()
    }

    pub fn coeffs(&self, phi: f64) -> (Vec<f64>, Vec<f64>) {
        self.ratios().into_iter().map(|r| schedule_coeffs(phi, r)).unzip()
    }

    pub fn sample_noise(&self, rng: &mut impl Rng) -> ComplexTensor {
        ComplexTensor::from_vec(self.rows, self.cols, sample_radial_laplace(&self.scales.varpi, rng))
    }

    /// `τ = exp σ` per channel.
    pub fn tau(&self) -> Vec<f64> {
        self.log_sigma.data().iter().map(|z| z.re.exp()).collect()
    }

    pub fn selector_tensor(&self) -> ComplexTensor {
        ComplexTensor::from_fn(self.rows, self.cols, |r, c| {
            C64::new(if self.selector[r * self.cols + c] { 1.0 } else { 0.0 }, 0.0)
        })
    }

    /// `c·μ + s·ν` with the given noise; pruned channels are set to zero.
    pub fn mix(&self, mu: &ComplexTensor, noise: &ComplexTensor, phi: f64) -> Result<DiffusionState> {
        if !self.scales.frozen {
            return Err(ModelError::ScalesNotFrozen);
        }
        let (c, s) = self.coeffs(phi);
        let mut z = mu.clone();
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v = if self.selector[i] { mu.data()[i] * c[i] + noise.data()[i] * s[i] } else { C64::new(0.0, 0.0) };
        }
        Ok(DiffusionState { z_phi: z, phi, c, s, noise: noise.clone() })
    }

    pub fn corrupt(&self, mu: &ComplexTensor, phi: f64, rng: &mut impl Rng) -> Result<DiffusionState> {
        let noise = self.sample_noise(rng);
        self.mix(mu, &noise, phi)
    }

    /// `μ̂ = (z − s·ν̂) / c` on active channels.
    pub fn reconstruct(&self, z: &ComplexTensor, noise_pred: &ComplexTensor, phi: f64) -> ComplexTensor {
        let (c, s) = self.coeffs(phi);
        ComplexTensor::from_fn(self.rows, self.cols, |r, col| {
            let i = r * self.cols + col;
            if self.selector[i] {
                (z.data()[i] - noise_pred.data()[i] * s[i]) / c[i]
            } else {
                C64::new(0.0, 0.0)
            }
        })
    }

    /// `sqrt(Σ_active |(a − b)/τ|² / (2·N_active))`.
    pub fn normalized_rmse(&self, a: &ComplexTensor, b: &ComplexTensor) -> f64 {
        let tau = self.tau();
        let sum: f64 = (0..self.len())
            .filter(|&i| self.selector[i])
            .map(|i| ((a.data()[i] - b.data()[i]) / tau[i]).norm_sqr())
            .sum();
        (sum / (2.0 * self.active().max(1) as f64)).sqrt()
    }
}

/// Value-level noise loss: residuals normalized by `τ`, real and imaginary
/// parts counted as separate components, inactive channels excluded.
pub fn diffusion_loss(pred: &[C64], truth: &[C64], tau: &[f64], selector: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if selector[i] {
            sum += ((pred[i] - truth[i]) / tau[i]).norm_sqr();
            n += 2;
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Anything that predicts the injected noise from a corrupted ladder.
pub trait NoisePredictor {
    fn predict(&self, z: &ComplexTensor, phi: f64) -> ComplexTensor;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffuserConfig {
    pub n_layers: usize,
    /// Extra tokens after the ladder rows; defaults to one per wave vector.
    pub n_scratch: Option<usize>,
    /// Feed `z / ϖ` and predict `ν / ϖ`, keeping activations near unit scale.
    pub precondition: bool,
}

impl DiffuserConfig {
    pub fn toy() -> Self {
        Self { n_layers: 2, n_scratch: None, precondition: true }
    }
}

#[derive(Debug, Clone)]
pub struct Diffuser {
    pub cfg: DiffuserConfig,
    pub block: BlockConfig,
    pub jmax: u32,
    pub store: ParamStore,
    pub init: ParamId,
    pub blocks: Vec<BlockParams>,
    pub head: ParamId,
    pub space: LatentSpace,
    base: ComplexTensor,
}

impl Diffuser {
    pub fn new(cfg: DiffuserConfig, vae: &Vae, space: LatentSpace, rng: &mut impl Rng) -> Result<Self> {
        if cfg.n_layers == 0 {
            return Err(ModelError::InvalidConfig("diffuser needs at least one block".into()));
        }
        let block = vae.cfg.block();
        let d = block.d_model;
        let ws: &WaveSet = vae.wave_set();
        let scratch = cfg.n_scratch.unwrap_or(ws.len());
        let mut tags = vec![None; space.rows];
        tags.extend((0..scratch).map(|i| Some(ws.vectors()[i % ws.len()])));
        let base = rope_angles(&tags, &block, vae.cfg.jmax);
        let mut store = ParamStore::new();
        let init = store.add("diff.init", false, complex_normal(tags.len(), d, 1.0, rng));
        let blocks = (0..cfg.n_layers)
            .map(|l| BlockParams::new(&mut store, &format!("diff.block{l}"), &block, true, rng))
            .collect();
        let head = store.add("diff.head", false, complex_normal(d, d, 1.0 / d as f64, rng));
        Ok(Self { cfg, block, jmax: vae.cfg.jmax, store, init, blocks, head, space, base })
    }

    pub fn from_parts(cfg: DiffuserConfig, vae: &Vae, space: LatentSpace, store: ParamStore) -> Result<Self> {
        let mut d = Self::new(cfg, vae, space, &mut ChaCha8Rng::seed_from_u64(0))?;
        if !d.store.same_layout(&store) {
            return Err(ModelError::InvalidConfig("saved diffuser does not match the configuration".into()));
        }
        d.store = store;
        Ok(d)
    }

    /// `ϖ` on active channels, 1 elsewhere (or everywhere without preconditioning).
    fn precond(&self) -> ComplexTensor {
        let s = &self.space;
        ComplexTensor::from_fn(s.rows, s.cols, |r, c| {
            let i = r * s.cols + c;
            let w = if self.cfg.precondition && s.selector[i] { s.scales.varpi[i] } else { 1.0 };
            C64::new(w, 0.0)
        })
    }

    /// Noise prediction on the tape; inactive channels are exactly zero.
    pub fn forward(&self, tape: &mut Tape, z: &ComplexTensor, phi: f64) -> Var {
        let pre = self.precond();
        let zin = z.zip_map(&pre, |a, w| a / w.re);
        let base = tape.constant(self.base.clone());
        let zin = tape.constant(zin);
        let mut x = tape.param(&self.store, self.init);
        x = tape.add_rows(x, zin, 0);
        for b in &self.blocks {
            x = transformer_block(tape, &self.store, x, &self.block, b, base, Some(phi));
        }
        let out = tape.slice_rows(x, 0, self.space.rows);
        let head = tape.param(&self.store, self.head);
        let out = tape.matmul(out, head);
        let gate = tape.constant(pre.zip_map(&self.space.selector_tensor(), |a, b| a * b));
        tape.mul(out, gate)
    }

    /// `Σ_active |(ν̂ − ν)/τ|²` for one sample, and the prediction.
    fn residual_sum(&self, tape: &mut Tape, st: &DiffusionState) -> (Var, Var) {
        let pred = self.forward(tape, &st.z_phi, st.phi);
        let truth = tape.constant(st.noise.clone());
        let tau = self.space.tau();
        let w = ComplexTensor::from_fn(self.space.rows, self.space.cols, |r, c| {
            let i = r * self.space.cols + c;
            C64::new(if self.space.selector[i] { 1.0 / tau[i] } else { 0.0 }, 0.0)
        });
        let w = tape.constant(w);
        let d = tape.sub(pred, truth);
        let d = tape.mul(d, w);
        (tape.sum_sq(d), pred)
    }

    /// Batch noise RMSE and its parameter gradient.
    ///
    /// The per-sample residual sums `S_b` are differentiated independently and
    /// combined through `L = sqrt(Σ S_b / (2·N·B))`.
    pub fn batch_loss_and_grads(&self, batch: &[DiffusionState]) -> (f64, ParamGrads, Vec<ComplexTensor>) {
        let results: Vec<(f64, ParamGrads, ComplexTensor)> = batch
            .par_iter()
            .map(|st| {
                let mut tape = Tape::new();
                let (s, pred) = self.residual_sum(&mut tape, st);
                let g = tape.backward(s);
                (tape.value(s).item(), tape.param_grads(&g, &self.store), tape.value(pred).clone())
            })
            .collect();
        let denom = 2.0 * self.space.active().max(1) as f64 * batch.len() as f64;
        let total: f64 = results.iter().map(|r| r.0).sum();
        let loss = (total / denom).sqrt();
        let mut grads = self.store.zero_grads();
        for r in &results {
            grads.add_assign(&r.1);
        }
        let scale = if loss > 0.0 { 1.0 / (2.0 * loss * denom) } else { 0.0 };
        grads.scale(scale);
        (loss, grads, results.into_iter().map(|r| r.2).collect())
    }

}

impl NoisePredictor for Diffuser {
    fn predict(&self, z: &ComplexTensor, phi: f64) -> ComplexTensor {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, z, phi);
        tape.value(v).clone()
    }
}

/// Iterative denoising from pure noise at `φ = 0.99` down to `φ = 0.01`.
///
/// Each step predicts the noise, reconstructs `μ̂ = (z − s ν̂)/c`, and (except
/// at the last grid point) re-corrupts `μ̂` at the next `φ` with fresh noise.
pub fn generate(pred: &impl NoisePredictor, space: &LatentSpace, n_steps: usize, rng: &mut impl Rng) -> Result<ComplexTensor> {
    if n_steps == 0 {
        return Err(ModelError::InvalidConfig("generation needs at least one step".into()));
    }
    let grid: Vec<f64> = if n_steps == 1 {
        vec![PHI_MAX]
    } else {
        (0..n_steps).map(|k| PHI_MAX - (PHI_MAX - PHI_MIN) * k as f64 / (n_steps - 1) as f64).collect()
    };
    let zero = ComplexTensor::zeros(space.rows, space.cols);
    let mut z = space.corrupt(&zero, grid[0], rng)?.z_phi;
    let mut mu_hat = zero;
    for (k, &phi) in grid.iter().enumerate() {
        let nu = pred.predict(&z, phi);
        mu_hat = space.reconstruct(&z, &nu, phi);
        if let Some(&next) = grid.get(k + 1) {
            z = space.corrupt(&mu_hat, next, rng)?.z_phi;
        }
    }
    Ok(mu_hat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionRecord {
    pub step: usize,
    pub phi: f64,
    pub bin: usize,
    /// Batch noise RMSE normalized by `τ`.
    pub loss: f64,
    /// Reconstruction error of `μ̂` normalized by `τ`; diagnostic only.
    pub signal_rmse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct DiffusionTrainer {
    pub diff: Diffuser,
    pub latents: Vec<ComplexTensor>,
    pub tcfg: TrainConfig,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl DiffusionTrainer {
    /// Encodes the corpus with the frozen autoencoder, estimates and freezes
    /// the noise scales, and initializes a diffuser.
    pub fn new(vae: &Vae, data: &[Example], cfg: DiffuserConfig, tcfg: TrainConfig, seed: u64) -> Result<Self> {
        tcfg.validate()?;
        if data.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        let latents = encode_corpus(vae, data);
        let scales = scales_from_latents(&latents, &vae.selector)?;
        let space = LatentSpace::new(vae, scales)?;
        let diff = Diffuser::new(cfg, vae, space, &mut init_rng(seed))?;
        let adam = Adam::new(tcfg.adam(), &diff.store);
        Ok(Self { diff, latents, tcfg, adam, rng: training_rng(seed), step: 0 })
    }

    pub fn done(&self) -> bool {
        self.step >= self.tcfg.steps
    }

    /// One update with a batch-shared `φ ~ U[0.01, 0.99]`.
    pub fn step(&mut self) -> Result<DiffusionRecord> {
        let phi = self.rng.random_range(PHI_MIN..=PHI_MAX);
        let idx = draw_batch(self.latents.len(), self.tcfg.batch_size, &mut self.rng);
        let mut batch = Vec::with_capacity(idx.len());
        for &i in &idx {
            batch.push(self.diff.space.corrupt(&self.latents[i], phi, &mut self.rng)?);
        }
        let (loss, grads, preds) = self.diff.batch_loss_and_grads(&batch);
        if !loss.is_finite() || !grads.all_finite() {
            return Err(ModelError::DivergenceDetected { step: self.step });
        }
        let space = &self.diff.space;
        let mut sig = 0.0;
        for ((st, p), &i) in batch.iter().zip(&preds).zip(&idx) {
            let mu_hat = space.reconstruct(&st.z_phi, p, phi);
            sig += space.normalized_rmse(&mu_hat, &self.latents[i]).powi(2);
        }
        let signal_rmse = (sig / batch.len() as f64).sqrt();
        let lr = self.adam.update(&mut self.diff.store, &grads);
        self.step += 1;
        Ok(DiffusionRecord { step: self.step, phi, bin: phi_bin(phi), loss, signal_rmse, lr })
    }

    pub fn run(&mut self, mut on_step: impl FnMut(&DiffusionRecord)) -> Result<Vec<DiffusionRecord>> {
        let mut trace = Vec::new();
        while !self.done() {
            let rec = self.step()?;
            on_step(&rec);
            trace.push(rec);
        }
        Ok(trace)
    }
}

/// Mean loss per `φ` bin; `None` for bins with no steps.
pub fn bin_means(trace: &[DiffusionRecord]) -> [Option<f64>; 5] {
    let mut sum = [0.0; 5];
    let mut n = [0usize; 5];
    for r in trace {
        sum[r.bin] += r.loss;
        n[r.bin] += 1;
    }
    std::array::from_fn(|b| (n[b] > 0).then(|| sum[b] / n[b] as f64))
}

pub fn train_diffuser(
    vae: &Vae,
    data: &[Example],
    cfg: &DiffuserConfig,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<(Diffuser, Vec<DiffusionRecord>)> {
    let mut tr = DiffusionTrainer::new(vae, data, cfg.clone(), tcfg.clone(), seed)?;
    let trace = tr.run(|_| {})?;
    Ok((tr.diff, trace))
}
