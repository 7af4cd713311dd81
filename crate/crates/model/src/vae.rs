//! Variational autoencoder with an auxiliary-token ladder bottleneck.
//!
//! A crystal becomes a token sequence `[aux; global; fourier]`. The encoder
//! keeps only the auxiliary rows after every block; stacked by depth they form
//! the latent ladder. The decoder starts from learned constants and adds
//! ladder slices to its auxiliary rows in reverse depth order.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use recipcrystal_core::{
    build_wave_set, fourier_forward, lattice_to_log, Crystal, SpeciesSet, Truncation, WaveSet,
    MAX_ATOMIC_NUMBER, MAX_SPECIES, NUM_SLOTS,
};

use crate::error::{ModelError, Result};
use crate::nn::{rope_angles, transformer_block, BlockConfig, BlockParams};
use crate::optim::{Adam, AdamConfig};
use crate::params::{complex_normal, real_normal, ParamGrads, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{ComplexTensor, C64};

/// Element classes per slot: index 0 is the empty class, `z` is element `z`.
pub const NUM_CLASSES: usize = MAX_ATOMIC_NUMBER as usize + 1;
pub const LATTICE_DIM: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub n_heads: usize,
    pub d_head: usize,
    pub n_layers: usize,
    pub n_aux: usize,
    pub jmax: u32,
    /// Species embedding width.
    pub d_enc: usize,
    pub lambda_z: f64,
    pub lambda_mu: f64,
    pub cyclic_slots: bool,
    pub modulus_gating: bool,
    pub rms_bias: bool,
    pub head_scale: bool,
    pub mlp_bias: bool,
    pub init_log_sigma: f64,
}

impl VaeConfig {
    /// Small configuration used by the tests and the toy pipeline.
    pub fn toy() -> Self {
        Self {
            n_heads: 3,
            d_head: 12,
            n_layers: 2,
            n_aux: 2,
            jmax: 1,
            d_enc: 16,
            lambda_z: 1.0,
            lambda_mu: 0.1,
            cyclic_slots: true,
            modulus_gating: true,
            rms_bias: true,
            head_scale: true,
            mlp_bias: true,
            init_log_sigma: -2.0,
        }
    }

    /// Default desk-scale configuration.
    pub fn desk() -> Self {
        Self { d_head: 48, n_layers: 4, n_aux: 5, jmax: 2, ..Self::toy() }
    }

    pub fn d_model(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            rms_bias: self.rms_bias,
            head_scale: self.head_scale,
            mlp_bias: self.mlp_bias,
            modulus_gating: self.modulus_gating,
            ..BlockConfig::new(self.n_heads, self.d_head)
        }
    }

    pub fn ladder_rows(&self) -> usize {
        self.n_layers * self.n_aux
    }

    /// Complex channels in the ladder.
    pub fn ladder_channels(&self) -> usize {
        self.ladder_rows() * self.d_model()
    }

    pub fn wave_set(&self) -> WaveSet {
        build_wave_set(Truncation::Cubic, self.jmax)
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        if self.n_layers == 0 || self.n_aux == 0 || self.d_enc == 0 || self.jmax == 0 {
            return Err(ModelError::InvalidConfig(
                "n_layers, n_aux, d_enc and jmax must be positive".into(),
            ));
        }
        if !(self.lambda_z >= 0.0 && self.lambda_mu >= 0.0 && self.init_log_sigma.is_finite()) {
            return Err(ModelError::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Slot index for each species, in species order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotAssignment(pub Vec<usize>);

/// Places species consecutively modulo six, from a uniformly random start
/// slot when `cyclic`, otherwise from slot 0.
pub fn assign_slots(species: &SpeciesSet, rng: &mut impl Rng, cyclic: bool) -> Result<SlotAssignment> {
    let n = species.len();
    if n == 0 || n > MAX_SPECIES {
        return Err(ModelError::InvalidConfig(format!("{n} species do not fit in {NUM_SLOTS} slots")));
    }
    let start = if cyclic { rng.random_range(0..NUM_SLOTS) } else { 0 };
    Ok(SlotAssignment((0..n).map(|i| (start + i) % NUM_SLOTS).collect()))
}

/// A corpus entry with the slot-independent parts precomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub lattice: [f64; LATTICE_DIM],
    pub species: SpeciesSet,
    /// `|W| x n_species`, species in order.
    pub fourier: ComplexTensor,
}

impl Example {
    pub fn new(c: &Crystal, ws: &WaveSet) -> Result<Self> {
        let lattice = lattice_to_log(&c.lattice)?.coeffs();
        let fr = fourier_forward(c, ws);
        let n = c.species.len();
        let fourier = ComplexTensor::from_fn(ws.len(), n, |r, s| fr.get(r, s));
        Ok(Self { lattice, species: c.species.clone(), fourier })
    }

    pub fn slotted(&self, slots: &SlotAssignment) -> Slotted {
        let mut classes = [0usize; NUM_SLOTS];
        let mut fourier = ComplexTensor::zeros(self.fourier.rows(), NUM_SLOTS);
        for (i, &slot) in slots.0.iter().enumerate() {
            classes[slot] = self.species.entries[i].0 as usize;
            for r in 0..fourier.rows() {
                fourier.set(r, slot, self.fourier.get(r, i));
            }
        }
        Slotted { lattice: self.lattice, classes, fourier }
    }
}

/// Slot-aligned model inputs, which are also the reconstruction targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Slotted {
    pub lattice: [f64; LATTICE_DIM],
    pub classes: [usize; NUM_SLOTS],
    /// `|W| x 6`.
    pub fourier: ComplexTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeParams {
    pub aux: ParamId,
    pub species_emb: ParamId,
    pub w_global: ParamId,
    pub b_global: ParamId,
    pub w_fourier: ParamId,
    pub b_fourier: ParamId,
    pub mask: ParamId,
    pub log_sigma: ParamId,
    pub dec_init: ParamId,
    pub head_lattice: ParamId,
    pub b_lattice: ParamId,
    pub head_species: ParamId,
    pub b_species: ParamId,
    pub head_fourier: ParamId,
    pub b_head_fourier: ParamId,
}

/// Which ladder slice is added before each decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injection {
    /// Block `i` of `L` (1-indexed) receives slice `L + 1 - i`.
    Reverse,
    /// Block `i` receives slice `i`. Only for ablations.
    Forward,
}

pub struct Heads {
    /// `1 x 6` real.
    pub lattice: Var,
    /// `6 x NUM_CLASSES` real.
    pub logits: Var,
    /// `|W| x 6`.
    pub fourier: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadsOutput {
    pub lattice_coeffs: [f64; LATTICE_DIM],
    pub species_logits: ComplexTensor,
    pub fourier_pred: ComplexTensor,
}

/// Loss components as tape variables.
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub lat: Var,
    pub four: Var,
    pub mu: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub lat: f64,
    pub four: f64,
    pub mu: f64,
}

impl LossParts {
    fn read(tape: &Tape, v: &LossVars) -> Self {
        Self {
            total: tape.value(v.total).item(),
            ce: tape.value(v.ce).item(),
            lat: tape.value(v.lat).item(),
            four: tape.value(v.four).item(),
            mu: tape.value(v.mu).item(),
        }
    }

    fn accumulate(&mut self, o: &LossParts, w: f64) {
        self.total += w * o.total;
        self.ce += w * o.ce;
        self.lat += w * o.lat;
        self.four += w * o.four;
        self.mu += w * o.mu;
    }
}

#[derive(Debug, Clone)]
pub struct Vae {
    pub cfg: VaeConfig,
    pub store: ParamStore,
    pub p: VaeParams,
    pub enc_blocks: Vec<BlockParams>,
    pub dec_blocks: Vec<BlockParams>,
    /// One flag per ladder channel, row-major; false channels are pruned.
    pub selector: Vec<bool>,
    wave_set: WaveSet,
    tags: Vec<Option<[i32; 3]>>,
    base: ComplexTensor,
}

impl Vae {
    pub fn new(cfg: VaeConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let bc = cfg.block();
        let d = cfg.d_model();
        let ws = cfg.wave_set();
        let rows = cfg.ladder_rows();
        let n_tokens = cfg.n_aux + 1 + ws.len();
        let glob_in = LATTICE_DIM + NUM_SLOTS * cfg.d_enc;
        let mut store = ParamStore::new();
        let s = &mut store;
        let aux = s.add("enc.aux", false, complex_normal(cfg.n_aux, d, 1.0, rng));
        let species_emb = s.add("enc.species_emb", true, real_normal(NUM_CLASSES, cfg.d_enc, 1.0, rng));
        let w_global = s.add("enc.global.w", true, real_normal(glob_in, 2 * d, 1.0 / glob_in as f64, rng));
        let b_global = s.add("enc.global.b", true, ComplexTensor::zeros(1, 2 * d));
        let w_fourier = s.add("enc.fourier.w", false, complex_normal(NUM_SLOTS, d, 1.0 / NUM_SLOTS as f64, rng));
        let b_fourier = s.add("enc.fourier.b", false, ComplexTensor::zeros(1, d));
        let enc_blocks = (0..cfg.n_layers)
            .map(|l| BlockParams::new(s, &format!("enc.block{l}"), &bc, false, rng))
            .collect();
        let mask = s.add("latent.mask", true, ComplexTensor::filled(rows, d, C64::new(1.0, 0.0)));
        let log_sigma =
            s.add("latent.log_sigma", true, ComplexTensor::filled(rows, d, C64::new(cfg.init_log_sigma, 0.0)));
        let dec_init = s.add("dec.init", false, complex_normal(n_tokens, d, 1.0, rng));
        let dec_blocks = (0..cfg.n_layers)
            .map(|l| BlockParams::new(s, &format!("dec.block{l}"), &bc, false, rng))
            .collect();
        let head_lattice = s.add("dec.head.lattice.w", true, real_normal(2 * d, LATTICE_DIM, 1.0 / (2 * d) as f64, rng));
        let b_lattice = s.add("dec.head.lattice.b", true, ComplexTensor::zeros(1, LATTICE_DIM));
        let n_logits = NUM_SLOTS * NUM_CLASSES;
        let head_species = s.add("dec.head.species.w", true, real_normal(2 * d, n_logits, 1.0 / (2 * d) as f64, rng));
        let b_species = s.add("dec.head.species.b", true, ComplexTensor::zeros(1, n_logits));
        let head_fourier = s.add("dec.head.fourier.w", false, complex_normal(d, NUM_SLOTS, 1.0 / d as f64, rng));
        let b_head_fourier = s.add("dec.head.fourier.b", false, ComplexTensor::zeros(1, NUM_SLOTS));
        let p = VaeParams {
            aux,
            species_emb,
            w_global,
            b_global,
            w_fourier,
            b_fourier,
            mask,
            log_sigma,
            dec_init,
            head_lattice,
            b_lattice,
            head_species,
            b_species,
            head_fourier,
            b_head_fourier,
        };
        let tags = Self::token_tags(&cfg, &ws);
        let base = rope_angles(&tags, &bc, cfg.jmax);
        Ok(Self {
            selector: vec![true; cfg.ladder_channels()],
            cfg,
            store,
            p,
            enc_blocks,
            dec_blocks,
            wave_set: ws,
            tags,
            base,
        })
    }

    /// Rebuilds a model around saved parameters and selector.
    pub fn from_parts(cfg: VaeConfig, store: ParamStore, selector: Vec<bool>) -> Result<Self> {
        let mut vae = Self::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        if !vae.store.same_layout(&store) || selector.len() != vae.selector.len() {
            return Err(ModelError::InvalidConfig("saved parameters do not match the configuration".into()));
        }
        vae.store = store;
        vae.selector = selector;
        Ok(vae)
    }

    fn token_tags(cfg: &VaeConfig, ws: &WaveSet) -> Vec<Option<[i32; 3]>> {
        let mut tags = vec![None; cfg.n_aux + 1];
        tags.extend(ws.vectors().iter().map(|&w| Some(w)));
        tags
    }

    pub fn wave_set(&self) -> &WaveSet {
        &self.wave_set
    }

    pub fn tags(&self) -> &[Option<[i32; 3]>] {
        &self.tags
    }

    pub fn num_tokens(&self) -> usize {
        self.tags.len()
    }

    pub fn active_channels(&self) -> usize {
        self.selector.iter().filter(|&&s| s).count()
    }

    /// Selector as a real `0/1` ladder-shaped tensor.
    pub fn selector_tensor(&self) -> ComplexTensor {
        let d = self.cfg.d_model();
        ComplexTensor::from_fn(self.cfg.ladder_rows(), d, |r, c| {
            C64::new(if self.selector[r * d + c] { 1.0 } else { 0.0 }, 0.0)
        })
    }

    pub fn log_sigma(&self) -> &ComplexTensor {
        self.store.value(self.p.log_sigma)
    }

    /// Token sequence for slot-aligned inputs.
    pub fn tokenize(&self, tape: &mut Tape, x: &Slotted) -> Var {
        let aux = tape.param(&self.store, self.p.aux);
        let emb = tape.param(&self.store, self.p.species_emb);
        let species = tape.gather_rows(emb, &x.classes);
        let species = tape.reshape(species, 1, NUM_SLOTS * self.cfg.d_enc);
        let lat = tape.constant(ComplexTensor::from_real(1, LATTICE_DIM, &x.lattice));
        let feat = tape.concat_cols(&[lat, species]);
        let wg = tape.param(&self.store, self.p.w_global);
        let bg = tape.param(&self.store, self.p.b_global);
        let g = tape.matmul(feat, wg);
        let g = tape.add(g, bg);
        let global = tape.pairs(g);
        let f = tape.constant(x.fourier.clone());
        let wf = tape.param(&self.store, self.p.w_fourier);
        let bf = tape.param(&self.store, self.p.b_fourier);
        let four = tape.matmul(f, wf);
        let four = tape.add(four, bf);
        tape.concat_rows(&[aux, global, four])
    }

    /// Runs the encoder over explicit tokens and tags; returns the ladder mean.
    pub fn encode_tokens(&self, tape: &mut Tape, tokens: Var, tags: &[Option<[i32; 3]>]) -> Var {
        let bc = self.cfg.block();
        let base = if tags == self.tags.as_slice() {
            tape.constant(self.base.clone())
        } else {
            tape.constant(rope_angles(tags, &bc, self.cfg.jmax))
        };
        let mut x = tokens;
        let mut ladder = Vec::with_capacity(self.cfg.n_layers);
        for b in &self.enc_blocks {
            x = transformer_block(tape, &self.store, x, &bc, b, base, None);
            ladder.push(tape.slice_rows(x, 0, self.cfg.n_aux));
        }
        tape.concat_rows(&ladder)
    }

    pub fn encode(&self, tape: &mut Tape, x: &Slotted) -> Var {
        let tokens = self.tokenize(tape, x);
        self.encode_tokens(tape, tokens, &self.tags)
    }

    /// `mu ⊙ mask ⊙ selector`.
    pub fn masked_mu(&self, tape: &mut Tape, mu: Var) -> Var {
        let mask = tape.param(&self.store, self.p.mask);
        let sel = tape.constant(self.selector_tensor());
        let m = tape.mul(mu, mask);
        tape.mul(m, sel)
    }

    /// Reparameterized sample `mu_masked + eps ⊙ exp(σ) ⊙ selector`.
    pub fn latent(&self, tape: &mut Tape, mu_masked: Var, eps: &ComplexTensor) -> Var {
        let ls = tape.param(&self.store, self.p.log_sigma);
        let sigma = tape.exp(ls);
        let e = tape.constant(eps.clone());
        let sel = tape.constant(self.selector_tensor());
        let noise = tape.mul(e, sigma);
        let noise = tape.mul(noise, sel);
        tape.add(mu_masked, noise)
    }

    pub fn decode(&self, tape: &mut Tape, latent: Var, order: Injection) -> Heads {
        let bc = self.cfg.block();
        let (l, n_aux) = (self.cfg.n_layers, self.cfg.n_aux);
        let base = tape.constant(self.base.clone());
        let mut x = tape.param(&self.store, self.p.dec_init);
        for (b, block) in self.dec_blocks.iter().enumerate() {
            let slice = match order {
                Injection::Reverse => l - 1 - b,
                Injection::Forward => b,
            };
            let z = tape.slice_rows(latent, slice * n_aux, n_aux);
            x = tape.add_rows(x, z, 0);
            x = transformer_block(tape, &self.store, x, &bc, block, base, None);
        }
        let global = tape.slice_rows(x, n_aux, 1);
        let global = tape.re_im(global);
        let wl = tape.param(&self.store, self.p.head_lattice);
        let bl = tape.param(&self.store, self.p.b_lattice);
        let lattice = tape.matmul(global, wl);
        let lattice = tape.add(lattice, bl);
        let ws = tape.param(&self.store, self.p.head_species);
        let bs = tape.param(&self.store, self.p.b_species);
        let logits = tape.matmul(global, ws);
        let logits = tape.add(logits, bs);
        let logits = tape.reshape(logits, NUM_SLOTS, NUM_CLASSES);
        let four = tape.slice_rows(x, n_aux + 1, self.wave_set.len());
        let wf = tape.param(&self.store, self.p.head_fourier);
        let bf = tape.param(&self.store, self.p.b_head_fourier);
        let fourier = tape.matmul(four, wf);
        let fourier = tape.add(fourier, bf);
        Heads { lattice, logits, fourier }
    }

    /// Mean over ladder channels of `|mu_masked| / exp(σ)`.
    pub fn snr_penalty(&self, tape: &mut Tape, mu_masked: Var) -> Var {
        let ls = tape.param(&self.store, self.p.log_sigma);
        let neg = tape.scale(ls, -1.0);
        let inv = tape.exp(neg);
        let m = tape.abs(mu_masked);
        let r = tape.mul(m, inv);
        tape.mean(r)
    }

    /// Full objective for one example and one noise draw.
    pub fn loss(&self, tape: &mut Tape, x: &Slotted, eps: &ComplexTensor) -> LossVars {
        let mu = self.encode(tape, x);
        let mm = self.masked_mu(tape, mu);
        let z = self.latent(tape, mm, eps);
        let heads = self.decode(tape, z, Injection::Reverse);
        let mu = self.snr_penalty(tape, mm);
        vae_loss(tape, &heads, x, mu, self.cfg.lambda_z, self.cfg.lambda_mu)
    }

    /// Loss value and parameter gradients for one example.
    pub fn loss_and_grads(&self, x: &Slotted, eps: &ComplexTensor) -> (LossParts, ParamGrads) {
        let mut tape = Tape::new();
        let v = self.loss(&mut tape, x, eps);
        let g = tape.backward(v.total);
        (LossParts::read(&tape, &v), tape.param_grads(&g, &self.store))
    }

    /// Masked ladder mean, without gradients.
    pub fn encode_mean(&self, x: &Slotted) -> ComplexTensor {
        let mut tape = Tape::new();
        let mu = self.encode(&mut tape, x);
        let mm = self.masked_mu(&mut tape, mu);
        tape.value(mm).clone()
    }

    pub fn decode_value(&self, latent: &ComplexTensor) -> HeadsOutput {
        self.decode_value_with(latent, Injection::Reverse)
    }

    pub fn decode_value_with(&self, latent: &ComplexTensor, order: Injection) -> HeadsOutput {
        let mut tape = Tape::new();
        let z = tape.constant(latent.clone());
        let h = self.decode(&mut tape, z, order);
        let lat = tape.value(h.lattice);
        HeadsOutput {
            lattice_coeffs: std::array::from_fn(|i| lat.get(0, i).re),
            species_logits: tape.value(h.logits).clone(),
            fourier_pred: tape.value(h.fourier).clone(),
        }
    }
}

/// `λ_z·CE + sqrt(L_lat + L_four) + λ_μ·L_μ` for decoded heads against
/// slot-aligned targets; `snr` is the precomputed penalty.
pub fn vae_loss(tape: &mut Tape, h: &Heads, x: &Slotted, snr: Var, lambda_z: f64, lambda_mu: f64) -> LossVars {
    let ce = tape.cross_entropy(h.logits, &x.classes);
    let lt = tape.constant(ComplexTensor::from_real(1, LATTICE_DIM, &x.lattice));
    let dl = tape.sub(h.lattice, lt);
    let lat = tape.sum_sq(dl);
    let lat = tape.scale(lat, 1.0 / LATTICE_DIM as f64);
    let ft = tape.constant(x.fourier.clone());
    let df = tape.sub(h.fourier, ft);
    let four = tape.sum_sq(df);
    let four = tape.scale(four, 1.0 / x.fourier.len() as f64);
    let u = tape.add(lat, four);
    let rec = tape.sqrt(u);
    let a = tape.scale(ce, lambda_z);
    let b = tape.scale(snr, lambda_mu);
    let total = tape.add(a, rec);
    let total = tape.add(total, b);
    LossVars { total, ce, lat, four, mu: snr }
}

/// Independent standard normal real and imaginary parts.
pub fn draw_eps(rows: usize, cols: usize, rng: &mut impl Rng) -> ComplexTensor {
    ComplexTensor::from_fn(rows, cols, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        C64::new(re, im)
    })
}

/// Value-level reparameterized sample; pruned channels are exactly zero.
pub fn sample_latent(
    mu_masked: &ComplexTensor,
    log_sigma: &ComplexTensor,
    selector: &[bool],
    rng: &mut impl Rng,
) -> ComplexTensor {
    let eps = draw_eps(mu_masked.rows(), mu_masked.cols(), rng);
    let mut out = mu_masked.clone();
    for (i, z) in out.data_mut().iter_mut().enumerate() {
        *z = if selector[i] { *z + eps.data()[i] * log_sigma.data()[i].re.exp() } else { C64::new(0.0, 0.0) };
    }
    out
}

/// Value-level mean of `|mu| / exp(σ)`.
pub fn snr_penalty_value(mu_masked: &ComplexTensor, log_sigma: &ComplexTensor) -> f64 {
    let n = mu_masked.len() as f64;
    mu_masked.data().iter().zip(log_sigma.data()).map(|(m, s)| m.norm() / s.re.exp()).sum::<f64>() / n
}

/// `sqrt(L_lat + L_four)`.
pub fn reconstruction_loss(lat: f64, four: f64) -> f64 {
    (lat + four).sqrt()
}

/// Active-channel target `target + (full - target)(1 + cos(π t / T)) / 2`, rounded.
pub fn nnz_target(step: usize, total_steps: usize, full: usize, target: usize) -> usize {
    let t = if total_steps == 0 { 1.0 } else { (step.min(total_steps)) as f64 / total_steps as f64 };
    let n = target as f64 + (full - target) as f64 * 0.5 * (1.0 + (PI * t).cos());
    n.round() as usize
}

/// Prunes the lowest-`|mask|` active channels down to the scheduled count.
/// Pruning is permanent. Returns the active count.
pub fn nnz_step(selector: &mut [bool], mask: &ComplexTensor, step: usize, total_steps: usize, target: usize) -> usize {
    let full = selector.len();
    let goal = nnz_target(step, total_steps, full, target.min(full));
    let mut active: Vec<usize> = (0..full).filter(|&i| selector[i]).collect();
    if active.len() > goal {
        active.sort_by(|&a, &b| mask.data()[a].norm().total_cmp(&mask.data()[b].norm()).then(a.cmp(&b)));
        let drop = active.len() - goal;
        for &i in &active[..drop] {
            selector[i] = false;
        }
        goal
    } else {
        active.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Final active ladder channel count; `None` disables pruning.
    pub target_nnz: Option<usize>,
}

impl TrainConfig {
    pub fn toy(steps: usize) -> Self {
        Self {
            steps,
            batch_size: 8,
            lr_peak: 3e-3,
            lr_min: 3e-4,
            warmup_steps: steps / 20,
            weight_decay: 1e-9,
            target_nnz: None,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr_min: self.lr_min,
            weight_decay: self.weight_decay,
            ..AdamConfig::new(self.lr_peak, self.warmup_steps, self.steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr_peak > 0.0) || !(self.lr_min >= 0.0) {
            return Err(ModelError::InvalidConfig("batch_size and lr_peak must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: LossParts,
    pub lr: f64,
    pub active: usize,
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone)]
pub struct VaeTrainer {
    pub vae: Vae,
    pub tcfg: TrainConfig,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

/// Seeds the training stream; initialization uses stream 0 of the same seed.
pub fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Precomputes examples for a corpus.
pub fn prepare(corpus: &[Crystal], ws: &WaveSet) -> Result<Vec<Example>> {
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    corpus.iter().map(|c| Example::new(c, ws)).collect()
}

/// Draws `batch` distinct indices (or all, if fewer) in draw order.
pub fn draw_batch(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
    sample(rng, n, batch.min(n)).into_vec()
}

impl VaeTrainer {
    pub fn new(cfg: VaeConfig, tcfg: TrainConfig, seed: u64) -> Result<Self> {
        tcfg.validate()?;
        let vae = Vae::new(cfg, &mut init_rng(seed))?;
        let adam = Adam::new(tcfg.adam(), &vae.store);
        Ok(Self { vae, tcfg, adam, rng: training_rng(seed), step: 0 })
    }

    pub fn done(&self) -> bool {
        self.step >= self.tcfg.steps
    }

    /// One optimizer update on a freshly drawn batch.
    pub fn step(&mut self, data: &[Example]) -> Result<LossRecord> {
        if data.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        let (rows, d) = (self.vae.cfg.ladder_rows(), self.vae.cfg.d_model());
        let idx = draw_batch(data.len(), self.tcfg.batch_size, &mut self.rng);
        let mut jobs = Vec::with_capacity(idx.len());
        for &i in &idx {
            let slots = assign_slots(&data[i].species, &mut self.rng, self.vae.cfg.cyclic_slots)?;
            let eps = draw_eps(rows, d, &mut self.rng);
            jobs.push((data[i].slotted(&slots), eps));
        }
        let vae = &self.vae;
        let results: Vec<(LossParts, ParamGrads)> =
            jobs.par_iter().map(|(x, eps)| vae.loss_and_grads(x, eps)).collect();
        let w = 1.0 / results.len() as f64;
        let mut parts = LossParts::default();
        let mut grads = self.vae.store.zero_grads();
        for (p, g) in &results {
            parts.accumulate(p, w);
            grads.add_assign(g);
        }
        grads.scale(w);
        if !parts.total.is_finite() || !grads.all_finite() {
            return Err(ModelError::DivergenceDetected { step: self.step });
        }
        let lr = self.adam.update(&mut self.vae.store, &grads);
        self.step += 1;
        let active = match self.tcfg.target_nnz {
            Some(t) => {
                let mask = self.vae.store.value(self.vae.p.mask).clone();
                nnz_step(&mut self.vae.selector, &mask, self.step, self.tcfg.steps, t)
            }
            None => self.vae.active_channels(),
        };
        Ok(LossRecord { step: self.step, loss: parts, lr, active })
    }

    /// Steps until the configured total.
    pub fn run(&mut self, data: &[Example], mut on_step: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        let mut trace = Vec::new();
        while !self.done() {
            let rec = self.step(data)?;
            on_step(&rec);
            trace.push(rec);
        }
        Ok(trace)
    }
}

pub fn train_vae(corpus: &[Crystal], cfg: &VaeConfig, tcfg: &TrainConfig, seed: u64) -> Result<(Vae, Vec<LossRecord>)> {
    let data = prepare(corpus, &cfg.wave_set())?;
    let mut tr = VaeTrainer::new(cfg.clone(), tcfg.clone(), seed)?;
    let trace = tr.run(&data, |_| {})?;
    Ok((tr.vae, trace))
}
