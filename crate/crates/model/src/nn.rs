//! Complex-valued transformer building blocks.
//!
//! Activations are `S x d_model` complex matrices, one row per token. All
//! functions record onto a [`Tape`] so that any scalar built from them can be
//! differentiated.

use std::f64::consts::TAU;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::{complex_normal, real_normal, ParamGrads, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{ComplexTensor, C64};

pub const RMS_EPS: f64 = 1e-6;

/// Hidden width relative to `d_model` before rounding to a multiple of `d_head`.
pub const MLP_RATIO: f64 = 8.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub mlp_ratio: f64,
    pub rms_bias: bool,
    pub head_scale: bool,
    pub mlp_bias: bool,
    pub modulus_gating: bool,
}

impl BlockConfig {
    /// All toggles on, default MLP ratio.
    pub fn new(n_heads: usize, d_head: usize) -> Self {
        Self {
            d_model: n_heads * d_head,
            n_heads,
            d_head,
            mlp_ratio: MLP_RATIO,
            rms_bias: true,
            head_scale: true,
            mlp_bias: true,
            modulus_gating: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_head == 0 || !self.d_head.is_multiple_of(3) {
            return Err(ModelError::InvalidConfig(format!(
                "d_head {} must be a positive multiple of 3",
                self.d_head
            )));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(ModelError::InvalidConfig("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// `mlp_ratio * d_model` rounded to the nearest multiple of `d_head` (at least one).
    pub fn mlp_hidden(&self) -> usize {
        let units = (self.mlp_ratio * self.d_model as f64 / self.d_head as f64).round() as usize;
        units.max(1) * self.d_head
    }
}

/// Quadratic Lagrange weights with nodes at `φ = 0, ½, 1`.
pub fn quad_basis(phi: f64) -> [f64; 3] {
    [
        2.0 * (0.5 - phi) * (1.0 - phi),
        4.0 * phi * (1.0 - phi),
        2.0 * phi * (phi - 0.5),
    ]
}

/// Three control tensors of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadParams {
    pub theta: [ComplexTensor; 3],
}

impl QuadParams {
    pub fn new(theta0: ComplexTensor, theta1: ComplexTensor, theta2: ComplexTensor) -> Self {
        assert!(
            theta0.shape() == theta1.shape() && theta1.shape() == theta2.shape(),
            "control tensors must share a shape"
        );
        Self { theta: [theta0, theta1, theta2] }
    }
}

pub fn quad_interp(qp: &QuadParams, phi: f64) -> ComplexTensor {
    let b = quad_basis(phi);
    let mut out = qp.theta[0].scale(b[0]);
    out.add_assign(&qp.theta[1].scale(b[1]));
    out.add_assign(&qp.theta[2].scale(b[2]));
    out
}

/// A parameter that is either fixed or interpolated in the diffusion coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cond {
    Plain(ParamId),
    Quad([ParamId; 3]),
}

impl Cond {
    fn register(store: &mut ParamStore, name: &str, real: bool, init: ComplexTensor, quad: bool) -> Self {
        if quad {
            Cond::Quad([0, 1, 2].map(|k| store.add(format!("{name}.q{k}"), real, init.clone())))
        } else {
            Cond::Plain(store.add(name, real, init))
        }
    }

    /// Quadratic controls need `phi`; plain parameters ignore it.
    pub fn resolve(&self, tape: &mut Tape, store: &ParamStore, phi: Option<f64>) -> Var {
        match *self {
            Cond::Plain(id) => tape.param(store, id),
            Cond::Quad(ids) => {
                let phi = phi.expect("conditioned parameter needs a diffusion coordinate");
                let b = quad_basis(phi);
                let mut acc: Option<Var> = None;
                for (k, id) in ids.iter().enumerate() {
                    let p = tape.param(store, *id);
                    let term = tape.scale(p, b[k]);
                    acc = Some(match acc {
                        Some(a) => tape.add(a, term),
                        None => term,
                    });
                }
                acc.expect("three controls")
            }
        }
    }
}

/// `x̂ ⊙ w + b` with `x̂` normalized by the root-mean-square modulus of its row.
pub fn complex_rmsnorm(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Var {
    let xh = tape.rms_normalize(x, RMS_EPS);
    let y = tape.mul(xh, w);
    match b {
        Some(b) => tape.add(y, b),
        None => y,
    }
}

/// `d_head / 3` geometric frequencies; the largest is `2π / (2·jmax + 1)`.
pub fn rope_frequencies(d_head: usize, jmax: u32) -> Vec<f64> {
    let bpd = (2 * jmax + 1) as f64;
    (0..d_head / 3)
        .map(|j| TAU / bpd * bpd.powf(-3.0 * j as f64 / d_head as f64))
        .collect()
}

/// Base rotation angles, one row per token: channel `c` of head `h` belongs to
/// axis `(c mod d_head) / (d_head / 3)`. Untagged tokens get zero angles.
pub fn rope_angles(tags: &[Option<[i32; 3]>], cfg: &BlockConfig, jmax: u32) -> ComplexTensor {
    let freqs = rope_frequencies(cfg.d_head, jmax);
    let group = cfg.d_head / 3;
    ComplexTensor::from_fn(tags.len(), cfg.d_model, |r, c| match tags[r] {
        None => C64::new(0.0, 0.0),
        Some(w) => {
            let local = c % cfg.d_head;
            C64::new(freqs[local % group] * w[local / group] as f64, 0.0)
        }
    })
}

/// `x ⊙ exp(i(θ_base + θ_offset))`; `offsets` is a real `1 x d_model` row.
pub fn rope3d(tape: &mut Tape, x: Var, base: Var, offsets: Var) -> Var {
    let theta = tape.add(base, offsets);
    let rot = tape.exp_i(theta);
    tape.mul(x, rot)
}

/// Per-head softmax weights of `Re(q kᴴ) / sqrt(2·d_head)`.
pub fn attention_weights(tape: &mut Tape, q: Var, k: Var, n_heads: usize) -> Vec<Var> {
    let d = tape.value(q).cols();
    let dh = d / n_heads;
    let scale = 1.0 / (2.0 * dh as f64).sqrt();
    (0..n_heads)
        .map(|h| {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let s = tape.matmul_adjoint(qh, kh);
            let s = tape.real_part(s);
            let s = tape.scale(s, scale);
            tape.softmax_rows(s)
        })
        .collect()
}

/// Multi-head attention over already projected queries, keys and values.
/// `head_scale` is an optional real `1 x n_heads` row.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, n_heads: usize, head_scale: Option<Var>) -> Var {
    let d = tape.value(v).cols();
    let dh = d / n_heads;
    let weights = attention_weights(tape, q, k, n_heads);
    let heads: Vec<Var> = weights
        .iter()
        .enumerate()
        .map(|(h, &a)| {
            let vh = tape.slice_cols(v, h * dh, dh);
            tape.matmul(a, vh)
        })
        .collect();
    let out = tape.concat_cols(&heads);
    match head_scale {
        Some(s) => {
            let per_channel = tape.repeat_cols(s, dh);
            tape.mul(out, per_channel)
        }
        None => out,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w_up: ParamId,
    /// Complex `d x h` for the split gate, real `2d x h` for the modulus gate.
    pub w_gate: ParamId,
    pub w_out: ParamId,
    pub bias: Option<Cond>,
}

/// Gated MLP. The split variant multiplies real and imaginary parts of the
/// update stream by the SiLU of the matching gate parts; the modulus variant
/// scales the complex update by one real gate computed from `[Re x | Im x]`.
pub fn gated_mlp(tape: &mut Tape, store: &ParamStore, x: Var, cfg: &BlockConfig, p: &MlpParams, phi: Option<f64>) -> Var {
    let w_up = tape.param(store, p.w_up);
    let w_gate = tape.param(store, p.w_gate);
    let w_out = tape.param(store, p.w_out);
    let u = tape.matmul(x, w_up);
    let hidden = if cfg.modulus_gating {
        let xr = tape.re_im(x);
        let g = tape.matmul(xr, w_gate);
        let g = tape.real_part(g);
        let g = tape.silu(g);
        tape.mul(u, g)
    } else {
        let g = tape.matmul(x, w_gate);
        let g = tape.silu(g);
        tape.mul_split(u, g)
    };
    let hidden = match p.bias {
        Some(b) => {
            let b = b.resolve(tape, store, phi);
            tape.add(hidden, b)
        }
        None => hidden,
    };
    tape.matmul(hidden, w_out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub norm1_w: ParamId,
    pub norm1_b: Option<Cond>,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub rope_q: Cond,
    pub rope_k: Cond,
    pub head_scale: Option<Cond>,
    pub norm2_w: ParamId,
    pub norm2_b: Option<Cond>,
    pub mlp: MlpParams,
}

impl BlockParams {
    /// Registers a block's parameters under `prefix`. With `quad` set, the
    /// norm biases, RoPE offsets, head scales and MLP bias become quadratic
    /// controls in the diffusion coordinate.
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BlockConfig, quad: bool, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let h = cfg.mlp_hidden();
        let ones = |n| ComplexTensor::filled(1, n, C64::new(1.0, 0.0));
        let zeros = |n| ComplexTensor::zeros(1, n);
        let name = |s: &str| format!("{prefix}.{s}");
        let norm1_w = store.add(name("norm1.w"), false, ones(d));
        let norm1_b = cfg.rms_bias.then(|| Cond::register(store, &name("norm1.b"), false, zeros(d), quad));
        let wq = store.add(name("attn.wq"), false, complex_normal(d, d, 1.0 / d as f64, rng));
        let wk = store.add(name("attn.wk"), false, complex_normal(d, d, 1.0 / d as f64, rng));
        let wv = store.add(name("attn.wv"), false, complex_normal(d, d, 1.0 / d as f64, rng));
        let wo = store.add(name("attn.wo"), false, complex_normal(d, d, 1.0 / d as f64, rng));
        let rope_q = Cond::register(store, &name("rope.q"), true, zeros(d), quad);
        let rope_k = Cond::register(store, &name("rope.k"), true, zeros(d), quad);
        let head_scale = cfg
            .head_scale
            .then(|| Cond::register(store, &name("attn.head_scale"), true, ones(cfg.n_heads), quad));
        let norm2_w = store.add(name("norm2.w"), false, ones(d));
        let norm2_b = cfg.rms_bias.then(|| Cond::register(store, &name("norm2.b"), false, zeros(d), quad));
        let w_up = store.add(name("mlp.up"), false, complex_normal(d, h, 1.0 / d as f64, rng));
        let w_gate = if cfg.modulus_gating {
            store.add(name("mlp.gate"), true, real_normal(2 * d, h, 1.0 / (2 * d) as f64, rng))
        } else {
            store.add(name("mlp.gate"), false, complex_normal(d, h, 1.0 / d as f64, rng))
        };
        let w_out = store.add(name("mlp.out"), false, complex_normal(h, d, 1.0 / h as f64, rng));
        let bias = cfg.mlp_bias.then(|| Cond::register(store, &name("mlp.b"), false, zeros(h), quad));
        Self {
            norm1_w,
            norm1_b,
            wq,
            wk,
            wv,
            wo,
            rope_q,
            rope_k,
            head_scale,
            norm2_w,
            norm2_b,
            mlp: MlpParams { w_up, w_gate, w_out, bias },
        }
    }
}

/// Pre-norm residual block: `Y = X + Attn(Norm(X))`, `Z = Y + MLP(Norm(Y))`.
///
/// `base_angles` holds the RoPE base angles for the sequence (`S x d_model`);
/// `phi` evaluates conditioned parameters.
pub fn transformer_block(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    cfg: &BlockConfig,
    p: &BlockParams,
    base_angles: Var,
    phi: Option<f64>,
) -> Var {
    let w1 = tape.param(store, p.norm1_w);
    let b1 = p.norm1_b.map(|b| b.resolve(tape, store, phi));
    let xn = complex_rmsnorm(tape, x, w1, b1);
    let wq = tape.param(store, p.wq);
    let wk = tape.param(store, p.wk);
    let wv = tape.param(store, p.wv);
    let wo = tape.param(store, p.wo);
    let q = tape.matmul(xn, wq);
    let k = tape.matmul(xn, wk);
    let v = tape.matmul(xn, wv);
    let off_q = p.rope_q.resolve(tape, store, phi);
    let off_k = p.rope_k.resolve(tape, store, phi);
    let q = rope3d(tape, q, base_angles, off_q);
    let k = rope3d(tape, k, base_angles, off_k);
    let hs = p.head_scale.map(|s| s.resolve(tape, store, phi));
    let a = attention(tape, q, k, v, cfg.n_heads, hs);
    let a = tape.matmul(a, wo);
    let y = tape.add(x, a);

    let w2 = tape.param(store, p.norm2_w);
    let b2 = p.norm2_b.map(|b| b.resolve(tape, store, phi));
    let yn = complex_rmsnorm(tape, y, w2, b2);
    let m = gated_mlp(tape, store, yn, cfg, &p.mlp, phi);
    tape.add(y, m)
}

/// One perturbable real coordinate of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Coordinate {
    param: ParamId,
    index: usize,
    imag: bool,
}

fn coordinates(store: &ParamStore) -> Vec<Coordinate> {
    let mut out = Vec::new();
    for id in store.ids() {
        for index in 0..store.value(id).len() {
            out.push(Coordinate { param: id, index, imag: false });
            if !store.is_real(id) {
                out.push(Coordinate { param: id, index, imag: true });
            }
        }
    }
    out
}

fn nudge(store: &mut ParamStore, c: Coordinate, h: f64) {
    let z = &mut store.value_mut(c.param).data_mut()[c.index];
    if c.imag {
        z.im += h;
    } else {
        z.re += h;
    }
}

/// Largest relative error `|a - n| / max(1e-8, |a| + |n|)` between analytic
/// gradients and central differences over `samples` random coordinates
/// (all coordinates if there are fewer).
pub fn grad_check(
    loss_fn: impl Fn(&ParamStore) -> (f64, ParamGrads),
    store: &ParamStore,
    samples: usize,
    step: f64,
    rng: &mut impl Rng,
) -> f64 {
    let (_, grads) = loss_fn(store);
    let coords = coordinates(store);
    let picked: Vec<Coordinate> = if coords.len() <= samples {
        coords
    } else {
        sample(rng, coords.len(), samples).into_iter().map(|i| coords[i]).collect()
    };
    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for c in picked {
        nudge(&mut work, c, step);
        let up = loss_fn(&work).0;
        nudge(&mut work, c, -2.0 * step);
        let down = loss_fn(&work).0;
        nudge(&mut work, c, step);
        let numeric = (up - down) / (2.0 * step);
        let g = grads.get(c.param).data()[c.index];
        let analytic = if c.imag { g.im } else { g.re };
        let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

