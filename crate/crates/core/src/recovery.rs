//! Exact recovery of grid coordinates from truncated Fourier coefficients.
//!
//! Recovery runs per species in up to three stages:
//!
//! 1. pick the `n` largest values of the density evaluated on the snapping grid;
//! 2. pick maxima one at a time, subtracting each atom's exact contribution;
//! 3. jointly refine all positions by Gauss-Newton on the stacked real and
//!    imaginary residual, solved with an SVD pseudoinverse, then snap to the grid.
//!
//! Every stage verifies its answer by re-encoding the coordinates and
//! comparing against the input coefficients.

use std::cmp::Ordering;
use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reciprocal::{encode_continuous_column, encode_with_table, twiddles, FourierRepr, WaveSet, NUM_SLOTS};

/// Stage-2 stops when no grid value reaches half a unit occupancy.
const STAGE2_MIN_DENSITY: f64 = 0.5;

/// Newton runs per species before giving up; each restart relocates one atom.
const STAGE3_ATTEMPTS: usize = 6;

/// How a candidate coordinate set is accepted against the target coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Acceptance {
    /// Max-abs coefficient residual at most this value. Used for exact data.
    Absolute(f64),
    /// Max-abs residual at most this fraction of the atom count. Used for
    /// approximate (decoded) coefficients; stage 3 then snaps even without
    /// reaching the Newton tolerance.
    RelativeToCount(f64),
}

impl Acceptance {
    fn threshold(&self, n: usize) -> f64 {
        match *self {
            Acceptance::Absolute(t) => t,
            Acceptance::RelativeToCount(r) => r * n.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    /// Grid points per dimension; equals the snapping denominator.
    pub gpd: u32,
    pub acceptance: Acceptance,
    /// Max-abs residual at which Newton refinement is considered converged.
    pub newton_tol: f64,
    pub max_newton_iters: u32,
    /// Seeds the stage-3 perturbation.
    pub seed: u64,
    /// Tolerance for the zero-frequency coefficient to count as an integer.
    pub multiplicity_tol: f64,
}

impl RecoveryConfig {
    pub fn new(gpd: u32) -> Self {
        Self {
            gpd,
            acceptance: Acceptance::Absolute(1e-6),
            newton_tol: 1e-8,
            max_newton_iters: 10,
            seed: 0,
            multiplicity_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
    Three,
    Failed,
}

impl Stage {
    pub fn number(&self) -> Option<u8> {
        match self {
            Stage::One => Some(1),
            Stage::Two => Some(2),
            Stage::Three => Some(3),
            Stage::Failed => None,
        }
    }

    pub fn is_success(&self) -> bool {
        !matches!(self, Stage::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryResult {
    /// Grid numerators over `gpd`; empty when recovery failed.
    pub coords: Vec<[u32; 3]>,
    pub stage: Stage,
    pub newton_iters: u32,
    /// Final max-abs Fourier residual of the returned (or last tried) coordinates.
    pub residual: f64,
}

/// Real density sampled on a `gpd³` grid, index `(x * gpd + y) * gpd + z`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub gpd: u32,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn value(&self, p: [u32; 3]) -> f64 {
        self.values[self.flat(p)]
    }

    pub fn flat(&self, p: [u32; 3]) -> usize {
        let g = self.gpd as usize;
        (p[0] as usize * g + p[1] as usize) * g + p[2] as usize
    }

    pub fn point(&self, flat: usize) -> [u32; 3] {
        let g = self.gpd as usize;
        [(flat / (g * g)) as u32, ((flat / g) % g) as u32, (flat % g) as u32]
    }

    fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// `ρ(x) = Re Σ_w F_w exp(2πi wᵀx / gpd)` on every grid point, without normalization.
///
/// Evaluated as three successive one-dimensional sums, which works for any
/// wave set inside the `jmax` cube.
pub fn density_grid(column: &[Complex64], ws: &WaveSet, gpd: u32) -> DensityGrid {
    assert_eq!(column.len(), ws.len(), "one coefficient per wave vector");
    assert!(gpd as usize >= ws.bpd(), "grid must resolve the retained band");
    let g = gpd as usize;
    let j = ws.jmax() as i32;
    let bpd = ws.bpd();
    // exp(+2πi m / g)
    let plus: Vec<Complex64> = twiddles(gpd).iter().map(|c| c.conj()).collect();
    let phase = |w: i32, k: usize| plus[((w as i64 * k as i64).rem_euclid(g as i64)) as usize];

    // a[(wx, wy)][z]
    let zero = Complex64::new(0.0, 0.0);
    let mut a = vec![zero; bpd * bpd * g];
    for (w, &f) in ws.vectors().iter().zip(column) {
        if f == zero {
            continue;
        }
        let base = (((w[0] + j) as usize) * bpd + (w[1] + j) as usize) * g;
        for z in 0..g {
            a[base + z] += f * phase(w[2], z);
        }
    }
    // b[wx][y][z]
    let mut b = vec![zero; bpd * g * g];
    for wx in 0..bpd {
        for wy in 0..bpd {
            let src = &a[(wx * bpd + wy) * g..(wx * bpd + wy + 1) * g];
            if src.iter().all(|v| *v == zero) {
                continue;
            }
            for y in 0..g {
                let p = phase(wy as i32 - j, y);
                let dst = &mut b[(wx * g + y) * g..(wx * g + y + 1) * g];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s * p;
                }
            }
        }
    }
    let mut values = vec![0.0; g * g * g];
    for wx in 0..bpd {
        let src = &b[wx * g * g..(wx + 1) * g * g];
        if src.iter().all(|v| *v == zero) {
            continue;
        }
        for x in 0..g {
            let p = phase(wx as i32 - j, x);
            let dst = &mut values[x * g * g..(x + 1) * g * g];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s.re * p.re - s.im * p.im;
            }
        }
    }
    DensityGrid { gpd, values }
}

/// Outcome of one stage: success, or a best-effort coordinate set.
#[derive(Debug, Clone, PartialEq)]
pub enum StageOutcome {
    Success { coords: Vec<[u32; 3]>, residual: f64 },
    Failure { best_effort: Vec<[u32; 3]>, residual: f64 },
}

impl StageOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self, StageOutcome::Success { .. })
    }

    pub fn coords(&self) -> &[[u32; 3]] {
        match self {
            StageOutcome::Success { coords, .. } => coords,
            StageOutcome::Failure { best_effort, .. } => best_effort,
        }
    }
}

fn max_abs_residual(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

fn verify(column: &[Complex64], ws: &WaveSet, coords: &[[u32; 3]], gpd: u32, table: &[Complex64]) -> f64 {
    let enc = encode_with_table(coords, gpd, ws, table);
    max_abs_residual(&enc, column)
}

fn outcome(coords: Vec<[u32; 3]>, residual: f64, threshold: f64) -> StageOutcome {
    if residual <= threshold {
        StageOutcome::Success { coords, residual }
    } else {
        StageOutcome::Failure { best_effort: coords, residual }
    }
}

/// Stage 1: the `n` grid points of largest density. Ties go to the smaller
/// lexicographic grid index.
pub fn stage1_peaks(
    column: &[Complex64],
    ws: &WaveSet,
    n: usize,
    gpd: u32,
    acceptance: Acceptance,
) -> StageOutcome {
    let table = twiddles(gpd);
    if n == 0 {
        let r = verify(column, ws, &[], gpd, &table);
        return outcome(Vec::new(), r, acceptance.threshold(0));
    }
    let grid = density_grid(column, ws, gpd);
    let mut idx: Vec<usize> = (0..grid.values.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        grid.values[*b]
            .partial_cmp(&grid.values[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let n_take = n.min(idx.len());
    if n_take < idx.len() {
        idx.select_nth_unstable_by(n_take - 1, cmp);
        idx.truncate(n_take);
    }
    idx.sort_unstable_by(cmp);
    let coords: Vec<[u32; 3]> = idx.iter().map(|&i| grid.point(i)).collect();
    let r = verify(column, ws, &coords, gpd, &table);
    outcome(coords, r, acceptance.threshold(n))
}

/// Stage 2: greedy argmax picking with exact subtraction of each picked atom.
///
/// Subtracting `exp(-2πi wᵀf_a)` from the coefficients changes the density by
/// the single-atom kernel shifted to `f_a`, so the density is updated in place.
/// When no value reaches half an atom the stage fails, but keeps picking to
/// hand a full best-effort set to stage 3.
pub fn stage2_greedy(
    column: &[Complex64],
    ws: &WaveSet,
    n: usize,
    gpd: u32,
    acceptance: Acceptance,
) -> StageOutcome {
    let table = twiddles(gpd);
    if n == 0 {
        let r = verify(column, ws, &[], gpd, &table);
        return outcome(Vec::new(), r, acceptance.threshold(0));
    }
    let mut grid = density_grid(column, ws, gpd);
    let ones = vec![Complex64::new(1.0, 0.0); ws.len()];
    let kernel = density_grid(&ones, ws, gpd);
    let g = gpd as usize;
    let mut coords = Vec::with_capacity(n);
    let mut aborted = false;
    for _ in 0..n {
        let best = grid.argmax();
        if grid.values[best] < STAGE2_MIN_DENSITY {
            aborted = true;
        }
        let p = grid.point(best);
        coords.push(p);
        for x in 0..g {
            let kx = (x + g - p[0] as usize) % g;
            for y in 0..g {
                let ky = (y + g - p[1] as usize) % g;
                let row = (x * g + y) * g;
                let krow = (kx * g + ky) * g;
                let shift = p[2] as usize;
                let dst = &mut grid.values[row..row + g];
                let src = &kernel.values[krow..krow + g];
                for (d, k) in dst[shift..].iter_mut().zip(&src[..g - shift]) {
                    *d -= k;
                }
                for (d, k) in dst[..shift].iter_mut().zip(&src[g - shift..]) {
                    *d -= k;
                }
            }
        }
    }
    let r = verify(column, ws, &coords, gpd, &table);
    if aborted {
        StageOutcome::Failure { best_effort: coords, residual: r }
    } else {
        outcome(coords, r, acceptance.threshold(n))
    }
}

/// Result of Newton refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOutcome {
    pub outcome: StageOutcome,
    pub iterations: u32,
    /// Max-abs residual of the continuous coordinates when the loop ended.
    pub continuous_residual: f64,
}

/// Stacked real Jacobian of the coefficients w.r.t. flattened coordinates:
/// rows `[Re; Im]` over wave vectors, columns `(atom, axis)`.
pub fn coefficient_jacobian(coords: &[[f64; 3]], ws: &WaveSet) -> DMatrix<f64> {
    let m = ws.len();
    let mut d = DMatrix::zeros(2 * m, 3 * coords.len());
    for (a, f) in coords.iter().enumerate() {
        for (r, w) in ws.vectors().iter().enumerate() {
            let t = w[0] as f64 * f[0] + w[1] as f64 * f[1] + w[2] as f64 * f[2];
            let e = Complex64::from_polar(1.0, -TAU * t);
            // -2πi w_k e
            let base = Complex64::new(0.0, -TAU) * e;
            for k in 0..3 {
                let v = base * w[k] as f64;
                d[(r, 3 * a + k)] = v.re;
                d[(m + r, 3 * a + k)] = v.im;
            }
        }
    }
    d
}

/// Stage 3: Gauss-Newton refinement `U ← U - D⁺ [F(U) - F]`, then snap.
///
/// `init` is used as given; callers apply any perturbation beforehand.
pub fn stage3_newton(
    column: &[Complex64],
    ws: &WaveSet,
    init: &[[f64; 3]],
    cfg: &RecoveryConfig,
) -> NewtonOutcome {
    let table = twiddles(cfg.gpd);
    let n = init.len();
    let threshold = cfg.acceptance.threshold(n);
    let m = ws.len();
    let mut u: Vec<[f64; 3]> = init.to_vec();
    let mut iterations = 0;
    let mut res;
    loop {
        let enc = encode_continuous_column(&u, ws);
        res = max_abs_residual(&enc, column);
        if !res.is_finite() {
            break;
        }
        if res <= cfg.newton_tol {
            break;
        }
        if iterations >= cfg.max_newton_iters || n == 0 {
            break;
        }
        let d = coefficient_jacobian(&u, ws);
        let mut rhs = DVector::zeros(2 * m);
        for (r, (e, t)) in enc.iter().zip(column).enumerate() {
            let diff = e - t;
            rhs[r] = diff.re;
            rhs[m + r] = diff.im;
        }
        let Some(delta) = pseudo_solve(d, &rhs) else { break };
        for (a, p) in u.iter_mut().enumerate() {
            for k in 0..3 {
                p[k] -= delta[3 * a + k];
            }
        }
        iterations += 1;
    }
    // The snapped set is verified exactly, so a slowly converging run that
    // already sits in the right cell is accepted too.
    let snapped = snap_continuous(&u, cfg.gpd);
    let r = verify(column, ws, &snapped, cfg.gpd, &table);
    let outcome = if r <= threshold {
        StageOutcome::Success { coords: snapped, residual: r }
    } else {
        StageOutcome::Failure { best_effort: snapped, residual: r }
    };
    NewtonOutcome { outcome, iterations, continuous_residual: res }
}

/// Least-squares solve through the SVD pseudoinverse, dropping singular
/// values below `1e-10` of the largest.
///
/// The tall system is first reduced by a QR factorization; `R` has the same
/// singular values as `D`, and its SVD is much cheaper.
fn pseudo_solve(d: DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if d.ncols() > d.nrows() {
        let svd = d.svd(true, true);
        let smax = svd.singular_values.max();
        return if smax > 0.0 { svd.solve(rhs, 1e-10 * smax).ok() } else { None };
    }
    let qr = d.qr();
    let qtb = qr.q().tr_mul(rhs);
    let svd = qr.r().svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) {
        return None;
    }
    svd.solve(&qtb, 1e-10 * smax).ok()
}

fn snap_continuous(u: &[[f64; 3]], gpd: u32) -> Vec<[u32; 3]> {
    let g = gpd as i64;
    u.iter()
        .map(|p| {
            p.map(|x| {
                let k = if x.is_finite() { (x * gpd as f64).round() as i64 } else { 0 };
                k.rem_euclid(g) as u32
            })
        })
        .collect()
}

fn grid_to_fractional(coords: &[[u32; 3]], gpd: u32) -> Vec<[f64; 3]> {
    let g = gpd as f64;
    coords.iter().map(|p| p.map(|k| k as f64 / g)).collect()
}

/// Uniform perturbation in `±1/(4·gpd)` per component.
pub fn perturb(coords: &[[u32; 3]], gpd: u32, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let h = 1.0 / (4.0 * gpd as f64);
    grid_to_fractional(coords, gpd)
        .into_iter()
        .map(|p| p.map(|x| x + rng.random_range(-h..=h)))
        .collect()
}

/// Full stage 1 → 2 → 3 escalation for one species with a known atom count.
pub fn recover_species(
    column: &[Complex64],
    ws: &WaveSet,
    n: usize,
    cfg: &RecoveryConfig,
    rng: &mut impl Rng,
) -> RecoveryResult {
    let s1 = stage1_peaks(column, ws, n, cfg.gpd, cfg.acceptance);
    if let StageOutcome::Success { coords, residual } = s1 {
        return RecoveryResult { coords, stage: Stage::One, newton_iters: 0, residual };
    }
    let s2 = stage2_greedy(column, ws, n, cfg.gpd, cfg.acceptance);
    let best = match s2 {
        StageOutcome::Success { coords, residual } => {
            return RecoveryResult { coords, stage: Stage::Two, newton_iters: 0, residual };
        }
        StageOutcome::Failure { best_effort, .. } => best_effort,
    };
    let mut start = best;
    let mut total_iters = 0;
    let mut last_residual = f64::INFINITY;
    for attempt in 0..STAGE3_ATTEMPTS {
        if attempt > 0 {
            start = relocate_worst(column, ws, &start, cfg.gpd);
        }
        let init = perturb(&start, cfg.gpd, rng);
        let newton = stage3_newton(column, ws, &init, cfg);
        total_iters += newton.iterations;
        match newton.outcome {
            StageOutcome::Success { coords, residual } => {
                return RecoveryResult {
                    coords,
                    stage: Stage::Three,
                    newton_iters: total_iters,
                    residual,
                };
            }
            StageOutcome::Failure { best_effort, residual } => {
                last_residual = residual;
                start = best_effort;
            }
        }
    }
    RecoveryResult {
        coords: Vec::new(),
        stage: Stage::Failed,
        newton_iters: total_iters,
        residual: last_residual,
    }
}

/// Moves the atom that the residual density likes least onto the residual's
/// strongest peak. Used to restart Newton from a different basin.
fn relocate_worst(column: &[Complex64], ws: &WaveSet, coords: &[[u32; 3]], gpd: u32) -> Vec<[u32; 3]> {
    let mut out = coords.to_vec();
    if out.is_empty() {
        return out;
    }
    let enc = encode_with_table(coords, gpd, ws, &twiddles(gpd));
    let diff: Vec<Complex64> = column.iter().zip(&enc).map(|(t, e)| t - e).collect();
    let grid = density_grid(&diff, ws, gpd);
    let (worst, _) = out
        .iter()
        .enumerate()
        .map(|(i, p)| (i, grid.value(*p)))
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    let mut best = None;
    for (i, &v) in grid.values.iter().enumerate() {
        let p = grid.point(i);
        if out.contains(&p) {
            continue;
        }
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((p, v));
        }
    }
    if let Some((p, _)) = best {
        out[worst] = p;
    }
    out
}

/// Atom count encoded in a zero-frequency coefficient.
pub fn multiplicity(f0: Complex64, slot: usize, tol: f64) -> Result<usize> {
    let rounded = f0.re.round();
    if !(rounded >= 0.0) || (f0.re - rounded).abs() > tol || f0.im.abs() > tol {
        return Err(Error::NonIntegerMultiplicity { slot, value: f0.re });
    }
    Ok(rounded as usize)
}

/// Recovers every slot independently; counts come from the zero-frequency row.
pub fn recover(fr: &FourierRepr, cfg: &RecoveryConfig) -> Result<Vec<RecoveryResult>> {
    let counts = (0..NUM_SLOTS)
        .map(|s| multiplicity(fr.multiplicity(s), s, cfg.multiplicity_tol))
        .collect::<Result<Vec<_>>>()?;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(slot, &n)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(slot as u64);
            recover_species(&fr.column(slot), &fr.wave_set, n, cfg, &mut rng)
        })
        .collect())
}
