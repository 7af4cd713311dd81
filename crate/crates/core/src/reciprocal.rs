//! Truncated Fourier transform of species-resolved atomic density.
//!
//! Each atom is a unit Dirac mass, so for species `z` and wave vector `w`
//! the coefficient is `F_w = Σ_a exp(-2πi wᵀ f_a)`. Coordinates live on a
//! rational grid, which lets every phase be reduced exactly in integers
//! before touching floating point.

use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::crystal::{Crystal, SymmetryOp};
use crate::error::{Error, Result};

/// Number of species columns in every representation.
pub const NUM_SLOTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truncation {
    /// `‖w‖_∞ ≤ jmax`
    Cubic,
    /// `‖w‖₂ ≤ jmax`
    Spherical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct WaveSetSpec {
    truncation: Truncation,
    jmax: u32,
}

/// Retained wave vectors in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "WaveSetSpec", into = "WaveSetSpec")]
pub struct WaveSet {
    truncation: Truncation,
    jmax: u32,
    vectors: Vec<[i32; 3]>,
    /// Dense lookup over the bounding cube; `usize::MAX` marks absent vectors.
    lookup: Vec<usize>,
}

impl From<WaveSetSpec> for WaveSet {
    fn from(s: WaveSetSpec) -> Self {
        build_wave_set(s.truncation, s.jmax)
    }
}

impl From<WaveSet> for WaveSetSpec {
    fn from(w: WaveSet) -> Self {
        WaveSetSpec { truncation: w.truncation, jmax: w.jmax }
    }
}

pub fn build_wave_set(truncation: Truncation, jmax: u32) -> WaveSet {
    let j = jmax as i32;
    let side = (2 * jmax + 1) as usize;
    let mut vectors = Vec::new();
    let mut lookup = vec![usize::MAX; side * side * side];
    for x in -j..=j {
        for y in -j..=j {
            for z in -j..=j {
                let keep = match truncation {
                    Truncation::Cubic => true,
                    Truncation::Spherical => x * x + y * y + z * z <= j * j,
                };
                if keep {
                    let cube = (((x + j) as usize * side) + (y + j) as usize) * side + (z + j) as usize;
                    lookup[cube] = vectors.len();
                    vectors.push([x, y, z]);
                }
            }
        }
    }
    WaveSet { truncation, jmax, vectors, lookup }
}

impl WaveSet {
    pub fn truncation(&self) -> Truncation {
        self.truncation
    }

    pub fn jmax(&self) -> u32 {
        self.jmax
    }

    pub fn vectors(&self) -> &[[i32; 3]] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Basis functions per dimension.
    pub fn bpd(&self) -> usize {
        2 * self.jmax as usize + 1
    }

    pub fn index_of(&self, w: [i32; 3]) -> Option<usize> {
        let j = self.jmax as i32;
        if w.iter().any(|&c| c < -j || c > j) {
            return None;
        }
        let side = self.bpd();
        let cube = (((w[0] + j) as usize * side) + (w[1] + j) as usize) * side + (w[2] + j) as usize;
        match self.lookup[cube] {
            usize::MAX => None,
            i => Some(i),
        }
    }

    pub fn zero_index(&self) -> usize {
        self.index_of([0, 0, 0]).expect("zero vector always retained")
    }
}

/// `exp(-2πi k / n)` for `k = 0..n`.
pub(crate) fn twiddles(n: u32) -> Vec<Complex64> {
    (0..n)
        .map(|k| {
            let (s, c) = (TAU * k as f64 / n as f64).sin_cos();
            Complex64::new(c, -s)
        })
        .collect()
}

/// Coefficients of one species from grid numerators over `denominator`.
pub fn encode_grid_column(coords: &[[u32; 3]], denominator: u32, ws: &WaveSet) -> Vec<Complex64> {
    let table = twiddles(denominator);
    encode_with_table(coords, denominator, ws, &table)
}

pub(crate) fn encode_with_table(
    coords: &[[u32; 3]],
    denominator: u32,
    ws: &WaveSet,
    table: &[Complex64],
) -> Vec<Complex64> {
    let d = denominator as i64;
    ws.vectors
        .iter()
        .map(|w| {
            coords.iter().fold(Complex64::new(0.0, 0.0), |acc, n| {
                let p = w[0] as i64 * n[0] as i64 + w[1] as i64 * n[1] as i64 + w[2] as i64 * n[2] as i64;
                acc + table[p.rem_euclid(d) as usize]
            })
        })
        .collect()
}

/// Coefficients of one species at arbitrary (continuous) fractional positions.
pub fn encode_continuous_column(coords: &[[f64; 3]], ws: &WaveSet) -> Vec<Complex64> {
    ws.vectors
        .iter()
        .map(|w| {
            coords.iter().fold(Complex64::new(0.0, 0.0), |acc, f| {
                let t = w[0] as f64 * f[0] + w[1] as f64 * f[1] + w[2] as f64 * f[2];
                acc + Complex64::from_polar(1.0, -TAU * t)
            })
        })
        .collect()
}

/// Coefficient matrix with rows in wave-set order and one column per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierRepr {
    pub wave_set: WaveSet,
    /// Row-major `|W| x 6`.
    pub coeffs: Vec<Complex64>,
    pub slot_species: [Option<u8>; NUM_SLOTS],
}

impl FourierRepr {
    pub fn zeros(wave_set: WaveSet) -> Self {
        let n = wave_set.len() * NUM_SLOTS;
        Self { wave_set, coeffs: vec![Complex64::new(0.0, 0.0); n], slot_species: [None; NUM_SLOTS] }
    }

    pub fn get(&self, row: usize, slot: usize) -> Complex64 {
        self.coeffs[row * NUM_SLOTS + slot]
    }

    pub fn set(&mut self, row: usize, slot: usize, v: Complex64) {
        self.coeffs[row * NUM_SLOTS + slot] = v;
    }

    pub fn rows(&self) -> usize {
        self.wave_set.len()
    }

    pub fn column(&self, slot: usize) -> Vec<Complex64> {
        (0..self.rows()).map(|r| self.get(r, slot)).collect()
    }

    pub fn set_column(&mut self, slot: usize, col: &[Complex64]) {
        assert_eq!(col.len(), self.rows());
        for (r, &v) in col.iter().enumerate() {
            self.set(r, slot, v);
        }
    }

    /// Zero-frequency coefficient of a slot: the atom count for exact data.
    pub fn multiplicity(&self, slot: usize) -> Complex64 {
        self.get(self.wave_set.zero_index(), slot)
    }

    pub fn max_abs_diff(&self, other: &FourierRepr) -> f64 {
        assert_eq!(self.coeffs.len(), other.coeffs.len());
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Transform with species `i` placed in slot `i`.
pub fn fourier_forward(c: &Crystal, ws: &WaveSet) -> FourierRepr {
    let slots: Vec<usize> = (0..c.species.len()).collect();
    fourier_forward_with_slots(c, ws, &slots)
}

/// Transform with species `i` placed in slot `slots[i]`.
pub fn fourier_forward_with_slots(c: &Crystal, ws: &WaveSet, slots: &[usize]) -> FourierRepr {
    assert_eq!(slots.len(), c.species.len(), "one slot per species");
    let table = twiddles(c.denominator);
    let mut fr = FourierRepr::zeros(ws.clone());
    for (i, list) in c.coords.iter().enumerate() {
        let col = encode_with_table(list, c.denominator, ws, &table);
        fr.set_column(slots[i], &col);
        fr.slot_species[slots[i]] = Some(c.species.entries[i].0);
    }
    fr
}

/// Index of `Mᵀ w` for every row, or the first vector that leaves the set.
fn rotated_rows(ws: &WaveSet, op: &SymmetryOp) -> Result<Vec<usize>> {
    let m = op.rotation();
    ws.vectors
        .iter()
        .map(|w| {
            let mut t = [0i32; 3];
            for (c, out) in t.iter_mut().enumerate() {
                *out = m[0][c] * w[0] + m[1][c] * w[1] + m[2][c] * w[2];
            }
            ws.index_of(t).ok_or(Error::WaveSetNotClosed { w: *w })
        })
        .collect()
}

/// `exp(-2πi wᵀδ)` per row, reduced exactly over twelfths.
fn translation_phases(ws: &WaveSet, op: &SymmetryOp) -> Vec<Complex64> {
    let t = op.translation_twelfths();
    let table = twiddles(12);
    ws.vectors
        .iter()
        .map(|w| {
            let k = w[0] as i64 * t[0] as i64 + w[1] as i64 * t[1] as i64 + w[2] as i64 * t[2] as i64;
            table[k.rem_euclid(12) as usize]
        })
        .collect()
}

/// `F'_w = exp(-2πi wᵀδ) F_{Mᵀw}`.
pub fn symmetry_transform(fr: &FourierRepr, op: &SymmetryOp) -> Result<FourierRepr> {
    let rows = rotated_rows(&fr.wave_set, op)?;
    let phases = translation_phases(&fr.wave_set, op);
    let mut out = fr.clone();
    for (r, (&src, &ph)) in rows.iter().zip(&phases).enumerate() {
        for s in 0..NUM_SLOTS {
            out.set(r, s, ph * fr.get(src, s));
        }
    }
    Ok(out)
}

/// Max over rows and slots of `|F_w - exp(-2πi wᵀδ) F_{Mᵀw}|`.
pub fn symmetry_residual(fr: &FourierRepr, op: &SymmetryOp) -> Result<f64> {
    let transformed = symmetry_transform(fr, op)?;
    Ok(fr.max_abs_diff(&transformed))
}
