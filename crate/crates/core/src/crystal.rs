//! Crystal data model on a rational fractional-coordinate grid.

use std::collections::HashSet;
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{log_to_lattice, LatticeLog, LatticeMatrix};

pub const MAX_SPECIES: usize = 6;
pub const MAX_ATOMIC_NUMBER: u8 = 83;

/// Admissible symmetry translation components, in twelfths: 0, 1/6, 1/4, 1/3, 1/2.
pub const ADMISSIBLE_TWELFTHS: [u8; 5] = [0, 2, 3, 4, 6];

/// Ordered `(atomic_number, count)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpeciesSet {
    pub entries: Vec<(u8, u32)>,
}

impl SpeciesSet {
    pub fn new(entries: Vec<(u8, u32)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn atomic_numbers(&self) -> impl Iterator<Item = u8> + '_ {
        self.entries.iter().map(|&(z, _)| z)
    }
}

/// A crystal with coordinates stored as integer numerators over `denominator`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crystal {
    pub lattice: LatticeMatrix,
    pub species: SpeciesSet,
    pub coords: Vec<Vec<[u32; 3]>>,
    pub denominator: u32,
}

impl Crystal {
    /// Checked constructor.
    pub fn new(
        lattice: LatticeMatrix,
        species: SpeciesSet,
        coords: Vec<Vec<[u32; 3]>>,
        denominator: u32,
    ) -> Result<Self> {
        let c = Self::new_unchecked(lattice, species, coords, denominator);
        let violations = validate_crystal(&c);
        if violations.is_empty() {
            Ok(c)
        } else {
            let msg: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            Err(Error::InvalidCrystal(msg.join("; ")))
        }
    }

    pub fn new_unchecked(
        lattice: LatticeMatrix,
        species: SpeciesSet,
        coords: Vec<Vec<[u32; 3]>>,
        denominator: u32,
    ) -> Self {
        Self { lattice, species, coords, denominator }
    }

    /// Builds a crystal from raw fractional coordinates, snapping each species.
    pub fn from_fractional(
        lattice: LatticeMatrix,
        atomic_numbers: &[u8],
        raw: &[Vec<[f64; 3]>],
        denominator: u32,
    ) -> Result<Self> {
        let mut coords = Vec::with_capacity(raw.len());
        for (i, list) in raw.iter().enumerate() {
            coords.push(snap_list(list, denominator).map_err(|e| match e {
                Error::CollisionAfterSnap { point, .. } => {
                    Error::CollisionAfterSnap { species: i, point }
                }
                other => other,
            })?);
        }
        let entries = atomic_numbers
            .iter()
            .zip(&coords)
            .map(|(&z, c)| (z, c.len() as u32))
            .collect();
        Self::new(lattice, SpeciesSet::new(entries), coords, denominator)
    }

    pub fn num_atoms(&self) -> usize {
        self.coords.iter().map(Vec::len).sum()
    }

    /// Fractional coordinates of species `i` as floats.
    pub fn fractional(&self, i: usize) -> Vec<[f64; 3]> {
        let d = self.denominator as f64;
        self.coords[i]
            .iter()
            .map(|n| [n[0] as f64 / d, n[1] as f64 / d, n[2] as f64 / d])
            .collect()
    }

    /// Same crystal with every species' coordinate list sorted, for set comparison.
    pub fn canonical(&self) -> Self {
        let mut c = self.clone();
        for list in &mut c.coords {
            list.sort_unstable();
        }
        c
    }
}

/// Rounds each component to the nearest `k / denominator`, wrapped into `[0, 1)`.
///
/// Returns numerators. Two points landing on the same grid node are an error.
pub fn snap_coords(raw: &[[f64; 3]], denominator: u32) -> Result<Vec<[u32; 3]>> {
    snap_list(raw, denominator)
}

fn snap_list(raw: &[[f64; 3]], denominator: u32) -> Result<Vec<[u32; 3]>> {
    check_denominator(denominator)?;
    let d = denominator as i64;
    let mut seen = HashSet::with_capacity(raw.len());
    let mut out = Vec::with_capacity(raw.len());
    for p in raw {
        let mut n = [0u32; 3];
        for k in 0..3 {
            if !p[k].is_finite() {
                return Err(Error::NonFiniteCoordinate);
            }
            let r = (p[k] * denominator as f64).round() as i64;
            n[k] = r.rem_euclid(d) as u32;
        }
        if !seen.insert(n) {
            return Err(Error::CollisionAfterSnap { species: 0, point: n });
        }
        out.push(n);
    }
    Ok(out)
}

pub(crate) fn check_denominator(denominator: u32) -> Result<()> {
    if denominator == 0 || !denominator.is_multiple_of(12) {
        Err(Error::InvalidDenominator(denominator))
    } else {
        Ok(())
    }
}

/// A crystal invariant violation; data, not an error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoSpecies,
    SpeciesLimitExceeded(usize),
    AtomicNumberOutOfRange(u8),
    AtomicNumbersNotIncreasing,
    ZeroCount { species: usize },
    CountMismatch { species: usize, declared: u32, actual: usize },
    CoordListMismatch { species: usize, lists: usize },
    InvalidDenominator(u32),
    OffGrid { species: usize, point: [u32; 3] },
    DuplicateSite { species: usize, point: [u32; 3] },
    BadLattice,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoSpecies => write!(f, "no species"),
            Violation::SpeciesLimitExceeded(n) => {
                write!(f, "species limit exceeded ({n} > {MAX_SPECIES})")
            }
            Violation::AtomicNumberOutOfRange(z) => write!(f, "atomic number {z} out of range"),
            Violation::AtomicNumbersNotIncreasing => {
                write!(f, "atomic numbers not strictly increasing")
            }
            Violation::ZeroCount { species } => write!(f, "species {species} has zero atoms"),
            Violation::CountMismatch { species, declared, actual } => write!(
                f,
                "species {species} declares {declared} atoms but lists {actual}"
            ),
            Violation::CoordListMismatch { species, lists } => {
                write!(f, "{species} species but {lists} coordinate lists")
            }
            Violation::InvalidDenominator(d) => write!(f, "invalid denominator {d}"),
            Violation::OffGrid { species, point } => {
                write!(f, "off-grid coordinate {point:?} in species {species}")
            }
            Violation::DuplicateSite { species, point } => {
                write!(f, "duplicate site {point:?} in species {species}")
            }
            Violation::BadLattice => write!(f, "lattice not finite and right-handed"),
        }
    }
}

/// Returns every violated invariant; an empty list means the crystal is valid.
pub fn validate_crystal(c: &Crystal) -> Vec<Violation> {
    let mut v = Vec::new();
    let n = c.species.len();
    if n == 0 {
        v.push(Violation::NoSpecies);
    }
    if n > MAX_SPECIES {
        v.push(Violation::SpeciesLimitExceeded(n));
    }
    for &(z, _) in &c.species.entries {
        if z == 0 || z > MAX_ATOMIC_NUMBER {
            v.push(Violation::AtomicNumberOutOfRange(z));
        }
    }
    if c.species.entries.windows(2).any(|w| w[0].0 >= w[1].0) {
        v.push(Violation::AtomicNumbersNotIncreasing);
    }
    if check_denominator(c.denominator).is_err() {
        v.push(Violation::InvalidDenominator(c.denominator));
    }
    let lat = c.lattice;
    if !lat.0.iter().all(|x| x.is_finite()) || !(lat.det() > 0.0) {
        v.push(Violation::BadLattice);
    }
    if c.coords.len() != n {
        v.push(Violation::CoordListMismatch { species: n, lists: c.coords.len() });
    }
    for (i, list) in c.coords.iter().enumerate() {
        if let Some(&(_, declared)) = c.species.entries.get(i) {
            if declared == 0 {
                v.push(Violation::ZeroCount { species: i });
            }
            if declared as usize != list.len() {
                v.push(Violation::CountMismatch { species: i, declared, actual: list.len() });
            }
        }
        let mut seen = HashSet::with_capacity(list.len());
        for &p in list {
            if p.iter().any(|&k| k >= c.denominator) {
                v.push(Violation::OffGrid { species: i, point: p });
            }
            if !seen.insert(p) {
                v.push(Violation::DuplicateSite { species: i, point: p });
            }
        }
    }
    v
}

/// Integer rotation (det ±1) plus a translation from the admissible set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SymmetryOp {
    rotation: [[i32; 3]; 3],
    /// Translation components in twelfths of a lattice vector.
    translation: [u8; 3],
}

impl SymmetryOp {
    pub fn new(rotation: [[i32; 3]; 3], translation_twelfths: [u8; 3]) -> Result<Self> {
        let det = det3(&rotation);
        if det.abs() != 1 {
            return Err(Error::InvalidSymmetryOp(format!("rotation determinant {det}")));
        }
        if let Some(t) = translation_twelfths
            .iter()
            .find(|t| !ADMISSIBLE_TWELFTHS.contains(t))
        {
            return Err(Error::InvalidSymmetryOp(format!("translation {t}/12 not admissible")));
        }
        Ok(Self { rotation, translation: translation_twelfths })
    }

    pub fn identity() -> Self {
        Self { rotation: [[1, 0, 0], [0, 1, 0], [0, 0, 1]], translation: [0; 3] }
    }

    pub fn translation_only(twelfths: [u8; 3]) -> Result<Self> {
        Self::new([[1, 0, 0], [0, 1, 0], [0, 0, 1]], twelfths)
    }

    pub fn rotation(&self) -> &[[i32; 3]; 3] {
        &self.rotation
    }

    pub fn translation_twelfths(&self) -> [u8; 3] {
        self.translation
    }

    pub fn translation(&self) -> [f64; 3] {
        self.translation.map(|t| t as f64 / 12.0)
    }

    /// Random signed-permutation rotation with an admissible translation.
    pub fn random_signed_permutation<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut perm = [0usize, 1, 2];
        for i in (1..3).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let mut rotation = [[0i32; 3]; 3];
        for (row, &col) in perm.iter().enumerate() {
            rotation[row][col] = if rng.random_bool(0.5) { 1 } else { -1 };
        }
        let translation =
            [0; 3].map(|_: u8| ADMISSIBLE_TWELFTHS[rng.random_range(0..ADMISSIBLE_TWELFTHS.len())]);
        Self { rotation, translation }
    }
}

fn det3(m: &[[i32; 3]; 3]) -> i32 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// `f' = M f + δ (mod 1)` applied to every atom; exact on grids divisible by 12.
pub fn apply_symmetry(c: &Crystal, op: &SymmetryOp) -> Result<Crystal> {
    let d = c.denominator as i64;
    if d % 12 != 0 {
        return Err(Error::OffGridTranslation { denominator: c.denominator });
    }
    let shift = op.translation.map(|t| t as i64 * d / 12);
    let m = op.rotation;
    let coords = c
        .coords
        .iter()
        .map(|list| {
            list.iter()
                .map(|n| {
                    let n = n.map(|k| k as i64);
                    let mut out = [0u32; 3];
                    for r in 0..3 {
                        let v = m[r][0] as i64 * n[0]
                            + m[r][1] as i64 * n[1]
                            + m[r][2] as i64 * n[2]
                            + shift[r];
                        out[r] = v.rem_euclid(d) as u32;
                    }
                    out
                })
                .collect()
        })
        .collect();
    Ok(Crystal { coords, ..c.clone() })
}

/// Deterministic random valid crystal for tests and toy corpora.
pub fn synth_crystal(
    seed: u64,
    max_species: usize,
    max_atoms_per_species: usize,
    denominator: u32,
) -> Result<Crystal> {
    check_denominator(denominator)?;
    if max_species == 0 || max_species > MAX_SPECIES || max_atoms_per_species == 0 {
        return Err(Error::GenerationFailure(format!(
            "limits out of range: {max_species} species, {max_atoms_per_species} atoms"
        )));
    }
    let cells = (denominator as u64).pow(3);
    if max_atoms_per_species as u64 > cells {
        return Err(Error::GenerationFailure(format!(
            "{max_atoms_per_species} atoms do not fit on {cells} grid points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_species = rng.random_range(1..=max_species);
    let mut zs: Vec<u8> = sample(&mut rng, MAX_ATOMIC_NUMBER as usize, n_species)
        .into_iter()
        .map(|i| i as u8 + 1)
        .collect();
    zs.sort_unstable();

    let coeffs: [f64; 6] = [0.0; 6].map(|_| rng.random_range(-0.5..2.5));
    let lattice = log_to_lattice(&LatticeLog::from_coeffs(&coeffs));

    let mut entries = Vec::with_capacity(n_species);
    let mut coords = Vec::with_capacity(n_species);
    for &z in &zs {
        let count = rng.random_range(1..=max_atoms_per_species);
        let mut seen = HashSet::with_capacity(count);
        let mut list = Vec::with_capacity(count);
        while list.len() < count {
            let p = [0u32; 3].map(|_| rng.random_range(0..denominator));
            if seen.insert(p) {
                list.push(p);
            }
        }
        entries.push((z, count as u32));
        coords.push(list);
    }
    Crystal::new(lattice, SpeciesSet::new(entries), coords, denominator)
}
