//! Line-delimited JSON file formats. Every record carries `schema_version`.
//!
//! There is no CIF reader. Converting a CIF by hand: `lattice` is the cell
//! matrix with lattice vectors as columns, written row by row (from `_cell_length_*` and
//! `_cell_angle_*`), each `_atom_site_type_symbol` becomes an atomic number
//! `z`, and `_atom_site_fract_*` values are multiplied by `grid_denominator`
//! and rounded. Symmetry-equivalent sites must be expanded first.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use recipcrystal_core::{
    build_wave_set, Crystal, FourierRepr, LatticeMatrix, SpeciesSet, Truncation, MAX_ATOMIC_NUMBER, NUM_SLOTS,
};
use recipcrystal_model::C64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesEntry {
    pub z: u8,
    pub coords: Vec<[u32; 3]>,
}

/// One crystal: row-major lattice and integer numerators over `grid_denominator`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XtlJsonRecord {
    pub schema_version: u32,
    pub lattice: [f64; 9],
    pub grid_denominator: u32,
    pub species: Vec<SpeciesEntry>,
}

impl XtlJsonRecord {
    pub fn from_crystal(c: &Crystal) -> Self {
        let species = c
            .species
            .entries
            .iter()
            .zip(&c.coords)
            .map(|(&(z, _), coords)| SpeciesEntry { z, coords: coords.clone() })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            lattice: c.lattice.to_row_major(),
            grid_denominator: c.denominator,
            species,
        }
    }

    /// Format-level checks; crystal invariants are checked by [`Self::to_crystal`].
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(format!("unsupported schema_version {}", self.schema_version));
        }
        let d = self.grid_denominator;
        if d == 0 {
            return Err("grid_denominator must be positive".into());
        }
        if !self.lattice.iter().all(|v| v.is_finite()) {
            return Err("lattice entries must be finite".into());
        }
        for w in self.species.windows(2) {
            if w[0].z >= w[1].z {
                return Err("species must be sorted by strictly increasing z".into());
            }
        }
        for s in &self.species {
            if s.z == 0 || s.z > MAX_ATOMIC_NUMBER {
                return Err(format!("atomic number {} out of range", s.z));
            }
            if let Some(p) = s.coords.iter().find(|p| p.iter().any(|&n| n >= d)) {
                return Err(format!("numerator {p:?} not below denominator {d}"));
            }
        }
        Ok(())
    }

    pub fn to_crystal(&self) -> recipcrystal_core::Result<Crystal> {
        let entries = self.species.iter().map(|s| (s.z, s.coords.len() as u32)).collect();
        let coords = self.species.iter().map(|s| s.coords.clone()).collect();
        Crystal::new(
            LatticeMatrix::from_row_major(self.lattice),
            SpeciesSet::new(entries),
            coords,
            self.grid_denominator,
        )
    }

    pub fn num_atoms(&self) -> usize {
        self.species.iter().map(|s| s.coords.len()).sum()
    }
}

/// Coefficient matrix with its wave-set metadata. Rows follow the wave set's
/// lexicographic order; each row holds six `[re, im]` slot values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierBlock {
    pub truncation: Truncation,
    pub jmax: u32,
    /// Atomic number per slot, 0 for an empty slot.
    pub slot_species: [u8; NUM_SLOTS],
    pub coeffs: Vec<[[f64; 2]; NUM_SLOTS]>,
}

impl FourierBlock {
    pub fn from_repr(fr: &FourierRepr) -> Self {
        let coeffs = (0..fr.rows())
            .map(|r| std::array::from_fn(|s| {
                let v = fr.get(r, s);
                [v.re, v.im]
            }))
            .collect();
        Self {
            truncation: fr.wave_set.truncation(),
            jmax: fr.wave_set.jmax(),
            slot_species: fr.slot_species.map(|z| z.unwrap_or(0)),
            coeffs,
        }
    }

    /// Rebuilds the representation, optionally restricted to a smaller `jmax`.
    pub fn to_repr(&self, jmax: Option<u32>) -> std::result::Result<FourierRepr, String> {
        let full = build_wave_set(self.truncation, self.jmax);
        if self.coeffs.len() != full.len() {
            return Err(format!(
                "{} coefficient rows, wave set with jmax {} has {}",
                self.coeffs.len(),
                self.jmax,
                full.len()
            ));
        }
        let j = jmax.unwrap_or(self.jmax);
        if j > self.jmax {
            return Err(format!("requested jmax {j} exceeds stored jmax {}", self.jmax));
        }
        let ws = build_wave_set(self.truncation, j);
        let mut fr = FourierRepr::zeros(ws.clone());
        for (r, w) in ws.vectors().iter().enumerate() {
            let row = &self.coeffs[full.index_of(*w).expect("sub wave set")];
            for (s, v) in row.iter().enumerate() {
                fr.set(r, s, C64::new(v[0], v[1]));
            }
        }
        fr.slot_species = self.slot_species.map(|z| (z != 0).then_some(z));
        Ok(fr)
    }
}

/// One preprocessed corpus entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveRecord {
    pub schema_version: u32,
    pub id: u64,
    pub crystal: XtlJsonRecord,
    pub fourier: FourierBlock,
}

/// Input to `recover`: coefficients plus what is needed to rebuild a crystal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierRecord {
    pub schema_version: u32,
    pub id: u64,
    pub grid_denominator: u32,
    /// Identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<[f64; 9]>,
    pub fourier: FourierBlock,
}

impl From<&ArchiveRecord> for FourierRecord {
    fn from(a: &ArchiveRecord) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            id: a.id,
            grid_denominator: a.crystal.grid_denominator,
            lattice: Some(a.crystal.lattice),
            fourier: a.fourier.clone(),
        }
    }
}

/// `count` synthetic crystals; crystal `i` uses seed `seed + i`.
pub fn synth_records(
    count: u64,
    seed: u64,
    max_species: usize,
    max_atoms: usize,
    denominator: u32,
) -> Result<Vec<XtlJsonRecord>> {
    (0..count)
        .map(|i| {
            let c = recipcrystal_core::synth_crystal(seed.wrapping_add(i), max_species, max_atoms, denominator)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(XtlJsonRecord::from_crystal(&c))
        })
        .collect()
}

/// Non-blank lines of `path` parsed as `T`, tagged with 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CliError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).expect("records serialize");
        w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}
