//! Snap XTL-JSON crystals to the working grid and attach Fourier coefficients.

use std::path::Path;

use log::warn;
use rayon::prelude::*;
use recipcrystal_core::{build_wave_set, fourier_forward, Truncation};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::formats::{read_jsonl, write_jsonl, ArchiveRecord, FourierBlock, XtlJsonRecord, SCHEMA_VERSION};

pub const PREPROCESS_DENOMINATORS: [u32; 2] = [24, 48];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub records: usize,
    pub written: usize,
    pub rejected: Vec<Rejection>,
}

/// Nearest numerator over `to`, rounding halves up, wrapped into `[0, to)`.
pub fn rescale_numerator(n: u32, from: u32, to: u32) -> u32 {
    let (n, from, to) = (n as u64, from as u64, to as u64);
    (((2 * n * to + from) / (2 * from)) % to) as u32
}

pub fn snap_record(r: &XtlJsonRecord, denominator: u32) -> XtlJsonRecord {
    let mut out = r.clone();
    for s in &mut out.species {
        for p in &mut s.coords {
            *p = p.map(|n| rescale_numerator(n, r.grid_denominator, denominator));
        }
    }
    out.grid_denominator = denominator;
    out
}

/// Ids are 1-based input line numbers.
pub fn preprocess_records(
    records: &[(usize, XtlJsonRecord)],
    denominator: u32,
    jmax: u32,
    truncation: Truncation,
) -> Result<(Vec<ArchiveRecord>, PreprocessSummary)> {
    if !PREPROCESS_DENOMINATORS.contains(&denominator) {
        return Err(CliError::InvalidDenominator(denominator));
    }
    let ws = build_wave_set(truncation, jmax);
    let results: Vec<std::result::Result<ArchiveRecord, Rejection>> = records
        .par_iter()
        .map(|(line, rec)| {
            let id = *line as u64;
            let reject = |reason: String| Rejection { id, reason };
            rec.check().map_err(reject)?;
            let snapped = snap_record(rec, denominator);
            let crystal = snapped.to_crystal().map_err(|e| reject(e.to_string()))?;
            let fourier = FourierBlock::from_repr(&fourier_forward(&crystal, &ws));
            Ok(ArchiveRecord { schema_version: SCHEMA_VERSION, id, crystal: snapped, fourier })
        })
        .collect();
    let mut archive = Vec::new();
    let mut rejected = Vec::new();
    for r in results {
        match r {
            Ok(a) => archive.push(a),
            Err(rej) => {
                warn!("record {}: {}", rej.id, rej.reason);
                rejected.push(rej);
            }
        }
    }
    let summary = PreprocessSummary { records: records.len(), written: archive.len(), rejected };
    Ok((archive, summary))
}

pub fn cmd_preprocess(
    input: &Path,
    out: &Path,
    denominator: u32,
    jmax: u32,
    truncation: Truncation,
) -> Result<PreprocessSummary> {
    if !PREPROCESS_DENOMINATORS.contains(&denominator) {
        return Err(CliError::InvalidDenominator(denominator));
    }
    let records = read_jsonl::<XtlJsonRecord>(input)?;
    let (archive, summary) = preprocess_records(&records, denominator, jmax, truncation)?;
    write_jsonl(out, &archive)?;
    Ok(summary)
}
