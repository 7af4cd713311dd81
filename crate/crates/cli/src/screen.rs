//! Recoverability screening of a preprocessed archive.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use recipcrystal_core::{recover, RecoveryConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::formats::{read_jsonl, write_json, ArchiveRecord, SCHEMA_VERSION};
use crate::recover::{assemble, summarize};

/// Upper bounds of the atoms-per-cell buckets; the last bucket is open.
pub const BUCKET_BOUNDS: [usize; 4] = [16, 32, 48, 64];
pub const BUCKET_LABELS: [&str; 5] = ["<=16", "17-32", "33-48", "49-64", ">64"];

pub fn bucket(atoms: usize) -> usize {
    BUCKET_BOUNDS.iter().position(|&b| atoms <= b).unwrap_or(BUCKET_BOUNDS.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenEntry {
    pub id: u64,
    pub atoms: usize,
    /// Highest stage any species needed; `None` when unrecoverable.
    pub stage_reached: Option<u8>,
    pub newton_iters: u32,
    /// Largest per-species residual; `None` when recovery could not run.
    pub residual: Option<f64>,
    pub recoverable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
    pub unrecoverable: usize,
}

impl StageCounts {
    pub fn add(&mut self, stage: Option<u8>) {
        match stage {
            Some(1) => self.stage1 += 1,
            Some(2) => self.stage2 += 1,
            Some(3) => self.stage3 += 1,
            _ => self.unrecoverable += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.stage1 + self.stage2 + self.stage3 + self.unrecoverable
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketCount {
    pub bucket: String,
    pub total: usize,
    pub recoverable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenAggregate {
    pub total: usize,
    pub stages: StageCounts,
    pub buckets: Vec<BucketCount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenReport {
    pub schema_version: u32,
    pub jmax: Option<u32>,
    pub entries: Vec<ScreenEntry>,
    pub aggregate: ScreenAggregate,
}

/// Recovers one entry and checks the result against the archived crystal.
pub fn screen_record(rec: &ArchiveRecord, jmax: Option<u32>, seed: u64) -> ScreenEntry {
    let atoms = rec.crystal.num_atoms();
    let fail = |reason: String, residual: Option<f64>, iters: u32| ScreenEntry {
        id: rec.id,
        atoms,
        stage_reached: None,
        newton_iters: iters,
        residual,
        recoverable: false,
        reason: Some(reason),
    };
    let fr = match rec.fourier.to_repr(jmax) {
        Ok(fr) => fr,
        Err(e) => return fail(e, None, 0),
    };
    if !fr.coeffs.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
        return fail("non-finite coefficients".into(), None, 0);
    }
    let cfg = RecoveryConfig { seed, ..RecoveryConfig::new(rec.crystal.grid_denominator) };
    let results = match recover(&fr, &cfg) {
        Ok(r) => r,
        Err(e) => return fail(e.to_string(), None, 0),
    };
    let s = summarize(&results);
    if s.stage.is_none() {
        return fail("recovery failed".into(), Some(s.residual), s.newton_iters);
    }
    let rebuilt = assemble(&fr, &results, rec.crystal.lattice, rec.crystal.grid_denominator);
    let mut expected = rec.crystal.clone();
    for sp in &mut expected.species {
        sp.coords.sort_unstable();
    }
    if rebuilt != expected {
        return fail("recovered coordinates differ from input".into(), Some(s.residual), s.newton_iters);
    }
    ScreenEntry {
        id: rec.id,
        atoms,
        stage_reached: s.stage,
        newton_iters: s.newton_iters,
        residual: Some(s.residual),
        recoverable: true,
        reason: None,
    }
}

pub fn screen_records(records: &[ArchiveRecord], jmax: Option<u32>, seed: u64) -> ScreenReport {
    let mut entries: Vec<ScreenEntry> = records.par_iter().map(|r| screen_record(r, jmax, seed)).collect();
    entries.sort_by_key(|e| e.id);
    let mut stages = StageCounts::default();
    let mut buckets: Vec<BucketCount> = BUCKET_LABELS
        .iter()
        .map(|l| BucketCount { bucket: l.to_string(), total: 0, recoverable: 0 })
        .collect();
    for e in &entries {
        stages.add(e.stage_reached);
        let b = &mut buckets[bucket(e.atoms)];
        b.total += 1;
        b.recoverable += e.recoverable as usize;
    }
    let aggregate = ScreenAggregate { total: entries.len(), stages, buckets };
    ScreenReport { schema_version: SCHEMA_VERSION, jmax, entries, aggregate }
}

pub fn report_csv(report: &ScreenReport) -> String {
    let mut s = String::from("id,atoms,stage_reached,newton_iters,residual,recoverable\n");
    for e in &report.entries {
        let stage = e.stage_reached.map(|v| v.to_string()).unwrap_or_default();
        let residual = e.residual.map(|v| format!("{v:e}")).unwrap_or_default();
        writeln!(s, "{},{},{},{},{},{}", e.id, e.atoms, stage, e.newton_iters, residual, e.recoverable).unwrap();
    }
    s
}

pub fn read_archive(path: &Path) -> Result<Vec<ArchiveRecord>> {
    let corrupt = |msg: String| CliError::ArchiveCorrupt { path: path.display().to_string(), msg };
    let lines = read_jsonl::<ArchiveRecord>(path).map_err(|e| match e {
        CliError::Parse { line, msg, .. } => corrupt(format!("line {line}: {msg}")),
        other => other,
    })?;
    lines
        .into_iter()
        .map(|(line, r)| {
            if r.schema_version != SCHEMA_VERSION {
                Err(corrupt(format!("line {line}: schema_version {}", r.schema_version)))
            } else {
                Ok(r)
            }
        })
        .collect()
}

/// Writes the JSON report to `out` and the CSV next to it.
pub fn cmd_screen(archive: &Path, out: &Path, jmax: Option<u32>, seed: u64) -> Result<ScreenReport> {
    let records = read_archive(archive)?;
    if let Some(j) = jmax {
        if let Some(r) = records.iter().find(|r| r.fourier.jmax < j) {
            return Err(CliError::Usage(format!("record {} stores jmax {} < requested {j}", r.id, r.fourier.jmax)));
        }
    }
    let report = screen_records(&records, jmax, seed);
    write_json(out, &report)?;
    let csv = out.with_extension("csv");
    std::fs::write(&csv, report_csv(&report)).map_err(|e| CliError::io(&csv, e))?;
    Ok(report)
}
