//! Parallel runs of the theory check suite.

use std::path::Path;

use cpql_core::theory::{all_passed, run_job, suite_jobs, CheckReport, SuiteGrid};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::io::OutputDir;
use crate::sweep::with_threads;

/// Fans the suite jobs out over the pool; reports keep the job order.
pub fn run_verify(seed: u64, grid: &SuiteGrid, threads: Option<usize>) -> Result<Vec<CheckReport>> {
    let jobs = suite_jobs(grid).map_err(|e| invalid("verify", e))?;
    let batches = with_threads(threads, || {
        jobs.par_iter()
            .map(|job| run_job(seed, grid, job))
            .collect::<Vec<_>>()
    })?;
    let mut reports = Vec::new();
    for (job, batch) in jobs.iter().zip(batches) {
        reports.extend(batch.map_err(|e| Error::runtime(format!("suite job {job:?}: {e}")))?);
    }
    Ok(reports)
}

#[derive(Serialize)]
struct VerifyConfig<'a> {
    seed: u64,
    grid: &'a SuiteGrid,
}

/// `verify_report.json` plus the manifest; returns whether every asserted check passed.
pub fn write_verify(reports: &[CheckReport], seed: u64, grid: &SuiteGrid, dir: &Path) -> Result<bool> {
    let mut out = OutputDir::create(dir)?;
    out.json("verify_report.json", &reports)?;
    out.finish("verify", &VerifyConfig { seed, grid })?;
    Ok(all_passed(reports))
}
