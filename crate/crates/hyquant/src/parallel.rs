//! Calibration with units searched on a rayon pool.
//!
//! Units only read the shared cache, so searching them concurrently gives
//! the same decisions as the sequential core loop.

use std::env;

use anyhow::{bail, Context, Result};
use hyquant_core::bridge::{BridgeBlockGroup, ReconstructionUnit};
use hyquant_core::calib::{
    assemble, prepare, search_unit, Calibration, SearchOptions, SearchSpace,
};
use hyquant_core::graph::Graph;
use hyquant_core::tensor::Tensor;
use rayon::prelude::*;

pub const THREADS_ENV: &str = "HYQUANT_THREADS";

/// Worker count from `HYQUANT_THREADS`, defaulting to the available cores.
pub fn threads() -> Result<usize> {
    match env::var(THREADS_ENV) {
        Ok(s) => {
            let n: usize = s
                .trim()
                .parse()
                .with_context(|| format!("{THREADS_ENV}='{s}' is not a count"))?;
            if n == 0 {
                bail!("{THREADS_ENV} must be at least 1");
            }
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn calibrate(
    graph: &Graph,
    batch: &Tensor,
    groups: &[BridgeBlockGroup],
    space: &SearchSpace,
    options: &SearchOptions,
    threads: usize,
) -> Result<(Calibration, Vec<ReconstructionUnit>)> {
    space.validate()?;
    let prep = prepare(graph, batch, groups, options)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()?;
    let decisions = pool.install(|| {
        prep.units
            .par_iter()
            .map(|u| search_unit(graph, u, &prep.cache, space, options))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok((assemble(graph, decisions)?, prep.units))
}
