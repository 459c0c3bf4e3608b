//! Order-preserving fan-out over a fixed number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Run `f` on `jobs` worker threads (inline when `jobs <= 1`), keeping the
/// input order.
pub fn map_jobs<I, O, F>(items: &[I], jobs: usize, f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> Result<O> + Sync + Send,
{
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Usage(e.to_string()))?;
    pool.install(|| items.par_iter().map(f).collect())
}
