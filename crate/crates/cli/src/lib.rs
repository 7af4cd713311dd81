//! Command-line pipeline over crystal Fourier representations: preprocess a
//! corpus, screen it for exact recoverability, train the autoencoder and the
//! latent diffuser, sample new structures, and recover coordinates.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod formats;
pub mod preprocess;
pub mod recover;
pub mod sample;
pub mod screen;
pub mod train;

pub use error::{CliError, Result};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "RECIPCRYSTAL_THREADS";

/// Sizes the global thread pool from [`THREADS_ENV`], if set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A pool may already exist when embedded in tests; the cap then does not apply.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
