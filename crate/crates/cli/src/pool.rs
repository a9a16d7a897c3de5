//! Work pool sized by `FIXDIFF_THREADS`.

use crate::config::ConfigError;

pub const THREADS_VAR: &str = "FIXDIFF_THREADS";

/// Thread cap from the environment; unset means one per core.
pub fn thread_count() -> Result<usize, ConfigError> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(ConfigError::new(THREADS_VAR, format!("expected a positive integer, got '{s}'"))),
        },
    }
}

pub fn build_pool() -> anyhow::Result<rayon::ThreadPool> {
    let n = thread_count()?;
    Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?)
}
