//! Sequential or data-parallel execution of independent jobs.

use serde::{Deserialize, Serialize};

/// How independent jobs (rollouts, episodes, demos) are scheduled.
///
/// Results are always returned in input order, so both modes produce
/// identical outputs. Without the `parallel` feature every mode runs
/// sequentially.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Sequential,
    /// At most `jobs` workers; 0 uses every available core.
    Parallel {
        jobs: usize,
    },
    #[default]
    Auto,
}

impl Exec {
    pub fn from_jobs(jobs: Option<usize>) -> Self {
        match jobs {
            None => Exec::Auto,
            Some(1) => Exec::Sequential,
            Some(n) => Exec::Parallel { jobs: n },
        }
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
            #[cfg(feature = "parallel")]
            Exec::Auto => par_map(items, &f),
            #[cfg(feature = "parallel")]
            Exec::Parallel { jobs: 0 } => par_map(items, &f),
            #[cfg(feature = "parallel")]
            Exec::Parallel { jobs } => match rayon::ThreadPoolBuilder::new().num_threads(*jobs).build() {
                Ok(pool) => pool.install(|| par_map(items, &f)),
                Err(_) => par_map(items, &f),
            },
            #[cfg(not(feature = "parallel"))]
            _ => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        }
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, R, F>(items: &[T], f: &F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}
