//! Batch execution: a rayon pool when the `parallel` feature is on, a plain
//! loop otherwise. Results always come back in index order, so reductions
//! over them do not depend on the number of workers.

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use crate::error::Error;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

/// Maps closures over batch indices.
pub struct Executor {
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("mode", &self.effective_mode()).finish()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Self {
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// `workers == 0` uses one worker per available core. Without the
    /// `parallel` feature every mode runs sequentially.
    pub fn new(mode: ExecMode, workers: usize) -> Result<Self> {
        #[cfg(feature = "parallel")]
        {
            if mode == ExecMode::Parallel {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
                return Ok(Self { pool: Some(pool) });
            }
        }
        #[cfg(not(feature = "parallel"))]
        let _ = (mode, workers);
        Ok(Self::sequential())
    }

    pub fn effective_mode(&self) -> ExecMode {
        #[cfg(feature = "parallel")]
        if self.pool.is_some() {
            return ExecMode::Parallel;
        }
        ExecMode::Sequential
    }

    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }

    /// Like [`Executor::map`] for fallible work; returns the first error in
    /// index order.
    pub fn try_map<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn modes_agree_and_keep_order() {
        let work = |i: usize| (0..1000).map(|k| ((i * 31 + k) as f64).sqrt()).sum::<f64>();
        let seq = Executor::sequential().map(17, work);
        let par = Executor::new(ExecMode::Parallel, 3).unwrap().map(17, work);
        assert_eq!(seq, par);
    }

    #[test]
    fn first_error_in_index_order() {
        let ex = Executor::new(ExecMode::Parallel, 2).unwrap();
        let r: Result<Vec<usize>> = ex.try_map(10, |i| {
            if i >= 4 {
                Err(Error::Contract(format!("{i}")))
            } else {
                Ok(i)
            }
        });
        assert_eq!(r.unwrap_err().to_string(), "contract violation: 4");
    }
}
