//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature, [`Parallelism::Threads`] runs work on a
//! rayon pool of that size; without it every call runs sequentially. Work is
//! always split into the same fixed chunks and results are merged in chunk
//! order, so outputs are bitwise identical for every thread count.

#[cfg(feature = "parallel")]
use std::collections::HashMap;
#[cfg(feature = "parallel")]
use std::sync::{Arc, Mutex, OnceLock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    #[default]
    Sequential,
    Threads(usize),
}

impl Parallelism {
    pub fn from_threads(threads: usize) -> Self {
        if threads <= 1 {
            Parallelism::Sequential
        } else {
            Parallelism::Threads(threads)
        }
    }

    pub fn threads(self) -> usize {
        match self {
            Parallelism::Sequential => 1,
            Parallelism::Threads(n) => n.max(1),
        }
    }

    /// `(0..n).map(f)` collected in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = self.pool() {
            use rayon::prelude::*;
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }

    /// Calls `f(chunk_index, chunk)` on consecutive `chunk`-sized pieces.
    pub fn for_each_chunk_mut<T, F>(self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = self.pool() {
            use rayon::prelude::*;
            pool.install(|| {
                data.par_chunks_mut(chunk)
                    .enumerate()
                    .for_each(|(k, c)| f(k, c))
            });
            return;
        }
        data.chunks_mut(chunk)
            .enumerate()
            .for_each(|(k, c)| f(k, c));
    }

    #[cfg(feature = "parallel")]
    fn pool(self) -> Option<Arc<rayon::ThreadPool>> {
        static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
        let n = match self {
            Parallelism::Sequential | Parallelism::Threads(0 | 1) => return None,
            Parallelism::Threads(n) => n,
        };
        let mut pools = POOLS.get_or_init(Default::default).lock().unwrap();
        let pool = pools.entry(n).or_insert_with(|| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .expect("thread pool"),
            )
        });
        Some(Arc::clone(pool))
    }
}

const DOT_CHUNK: usize = 4096;

/// Inner product with a thread-count-independent summation order.
pub fn dot(par: Parallelism, a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let chunks = a.len().div_ceil(DOT_CHUNK);
    par.map(chunks, |k| {
        let lo = k * DOT_CHUNK;
        let hi = (lo + DOT_CHUNK).min(a.len());
        a[lo..hi]
            .iter()
            .zip(&b[lo..hi])
            .map(|(x, y)| x * y)
            .sum::<f64>()
    })
    .into_iter()
    .sum()
}
