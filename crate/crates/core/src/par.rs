//! Ordered data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature and more than one thread, work runs on a
//! dedicated rayon pool. Results always come back in input order, and callers
//! reduce them sequentially, so outputs do not depend on the thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub struct Executor {
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
    threads: usize,
}

impl Executor {
    pub fn sequential() -> Self {
        Self {
            #[cfg(feature = "parallel")]
            pool: None,
            threads: 1,
        }
    }

    /// An executor with `threads` workers. Without the `parallel` feature, or
    /// for `threads <= 1`, this is [`Executor::sequential`].
    pub fn with_threads(threads: usize) -> Self {
        #[cfg(feature = "parallel")]
        if threads > 1 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                return Self {
                    pool: Some(pool),
                    threads,
                };
            }
        }
        let _ = threads;
        Self::sequential()
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect());
        }
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}
