//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature, [`Execution::Parallel`] runs on the current
//! rayon pool. Without it, both variants run sequentially. Output order always
//! matches input order, so results are identical across thread counts.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
            }
            _ => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }
}

/// Runs `f` on a pool with `threads` workers (0 = rayon default).
#[cfg(feature = "parallel")]
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<R: Send>(_threads: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = Execution::Parallel.map(&xs, |i, x| x * 3 + i as u64);
        let b = Execution::Sequential.map(&xs, |i, x| x * 3 + i as u64);
        assert_eq!(a, b);
        assert_eq!(with_threads(2, || Execution::Parallel.map_range(5, |i| i)), vec![0, 1, 2, 3, 4]);
    }
}
