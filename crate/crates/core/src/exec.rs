//! Data-parallel map over independent jobs.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] runs on the rayon
//! pool; without it every mode degrades to a plain sequential loop. Results
//! always come back in input order, so callers see identical output either
//! way.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => items.iter().map(f).collect(),
            Exec::Parallel => par_map(items, f),
        }
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Runs `f` on a pool of `jobs` workers (or the global pool for `None`).
#[cfg(feature = "parallel")]
pub fn with_workers<R: Send>(jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
        {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_workers<R: Send>(_jobs: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let f = |x: &u64| x * x + 1;
        assert_eq!(Exec::Sequential.map(&xs, f), Exec::Parallel.map(&xs, f));
        assert_eq!(Exec::Parallel.map(&xs, f)[10], 101);
    }

    #[test]
    fn bounded_pool_runs() {
        let out = with_workers(Some(2), || Exec::Parallel.map(&[1, 2, 3], |x| x * 2));
        assert_eq!(out, vec![2, 4, 6]);
    }
}
