//! Data-parallel helpers.
//!
//! Every helper splits work into independent output slots, each computed
//! sequentially, so results are bit-identical with or without rayon. The
//! `parallel` feature enables rayon; [`set_enabled`] toggles it at runtime
//! (used by the benches to compare both paths in one binary).

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Below this many output elements the pool overhead dominates.
const MIN_PARALLEL_LEN: usize = 8192;

/// Turns the rayon path on or off. No effect without the `parallel` feature.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

/// True when work is dispatched to the rayon pool.
pub fn enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Calls `f(index, chunk)` for every `chunk`-sized piece of `data`.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if chunk == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if enabled() && data.len() >= MIN_PARALLEL_LEN && data.len() > chunk {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Evaluates `f(i)` for `i in 0..n`, preserving index order in the output.
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if enabled() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_everything_in_order() {
        let mut v = vec![0.0; 10];
        for_each_chunk_mut(&mut v, 3, |i, c| {
            for x in c.iter_mut() {
                *x = i as f64;
            }
        });
        assert_eq!(v, [0., 0., 0., 1., 1., 1., 2., 2., 2., 3.]);
    }

    #[test]
    fn map_matches_sequential() {
        let a = map(100, |i| (i as f64).sqrt());
        set_enabled(false);
        let b = map(100, |i| (i as f64).sqrt());
        set_enabled(true);
        assert_eq!(a, b);
    }
}
