//! Parallel reductions whose result does not depend on the thread count.
//!
//! Items are grouped into fixed-size chunks; each chunk is folded
//! sequentially and the chunk results are combined left to right.

use rayon::prelude::*;

use crate::error::Result;

const CHUNK: usize = 8;

pub(crate) fn ordered_reduce<A, I, F, C>(n_items: usize, init: I, fold: F, mut combine: C) -> Result<A>
where
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) -> Result<()> + Sync,
    C: FnMut(&mut A, A),
{
    let n_chunks = n_items.div_ceil(CHUNK);
    let parts: Vec<Result<A>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for item in c * CHUNK..((c + 1) * CHUNK).min(n_items) {
                fold(&mut acc, item)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = init();
    for part in parts {
        combine(&mut total, part?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_sequential_chunking_on_any_pool() {
        let f = |i: usize| ((i as f64) * 0.37).sin() * 1e3;
        let run = || {
            ordered_reduce(1000, || 0.0f64, |a, i| {
                *a += f(i);
                Ok(())
            }, |a, b| *a += b)
            .unwrap()
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(run);
        assert_eq!(one.to_bits(), four.to_bits());
    }
}
