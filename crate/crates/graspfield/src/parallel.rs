//! Deterministic data parallelism.
//!
//! Work is split into contiguous chunks over output rows and each chunk is
//! owned by exactly one worker, so every output element is accumulated in a
//! fixed order no matter how many threads run. Results are therefore
//! bit-identical for any thread count, including 1.

use std::sync::OnceLock;

/// Number of worker threads. `GRASPFIELD_THREADS` caps it; 0 or unset
/// means auto-detect.
pub fn num_threads() -> usize {
    static N: OnceLock<usize> = OnceLock::new();
    *N.get_or_init(|| {
        let auto = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        match std::env::var("GRASPFIELD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
            Some(0) | None => auto,
            Some(n) => n.min(auto.max(n)), // explicit values may oversubscribe
        }
    })
}

/// Splits `out` into per-thread contiguous chunks of whole rows and runs
/// `f(first_row, rows_chunk)` on each. `f` must derive everything it writes
/// from `first_row`, never from the thread id.
pub fn for_each_row_chunk<T, F>(out: &mut [T], row_width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(row_width > 0 && out.len() % row_width == 0);
    let rows = out.len() / row_width;
    let threads = num_threads().min(rows.max(1));
    if threads <= 1 || rows < 2 {
        f(0, out);
        return;
    }
    let rows_per = rows.div_ceil(threads);
    std::thread::scope(|s| {
        let mut rest = out;
        let mut row0 = 0;
        let fref = &f;
        while !rest.is_empty() {
            let take = (rows_per * row_width).min(rest.len());
            let (chunk, tail) = rest.split_at_mut(take);
            rest = tail;
            let first = row0;
            row0 += take / row_width;
            s.spawn(move || fref(first, chunk));
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunking_covers_all_rows_once() {
        let mut out = vec![0u32; 7 * 3];
        for_each_row_chunk(&mut out, 3, |first, chunk| {
            for (r, row) in chunk.chunks_mut(3).enumerate() {
                for v in row.iter_mut() {
                    *v += (first + r) as u32 + 1;
                }
            }
        });
        let expect: Vec<u32> = (0..7).flat_map(|r| [r + 1, r + 1, r + 1]).collect();
        assert_eq!(out, expect);
    }
}
