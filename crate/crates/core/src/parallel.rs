//! Deterministic row-parallel execution.
//!
//! Renders and backward passes fan out over image rows. Each row produces an
//! independent partial result; the caller reduces the returned vector in row
//! order, so the floating-point reduction tree never depends on how many
//! workers ran. Without the `std` feature the rows are processed
//! sequentially, producing the same bits.

use alloc::vec::Vec;

/// Computes `f(row)` for every row in `0..rows` and returns the results in
/// row order. `workers` is a hint; 0 or 1 means sequential.
pub fn map_rows<T, F>(rows: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "std")]
    {
        let workers = workers.max(1).min(rows.max(1));
        if workers > 1 && rows > 1 {
            let mut out: Vec<Option<T>> = (0..rows).map(|_| None).collect();
            let chunk = rows.div_ceil(workers);
            std::thread::scope(|scope| {
                let f = &f;
                let mut rest = out.as_mut_slice();
                let mut start = 0;
                while !rest.is_empty() {
                    let take = chunk.min(rest.len());
                    let (head, tail) = rest.split_at_mut(take);
                    let row0 = start;
                    scope.spawn(move || {
                        for (i, slot) in head.iter_mut().enumerate() {
                            *slot = Some(f(row0 + i));
                        }
                    });
                    rest = tail;
                    start += take;
                }
            });
            return out.into_iter().map(|s| s.expect("row computed")).collect();
        }
    }
    let _ = workers;
    (0..rows).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worker_count_does_not_change_results() {
        let f = |r: usize| {
            let mut acc = 0.0f64;
            for i in 0..100 {
                acc += ((r * 31 + i) as f64).sin();
            }
            acc
        };
        let seq = map_rows(64, 1, f);
        for workers in [2, 3, 8, 64] {
            let par = map_rows(64, workers, f);
            for (a, b) in seq.iter().zip(par.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn empty_and_single_row() {
        assert!(map_rows(0, 4, |r| r).is_empty());
        assert_eq!(map_rows(1, 4, |r| r), alloc::vec![0]);
    }
}
