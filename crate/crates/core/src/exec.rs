//! Data-parallel execution helpers.
//!
//! Every helper here returns results in input order, so switching between
//! sequential and parallel execution never changes a computed value. With the
//! `parallel` feature disabled, [`Mode::Parallel`] silently runs sequentially.

use std::sync::atomic::{AtomicU8, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(if cfg!(feature = "parallel") { 1 } else { 0 });

/// Sets the process-wide execution mode.
pub fn set_mode(mode: Mode) {
    MODE.store(matches!(mode, Mode::Parallel) as u8, Ordering::Relaxed);
}

pub fn mode() -> Mode {
    if MODE.load(Ordering::Relaxed) == 1 && cfg!(feature = "parallel") {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Runs `f` with the given mode, restoring the previous one afterwards.
pub fn with_mode<R>(mode: Mode, f: impl FnOnce() -> R) -> R {
    let prev = self::mode();
    set_mode(mode);
    let out = f();
    set_mode(prev);
    out
}

pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

/// Applies `f(row_index, row)` to consecutive `row_len` chunks of `out`.
///
/// Parallelism only kicks in when `work` (an estimate of scalar operations)
/// is large enough to amortize scheduling.
#[cfg_attr(not(feature = "parallel"), allow(unused_variables))]
pub fn for_each_row<T, F>(out: &mut [T], row_len: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel if work >= PARALLEL_WORK_THRESHOLD => out
            .par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row)),
        _ => out
            .chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row)),
    }
}

#[cfg(feature = "parallel")]
const PARALLEL_WORK_THRESHOLD: usize = 1 << 15;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let items: Vec<u64> = (0..1000).collect();
        let a = with_mode(Mode::Sequential, || map(&items, |x| x * x));
        let b = with_mode(Mode::Parallel, || map(&items, |x| x * x));
        assert_eq!(a, b);
        let c = with_mode(Mode::Parallel, || map_range(17, |i| i + 1));
        assert_eq!(c, (1..=17).collect::<Vec<_>>());
    }

    #[test]
    fn rows_are_visited_in_place() {
        let mut buf = vec![0usize; 12];
        for_each_row(&mut buf, 3, usize::MAX, |i, row| row.iter_mut().for_each(|v| *v = i));
        assert_eq!(buf, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }
}
