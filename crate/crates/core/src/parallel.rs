//! Intra-op parallelism control.
//!
//! Work is split into contiguous chunks whose partial results are combined in
//! chunk order, so output is bitwise-identical for a fixed thread count.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

pub const THREADS_ENV: &str = "MTL_THREADS";

pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Reads `MTL_THREADS` (default 1) and applies it.
pub fn init_from_env() -> usize {
    let n = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1);
    set_threads(n);
    n
}

/// Splits `0..n` into at most `threads()` contiguous ranges.
pub(crate) fn chunks(n: usize) -> Vec<std::ops::Range<usize>> {
    let t = threads().min(n).max(1);
    let base = n / t;
    let extra = n % t;
    let mut out = Vec::with_capacity(t);
    let mut start = 0;
    for i in 0..t {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Runs `f` over each chunk, in parallel when more than one thread is configured.
pub(crate) fn map_chunks<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> R + Sync,
{
    let ranges = chunks(n);
    if ranges.len() <= 1 {
        return ranges.into_iter().map(&f).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = ranges.into_iter().map(|r| s.spawn(|| f(r))).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    })
}
