//! Internal parallelism control.
//!
//! `HOPE_NET_THREADS` caps the worker count (default 1). Work is split per
//! batch item and every reduction across items is folded in item order, so
//! results do not depend on the thread count.

use std::sync::OnceLock;

use rayon::prelude::*;

pub const THREADS_ENV: &str = "HOPE_NET_THREADS";

pub fn threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(1)
            .max(1)
    })
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads())
            .build()
            .expect("thread pool")
    })
}

/// Runs `f(scratch, index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub(crate) fn for_each_chunk<T, S, I, F>(data: &mut [T], chunk: usize, init: I, f: F)
where
    T: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize, &mut [T]) + Sync + Send,
{
    if threads() == 1 {
        let mut scratch = init();
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(&mut scratch, i, c);
        }
    } else {
        pool().install(|| {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each_init(&init, |s, (i, c)| f(s, i, c));
        });
    }
}

/// Like [`for_each_chunk`], but each call also yields a partial vector that
/// is summed into `total` in chunk order.
pub(crate) fn for_each_chunk_reduce<T, S, I, F>(
    data: &mut [T],
    chunk: usize,
    total: &mut [T],
    init: I,
    f: F,
) where
    T: Send + Sync + Copy + std::ops::AddAssign,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize, &mut [T], &mut Vec<T>) + Sync + Send,
{
    if threads() == 1 {
        let mut scratch = init();
        let mut partial = Vec::new();
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(&mut scratch, i, c, &mut partial);
            add_into(total, &partial);
        }
    } else {
        let partials: Vec<Vec<T>> = pool().install(|| {
            data.par_chunks_mut(chunk)
                .enumerate()
                .map_init(&init, |s, (i, c)| {
                    let mut partial = Vec::new();
                    f(s, i, c, &mut partial);
                    partial
                })
                .collect()
        });
        for p in &partials {
            add_into(total, p);
        }
    }
}

fn add_into<T: Copy + std::ops::AddAssign>(total: &mut [T], partial: &[T]) {
    debug_assert_eq!(total.len(), partial.len());
    for (t, &p) in total.iter_mut().zip(partial) {
        *t += p;
    }
}
