//! Execution-mode switch between rayon data-parallel loops and a sequential
//! fallback.
//!
//! Every hot kernel in the crate funnels its loop through the helpers here.
//! With the `parallel` feature (default) the mode starts as [`Exec::Par`] and
//! loops run on the rayon pool; without it, or under [`Exec::Seq`], the same
//! loops run inline. Kernels only ever parallelize over disjoint output
//! regions and reduce in index order, so results are bit-identical across
//! modes and thread counts.

use std::cell::Cell;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Exec {
    Seq,
    Par,
}

fn default_mode() -> Exec {
    if cfg!(feature = "parallel") {
        Exec::Par
    } else {
        Exec::Seq
    }
}

thread_local! {
    static MODE: Cell<Exec> = Cell::new(default_mode());
}

/// Current execution mode for this thread.
pub fn mode() -> Exec {
    MODE.with(|m| m.get())
}

/// Set the execution mode for this thread. Without the `parallel` feature
/// `Exec::Par` silently falls back to sequential execution.
pub fn set_mode(exec: Exec) {
    MODE.with(|m| m.set(exec));
}

/// Run `f` with the mode temporarily set to `exec`, restoring the prior mode.
pub fn with_mode<R>(exec: Exec, f: impl FnOnce() -> R) -> R {
    let prev = mode();
    set_mode(exec);
    let out = f();
    set_mode(prev);
    out
}

/// Apply `f(chunk_index, chunk)` to consecutive `size`-element chunks of
/// `data`. Chunks are disjoint, so the parallel and sequential paths write
/// identical bytes.
pub fn par_chunks_mut<T, F>(data: &mut [T], size: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(size > 0);
    match mode() {
        #[cfg(feature = "parallel")]
        Exec::Par => {
            data.par_chunks_mut(size)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        }
        _ => {
            for (i, c) in data.chunks_mut(size).enumerate() {
                f(i, c);
            }
        }
    }
}

/// Collect `f(0..n)` into a Vec, preserving index order.
pub fn par_map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode() {
        #[cfg(feature = "parallel")]
        Exec::Par => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}
