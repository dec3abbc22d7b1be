//! Optional data parallelism for the convolution loops.
//!
//! The worker count defaults to 1 and is raised via [`set_threads`] (the CLI
//! wires it to the ADVERSEG_THREADS environment variable). Work is split into
//! disjoint channel blocks, so every output element is produced by exactly one
//! worker with the same accumulation order as the sequential path and results
//! stay bit-identical for any thread count.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Runs `body(range, block)` over `count` channels whose outputs are
/// contiguous `block_len`-sized slices of `out`, splitting channels across
/// workers when more than one thread is configured.
pub fn split_run<F>(count: usize, block_len: usize, out: &mut [f32], body: F)
where
    F: Fn(std::ops::Range<usize>, &mut [f32]) + Sync,
{
    debug_assert_eq!(out.len(), count * block_len);
    let workers = threads().min(count.max(1));
    if workers <= 1 || count <= 1 {
        body(0..count, out);
        return;
    }
    let per = count.div_ceil(workers);
    std::thread::scope(|scope| {
        let mut rest = out;
        let mut start = 0usize;
        while start < count {
            let end = (start + per).min(count);
            let (block, tail) = rest.split_at_mut((end - start) * block_len);
            rest = tail;
            let body = &body;
            scope.spawn(move || body(start..end, block));
            start = end;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_run_covers_all_blocks() {
        let mut out = vec![0.0f32; 12];
        split_run(4, 3, &mut out, |range, block| {
            for (slot, ch) in range.enumerate() {
                for v in &mut block[slot * 3..(slot + 1) * 3] {
                    *v = ch as f32;
                }
            }
        });
        assert_eq!(out, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn threaded_split_matches_sequential() {
        let fill = |range: std::ops::Range<usize>, block: &mut [f32]| {
            for (slot, ch) in range.enumerate() {
                block[slot] = (ch * ch) as f32;
            }
        };
        let mut seq = vec![0.0f32; 7];
        split_run(7, 1, &mut seq, fill);

        set_threads(3);
        let mut par = vec![0.0f32; 7];
        split_run(7, 1, &mut par, fill);
        set_threads(1);

        assert_eq!(seq, par);
    }
}
