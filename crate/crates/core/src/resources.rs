//! Wall-clock and heap measurement around a single call.
//!
//! Heap figures come from [`TrackingAllocator`], which a binary opts into with
//! `#[global_allocator]`. Without it the memory delta reads as 0.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

/// System allocator wrapper that tracks live and peak heap bytes.
pub struct TrackingAllocator;

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                grow(new_size - layout.size());
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

fn grow(bytes: usize) {
    let now = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

/// Live heap bytes seen by the tracking allocator.
pub fn current_heap_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// Time and peak extra heap used by one measured call.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceUsage {
    pub mem_bytes: usize,
    pub seconds: f64,
}

/// Runs `f`, returning its result with the elapsed time and the peak heap
/// growth above the level at entry.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, ResourceUsage) {
    let start_mem = CURRENT.load(Ordering::Relaxed);
    PEAK.store(start_mem, Ordering::Relaxed);
    let start = Instant::now();
    let out = f();
    let seconds = start.elapsed().as_secs_f64();
    let peak = PEAK.load(Ordering::Relaxed);
    let usage = ResourceUsage {
        mem_bytes: peak.saturating_sub(start_mem),
        seconds,
    };
    (out, usage)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measure_reports_time_and_nonnegative_memory() {
        let (v, u) = measure(|| (0..10_000).map(|i| i as f64).sum::<f64>());
        assert_eq!(v, 49_995_000.0);
        assert!(u.seconds > 0.0);
    }
}
