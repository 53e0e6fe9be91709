//! Engine-level allocation accounting.
//!
//! Every tensor registers its payload bytes here on construction and
//! deregisters on drop, so `peak()` is the high-water mark of live tensor
//! memory. Training-memory figures are defined as this gauge, not OS RSS:
//! the gauge is reproducible across machines and isolates what the engine
//! itself retains (graphs, states, statistics).

use std::sync::atomic::{AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

pub fn add_allocation(bytes: usize) {
    let now = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
    // Racy max is fine: monotone updates from any interleaving converge to
    // the true maximum when only one thread allocates (the engine is
    // single-threaded per trainer).
    PEAK.fetch_max(now, Ordering::Relaxed);
}

pub fn remove_allocation(bytes: usize) {
    CURRENT.fetch_sub(bytes, Ordering::Relaxed);
}

/// Live engine-tensor bytes right now.
pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// High-water mark since the last `reset_peak`.
pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Restart peak tracking from the current live total. Used to bracket a
/// measurement region (e.g. one training step).
pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}
