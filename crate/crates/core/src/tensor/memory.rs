//! Per-thread byte accounting for tensor storage, gradient buffers and tape
//! bookkeeping.
//!
//! Counts are logical (element count times element width), not what the
//! system allocator hands out, so they are identical across machines.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn track_alloc(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn track_free(bytes: usize) {
    // A buffer may be freed on a different thread than the one that allocated
    // it; saturate rather than wrap.
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes currently held by tensors and tapes created on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Resets the high-water mark to the current live byte count.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|peak| peak.set(live));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_high_water() {
        reset_peak();
        let base = live_bytes();
        track_alloc(100);
        track_alloc(50);
        track_free(120);
        assert_eq!(live_bytes(), base + 30);
        assert_eq!(peak_bytes(), base + 150);
        reset_peak();
        assert_eq!(peak_bytes(), base + 30);
        track_free(30);
    }
}
