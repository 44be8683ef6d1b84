//! Allocation audit for tensor buffers.
//!
//! Every tensor data buffer registers its byte size on creation and
//! deregisters on drop, per thread. The benchmark harness reads the peak
//! of live bytes over a measurement window to attribute transient memory
//! to a kernel, independent of OS-level RSS noise.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn on_alloc(bytes: usize) {
    LIVE.with(|l| {
        let live = l.get() + bytes;
        l.set(live);
        PEAK.with(|p| {
            if live > p.get() {
                p.set(live);
            }
        });
    });
}

pub(crate) fn on_dealloc(bytes: usize) {
    LIVE.with(|l| l.set(l.get().saturating_sub(bytes)));
}

/// Bytes of tensor buffers currently alive on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// Peak of live bytes since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Start a new measurement window: the peak restarts from the current
/// live total.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|p| p.set(live));
}

/// Restore a previously observed peak after a nested window, keeping the
/// outer maximum correct.
pub fn raise_peak_to(peak: usize) {
    PEAK.with(|p| {
        if peak > p.get() {
            p.set(peak);
        }
    });
}

/// Runs `f` in a fresh window and returns `(result, transient_peak)` where
/// the transient peak excludes buffers already alive when the window opened.
pub fn with_window<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let base = live_bytes();
    reset_peak();
    let out = f();
    let transient = peak_bytes().saturating_sub(base);
    (out, transient)
}
