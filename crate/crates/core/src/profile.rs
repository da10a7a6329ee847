//! Thread-local multiply-accumulate counter.
//!
//! Forward kernels report the MACs they perform; [`count_macs`] captures the
//! total for a closure so the analytic complexity model can be checked against
//! the live computation. Backward passes do not report.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
}

#[inline]
pub fn add_macs(n: u64) {
    ACTIVE.with(|a| {
        if a.get() {
            MACS.with(|m| m.set(m.get() + n));
        }
    });
}

/// Runs `f` on the current thread and returns its result with the MACs it reported.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let prev_active = ACTIVE.with(|a| a.replace(true));
    let prev = MACS.with(|m| m.replace(0));
    let r = f();
    let n = MACS.with(|m| m.replace(prev));
    ACTIVE.with(|a| a.set(prev_active));
    if prev_active {
        add_macs(n);
    }
    (r, n)
}
