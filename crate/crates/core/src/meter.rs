//! Byte accounting for the numeric buffers that hold algorithmic state.
//!
//! Every [`Buffer`] registers its payload size with a thread-local meter on
//! creation and releases it on drop. The meter tracks live bytes and the peak
//! reached since the last [`reset_peak`], which is what the memory benchmarks
//! report. Only buffers that represent integration state or unrolled tapes go
//! through here; scratch arithmetic does not.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

fn acquire(bytes: usize) {
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

fn release(bytes: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes currently held by live buffers on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// Highest value of [`live_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Sets the peak to the current live count.
pub fn reset_peak() {
    let live = live_bytes();
    PEAK.with(|peak| peak.set(live));
}

/// Runs `f` and returns its result along with the peak number of bytes
/// allocated above the live baseline while it ran.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let baseline = live_bytes();
    let previous_peak = peak_bytes();
    reset_peak();
    let out = f();
    let used = peak_bytes().saturating_sub(baseline);
    PEAK.with(|peak| peak.set(previous_peak.max(peak.get())));
    (out, used)
}

/// A vector of `f64` whose size is reported to the meter.
#[derive(Debug, PartialEq)]
pub struct Buffer(Vec<f64>);

impl Buffer {
    pub fn from_vec(values: Vec<f64>) -> Self {
        acquire(values.len() * std::mem::size_of::<f64>());
        Buffer(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self::from_vec(vec![0.0; len])
    }

    pub fn byte_len(&self) -> usize {
        self.0.len() * std::mem::size_of::<f64>()
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        release(self.byte_len());
        std::mem::take(&mut self.0)
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Self::from_vec(self.0.clone())
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        release(self.byte_len());
    }
}

impl Deref for Buffer {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Buffer {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}
