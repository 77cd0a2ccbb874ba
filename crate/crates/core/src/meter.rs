//! Byte accounting for auxiliary kernel buffers.
//!
//! Kernels that want their scratch memory measured allocate through an
//! [`AllocMeter`]. The meter tracks live bytes and the high-water mark;
//! buffers release their bytes when dropped.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;
use core::ops::{Deref, DerefMut};

#[derive(Debug, Default)]
struct Counters {
    live: Cell<usize>,
    peak: Cell<usize>,
    total: Cell<usize>,
}

/// Shared handle; clones observe the same counters.
#[derive(Debug, Clone, Default)]
pub struct AllocMeter(Rc<Counters>);

impl AllocMeter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zero-filled `f64` buffer charged to this meter.
    pub fn alloc(&self, len: usize) -> MeteredBuf {
        let bytes = len * core::mem::size_of::<f64>();
        let c = &self.0;
        c.live.set(c.live.get() + bytes);
        c.total.set(c.total.get() + bytes);
        if c.live.get() > c.peak.get() {
            c.peak.set(c.live.get());
        }
        MeteredBuf {
            data: vec![0.0; len],
            bytes,
            meter: self.clone(),
        }
    }

    pub fn live_bytes(&self) -> usize {
        self.0.live.get()
    }

    pub fn peak_bytes(&self) -> usize {
        self.0.peak.get()
    }

    /// Sum of every allocation ever charged.
    pub fn total_bytes(&self) -> usize {
        self.0.total.get()
    }

    /// Restart the high-water mark from the current live count.
    pub fn reset_peak(&self) {
        self.0.peak.set(self.0.live.get());
    }
}

pub struct MeteredBuf {
    data: Vec<f64>,
    bytes: usize,
    meter: AllocMeter,
}

impl Deref for MeteredBuf {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for MeteredBuf {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl Drop for MeteredBuf {
    fn drop(&mut self) {
        let c = &self.meter.0;
        c.live.set(c.live.get() - self.bytes);
    }
}
