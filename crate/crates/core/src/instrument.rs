//! Live-instance counters for secret-bearing values.
//!
//! Every [`DataKey`](crate::crypto::DataKey) and
//! [`PlaintextBuffer`](crate::crypto::PlaintextBuffer) registers with a
//! tracker when constructed and deregisters when wiped (explicitly or on
//! drop). A tracker reading zero means no unwiped key or plaintext created
//! under it is still alive.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

#[derive(Debug, Default)]
struct Counts {
    keys: AtomicUsize,
    buffers: AtomicUsize,
}

#[derive(Clone, Debug, Default)]
pub struct LiveTracker {
    counts: Arc<Counts>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct LiveCounts {
    pub data_keys: usize,
    pub plaintext_buffers: usize,
}

impl LiveCounts {
    pub fn is_zero(&self) -> bool {
        self.data_keys == 0 && self.plaintext_buffers == 0
    }
}

impl LiveTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Process-wide tracker used by values built without an explicit one.
    pub fn global() -> &'static LiveTracker {
        static GLOBAL: OnceLock<LiveTracker> = OnceLock::new();
        GLOBAL.get_or_init(LiveTracker::new)
    }

    pub fn counts(&self) -> LiveCounts {
        LiveCounts {
            data_keys: self.counts.keys.load(Ordering::SeqCst),
            plaintext_buffers: self.counts.buffers.load(Ordering::SeqCst),
        }
    }

    pub fn live_data_keys(&self) -> usize {
        self.counts().data_keys
    }

    pub fn live_plaintext_buffers(&self) -> usize {
        self.counts().plaintext_buffers
    }

    pub(crate) fn key_created(&self) {
        self.counts.keys.fetch_add(1, Ordering::SeqCst);
    }

    pub(crate) fn key_wiped(&self) {
        self.counts.keys.fetch_sub(1, Ordering::SeqCst);
    }

    pub(crate) fn buffer_created(&self) {
        self.counts.buffers.fetch_add(1, Ordering::SeqCst);
    }

    pub(crate) fn buffer_wiped(&self) {
        self.counts.buffers.fetch_sub(1, Ordering::SeqCst);
    }
}
