use std::sync::atomic::{AtomicUsize, Ordering};

/// Counts reads of a resource that some phase of training must not touch.
#[derive(Debug, Default)]
pub struct AccessCounter(AtomicUsize);

impl AccessCounter {
    pub fn hit(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }
}

impl Clone for AccessCounter {
    fn clone(&self) -> Self {
        Self(AtomicUsize::new(self.count()))
    }
}
