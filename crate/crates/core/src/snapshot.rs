//! Atomically swappable immutable snapshots.

use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

/// Holds an `Arc<T>` that readers clone cheaply and a single writer replaces.
///
/// Readers never observe a partially applied update: they either hold the
/// old `Arc` or the new one. Writers are serialized by `write_lock`, so a
/// read-modify-write through [`SnapshotCell::update`] never loses updates.
#[derive(Debug)]
pub struct SnapshotCell<T> {
    current: RwLock<Arc<T>>,
    write_lock: Mutex<()>,
}

impl<T> SnapshotCell<T> {
    pub fn new(value: T) -> Self {
        SnapshotCell { current: RwLock::new(Arc::new(value)), write_lock: Mutex::new(()) }
    }

    pub fn load(&self) -> Arc<T> {
        self.current.read().clone()
    }

    pub fn store(&self, value: T) -> Arc<T> {
        let _w = self.write_lock.lock();
        let next = Arc::new(value);
        *self.current.write() = next.clone();
        next
    }

    /// Derive the next snapshot from the current one. On error the current
    /// snapshot is left in place.
    pub fn update<E>(&self, f: impl FnOnce(&T) -> Result<T, E>) -> Result<Arc<T>, E> {
        let _w = self.write_lock.lock();
        let cur = self.current.read().clone();
        let next = Arc::new(f(&cur)?);
        *self.current.write() = next.clone();
        Ok(next)
    }
}
