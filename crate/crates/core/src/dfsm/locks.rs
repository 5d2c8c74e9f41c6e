use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

pub type SessionId = [u8; 16];

/// Length value meaning "to the end of the file, however long it gets".
pub const WHOLE_FILE: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RangeLock {
    pub path: PathBuf,
    pub offset: u64,
    pub length: u64,
    pub owner: SessionId,
    pub lock_id: u64,
}

impl RangeLock {
    pub fn end(&self) -> u64 {
        range_end(self.offset, self.length)
    }

    pub fn overlaps(&self, offset: u64, length: u64) -> bool {
        ranges_overlap(self.offset, self.end(), offset, range_end(offset, length))
    }
}

pub fn range_end(offset: u64, length: u64) -> u64 {
    if length == WHOLE_FILE {
        u64::MAX
    } else {
        offset.saturating_add(length)
    }
}

fn ranges_overlap(a_start: u64, a_end: u64, b_start: u64, b_end: u64) -> bool {
    a_start < b_end && b_start < a_end
}

#[derive(Debug, PartialEq, Eq)]
pub enum LockError {
    Conflict,
    NotOwner,
    EmptyRange,
}

#[derive(Debug, Default)]
struct Inner {
    next_id: u64,
    by_path: HashMap<PathBuf, Vec<RangeLock>>,
}

/// Advisory, non-blocking byte-range locks keyed by resolved file path.
///
/// Locks never overlap, including two locks of the same session.
#[derive(Debug, Default)]
pub struct LockTable {
    inner: Mutex<Inner>,
}

impl LockTable {
    pub fn new() -> Self {
        LockTable::default()
    }

    pub fn lock(&self, path: &Path, offset: u64, length: u64, owner: SessionId) -> Result<u64, LockError> {
        if length == 0 {
            return Err(LockError::EmptyRange);
        }
        let mut inner = self.inner.lock().unwrap();
        if inner
            .by_path
            .get(path)
            .is_some_and(|locks| locks.iter().any(|l| l.overlaps(offset, length)))
        {
            return Err(LockError::Conflict);
        }
        inner.next_id += 1;
        let lock_id = inner.next_id;
        inner.by_path.entry(path.to_path_buf()).or_default().push(RangeLock {
            path: path.to_path_buf(),
            offset,
            length,
            owner,
            lock_id,
        });
        Ok(lock_id)
    }

    /// Releases a lock. Releasing an id that is no longer held succeeds.
    pub fn unlock(&self, lock_id: u64, owner: SessionId) -> Result<(), LockError> {
        let mut inner = self.inner.lock().unwrap();
        let mut emptied = None;
        for (path, locks) in inner.by_path.iter_mut() {
            if let Some(idx) = locks.iter().position(|l| l.lock_id == lock_id) {
                if locks[idx].owner != owner {
                    return Err(LockError::NotOwner);
                }
                locks.swap_remove(idx);
                if locks.is_empty() {
                    emptied = Some(path.clone());
                }
                break;
            }
        }
        if let Some(path) = emptied {
            inner.by_path.remove(&path);
        }
        Ok(())
    }

    /// True if a lock held by a session other than `session` overlaps the range.
    pub fn conflicts(&self, path: &Path, offset: u64, length: u64, session: SessionId) -> bool {
        if length == 0 {
            return false;
        }
        let inner = self.inner.lock().unwrap();
        inner
            .by_path
            .get(path)
            .is_some_and(|locks| locks.iter().any(|l| l.owner != session && l.overlaps(offset, length)))
    }

    pub fn release_session(&self, owner: SessionId) -> usize {
        let mut inner = self.inner.lock().unwrap();
        let mut released = 0;
        inner.by_path.retain(|_, locks| {
            let before = locks.len();
            locks.retain(|l| l.owner != owner);
            released += before - locks.len();
            !locks.is_empty()
        });
        released
    }

    pub fn held_by(&self, owner: SessionId) -> Vec<RangeLock> {
        let inner = self.inner.lock().unwrap();
        inner
            .by_path
            .values()
            .flatten()
            .filter(|l| l.owner == owner)
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().by_path.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Audit hook: true when no two live locks on one path overlap.
    pub fn audit(&self) -> bool {
        let inner = self.inner.lock().unwrap();
        inner.by_path.values().all(|locks| {
            locks.iter().enumerate().all(|(i, a)| {
                locks[i + 1..]
                    .iter()
                    .all(|b| !ranges_overlap(a.offset, a.end(), b.offset, b.end()))
            })
        })
    }
}
