//! Segment-granularity video cache.
//!
//! Entries are keyed by `(video_id, format variant)` so originals and
//! transcoded copies coexist. An entry is a fixed-size byte buffer plus a
//! segment-presence bitmap: fills write segments in any order, readers may
//! stream from an entry while it is still filling, and a failed fill leaves
//! a restartable `Filling` entry so a retry only fetches what is missing.
//!
//! Eviction is LRU at entry granularity under a byte budget. Admission for
//! a new fill reserves the entry's full size up front so concurrent fills
//! cannot oversubscribe the budget; `bytes_used` itself always equals the
//! sum of stored segment bytes. Pinned entries (open read or fill handles)
//! are never evicted.

use crate::clock::Tick;
use crate::ids::VideoId;
use crate::media::FormatVariantKey;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};
use thiserror::Error;

pub const DEFAULT_SEGMENT_SIZE: u32 = 256 * 1024;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MANIFEST_HEADER: &str = "bbm-manifest v1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CacheError {
    #[error("insufficient budget: need {needed} bytes, {available} free after eviction")]
    InsufficientBudget { needed: u64, available: u64 },
    #[error("entry already complete")]
    AlreadyComplete,
    #[error("another fill is active for this entry")]
    FillInProgress,
    #[error("resumed fill declares {got} bytes but entry has {expected}")]
    TotalSizeMismatch { expected: u64, got: u64 },
    #[error("segment index {index} out of range (entry has {total})")]
    OutOfRange { index: u32, total: u32 },
    #[error("segment length {got} does not match expected {expected}")]
    SizeMismatch { expected: u32, got: u32 },
    #[error("segment {index} rewritten with different bytes")]
    DuplicateSegment { index: u32 },
    #[error("segment {index} not present")]
    SegmentNotPresent { index: u32 },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FillState {
    Filling,
    Complete,
}

impl fmt::Display for FillState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FillState::Filling => f.write_str("filling"),
            FillState::Complete => f.write_str("complete"),
        }
    }
}

/// Cache key: one rendition of one video.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CacheKey {
    pub video: VideoId,
    pub variant: FormatVariantKey,
}

impl CacheKey {
    pub fn new(video: VideoId, variant: FormatVariantKey) -> Self {
        Self { video, variant }
    }

    /// Stable content-independent name for the entry's payload file.
    pub fn stable_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.video.as_str().as_bytes());
        h.update(b"\n");
        h.update(self.variant.to_string().as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.video, self.variant)
    }
}

pub fn segment_count(total_bytes: u64, segment_size: u32) -> u32 {
    total_bytes.div_ceil(u64::from(segment_size)) as u32
}

pub fn segment_len(total_bytes: u64, segment_size: u32, index: u32) -> u32 {
    let total = segment_count(total_bytes, segment_size);
    debug_assert!(index < total);
    if index + 1 == total {
        (total_bytes - u64::from(index) * u64::from(segment_size)) as u32
    } else {
        segment_size
    }
}

struct Entry {
    segment_size: u32,
    total_bytes: u64,
    total_segments: u32,
    present: Vec<bool>,
    set_count: u32,
    /// Length of the all-present prefix of `present`; fills are sequential
    /// so this is what streaming readers consume.
    contiguous: u32,
    stored_bytes: u64,
    state: FillState,
    last_access: Tick,
    pin_count: u32,
    active_fill: bool,
    data: Vec<u8>,
}

impl Entry {
    fn new(total_bytes: u64, segment_size: u32, now: Tick) -> Self {
        let total_segments = segment_count(total_bytes, segment_size);
        let state = if total_segments == 0 {
            FillState::Complete
        } else {
            FillState::Filling
        };
        Entry {
            segment_size,
            total_bytes,
            total_segments,
            present: vec![false; total_segments as usize],
            set_count: 0,
            contiguous: 0,
            stored_bytes: 0,
            state,
            last_access: now,
            pin_count: 0,
            active_fill: false,
            data: vec![0; total_bytes as usize],
        }
    }

    fn complete(total_bytes: u64, segment_size: u32, data: Vec<u8>, last_access: Tick) -> Self {
        let total_segments = segment_count(total_bytes, segment_size);
        Entry {
            segment_size,
            total_bytes,
            total_segments,
            present: vec![true; total_segments as usize],
            set_count: total_segments,
            contiguous: total_segments,
            stored_bytes: total_bytes,
            state: FillState::Complete,
            last_access,
            pin_count: 0,
            active_fill: false,
            data,
        }
    }

    fn segment_len(&self, index: u32) -> u32 {
        segment_len(self.total_bytes, self.segment_size, index)
    }

    fn outstanding_bytes(&self) -> u64 {
        self.total_bytes - self.stored_bytes
    }
}

struct State {
    entries: BTreeMap<CacheKey, Entry>,
    byte_budget: Option<u64>,
    bytes_used: u64,
    reserved: u64,
}

impl State {
    fn free_bytes(&self) -> u64 {
        match self.byte_budget {
            None => u64::MAX,
            Some(b) => b.saturating_sub(self.bytes_used + self.reserved),
        }
    }

    fn fits(&self, needed: u64) -> bool {
        match self.byte_budget {
            None => true,
            Some(b) => self
                .bytes_used
                .checked_add(self.reserved)
                .and_then(|c| c.checked_add(needed))
                .map(|c| c <= b)
                .unwrap_or(false),
        }
    }

    /// Evicts least-recently-used unpinned entries (ties broken by key
    /// order) until `needed` bytes fit or nothing evictable remains.
    fn make_room(&mut self, needed: u64) -> Vec<CacheKey> {
        let mut evicted = Vec::new();
        while !self.fits(needed) {
            let victim = self
                .entries
                .iter()
                .filter(|(_, e)| e.pin_count == 0)
                .min_by_key(|(k, e)| (e.last_access, (*k).clone()))
                .map(|(k, _)| k.clone());
            match victim {
                Some(key) => {
                    let e = self.entries.remove(&key).expect("victim present");
                    debug_assert!(!e.active_fill);
                    self.bytes_used -= e.stored_bytes;
                    evicted.push(key);
                }
                None => break,
            }
        }
        evicted
    }
}

struct StoreInner {
    state: Mutex<State>,
}

/// Shared handle to the cache. Clones refer to the same store.
#[derive(Clone)]
pub struct CacheStore {
    inner: Arc<StoreInner>,
}

/// Result of admitting a fill: the fill handle plus any entries evicted to
/// make room.
pub struct FillGrant {
    pub fill: FillHandle,
    pub evicted: Vec<CacheKey>,
}

impl fmt::Debug for FillGrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FillGrant")
            .field("key", self.fill.key())
            .field("evicted", &self.evicted)
            .finish()
    }
}

/// Summary row of the cache index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexRow {
    pub key: CacheKey,
    pub state: FillState,
    pub total_bytes: u64,
    pub stored_bytes: u64,
}

impl CacheStore {
    pub fn new(byte_budget: Option<u64>) -> Self {
        CacheStore {
            inner: Arc::new(StoreInner {
                state: Mutex::new(State {
                    entries: BTreeMap::new(),
                    byte_budget,
                    bytes_used: 0,
                    reserved: 0,
                }),
            }),
        }
    }

    pub fn byte_budget(&self) -> Option<u64> {
        self.lock().byte_budget
    }

    /// True when both handles refer to the same store.
    pub fn ptr_eq(&self, other: &CacheStore) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn bytes_used(&self) -> u64 {
        self.lock().bytes_used
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.inner.state.lock().expect("cache mutex poisoned")
    }

    /// Index lookup. A hit pins the entry and refreshes its LRU stamp; a
    /// miss changes nothing.
    pub fn lookup(&self, key: &CacheKey, now: Tick) -> Option<EntryHandle> {
        let mut st = self.lock();
        let entry = st.entries.get_mut(key)?;
        entry.last_access = now;
        entry.pin_count += 1;
        Some(EntryHandle {
            store: self.inner.clone(),
            key: key.clone(),
        })
    }

    /// All renditions currently indexed for a video, in variant order.
    /// Does not pin or touch.
    pub fn entries_for(&self, video: &VideoId) -> Vec<IndexRow> {
        let st = self.lock();
        st.entries
            .iter()
            .filter(|(k, _)| &k.video == video)
            .map(|(k, e)| IndexRow {
                key: k.clone(),
                state: e.state,
                total_bytes: e.total_bytes,
                stored_bytes: e.stored_bytes,
            })
            .collect()
    }

    /// Full index dump in key order.
    pub fn dump_index(&self) -> Vec<IndexRow> {
        let st = self.lock();
        st.entries
            .iter()
            .map(|(k, e)| IndexRow {
                key: k.clone(),
                state: e.state,
                total_bytes: e.total_bytes,
                stored_bytes: e.stored_bytes,
            })
            .collect()
    }

    /// Starts (or resumes) filling an entry. The entry's full size is
    /// reserved against the budget; eviction runs first if needed.
    pub fn begin_fill(
        &self,
        key: &CacheKey,
        total_bytes: u64,
        segment_size: u32,
        now: Tick,
    ) -> Result<FillGrant, CacheError> {
        let mut st = self.lock();
        let needed;
        // Read pins do not block a resume: a stream-while-fill reader keeps
        // its pin while the fill fails over to another node. Only a second
        // concurrent filler is excluded.
        let resuming = match st.entries.get_mut(key) {
            Some(e) if e.state == FillState::Complete => return Err(CacheError::AlreadyComplete),
            Some(e) if e.active_fill => return Err(CacheError::FillInProgress),
            Some(e) => {
                if e.total_bytes != total_bytes {
                    return Err(CacheError::TotalSizeMismatch {
                        expected: e.total_bytes,
                        got: total_bytes,
                    });
                }
                needed = e.outstanding_bytes();
                // Pin before evicting so the resumed entry cannot be its
                // own victim.
                e.pin_count += 1;
                e.active_fill = true;
                e.last_access = now;
                true
            }
            None => {
                needed = total_bytes;
                false
            }
        };

        let evicted = st.make_room(needed);
        if !st.fits(needed) {
            let available = st.free_bytes();
            if resuming {
                let e = st.entries.get_mut(key).expect("resumed entry present");
                e.pin_count -= 1;
                e.active_fill = false;
            }
            return Err(CacheError::InsufficientBudget { needed, available });
        }

        if !resuming {
            let mut entry = Entry::new(total_bytes, segment_size, now);
            entry.pin_count = 1;
            entry.active_fill = entry.state == FillState::Filling;
            st.entries.insert(key.clone(), entry);
        }
        st.reserved += match st.entries.get(key) {
            Some(e) if e.state == FillState::Filling => e.outstanding_bytes(),
            _ => 0,
        };

        Ok(FillGrant {
            fill: FillHandle {
                store: self.inner.clone(),
                key: key.clone(),
                total_bytes,
                segment_size: st.entries.get(key).expect("entry present").segment_size,
                completed: st.entries.get(key).map(|e| e.state) == Some(FillState::Complete),
            },
            evicted,
        })
    }

    /// Inserts an already-materialized rendition as a complete entry.
    pub fn insert_complete(
        &self,
        key: &CacheKey,
        bytes: &[u8],
        segment_size: u32,
        now: Tick,
    ) -> Result<Vec<CacheKey>, CacheError> {
        let total = bytes.len() as u64;
        let mut grant = self.begin_fill(key, total, segment_size, now)?;
        for idx in 0..grant.fill.total_segments() {
            let start = idx as usize * segment_size as usize;
            let len = segment_len(total, segment_size, idx) as usize;
            grant.fill.write_segment(idx, &bytes[start..start + len])?;
        }
        Ok(std::mem::take(&mut grant.evicted))
    }

    /// Evicts unpinned entries in LRU order until `needed_bytes` fit (or no
    /// unpinned entries remain; the caller checks the shortfall). Returns
    /// the evicted keys in eviction order.
    pub fn evict_until(&self, needed_bytes: u64) -> Vec<CacheKey> {
        self.lock().make_room(needed_bytes)
    }

    /// Free budget after accounting for stored bytes and reservations.
    pub fn free_bytes(&self) -> u64 {
        self.lock().free_bytes()
    }

    /// Writes the manifest and per-entry payload files for complete
    /// entries; filling entries are not persisted. Payload files not
    /// referenced by the manifest are removed.
    pub fn save_manifest(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let st = self.lock();
        let mut manifest = String::from(MANIFEST_HEADER);
        manifest.push('\n');
        let mut live_files = Vec::new();
        for (key, e) in &st.entries {
            if e.state != FillState::Complete {
                continue;
            }
            let hash = key.stable_hash();
            let file = dir.join(format!("{hash}.bin"));
            let up_to_date = std::fs::metadata(&file)
                .map(|m| m.len() == e.total_bytes)
                .unwrap_or(false);
            if !up_to_date {
                let mut f = std::fs::File::create(&file)?;
                f.write_all(&e.data)?;
            }
            manifest.push_str(&format!(
                "{hash} {} {} {} {}\n",
                key.video, key.variant, e.total_bytes, e.last_access.0
            ));
            live_files.push(format!("{hash}.bin"));
        }
        let tmp = dir.join("manifest.tmp");
        std::fs::write(&tmp, manifest)?;
        std::fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
        if let Ok(rd) = std::fs::read_dir(dir) {
            for ent in rd.flatten() {
                let name = ent.file_name().to_string_lossy().into_owned();
                if name.ends_with(".bin") && !live_files.contains(&name) {
                    let _ = std::fs::remove_file(ent.path());
                }
            }
        }
        Ok(())
    }

    /// Loads persisted entries from `dir`. A corrupt manifest or a missing
    /// directory yields an empty cache (logged); entries whose payload file
    /// is absent or mis-sized are skipped.
    pub fn load(dir: &Path, byte_budget: Option<u64>, segment_size: u32) -> CacheStore {
        let store = CacheStore::new(byte_budget);
        match Self::load_into(&store, dir, segment_size) {
            Ok(loaded) => {
                log::info!("cache: loaded {loaded} entries from {}", dir.display());
            }
            Err(e) => {
                log::warn!(
                    "cache: manifest load failed ({e}); starting with empty cache"
                );
                let mut st = store.lock();
                st.entries.clear();
                st.bytes_used = 0;
            }
        }
        // Respect a tighter budget than the one the entries were saved under.
        store.evict_until(0);
        store
    }

    fn load_into(store: &CacheStore, dir: &Path, segment_size: u32) -> Result<usize, CacheError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(0);
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CacheError::CorruptManifest(format!("unreadable: {e}")))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == MANIFEST_HEADER => {}
            other => {
                return Err(CacheError::CorruptManifest(format!(
                    "bad header line {other:?}"
                )))
            }
        }
        let mut loaded = 0;
        let mut st = store.lock();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            let [hash, video, variant, total, access] = parts[..] else {
                return Err(CacheError::CorruptManifest(format!("bad line `{line}`")));
            };
            let variant: FormatVariantKey = variant
                .parse()
                .map_err(CacheError::CorruptManifest)?;
            let total: u64 = total
                .parse()
                .map_err(|_| CacheError::CorruptManifest(format!("bad size in `{line}`")))?;
            let access: u64 = access
                .parse()
                .map_err(|_| CacheError::CorruptManifest(format!("bad stamp in `{line}`")))?;
            let key = CacheKey::new(VideoId::new(video), variant);
            if key.stable_hash() != hash {
                return Err(CacheError::CorruptManifest(format!(
                    "hash mismatch for {key}"
                )));
            }
            let data = match std::fs::read(dir.join(format!("{hash}.bin"))) {
                Ok(d) if d.len() as u64 == total => d,
                Ok(d) => {
                    log::warn!(
                        "cache: payload for {key} is {} bytes, expected {total}; skipping",
                        d.len()
                    );
                    continue;
                }
                Err(e) => {
                    log::warn!("cache: payload for {key} unreadable ({e}); skipping");
                    continue;
                }
            };
            st.bytes_used += total;
            st.entries
                .insert(key, Entry::complete(total, segment_size, data, Tick(access)));
            loaded += 1;
        }
        Ok(loaded)
    }
}

/// Pinned read access to one entry. Dropping the handle releases the pin.
pub struct EntryHandle {
    store: Arc<StoreInner>,
    key: CacheKey,
}

impl EntryHandle {
    fn with_entry<T>(&self, f: impl FnOnce(&Entry) -> T) -> T {
        let st = self.store.state.lock().expect("cache mutex poisoned");
        f(st.entries.get(&self.key).expect("pinned entry present"))
    }

    pub fn key(&self) -> &CacheKey {
        &self.key
    }

    pub fn state(&self) -> FillState {
        self.with_entry(|e| e.state)
    }

    pub fn total_bytes(&self) -> u64 {
        self.with_entry(|e| e.total_bytes)
    }

    pub fn segment_size(&self) -> u32 {
        self.with_entry(|e| e.segment_size)
    }

    pub fn total_segments(&self) -> u32 {
        self.with_entry(|e| e.total_segments)
    }

    /// Number of segments present from index 0 without a gap.
    pub fn contiguous_segments(&self) -> u32 {
        self.with_entry(|e| e.contiguous)
    }

    /// Bytes readable from offset 0 without a gap.
    pub fn contiguous_bytes(&self) -> u64 {
        self.with_entry(|e| {
            if e.contiguous == e.total_segments {
                e.total_bytes
            } else {
                u64::from(e.contiguous) * u64::from(e.segment_size)
            }
        })
    }

    pub fn read_segment(&self, index: u32) -> Result<Vec<u8>, CacheError> {
        self.with_entry(|e| {
            if index >= e.total_segments {
                return Err(CacheError::OutOfRange {
                    index,
                    total: e.total_segments,
                });
            }
            if !e.present[index as usize] {
                return Err(CacheError::SegmentNotPresent { index });
            }
            let start = index as usize * e.segment_size as usize;
            let len = e.segment_len(index) as usize;
            Ok(e.data[start..start + len].to_vec())
        })
    }

    /// Reads an arbitrary byte range covered by present segments.
    pub fn read_range(&self, offset: u64, len: usize) -> Result<Vec<u8>, CacheError> {
        self.with_entry(|e| {
            let end = offset + len as u64;
            if end > e.total_bytes {
                return Err(CacheError::OutOfRange {
                    index: segment_count(end.saturating_sub(1), e.segment_size),
                    total: e.total_segments,
                });
            }
            if len == 0 {
                return Ok(Vec::new());
            }
            let first = (offset / u64::from(e.segment_size)) as u32;
            let last = ((end - 1) / u64::from(e.segment_size)) as u32;
            for idx in first..=last {
                if !e.present[idx as usize] {
                    return Err(CacheError::SegmentNotPresent { index: idx });
                }
            }
            Ok(e.data[offset as usize..end as usize].to_vec())
        })
    }
}

impl Drop for EntryHandle {
    fn drop(&mut self) {
        let mut st = self.store.state.lock().expect("cache mutex poisoned");
        if let Some(e) = st.entries.get_mut(&self.key) {
            e.pin_count -= 1;
        }
    }
}

/// Exclusive write access for one fill. Dropping an incomplete fill leaves
/// the entry `Filling` and restartable; its reservation is released.
pub struct FillHandle {
    store: Arc<StoreInner>,
    key: CacheKey,
    total_bytes: u64,
    segment_size: u32,
    completed: bool,
}

impl FillHandle {
    pub fn key(&self) -> &CacheKey {
        &self.key
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }

    pub fn segment_size(&self) -> u32 {
        self.segment_size
    }

    pub fn total_segments(&self) -> u32 {
        segment_count(self.total_bytes, self.segment_size)
    }

    pub fn segment_len(&self, index: u32) -> u32 {
        segment_len(self.total_bytes, self.segment_size, index)
    }

    pub fn is_complete(&self) -> bool {
        self.completed
    }

    /// Lowest absent segment index, if any.
    pub fn next_absent_segment(&self) -> Option<u32> {
        let st = self.store.state.lock().expect("cache mutex poisoned");
        let e = st.entries.get(&self.key).expect("filled entry present");
        e.present.iter().position(|p| !p).map(|i| i as u32)
    }

    /// Stores one segment. Returns true when this write completed the
    /// entry. Rewriting a present segment with identical bytes is a no-op;
    /// different bytes are a fetch-layer bug and rejected.
    pub fn write_segment(&mut self, index: u32, bytes: &[u8]) -> Result<bool, CacheError> {
        let mut st = self.store.state.lock().expect("cache mutex poisoned");
        let st = &mut *st;
        let e = st
            .entries
            .get_mut(&self.key)
            .expect("filled entry present");
        if index >= e.total_segments {
            return Err(CacheError::OutOfRange {
                index,
                total: e.total_segments,
            });
        }
        let expected = e.segment_len(index);
        if bytes.len() as u32 != expected {
            return Err(CacheError::SizeMismatch {
                expected,
                got: bytes.len() as u32,
            });
        }
        let start = index as usize * e.segment_size as usize;
        if e.present[index as usize] {
            if &e.data[start..start + bytes.len()] == bytes {
                return Ok(e.state == FillState::Complete);
            }
            return Err(CacheError::DuplicateSegment { index });
        }
        e.data[start..start + bytes.len()].copy_from_slice(bytes);
        e.present[index as usize] = true;
        e.set_count += 1;
        while e.contiguous < e.total_segments && e.present[e.contiguous as usize] {
            e.contiguous += 1;
        }
        e.stored_bytes += bytes.len() as u64;
        st.bytes_used += bytes.len() as u64;
        if e.active_fill {
            st.reserved -= bytes.len() as u64;
        }
        if e.set_count == e.total_segments {
            e.state = FillState::Complete;
            e.active_fill = false;
            self.completed = true;
            return Ok(true);
        }
        Ok(false)
    }
}

impl Drop for FillHandle {
    fn drop(&mut self) {
        let mut st = self.store.state.lock().expect("cache mutex poisoned");
        let st = &mut *st;
        if let Some(e) = st.entries.get_mut(&self.key) {
            e.pin_count -= 1;
            if e.active_fill {
                st.reserved -= e.outstanding_bytes();
                e.active_fill = false;
            }
        }
    }
}
