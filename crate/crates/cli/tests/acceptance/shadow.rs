//! Independent shadow model of the segment cache: its own bookkeeping of
//! stored bytes, reservations, pins and LRU victims, used to cross-check
//! the real store step by step.

use bbm_core::cache::CacheKey;
use bbm_core::clock::Tick;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ShadowOutcome {
    Ok,
    AlreadyComplete,
    FillInProgress,
    TotalSizeMismatch,
    InsufficientBudget,
}

#[derive(Clone, Debug)]
pub struct ShadowEntry {
    pub total: u64,
    pub written: BTreeSet<u32>,
    pub last_access: Tick,
    pub pins: u32,
    pub active_fill: bool,
    pub complete: bool,
}

pub struct ShadowCache {
    pub budget: Option<u64>,
    pub segment_size: u32,
    pub entries: BTreeMap<CacheKey, ShadowEntry>,
}

impl ShadowCache {
    pub fn new(budget: Option<u64>, segment_size: u32) -> Self {
        Self {
            budget,
            segment_size,
            entries: BTreeMap::new(),
        }
    }

    pub fn segments(&self, total: u64) -> u32 {
        total.div_ceil(u64::from(self.segment_size)) as u32
    }

    fn segment_len(&self, total: u64, idx: u32) -> u64 {
        let n = self.segments(total);
        if idx + 1 == n {
            total - u64::from(idx) * u64::from(self.segment_size)
        } else {
            u64::from(self.segment_size)
        }
    }

    pub fn stored(&self, e: &ShadowEntry) -> u64 {
        e.written
            .iter()
            .map(|&i| self.segment_len(e.total, i))
            .sum()
    }

    pub fn bytes_used(&self) -> u64 {
        self.entries.values().map(|e| self.stored(e)).sum()
    }

    pub fn reserved(&self) -> u64 {
        self.entries
            .values()
            .filter(|e| e.active_fill)
            .map(|e| e.total - self.stored(e))
            .sum()
    }

    fn fits(&self, needed: u64) -> bool {
        match self.budget {
            None => true,
            Some(b) => self.bytes_used() + self.reserved() + needed <= b,
        }
    }

    /// LRU eviction: least `last_access` first, key order on ties, skipping
    /// pinned entries. Returns victims in eviction order.
    pub fn evict_until(&mut self, needed: u64) -> Vec<CacheKey> {
        let mut victims = Vec::new();
        while !self.fits(needed) {
            let victim = self
                .entries
                .iter()
                .filter(|(_, e)| e.pins == 0 && !e.active_fill)
                .min_by_key(|(k, e)| (e.last_access, (*k).clone()))
                .map(|(k, _)| k.clone());
            match victim {
                Some(k) => {
                    self.entries.remove(&k);
                    victims.push(k);
                }
                None => break,
            }
        }
        victims
    }

    pub fn lookup(&mut self, key: &CacheKey, now: Tick) -> bool {
        match self.entries.get_mut(key) {
            Some(e) => {
                e.last_access = now;
                e.pins += 1;
                true
            }
            None => false,
        }
    }

    pub fn unpin(&mut self, key: &CacheKey) {
        if let Some(e) = self.entries.get_mut(key) {
            e.pins -= 1;
        }
    }

    /// Mirrors `begin_fill`: admission, reservation and the fill pin.
    pub fn begin_fill(
        &mut self,
        key: &CacheKey,
        total: u64,
        now: Tick,
    ) -> (ShadowOutcome, Vec<CacheKey>) {
        let needed = match self.entries.get(key) {
            Some(e) if e.complete => return (ShadowOutcome::AlreadyComplete, vec![]),
            Some(e) if e.active_fill => return (ShadowOutcome::FillInProgress, vec![]),
            Some(e) if e.total != total => return (ShadowOutcome::TotalSizeMismatch, vec![]),
            Some(e) => e.total - self.stored(e),
            None => total,
        };
        // Pin the resumed entry (matching the real store) before evicting.
        // Its reservation is represented by `needed` during admission; the
        // active flag is raised only after the entry is admitted.
        let resuming = self.entries.contains_key(key);
        if resuming {
            let e = self.entries.get_mut(key).unwrap();
            e.pins += 1;
            e.last_access = now;
        }
        let victims = self.evict_until(needed);
        if !self.fits(needed) {
            if resuming {
                self.entries.get_mut(key).unwrap().pins -= 1;
            }
            return (ShadowOutcome::InsufficientBudget, victims);
        }
        if resuming {
            let e = self.entries.get_mut(key).unwrap();
            e.active_fill = !e.complete;
        }
        if !resuming {
            let segments = self.segments(total);
            self.entries.insert(
                key.clone(),
                ShadowEntry {
                    total,
                    written: BTreeSet::new(),
                    last_access: now,
                    pins: 1,
                    active_fill: segments > 0,
                    complete: segments == 0,
                },
            );
        }
        (ShadowOutcome::Ok, victims)
    }

    pub fn next_absent(&self, key: &CacheKey) -> Option<u32> {
        let e = self.entries.get(key)?;
        (0..self.segments(e.total)).find(|i| !e.written.contains(i))
    }

    pub fn write_segment(&mut self, key: &CacheKey, idx: u32) {
        let segment_count = {
            let e = self.entries.get(key).expect("shadow entry exists");
            self.segments(e.total)
        };
        let e = self.entries.get_mut(key).expect("shadow entry exists");
        e.written.insert(idx);
        if e.written.len() as u32 == segment_count {
            e.complete = true;
            e.active_fill = false;
        }
    }

    /// Mirrors dropping a `FillHandle`: the fill pin and any remaining
    /// reservation are released; an incomplete entry stays restartable.
    pub fn drop_fill(&mut self, key: &CacheKey) {
        if let Some(e) = self.entries.get_mut(key) {
            e.pins -= 1;
            e.active_fill = false;
        }
    }
}
