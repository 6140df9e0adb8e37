//! Virtualization-aware TLB: caches completed translations tagged by
//! (page, ASID, VMID, kind), fully associative with FIFO replacement.
//!
//! Three entry kinds: Stage1 (VA→PA, V=0; VA→GPA entries would be
//! virt-tagged), GStage (GPA→HPA, caches the page-table translations a
//! nested walk performs), Combined (GVA→HPA for a whole two-stage
//! translation, permissions merged at insert time). Faults are never
//! cached.

use std::collections::VecDeque;
use thiserror::Error;

use crate::ptw::{Access, PageSize, Perms};

pub const DEFAULT_CAPACITY: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntryKind {
    Stage1,
    GStage,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbEntry {
    pub kind: EntryKind,
    /// Page-aligned VA (Stage1/Combined) or GPA (GStage) base.
    pub tag: u64,
    pub asid: u16,
    pub vmid: u16,
    pub virt_tag: bool,
    pub page_size: PageSize,
    pub perms: Perms,
    /// Page-aligned target physical base.
    pub pa_base: u64,
    pub global: bool,
    /// Combined entries record the leaf GPA page base so hfence.gvma
    /// can filter them by guest physical address.
    pub leaf_gpa: Option<u64>,
    /// Whether MXR may satisfy a load through this entry. For combined
    /// entries this is stage1-executable AND G-readable, which the
    /// merged `perms.x` alone cannot express.
    pub mxr_load: bool,
}

impl TlbEntry {
    fn covers(&self, addr: u64) -> bool {
        addr & !(self.page_size.bytes() - 1) == self.tag
    }

    pub fn target(&self, addr: u64) -> u64 {
        self.pa_base | (addr & (self.page_size.bytes() - 1))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LookupKey {
    pub kind: EntryKind,
    pub addr: u64,
    pub asid: u16,
    pub vmid: u16,
    pub virt: bool,
    pub acc: Access,
    pub user: bool,
    pub sum: bool,
    pub mxr: bool,
}

fn perms_allow(p: Perms, mxr_load: bool, acc: Access, user: bool, sum: bool, mxr: bool) -> bool {
    let user_ok = if user { p.u } else { !p.u || sum };
    match acc {
        Access::Fetch => p.x && if user { p.u } else { !p.u },
        Access::Load => (p.r || (mxr && mxr_load)) && user_ok,
        Access::Store => p.w && user_ok,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FenceKind {
    SfenceVma,
    HfenceVvma,
    HfenceGvma,
}

impl FenceKind {
    pub fn name(self) -> &'static str {
        match self {
            FenceKind::SfenceVma => "sfence.vma",
            FenceKind::HfenceVvma => "hfence.vvma",
            FenceKind::HfenceGvma => "hfence.gvma",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FenceError {
    #[error("invalid fence operand pairing: {0}")]
    InvalidFence(&'static str),
}

#[derive(Debug, Clone)]
pub struct Tlb {
    entries: VecDeque<TlbEntry>,
    capacity: usize,
}

impl Tlb {
    pub fn new(capacity: usize) -> Tlb {
        Tlb { entries: VecDeque::new(), capacity: capacity.max(1) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &TlbEntry> {
        self.entries.iter()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn lookup(&self, key: &LookupKey) -> Option<&TlbEntry> {
        self.entries.iter().find(|e| {
            if e.kind != key.kind || !e.covers(key.addr) {
                return false;
            }
            let ids_match = match e.kind {
                EntryKind::Stage1 => {
                    e.virt_tag == key.virt
                        && (e.global || e.asid == key.asid)
                        && (!e.virt_tag || e.vmid == key.vmid)
                }
                EntryKind::GStage => e.vmid == key.vmid,
                EntryKind::Combined => {
                    (e.global || e.asid == key.asid) && e.vmid == key.vmid
                }
            };
            // A perms mismatch is a miss: the caller re-walks and takes
            // the authoritative fault from the walker.
            ids_match && perms_allow(e.perms, e.mxr_load, key.acc, key.user, key.sum, key.mxr)
        })
    }

    /// Insert, replacing any entry with the same identity; FIFO
    /// eviction once capacity is exceeded.
    pub fn insert(&mut self, entry: TlbEntry) {
        if let Some(pos) = self.entries.iter().position(|e| {
            e.kind == entry.kind
                && e.tag == entry.tag
                && e.page_size == entry.page_size
                && e.asid == entry.asid
                && e.vmid == entry.vmid
                && e.virt_tag == entry.virt_tag
        }) {
            self.entries[pos] = entry;
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    /// Invalidate entries per fence semantics; absent operands are
    /// wildcards. Returns the number of entries removed.
    pub fn fence(
        &mut self,
        kind: FenceKind,
        addr: Option<u64>,
        id: Option<u16>,
        current_vmid: u16,
    ) -> Result<usize, FenceError> {
        if let Some(id) = id {
            match kind {
                FenceKind::SfenceVma | FenceKind::HfenceVvma => {
                    if u64::from(id) > crate::csr::atp::ASID_MASK {
                        return Err(FenceError::InvalidFence("asid exceeds 9 bits"));
                    }
                }
                FenceKind::HfenceGvma => {
                    if u64::from(id) > crate::csr::atp::VMID_MASK {
                        return Err(FenceError::InvalidFence("vmid exceeds 7 bits"));
                    }
                }
            }
        }
        let before = self.entries.len();
        self.entries.retain(|e| !dies(e, kind, addr, id, current_vmid));
        Ok(before - self.entries.len())
    }
}

fn dies(
    e: &TlbEntry,
    kind: FenceKind,
    addr: Option<u64>,
    id: Option<u16>,
    current_vmid: u16,
) -> bool {
    let addr_hit = |a: Option<u64>, base: u64| a.map_or(true, |x| x & !(e.page_size.bytes() - 1) == base);
    match kind {
        FenceKind::SfenceVma => {
            e.kind == EntryKind::Stage1
                && !e.virt_tag
                && addr_hit(addr, e.tag)
                // Global entries are exempt from ASID-filtered flushes.
                && id.map_or(true, |a| !e.global && e.asid == a)
        }
        FenceKind::HfenceVvma => {
            // Stage1(virt=1) and, for coherence, Combined entries whose
            // VS-stage half belongs to the current VMID.
            let kind_ok = (e.kind == EntryKind::Stage1 && e.virt_tag)
                || e.kind == EntryKind::Combined;
            kind_ok
                && e.vmid == current_vmid
                && addr_hit(addr, e.tag)
                && id.map_or(true, |a| !e.global && e.asid == a)
        }
        FenceKind::HfenceGvma => match e.kind {
            EntryKind::GStage => {
                addr_hit(addr, e.tag) && id.map_or(true, |v| e.vmid == v)
            }
            EntryKind::Combined => {
                addr.map_or(true, |x| {
                    e.leaf_gpa.map_or(true, |g| x & !(e.page_size.bytes() - 1) == g)
                }) && id.map_or(true, |v| e.vmid == v)
            }
            EntryKind::Stage1 => false,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(kind: EntryKind, tag: u64, asid: u16, vmid: u16, virt: bool) -> TlbEntry {
        TlbEntry {
            kind,
            tag,
            asid,
            vmid,
            virt_tag: virt,
            page_size: PageSize::Size4K,
            perms: Perms::FULL,
            pa_base: 0x9000_0000,
            global: false,
            leaf_gpa: if kind == EntryKind::Combined { Some(0x4_0000) } else { None },
            mxr_load: true,
        }
    }

    fn key(kind: EntryKind, addr: u64, asid: u16, vmid: u16, virt: bool) -> LookupKey {
        LookupKey {
            kind,
            addr,
            asid,
            vmid,
            virt,
            acc: Access::Load,
            user: true,
            sum: false,
            mxr: false,
        }
    }

    #[test]
    fn insert_lookup_round_trip() {
        let mut t = Tlb::new(16);
        t.insert(entry(EntryKind::Stage1, 0x1000, 1, 0, false));
        let hit = t.lookup(&key(EntryKind::Stage1, 0x1abc, 1, 0, false)).unwrap();
        assert_eq!(hit.target(0x1abc), 0x9000_0abc);
    }

    #[test]
    fn vmid_change_misses() {
        let mut t = Tlb::new(16);
        t.insert(entry(EntryKind::Combined, 0x1000, 1, 3, true));
        t.insert(entry(EntryKind::GStage, 0x2000, 0, 3, false));
        assert!(t.lookup(&key(EntryKind::Combined, 0x1000, 1, 4, true)).is_none());
        assert!(t.lookup(&key(EntryKind::GStage, 0x2000, 0, 4, false)).is_none());
        assert!(t.lookup(&key(EntryKind::Combined, 0x1000, 1, 3, true)).is_some());
    }

    #[test]
    fn gig_entry_covers_whole_frame() {
        let mut t = Tlb::new(16);
        let mut e = entry(EntryKind::Stage1, 0x4000_0000, 1, 0, false);
        e.page_size = PageSize::Size1G;
        e.pa_base = 0x8000_0000;
        t.insert(e);
        for off in [0u64, 0xFFF, 0x3FFF_FFFF] {
            let hit = t.lookup(&key(EntryKind::Stage1, 0x4000_0000 + off, 1, 0, false));
            assert!(hit.is_some(), "offset {off:#x}");
        }
        assert!(t.lookup(&key(EntryKind::Stage1, 0x8000_0000, 1, 0, false)).is_none());
    }

    #[test]
    fn fifo_eviction() {
        let mut t = Tlb::new(4);
        for i in 0..5u64 {
            t.insert(entry(EntryKind::Stage1, 0x1000 * (i + 1), 1, 0, false));
        }
        assert_eq!(t.len(), 4);
        // oldest (tag 0x1000) evicted
        assert!(t.lookup(&key(EntryKind::Stage1, 0x1000, 1, 0, false)).is_none());
        assert!(t.lookup(&key(EntryKind::Stage1, 0x2000, 1, 0, false)).is_some());
    }

    #[test]
    fn duplicate_tag_replaces() {
        let mut t = Tlb::new(4);
        t.insert(entry(EntryKind::Stage1, 0x1000, 1, 0, false));
        let mut e = entry(EntryKind::Stage1, 0x1000, 1, 0, false);
        e.pa_base = 0xA000_0000;
        t.insert(e);
        assert_eq!(t.len(), 1);
        let hit = t.lookup(&key(EntryKind::Stage1, 0x1000, 1, 0, false)).unwrap();
        assert_eq!(hit.pa_base, 0xA000_0000);
    }

    #[test]
    fn perms_mismatch_is_miss() {
        let mut t = Tlb::new(4);
        let mut e = entry(EntryKind::Stage1, 0x1000, 1, 0, false);
        e.perms = Perms { r: true, w: false, x: false, u: true, g: false };
        t.insert(e);
        let mut k = key(EntryKind::Stage1, 0x1000, 1, 0, false);
        k.acc = Access::Store;
        assert!(t.lookup(&k).is_none());
        k.acc = Access::Load;
        assert!(t.lookup(&k).is_some());
    }

    #[test]
    fn hfence_gvma_wildcard_spares_host_stage1() {
        let mut t = Tlb::new(16);
        t.insert(entry(EntryKind::Stage1, 0x1000, 1, 0, false));
        t.insert(entry(EntryKind::GStage, 0x2000, 0, 3, false));
        t.insert(entry(EntryKind::Combined, 0x3000, 1, 3, true));
        let n = t.fence(FenceKind::HfenceGvma, None, None, 3).unwrap();
        assert_eq!(n, 2);
        assert_eq!(t.len(), 1);
        assert!(t.lookup(&key(EntryKind::Stage1, 0x1000, 1, 0, false)).is_some());
    }

    #[test]
    fn sfence_global_entries_survive_asid_filter() {
        let mut t = Tlb::new(16);
        let mut g = entry(EntryKind::Stage1, 0x1000, 7, 0, false);
        g.global = true;
        t.insert(g);
        t.insert(entry(EntryKind::Stage1, 0x2000, 7, 0, false));
        let n = t.fence(FenceKind::SfenceVma, None, Some(7), 0).unwrap();
        assert_eq!(n, 1);
        assert!(t.entries().any(|e| e.global));
        // wildcard flush takes the global one too
        let n = t.fence(FenceKind::SfenceVma, None, None, 0).unwrap();
        assert_eq!(n, 1);
    }

    #[test]
    fn fence_on_empty_is_zero() {
        let mut t = Tlb::new(16);
        assert_eq!(t.fence(FenceKind::HfenceVvma, None, None, 0).unwrap(), 0);
    }

    #[test]
    fn invalid_fence_pairing() {
        let mut t = Tlb::new(16);
        assert!(t.fence(FenceKind::HfenceGvma, None, Some(0x1FF), 0).is_err());
        assert!(t.fence(FenceKind::SfenceVma, None, Some(0x3FF), 0).is_err());
    }

    #[test]
    fn hfence_vvma_current_vmid_only() {
        let mut t = Tlb::new(16);
        t.insert(entry(EntryKind::Combined, 0x1000, 1, 3, true));
        t.insert(entry(EntryKind::Combined, 0x1000, 1, 4, true));
        let n = t.fence(FenceKind::HfenceVvma, None, None, 3).unwrap();
        assert_eq!(n, 1);
        assert!(t.entries().all(|e| e.vmid == 4));
    }
}
