//! Whole-machine instance: privilege state, CSR file, physical memory
//! and the TLB, with translation routed through the TLB and trap
//! entry/return wired to the CSR file.

use crate::csr::{addr, atp, CsrError, CsrFile};
use crate::mem::SparseMemory;
use crate::privilege::{BaseMode, PrivilegeState};
use crate::ptw::{
    self, Access, Fault, GStageCache, MmuRegs, NoGCache, PageSize, Perms, WalkResult,
};
use crate::tlb::{EntryKind, FenceError, FenceKind, LookupKey, Tlb, TlbEntry, DEFAULT_CAPACITY};
use crate::trap::{take_trap, trap_return, TargetMode, Trap, TrapError, TrapOutcome};

#[derive(Debug, Clone, Copy)]
pub struct MachineConfig {
    pub tlb_enabled: bool,
    pub tlb_capacity: usize,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig { tlb_enabled: true, tlb_capacity: DEFAULT_CAPACITY }
    }
}

/// Result of a machine-level translation, including how the TLB served it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineTranslation {
    pub pa: u64,
    pub page_size: PageSize,
    pub perms: Perms,
    /// Physical reads performed; empty on a TLB hit.
    pub accesses: Vec<(u64, u64)>,
    pub tlb_hit: bool,
    pub tlb_inserts: usize,
}

pub struct Machine {
    pub mode: PrivilegeState,
    pub csrs: CsrFile,
    pub mem: SparseMemory,
    pub tlb: Tlb,
    pub tlb_enabled: bool,
}

struct TlbGCache<'a> {
    tlb: &'a mut Tlb,
    vmid: u16,
    inserts: usize,
}

impl GStageCache for TlbGCache<'_> {
    fn get(&mut self, gpa: u64, check_acc: Access) -> Option<(u64, PageSize, Perms)> {
        let key = LookupKey {
            kind: EntryKind::GStage,
            addr: gpa,
            asid: 0,
            vmid: self.vmid,
            virt: false,
            acc: check_acc,
            // G-stage leaves are user pages; match the walker's check.
            user: true,
            sum: false,
            mxr: false,
        };
        self.tlb.lookup(&key).map(|e| (e.target(gpa), e.page_size, e.perms))
    }

    fn put(&mut self, gpa: u64, res: &WalkResult) {
        let mask = !(res.page_size.bytes() - 1);
        self.tlb.insert(TlbEntry {
            kind: EntryKind::GStage,
            tag: gpa & mask,
            asid: 0,
            vmid: self.vmid,
            virt_tag: false,
            page_size: res.page_size,
            perms: res.perms,
            pa_base: res.pa & mask,
            global: false,
            leaf_gpa: None,
            // G-stage lookups never apply MXR.
            mxr_load: false,
        });
        self.inserts += 1;
    }
}

impl Machine {
    pub fn new(config: MachineConfig) -> Machine {
        Machine {
            mode: PrivilegeState::machine(),
            csrs: CsrFile::new(),
            mem: SparseMemory::new(),
            tlb: Tlb::new(config.tlb_capacity),
            tlb_enabled: config.tlb_enabled,
        }
    }

    pub fn csr_read(&self, a: u16) -> Result<u64, CsrError> {
        self.csrs.read(self.mode, a)
    }

    pub fn csr_write(&mut self, a: u16, value: u64) -> Result<(), CsrError> {
        self.csrs.write(self.mode, a, value)
    }

    pub fn mmu_regs(&self) -> MmuRegs {
        MmuRegs::snapshot(&self.csrs)
    }

    /// Translate with the TLB in front of the walker.
    pub fn translate(&mut self, va: u64, acc: Access) -> Result<MachineTranslation, Fault> {
        let regs = self.mmu_regs();
        let virt = self.mode.virt();
        let user = self.mode.base() == BaseMode::U;
        let asid = if virt { atp::asid(regs.vsatp) } else { atp::asid(regs.satp) };
        let vmid = atp::vmid(regs.hgatp);

        let cacheable = if virt {
            !(atp::is_bare(regs.vsatp) && atp::is_bare(regs.hgatp))
        } else {
            self.mode.base() != BaseMode::M && !atp::is_bare(regs.satp)
        };

        // With vsatp Bare the translation is purely G-stage, so it is
        // cached and looked up as a GStage entry under the walker's
        // fixed user-page context, not as a Combined entry under the
        // VS context (VS SUM/MXR must not influence a pure G walk).
        let s1_bare_virt = virt && atp::is_bare(regs.vsatp);

        if self.tlb_enabled && cacheable {
            let key = if s1_bare_virt {
                LookupKey {
                    kind: EntryKind::GStage,
                    addr: va,
                    asid: 0,
                    vmid,
                    virt: false,
                    acc,
                    user: true,
                    sum: false,
                    mxr: false,
                }
            } else {
                LookupKey {
                    kind: if virt { EntryKind::Combined } else { EntryKind::Stage1 },
                    addr: va,
                    asid,
                    vmid,
                    virt,
                    acc,
                    user,
                    sum: if virt { regs.vs_sum } else { regs.sum },
                    mxr: if virt { regs.vs_mxr } else { regs.mxr },
                }
            };
            if let Some(e) = self.tlb.lookup(&key) {
                return Ok(MachineTranslation {
                    pa: e.target(va),
                    page_size: e.page_size,
                    perms: e.perms,
                    accesses: Vec::new(),
                    tlb_hit: true,
                    tlb_inserts: 0,
                });
            }
        }

        let mut inserts = 0;
        let result = if self.tlb_enabled && virt {
            let mut cache = TlbGCache { tlb: &mut self.tlb, vmid, inserts: 0 };
            let r = ptw::translate(&self.mem, &regs, self.mode, va, acc, &mut cache);
            inserts = cache.inserts;
            r?
        } else {
            ptw::translate(&self.mem, &regs, self.mode, va, acc, &mut NoGCache)?
        };

        // Pure G-stage translations were already cached by the walk's
        // G-stage hook; everything else gets a Stage1/Combined entry.
        if self.tlb_enabled && cacheable && !result.identity && !s1_bare_virt {
            let mask = !(result.page_size.bytes() - 1);
            self.tlb.insert(TlbEntry {
                kind: if virt { EntryKind::Combined } else { EntryKind::Stage1 },
                tag: va & mask,
                asid,
                vmid,
                virt_tag: virt,
                page_size: result.page_size,
                perms: result.perms,
                pa_base: result.pa & mask,
                global: result.perms.g,
                leaf_gpa: result.leaf_gpa.map(|g| g & mask),
                mxr_load: result.stage1_perms.map_or(true, |p| p.x)
                    && result.gstage_perms.map_or(true, |p| p.r),
            });
            inserts += 1;
        }

        Ok(MachineTranslation {
            pa: result.pa,
            page_size: result.page_size,
            perms: result.perms,
            accesses: result.accesses,
            tlb_hit: false,
            tlb_inserts: inserts,
        })
    }

    /// Translation bypassing the TLB entirely (differential runs).
    pub fn translate_uncached(&self, va: u64, acc: Access) -> Result<ptw::Translation, Fault> {
        ptw::translate(&self.mem, &self.mmu_regs(), self.mode, va, acc, &mut NoGCache)
    }

    /// Raise a trap: delegation, CSR updates, and the mode switch.
    pub fn raise_trap(&mut self, trap: &Trap, epc: u64) -> TrapOutcome {
        let outcome = take_trap(&mut self.csrs, self.mode, trap, epc);
        self.mode = outcome.new_state;
        outcome
    }

    /// Execute a trap return from the given mode.
    pub fn trap_return(&mut self, from: TargetMode) -> Result<PrivilegeState, TrapError> {
        let restored = trap_return(&mut self.csrs, self.mode, from)?;
        self.mode = restored;
        Ok(restored)
    }

    pub fn fence(
        &mut self,
        kind: FenceKind,
        addr_filter: Option<u64>,
        id: Option<u16>,
    ) -> Result<usize, FenceError> {
        let vmid = atp::vmid(self.csrs.raw_read(addr::HGATP));
        self.tlb.fence(kind, addr_filter, id, vmid)
    }
}

impl Default for Machine {
    fn default() -> Self {
        Machine::new(MachineConfig::default())
    }
}
