//! Sv39 page-table walks: the single-stage walk, the Sv39x4 G-stage
//! walk, and the nested two-stage translation where every VS-stage PTE
//! address is itself a guest physical address that must be G-translated
//! before the PTE can be read.
//!
//! A/D policy: hardware never updates A/D. A walk that would need
//! A=0→1, or D=0 on a store, faults with the access type's page-fault
//! cause. Implicit G-stage accesses for VS-stage PTE reads are checked
//! as loads.

use crate::csr::{addr, atp, mstatus, sstatus, CsrFile};
use crate::mem::SparseMemory;
use crate::privilege::{BaseMode, PrivilegeState};
use crate::trap::{Exception, Trap};

pub const SV39_VA_BITS: u64 = 39;
pub const SV39X4_GPA_BITS: u64 = 41;
pub const PA_BITS: u64 = 56;
pub const PTE_SIZE: u64 = 8;
pub const LEVELS: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Access {
    Fetch,
    Load,
    Store,
}

impl Access {
    pub fn page_fault(self) -> Exception {
        match self {
            Access::Fetch => Exception::InstructionPageFault,
            Access::Load => Exception::LoadPageFault,
            Access::Store => Exception::StoreAmoPageFault,
        }
    }

    pub fn guest_page_fault(self) -> Exception {
        match self {
            Access::Fetch => Exception::GuestInstructionPageFault,
            Access::Load => Exception::GuestLoadPageFault,
            Access::Store => Exception::GuestStoreAmoPageFault,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PageSize {
    Size4K,
    Size2M,
    Size1G,
}

impl PageSize {
    pub fn from_level(level: u64) -> PageSize {
        match level {
            0 => PageSize::Size4K,
            1 => PageSize::Size2M,
            _ => PageSize::Size1G,
        }
    }

    pub fn bytes(self) -> u64 {
        match self {
            PageSize::Size4K => 1 << 12,
            PageSize::Size2M => 1 << 21,
            PageSize::Size1G => 1 << 30,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PageSize::Size4K => "4K",
            PageSize::Size2M => "2M",
            PageSize::Size1G => "1G",
        }
    }
}

/// Effective leaf permissions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Perms {
    pub r: bool,
    pub w: bool,
    pub x: bool,
    pub u: bool,
    pub g: bool,
}

impl Perms {
    pub const FULL: Perms = Perms { r: true, w: true, x: true, u: true, g: false };

    /// Stage-wise conjunction; `g` comes from the VS stage.
    pub fn and(self, other: Perms) -> Perms {
        Perms {
            r: self.r && other.r,
            w: self.w && other.w,
            x: self.x && other.x,
            u: self.u && other.u,
            g: self.g,
        }
    }
}

/// 64-bit Sv39 page-table entry.
/// Layout: bit0 V, 1 R, 2 W, 3 X, 4 U, 5 G, 6 A, 7 D, bits 10..53 PPN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pte(pub u64);

impl Pte {
    pub fn v(self) -> bool {
        self.0 & 1 != 0
    }
    pub fn r(self) -> bool {
        self.0 & 2 != 0
    }
    pub fn w(self) -> bool {
        self.0 & 4 != 0
    }
    pub fn x(self) -> bool {
        self.0 & 8 != 0
    }
    pub fn u(self) -> bool {
        self.0 & 16 != 0
    }
    pub fn g(self) -> bool {
        self.0 & 32 != 0
    }
    pub fn a(self) -> bool {
        self.0 & 64 != 0
    }
    pub fn d(self) -> bool {
        self.0 & 128 != 0
    }
    pub fn ppn(self) -> u64 {
        (self.0 >> 10) & ((1 << 44) - 1)
    }
    pub fn leaf(self) -> bool {
        self.r() || self.w() || self.x()
    }
    /// W without R is a reserved encoding.
    pub fn reserved(self) -> bool {
        self.w() && !self.r()
    }
    pub fn perms(self) -> Perms {
        Perms { r: self.r(), w: self.w(), x: self.x(), u: self.u(), g: self.g() }
    }

    pub fn build(ppn: u64, flags: u64) -> u64 {
        (ppn << 10) | flags
    }
}

/// Privilege context for a stage-1 permission check.
#[derive(Debug, Clone, Copy)]
pub struct WalkCtx {
    pub user: bool,
    pub sum: bool,
    pub mxr: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    /// Ordinary page fault; tval is the faulting VA.
    Page { acc: Access, va: u64 },
    /// G-stage fault; carries the faulting guest physical address.
    GuestPage { acc: Access, va: u64, gpa: u64 },
}

impl Fault {
    pub fn cause(&self) -> Exception {
        match self {
            Fault::Page { acc, .. } => acc.page_fault(),
            Fault::GuestPage { acc, .. } => acc.guest_page_fault(),
        }
    }

    pub fn to_trap(&self) -> Trap {
        match *self {
            Fault::Page { acc, va } => Trap::exception(acc.page_fault(), va),
            Fault::GuestPage { acc, va, gpa } => {
                Trap::guest_page_fault(acc.guest_page_fault(), va, gpa)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WalkResult {
    pub pa: u64,
    pub page_size: PageSize,
    pub perms: Perms,
    /// Ordered (physical address read, value) pairs.
    pub accesses: Vec<(u64, u64)>,
}

/// Full translation result, with the pieces the TLB needs to build
/// Combined and per-stage entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Translation {
    pub pa: u64,
    /// min of the stage page sizes for two-stage walks.
    pub page_size: PageSize,
    pub perms: Perms,
    pub accesses: Vec<(u64, u64)>,
    /// Final leaf GPA (two-stage walks only).
    pub leaf_gpa: Option<u64>,
    pub stage1_size: Option<PageSize>,
    pub gstage_size: Option<PageSize>,
    /// Per-stage leaf permissions, absent for bare/inactive stages.
    /// MXR only relaxes the first stage, so caches need both.
    pub stage1_perms: Option<Perms>,
    pub gstage_perms: Option<Perms>,
    /// True when no paging stage was active (M mode or Bare).
    pub identity: bool,
}

fn leaf_allows(p: Perms, acc: Access, ctx: WalkCtx) -> bool {
    let user_ok = if ctx.user { p.u } else { !p.u || ctx.sum };
    match acc {
        // SUM never permits supervisor execution from user pages.
        Access::Fetch => p.x && if ctx.user { p.u } else { !p.u },
        Access::Load => (p.r || (ctx.mxr && p.x)) && user_ok,
        Access::Store => p.w && user_ok,
    }
}

fn canonical_sv39(va: u64) -> bool {
    let shift = 64 - SV39_VA_BITS;
    (((va << shift) as i64) >> shift) as u64 == va
}

fn vpn(va: u64, level: u64) -> u64 {
    (va >> (12 + 9 * level)) & 0x1FF
}

fn splice(ppn: u64, va: u64, level: u64) -> u64 {
    let page = PageSize::from_level(level).bytes();
    (ppn << 12) | (va & (page - 1))
}

/// Single-stage Sv39 walk with direct physical PTE reads. The caller
/// handles Bare mode as the identity translation.
pub fn walk_stage1(
    mem: &SparseMemory,
    satp: u64,
    va: u64,
    acc: Access,
    ctx: WalkCtx,
) -> Result<WalkResult, Fault> {
    debug_assert_eq!(atp::mode(satp), atp::MODE_SV39);
    let fault = || Fault::Page { acc, va };
    let mut accesses = Vec::new();
    let leaf = walk_sv39_generic(va, atp::ppn(satp) << 12, acc, ctx, fault, &mut |pte_addr| {
        let v = mem.read64(pte_addr).map_err(|_| fault())?;
        accesses.push((pte_addr, v));
        Ok(v)
    })?;
    Ok(WalkResult {
        pa: leaf.pa,
        page_size: leaf.size,
        perms: leaf.perms,
        accesses,
    })
}

struct Leaf {
    pa: u64,
    size: PageSize,
    perms: Perms,
}

/// Shared Sv39 level loop. `read_pte` maps a PTE address in the walk's
/// own address space to the PTE value (directly physical for
/// single-stage walks, G-translated for nested ones).
fn walk_sv39_generic<E: Clone>(
    va: u64,
    root: u64,
    acc: Access,
    ctx: WalkCtx,
    fault: impl Fn() -> E,
    read_pte: &mut impl FnMut(u64) -> Result<u64, E>,
) -> Result<Leaf, E> {
    if !canonical_sv39(va) {
        return Err(fault());
    }
    let mut table = root;
    let mut level = LEVELS - 1;
    loop {
        let pte = Pte(read_pte(table + vpn(va, level) * PTE_SIZE)?);
        if !pte.v() || pte.reserved() {
            return Err(fault());
        }
        if pte.leaf() {
            if !leaf_allows(pte.perms(), acc, ctx) {
                return Err(fault());
            }
            if !pte.a() || (acc == Access::Store && !pte.d()) {
                return Err(fault());
            }
            if pte.ppn() & ((1 << (9 * level)) - 1) != 0 {
                return Err(fault()); // misaligned superpage
            }
            // D=0 pages are not writable until a store re-walks and
            // faults, so never hand out cacheable write permission.
            let mut perms = pte.perms();
            if !pte.d() {
                perms.w = false;
            }
            return Ok(Leaf {
                pa: splice(pte.ppn(), va, level),
                size: PageSize::from_level(level),
                perms,
            });
        }
        if level == 0 {
            return Err(fault());
        }
        table = pte.ppn() << 12;
        level -= 1;
    }
}

/// Sv39x4 G-stage walk: 16 KiB root table (11-bit top index), and every
/// leaf must be a user page. `check_acc` is the permission actually
/// required (Load for implicit PTE reads); `report_acc` tags the fault
/// cause with the original access type.
pub fn walk_gstage(
    mem: &SparseMemory,
    hgatp: u64,
    gpa: u64,
    check_acc: Access,
    report_acc: Access,
    gva: u64,
) -> Result<WalkResult, Fault> {
    debug_assert_eq!(atp::mode(hgatp), atp::MODE_SV39);
    let fault = || Fault::GuestPage { acc: report_acc, va: gva, gpa };
    if gpa >> SV39X4_GPA_BITS != 0 {
        return Err(fault());
    }
    let mut accesses = Vec::new();
    let root = atp::ppn(hgatp) << 12;
    let mut table = root;
    let mut level = LEVELS - 1;
    // Guest pages are user pages: check with user=true semantics.
    let ctx = WalkCtx { user: true, sum: false, mxr: false };
    let leaf = loop {
        let idx = if level == 2 { (gpa >> 30) & 0x7FF } else { vpn(gpa, level) };
        let pte_addr = table + idx * PTE_SIZE;
        let v = mem.read64(pte_addr).map_err(|_| fault())?;
        accesses.push((pte_addr, v));
        let pte = Pte(v);
        if !pte.v() || pte.reserved() {
            return Err(fault());
        }
        if pte.leaf() {
            if !leaf_allows(pte.perms(), check_acc, ctx) {
                return Err(fault());
            }
            if !pte.a() || (check_acc == Access::Store && !pte.d()) {
                return Err(fault());
            }
            if pte.ppn() & ((1 << (9 * level)) - 1) != 0 {
                return Err(fault());
            }
            let mut perms = pte.perms();
            if !pte.d() {
                perms.w = false;
            }
            break Leaf {
                pa: splice(pte.ppn(), gpa, level),
                size: PageSize::from_level(level),
                perms,
            };
        }
        if level == 0 {
            return Err(fault());
        }
        table = pte.ppn() << 12;
        level -= 1;
    };
    Ok(WalkResult {
        pa: leaf.pa,
        page_size: leaf.size,
        perms: leaf.perms,
        accesses,
    })
}

/// Cache hook for G-stage sub-walks inside a nested translation. The
/// machine plugs its TLB in here; pure callers use [`NoGCache`].
pub trait GStageCache {
    fn get(&mut self, gpa: u64, check_acc: Access) -> Option<(u64, PageSize, Perms)>;
    fn put(&mut self, gpa: u64, result: &WalkResult);
}

pub struct NoGCache;

impl GStageCache for NoGCache {
    fn get(&mut self, _gpa: u64, _acc: Access) -> Option<(u64, PageSize, Perms)> {
        None
    }
    fn put(&mut self, _gpa: u64, _result: &WalkResult) {}
}

/// Snapshot of the CSR state the MMU consumes.
#[derive(Debug, Clone, Copy)]
pub struct MmuRegs {
    pub satp: u64,
    pub vsatp: u64,
    pub hgatp: u64,
    pub sum: bool,
    pub mxr: bool,
    pub vs_sum: bool,
    pub vs_mxr: bool,
}

impl MmuRegs {
    pub fn snapshot(csrs: &CsrFile) -> MmuRegs {
        let mst = csrs.raw_read(addr::MSTATUS);
        let vst = csrs.raw_read(addr::VSSTATUS);
        MmuRegs {
            satp: csrs.raw_read(addr::SATP),
            vsatp: csrs.raw_read(addr::VSATP),
            hgatp: csrs.raw_read(addr::HGATP),
            sum: mst & mstatus::SUM != 0,
            mxr: mst & mstatus::MXR != 0,
            vs_sum: vst & sstatus::SUM != 0,
            vs_mxr: vst & sstatus::MXR != 0,
        }
    }
}

fn g_walk_cached(
    mem: &SparseMemory,
    hgatp: u64,
    gpa: u64,
    check_acc: Access,
    report_acc: Access,
    gva: u64,
    gcache: &mut dyn GStageCache,
    accesses: &mut Vec<(u64, u64)>,
) -> Result<(u64, PageSize, Perms), Fault> {
    if atp::is_bare(hgatp) {
        return Ok((gpa, PageSize::Size1G, Perms::FULL));
    }
    if let Some(hit) = gcache.get(gpa, check_acc) {
        return Ok(hit);
    }
    let res = walk_gstage(mem, hgatp, gpa, check_acc, report_acc, gva)?;
    accesses.extend_from_slice(&res.accesses);
    gcache.put(gpa, &res);
    Ok((res.pa, res.page_size, res.perms))
}

/// Full translation dispatch: single-stage for V=0, nested two-stage
/// for V=1. Bare stages are identity.
pub fn translate(
    mem: &SparseMemory,
    regs: &MmuRegs,
    mode: PrivilegeState,
    va: u64,
    acc: Access,
    gcache: &mut dyn GStageCache,
) -> Result<Translation, Fault> {
    if !mode.virt() {
        // M mode and Bare satp bypass translation entirely.
        if mode.base() == BaseMode::M || atp::is_bare(regs.satp) {
            return Ok(Translation {
                pa: va,
                page_size: PageSize::Size4K,
                perms: Perms::FULL,
                accesses: Vec::new(),
                leaf_gpa: None,
                stage1_size: None,
                gstage_size: None,
                stage1_perms: None,
                gstage_perms: None,
                identity: true,
            });
        }
        let ctx = WalkCtx {
            user: mode.base() == BaseMode::U,
            sum: regs.sum,
            mxr: regs.mxr,
        };
        let res = walk_stage1(mem, regs.satp, va, acc, ctx)?;
        return Ok(Translation {
            pa: res.pa,
            page_size: res.page_size,
            perms: res.perms,
            accesses: res.accesses,
            leaf_gpa: None,
            stage1_size: Some(res.page_size),
            gstage_size: None,
            stage1_perms: Some(res.perms),
            gstage_perms: None,
            identity: false,
        });
    }

    // V=1: VS-stage (vsatp) over GVAs, then G-stage (hgatp) over GPAs.
    let mut accesses = Vec::new();
    let (leaf_gpa, s1_size, s1_perms) = if atp::is_bare(regs.vsatp) {
        (va, None, Perms::FULL)
    } else {
        let ctx = WalkCtx {
            user: mode.base() == BaseMode::U,
            sum: regs.vs_sum,
            mxr: regs.vs_mxr,
        };
        let fault = || Fault::Page { acc, va };
        let mut gfault: Option<Fault> = None;
        let leaf = {
            let gfault_slot = &mut gfault;
            let mem_ref = mem;
            let hgatp = regs.hgatp;
            walk_sv39_generic(
                va,
                atp::ppn(regs.vsatp) << 12,
                acc,
                ctx,
                fault,
                &mut |pte_gpa| {
                    // The PTE address is a GPA: G-translate it first.
                    let (pte_pa, _, _) = g_walk_cached(
                        mem_ref, hgatp, pte_gpa, Access::Load, acc, va, gcache, &mut accesses,
                    )
                    .map_err(|f| {
                        *gfault_slot = Some(f);
                        Fault::Page { acc, va }
                    })?;
                    let v = mem_ref.read64(pte_pa).map_err(|_| Fault::Page { acc, va })?;
                    accesses.push((pte_pa, v));
                    Ok(v)
                },
            )
        };
        match leaf {
            Ok(l) => (l.pa, Some(l.size), l.perms),
            Err(f) => return Err(gfault.unwrap_or(f)),
        }
    };

    // Final leaf GPA through the G stage with the original access type.
    let (pa, g_size, g_perms) =
        g_walk_cached(mem, regs.hgatp, leaf_gpa, acc, acc, va, gcache, &mut accesses)?;
    let combined = s1_perms.and(g_perms);
    let page_size = match (s1_size, atp::is_bare(regs.hgatp)) {
        (Some(s1), false) => s1.min(g_size),
        (Some(s1), true) => s1,
        (None, false) => g_size,
        (None, true) => PageSize::Size4K,
    };
    let identity = s1_size.is_none() && atp::is_bare(regs.hgatp);
    Ok(Translation {
        pa,
        page_size,
        perms: combined,
        accesses,
        leaf_gpa: Some(leaf_gpa),
        stage1_size: s1_size,
        gstage_size: if atp::is_bare(regs.hgatp) { None } else { Some(g_size) },
        stage1_perms: s1_size.map(|_| s1_perms),
        gstage_perms: if atp::is_bare(regs.hgatp) { None } else { Some(g_perms) },
        identity,
    })
}
