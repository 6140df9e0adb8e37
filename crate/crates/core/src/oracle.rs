//! Independent brute-force re-implementations for differential testing:
//! a naive TLB-free nested walker, an exhaustive delegation truth table,
//! and a walk-access counter.
//!
//! Nothing here shares walk code with [`crate::ptw`]; the walker below
//! is written as a self-contained recursive definition over raw PTE
//! words. Keep it that way — the whole point is that the two sides can
//! only agree by computing the same architecture.

use crate::csr::atp;
use crate::mem::SparseMemory;
use crate::privilege::{BaseMode, EffectiveMode, PrivilegeState};
use crate::ptw::{Access, MmuRegs};
use crate::trap::Exception;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleFault {
    pub cause: Exception,
    pub gpa: Option<u64>,
}

pub type OracleResult = Result<u64, OracleFault>;

fn exc(acc: Access, guest: bool, gpa: u64) -> OracleFault {
    if guest {
        OracleFault {
            cause: match acc {
                Access::Fetch => Exception::GuestInstructionPageFault,
                Access::Load => Exception::GuestLoadPageFault,
                Access::Store => Exception::GuestStoreAmoPageFault,
            },
            gpa: Some(gpa),
        }
    } else {
        OracleFault {
            cause: match acc {
                Access::Fetch => Exception::InstructionPageFault,
                Access::Load => Exception::LoadPageFault,
                Access::Store => Exception::StoreAmoPageFault,
            },
            gpa: None,
        }
    }
}

struct RawPte {
    word: u64,
}

impl RawPte {
    fn flag(&self, bit: u64) -> bool {
        (self.word >> bit) & 1 == 1
    }
    fn frame(&self) -> u64 {
        ((self.word >> 10) & 0xFFF_FFFF_FFFF) << 12
    }
}

fn pte_ok_for(
    pte: &RawPte,
    acc: Access,
    user: bool,
    sum: bool,
    mxr: bool,
    store_check: bool,
) -> bool {
    let (r, w, x, u, a, d) =
        (pte.flag(1), pte.flag(2), pte.flag(3), pte.flag(4), pte.flag(6), pte.flag(7));
    let priv_ok = match acc {
        Access::Fetch => {
            if user {
                u
            } else {
                !u
            }
        }
        _ => {
            if user {
                u
            } else {
                !u || sum
            }
        }
    };
    let kind_ok = match acc {
        Access::Fetch => x,
        Access::Load => r || (mxr && x),
        Access::Store => w,
    };
    priv_ok && kind_ok && a && (!store_check || d)
}

/// Recursive single-stage lookup. `idx_bits(level)` gives the index
/// width so the same recursion serves Sv39 (9) and the Sv39x4 root (11).
#[allow(clippy::too_many_arguments)]
fn lookup_rec(
    mem: &SparseMemory,
    table: u64,
    addr: u64,
    level: u64,
    wide_root: bool,
    acc: Access,
    user: bool,
    sum: bool,
    mxr: bool,
    read_slot: &mut dyn FnMut(&SparseMemory, u64) -> Result<u64, ()>,
) -> Result<u64, ()> {
    let width = if wide_root && level == 2 { 0x7FF } else { 0x1FF };
    let slot = table + ((addr >> (12 + 9 * level)) & width) * 8;
    let word = read_slot(mem, slot)?;
    let pte = RawPte { word };
    if !pte.flag(0) {
        return Err(());
    }
    if pte.flag(2) && !pte.flag(1) {
        return Err(()); // reserved
    }
    let is_leaf = pte.flag(1) || pte.flag(2) || pte.flag(3);
    if is_leaf {
        if !pte_ok_for(&pte, acc, user, sum, mxr, acc == Access::Store) {
            return Err(());
        }
        let span = 1u64 << (12 + 9 * level);
        if pte.frame() % span != 0 {
            return Err(()); // misaligned superpage
        }
        return Ok(pte.frame() + addr % span);
    }
    if level == 0 {
        return Err(());
    }
    lookup_rec(mem, pte.frame(), addr, level - 1, false, acc, user, sum, mxr, read_slot)
}

fn g_lookup(
    mem: &SparseMemory,
    hgatp: u64,
    gpa: u64,
    check_acc: Access,
    report_acc: Access,
) -> Result<u64, OracleFault> {
    if atp::mode(hgatp) == atp::MODE_BARE {
        return Ok(gpa);
    }
    if gpa >= (1u64 << 41) {
        return Err(exc(report_acc, true, gpa));
    }
    let mut read = |mem: &SparseMemory, slot: u64| mem.read64(slot).map_err(|_| ());
    lookup_rec(
        mem,
        atp::ppn(hgatp) << 12,
        gpa,
        2,
        true,
        check_acc,
        true, // guest pages must be user pages
        false,
        false,
        &mut read,
    )
    .map_err(|_| exc(report_acc, true, gpa))
}

fn canonical(va: u64) -> bool {
    let top = va >> 38;
    top == 0 || top == (1u64 << 26) - 1
}

/// TLB-free re-walk of the full translation, recursively defined.
pub fn oracle_translate(
    mem: &SparseMemory,
    regs: &MmuRegs,
    mode: PrivilegeState,
    va: u64,
    acc: Access,
) -> OracleResult {
    let user = mode.base() == BaseMode::U;
    if !mode.virt() {
        if mode.base() == BaseMode::M || atp::mode(regs.satp) == atp::MODE_BARE {
            return Ok(va);
        }
        if !canonical(va) {
            return Err(exc(acc, false, 0));
        }
        let mut read = |mem: &SparseMemory, slot: u64| mem.read64(slot).map_err(|_| ());
        return lookup_rec(
            mem,
            atp::ppn(regs.satp) << 12,
            va,
            2,
            false,
            acc,
            user,
            regs.sum,
            regs.mxr,
            &mut read,
        )
        .map_err(|_| exc(acc, false, 0));
    }

    // Two-stage: VS-stage PTE reads go through the G stage themselves.
    let gpa = if atp::mode(regs.vsatp) == atp::MODE_BARE {
        va
    } else {
        if !canonical(va) {
            return Err(exc(acc, false, 0));
        }
        let mut gfault: Option<OracleFault> = None;
        let hgatp = regs.hgatp;
        let res = {
            let gfault = &mut gfault;
            let mut read = move |mem: &SparseMemory, slot_gpa: u64| {
                let slot_pa =
                    g_lookup(mem, hgatp, slot_gpa, Access::Load, acc).map_err(|f| {
                        *gfault = Some(f);
                    })?;
                mem.read64(slot_pa).map_err(|_| ())
            };
            lookup_rec(
                mem,
                atp::ppn(regs.vsatp) << 12,
                va,
                2,
                false,
                acc,
                user,
                regs.vs_sum,
                regs.vs_mxr,
                &mut read,
            )
        };
        match res {
            Ok(gpa) => gpa,
            Err(()) => return Err(gfault.unwrap_or_else(|| exc(acc, false, 0))),
        }
    };
    g_lookup(mem, regs.hgatp, gpa, acc, acc)
}

/// One row of the exhaustive delegation truth table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelegationRow {
    pub origin: EffectiveMode,
    pub cause: u64,
    pub medeleg_bit: bool,
    pub hedeleg_bit: bool,
    pub target: EffectiveMode,
}

/// Exhaustive enumeration: 5 origins x 24 causes x 4 delegation-bit
/// combinations = 480 rows. The target column is written directly from
/// the delegation arrows, not by calling the trap engine.
pub fn oracle_delegation_table() -> Vec<DelegationRow> {
    let origins = [
        EffectiveMode::M,
        EffectiveMode::HS,
        EffectiveMode::VS,
        EffectiveMode::U,
        EffectiveMode::VU,
    ];
    let mut rows = Vec::with_capacity(480);
    for origin in origins {
        for cause in 0..24u64 {
            for bits in 0..4u8 {
                let medeleg_bit = bits & 1 == 1;
                let hedeleg_bit = bits & 2 == 2;
                let target = match origin {
                    EffectiveMode::M => EffectiveMode::M,
                    EffectiveMode::HS | EffectiveMode::U => {
                        if medeleg_bit {
                            EffectiveMode::HS
                        } else {
                            EffectiveMode::M
                        }
                    }
                    EffectiveMode::VS | EffectiveMode::VU => {
                        if !medeleg_bit {
                            EffectiveMode::M
                        } else if hedeleg_bit {
                            EffectiveMode::VS
                        } else {
                            EffectiveMode::HS
                        }
                    }
                };
                rows.push(DelegationRow { origin, cause, medeleg_bit, hedeleg_bit, target });
            }
        }
    }
    rows
}

/// Number of physical reads a walk performed.
pub fn count_accesses(accesses: &[(u64, u64)]) -> usize {
    accesses.len()
}

/// One differential comparison, with both payloads kept on disagreement.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub agree: bool,
    pub expected: String,
    pub actual: String,
    pub context: String,
}

impl OracleReport {
    pub fn compare(context: String, expected: String, actual: String) -> OracleReport {
        OracleReport { agree: expected == actual, expected, actual, context }
    }
}
