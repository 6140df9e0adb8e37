//! Trap classification, delegation and architectural trap entry/return.
//!
//! Delegation follows the medeleg-then-hedeleg cascade: traps taken in
//! M stay in M; otherwise medeleg[cause]=0 sends the trap to M; a
//! non-virtualized origin then lands in HS; a virtualized origin lands
//! in VS when hedeleg[cause] is set, else HS. Interrupts use
//! mideleg/hideleg identically. Traps never land in U or VU.

use thiserror::Error;

use crate::csr::{addr, hstatus, mstatus, sstatus, CsrFile};
use crate::privilege::{BaseMode, EffectiveMode, PrivilegeState};

/// Synchronous exception causes (numeric encodings are normative).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Exception {
    IllegalInstruction,
    EcallFromU,
    EcallFromHS,
    EcallFromVS,
    EcallFromM,
    InstructionPageFault,
    LoadPageFault,
    StoreAmoPageFault,
    GuestInstructionPageFault,
    GuestLoadPageFault,
    VirtualInstruction,
    GuestStoreAmoPageFault,
}

impl Exception {
    pub fn code(self) -> u64 {
        match self {
            Exception::IllegalInstruction => 2,
            Exception::EcallFromU => 8,
            Exception::EcallFromHS => 9,
            Exception::EcallFromVS => 10,
            Exception::EcallFromM => 11,
            Exception::InstructionPageFault => 12,
            Exception::LoadPageFault => 13,
            Exception::StoreAmoPageFault => 15,
            Exception::GuestInstructionPageFault => 20,
            Exception::GuestLoadPageFault => 21,
            Exception::VirtualInstruction => 22,
            Exception::GuestStoreAmoPageFault => 23,
        }
    }

    pub fn from_code(code: u64) -> Option<Exception> {
        Some(match code {
            2 => Exception::IllegalInstruction,
            8 => Exception::EcallFromU,
            9 => Exception::EcallFromHS,
            10 => Exception::EcallFromVS,
            11 => Exception::EcallFromM,
            12 => Exception::InstructionPageFault,
            13 => Exception::LoadPageFault,
            15 => Exception::StoreAmoPageFault,
            20 => Exception::GuestInstructionPageFault,
            21 => Exception::GuestLoadPageFault,
            22 => Exception::VirtualInstruction,
            23 => Exception::GuestStoreAmoPageFault,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Exception::IllegalInstruction => "IllegalInstruction",
            Exception::EcallFromU => "EcallFromU",
            Exception::EcallFromHS => "EcallFromHS",
            Exception::EcallFromVS => "EcallFromVS",
            Exception::EcallFromM => "EcallFromM",
            Exception::InstructionPageFault => "InstructionPageFault",
            Exception::LoadPageFault => "LoadPageFault",
            Exception::StoreAmoPageFault => "StoreAmoPageFault",
            Exception::GuestInstructionPageFault => "GuestInstructionPageFault",
            Exception::GuestLoadPageFault => "GuestLoadPageFault",
            Exception::VirtualInstruction => "VirtualInstruction",
            Exception::GuestStoreAmoPageFault => "GuestStoreAmoPageFault",
        }
    }

    pub fn from_name(name: &str) -> Option<Exception> {
        [
            Exception::IllegalInstruction,
            Exception::EcallFromU,
            Exception::EcallFromHS,
            Exception::EcallFromVS,
            Exception::EcallFromM,
            Exception::InstructionPageFault,
            Exception::LoadPageFault,
            Exception::StoreAmoPageFault,
            Exception::GuestInstructionPageFault,
            Exception::GuestLoadPageFault,
            Exception::VirtualInstruction,
            Exception::GuestStoreAmoPageFault,
        ]
        .into_iter()
        .find(|e| e.name() == name)
    }

    pub fn is_guest_page_fault(self) -> bool {
        matches!(
            self,
            Exception::GuestInstructionPageFault
                | Exception::GuestLoadPageFault
                | Exception::GuestStoreAmoPageFault
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrapCause {
    Exception(Exception),
    /// Abstract interrupt injected by scenario directive; the code is
    /// the low bits of xcause.
    Interrupt(u64),
}

impl TrapCause {
    pub fn code(self) -> u64 {
        match self {
            TrapCause::Exception(e) => e.code(),
            TrapCause::Interrupt(c) => c,
        }
    }

    pub fn is_interrupt(self) -> bool {
        matches!(self, TrapCause::Interrupt(_))
    }

    /// xcause encoding: interrupt flag in the MSB.
    pub fn encode(self) -> u64 {
        match self {
            TrapCause::Exception(e) => e.code(),
            TrapCause::Interrupt(c) => (1 << 63) | c,
        }
    }

    pub fn decode(xcause: u64) -> TrapCause {
        if xcause >> 63 != 0 {
            TrapCause::Interrupt(xcause & !(1 << 63))
        } else {
            // Unlisted codes round-trip as opaque interrupts=false via
            // Exception::from_code; callers only decode what they encoded.
            Exception::from_code(xcause).map(TrapCause::Exception).unwrap_or(TrapCause::Interrupt(xcause))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trap {
    pub cause: TrapCause,
    pub tval: u64,
    /// Guest physical address payload, present iff cause is a
    /// guest-page fault.
    pub gpa: Option<u64>,
}

impl Trap {
    pub fn exception(e: Exception, tval: u64) -> Trap {
        assert!(!e.is_guest_page_fault(), "guest-page faults carry a gpa");
        Trap { cause: TrapCause::Exception(e), tval, gpa: None }
    }

    pub fn guest_page_fault(e: Exception, tval: u64, gpa: u64) -> Trap {
        assert!(e.is_guest_page_fault());
        Trap { cause: TrapCause::Exception(e), tval, gpa: Some(gpa) }
    }

    pub fn interrupt(code: u64) -> Trap {
        Trap { cause: TrapCause::Interrupt(code), tval: 0, gpa: None }
    }
}

/// Where a trap lands; never U or VU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetMode {
    M,
    HS,
    VS,
}

impl TargetMode {
    pub fn effective(self) -> EffectiveMode {
        match self {
            TargetMode::M => EffectiveMode::M,
            TargetMode::HS => EffectiveMode::HS,
            TargetMode::VS => EffectiveMode::VS,
        }
    }
}

impl std::fmt::Display for TargetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TargetMode::M => "M",
            TargetMode::HS => "HS",
            TargetMode::VS => "VS",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrapError {
    #[error("invalid transition: {0}")]
    InvalidTransition(&'static str),
}

/// Resolve a trap's destination mode from the delegation bitmaps.
pub fn delegate(
    origin: PrivilegeState,
    trap: &Trap,
    medeleg: u64,
    hedeleg: u64,
    mideleg: u64,
    hideleg: u64,
) -> TargetMode {
    let code = trap.cause.code();
    debug_assert!(code < 64);
    let (m_bits, h_bits) = if trap.cause.is_interrupt() {
        (mideleg, hideleg)
    } else {
        (medeleg, hedeleg)
    };
    // Traps taken in M never leave M.
    if origin.base() == BaseMode::M {
        return TargetMode::M;
    }
    if (m_bits >> code) & 1 == 0 {
        return TargetMode::M;
    }
    if !origin.virt() {
        return TargetMode::HS;
    }
    if (h_bits >> code) & 1 == 1 {
        TargetMode::VS
    } else {
        TargetMode::HS
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrapOutcome {
    pub target: TargetMode,
    pub new_state: PrivilegeState,
    /// Handler vector (xtvec of the target); reported in traces, no
    /// fetch is performed.
    pub vector: u64,
    pub cause_written: u64,
}

/// Architectural trap entry: resolves the target via [`delegate`] and
/// performs the CSR updates for that target.
pub fn take_trap(
    csrs: &mut CsrFile,
    origin: PrivilegeState,
    trap: &Trap,
    epc: u64,
) -> TrapOutcome {
    let target = delegate(
        origin,
        trap,
        csrs.raw_read(addr::MEDELEG),
        csrs.raw_read(addr::HEDELEG),
        csrs.raw_read(addr::MIDELEG),
        csrs.raw_read(addr::HIDELEG),
    );
    let xcause = trap.cause.encode();
    let gpa_field = trap.gpa.map(|g| g >> 2).unwrap_or(0);
    let (new_state, vector) = match target {
        TargetMode::M => {
            csrs.raw_write(addr::MEPC, epc);
            csrs.raw_write(addr::MCAUSE, xcause);
            csrs.raw_write(addr::MTVAL, trap.tval);
            csrs.raw_write(addr::MTVAL2, gpa_field);
            csrs.write_field(
                addr::MSTATUS,
                mstatus::MPP,
                mstatus::MPP_SHIFT,
                origin.base().encode(),
            );
            csrs.set_bits(addr::MSTATUS, mstatus::MPV, origin.virt());
            (PrivilegeState::machine(), csrs.raw_read(addr::MTVEC))
        }
        TargetMode::HS => {
            csrs.raw_write(addr::SEPC, epc);
            csrs.raw_write(addr::SCAUSE, xcause);
            csrs.raw_write(addr::STVAL, trap.tval);
            csrs.raw_write(addr::HTVAL, gpa_field);
            csrs.set_bits(addr::SSTATUS, sstatus::SPP, origin.base() == BaseMode::S);
            csrs.set_bits(addr::HSTATUS, hstatus::SPV, origin.virt());
            if origin.virt() {
                csrs.set_bits(addr::HSTATUS, hstatus::SPVP, origin.base() == BaseMode::S);
            }
            (
                PrivilegeState::new(BaseMode::S, false).unwrap(),
                csrs.raw_read(addr::STVEC),
            )
        }
        TargetMode::VS => {
            csrs.raw_write(addr::VSEPC, epc);
            csrs.raw_write(addr::VSCAUSE, xcause);
            csrs.raw_write(addr::VSTVAL, trap.tval);
            csrs.set_bits(addr::VSSTATUS, sstatus::SPP, origin.base() == BaseMode::S);
            (
                PrivilegeState::new(BaseMode::S, true).unwrap(),
                csrs.raw_read(addr::VSTVEC),
            )
        }
    };
    TrapOutcome { target, new_state, vector, cause_written: xcause }
}

/// Trap return (mret / sret / sret-in-VS): restores the privilege state
/// saved at trap entry and clears the consumed status fields.
pub fn trap_return(
    csrs: &mut CsrFile,
    current: PrivilegeState,
    from: TargetMode,
) -> Result<PrivilegeState, TrapError> {
    if current.effective() != from.effective() {
        return Err(TrapError::InvalidTransition(
            "return instruction requires the matching privilege mode",
        ));
    }
    match from {
        TargetMode::M => {
            let st = csrs.raw_read(addr::MSTATUS);
            let mpp = (st & mstatus::MPP) >> mstatus::MPP_SHIFT;
            let base = BaseMode::decode(mpp).unwrap_or(BaseMode::U);
            let virt = base != BaseMode::M && (st & mstatus::MPV) != 0;
            csrs.write_field(addr::MSTATUS, mstatus::MPP, mstatus::MPP_SHIFT, 0);
            csrs.set_bits(addr::MSTATUS, mstatus::MPV, false);
            Ok(PrivilegeState::new(base, virt).unwrap())
        }
        TargetMode::HS => {
            let spp = csrs.raw_read(addr::SSTATUS) & sstatus::SPP != 0;
            let spv = csrs.raw_read(addr::HSTATUS) & hstatus::SPV != 0;
            let base = if spp { BaseMode::S } else { BaseMode::U };
            csrs.set_bits(addr::SSTATUS, sstatus::SPP, false);
            csrs.set_bits(addr::HSTATUS, hstatus::SPV, false);
            Ok(PrivilegeState::new(base, spv).unwrap())
        }
        TargetMode::VS => {
            // sret executed in VS: virtualization is retained.
            let spp = csrs.raw_read(addr::VSSTATUS) & sstatus::SPP != 0;
            let base = if spp { BaseMode::S } else { BaseMode::U };
            csrs.set_bits(addr::VSSTATUS, sstatus::SPP, false);
            Ok(PrivilegeState::new(base, true).unwrap())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(m: EffectiveMode) -> PrivilegeState {
        PrivilegeState::from_effective(m)
    }

    #[test]
    fn vu_load_fault_delegates_to_vs() {
        let t = Trap::exception(Exception::LoadPageFault, 0x1000);
        let target = delegate(st(EffectiveMode::VU), &t, 1 << 13, 1 << 13, 0, 0);
        assert_eq!(target, TargetMode::VS);
    }

    #[test]
    fn medeleg_zero_forces_machine() {
        for cause in [
            Exception::LoadPageFault,
            Exception::EcallFromVS,
            Exception::VirtualInstruction,
        ] {
            let t = Trap::exception(cause, 0);
            assert_eq!(
                delegate(st(EffectiveMode::VS), &t, 0, u64::MAX, 0, 0),
                TargetMode::M
            );
        }
    }

    #[test]
    fn machine_origin_stays_in_machine() {
        let t = Trap::exception(Exception::EcallFromM, 0);
        assert_eq!(
            delegate(st(EffectiveMode::M), &t, u64::MAX, u64::MAX, 0, 0),
            TargetMode::M
        );
    }

    #[test]
    fn vu_trap_lands_in_vs_csrs() {
        let mut csrs = CsrFile::new();
        csrs.raw_write(addr::MEDELEG, 1 << 13);
        csrs.raw_write(addr::HEDELEG, 1 << 13);
        let t = Trap::exception(Exception::LoadPageFault, 0xdead);
        let out = take_trap(&mut csrs, st(EffectiveMode::VU), &t, 0x4000);
        assert_eq!(out.target, TargetMode::VS);
        assert_eq!(csrs.raw_read(addr::VSCAUSE), 13);
        assert_eq!(csrs.raw_read(addr::VSEPC), 0x4000);
        assert_eq!(csrs.raw_read(addr::VSTVAL), 0xdead);
        assert_eq!(out.new_state.effective(), EffectiveMode::VS);
    }

    #[test]
    fn htval_gets_gpa_shifted_by_two() {
        let mut csrs = CsrFile::new();
        csrs.raw_write(addr::MEDELEG, 1 << 21);
        let t = Trap::guest_page_fault(Exception::GuestLoadPageFault, 0x1000, 0x8000_1000);
        let out = take_trap(&mut csrs, st(EffectiveMode::VS), &t, 0);
        assert_eq!(out.target, TargetMode::HS);
        assert_eq!(csrs.raw_read(addr::HTVAL), 0x2000_0400);
    }

    #[test]
    fn hs_self_trap_sets_spp_clears_spv() {
        let mut csrs = CsrFile::new();
        csrs.raw_write(addr::MEDELEG, 1 << 13);
        csrs.raw_write(addr::HSTATUS, hstatus::SPV);
        let t = Trap::exception(Exception::LoadPageFault, 0);
        let out = take_trap(&mut csrs, st(EffectiveMode::HS), &t, 0);
        assert_eq!(out.target, TargetMode::HS);
        assert_ne!(csrs.raw_read(addr::SSTATUS) & sstatus::SPP, 0);
        assert_eq!(csrs.raw_read(addr::HSTATUS) & hstatus::SPV, 0);
    }

    #[test]
    fn round_trip_all_origins_through_machine() {
        for origin in [
            EffectiveMode::M,
            EffectiveMode::HS,
            EffectiveMode::VS,
            EffectiveMode::U,
            EffectiveMode::VU,
        ] {
            let mut csrs = CsrFile::new();
            // medeleg clear: everything lands in M.
            let t = Trap::exception(Exception::LoadPageFault, 0);
            let out = take_trap(&mut csrs, st(origin), &t, 0x80);
            assert_eq!(out.target, TargetMode::M);
            let restored = trap_return(&mut csrs, out.new_state, TargetMode::M).unwrap();
            assert_eq!(restored, st(origin), "origin {origin}");
        }
    }

    #[test]
    fn sret_in_vs_preserves_virtualization() {
        let mut csrs = CsrFile::new();
        csrs.raw_write(addr::MEDELEG, 1 << 10);
        csrs.raw_write(addr::HEDELEG, 1 << 12);
        csrs.raw_write(addr::MEDELEG, (1 << 12) | (1 << 10));
        let t = Trap::exception(Exception::InstructionPageFault, 0);
        let out = take_trap(&mut csrs, st(EffectiveMode::VS), &t, 0);
        assert_eq!(out.target, TargetMode::VS);
        let back = trap_return(&mut csrs, out.new_state, TargetMode::VS).unwrap();
        assert_eq!(back.effective(), EffectiveMode::VS);
    }

    #[test]
    fn trap_return_in_wrong_mode_is_invalid() {
        let mut csrs = CsrFile::new();
        let err = trap_return(&mut csrs, st(EffectiveMode::U), TargetMode::M);
        assert!(err.is_err());
        let err = trap_return(&mut csrs, st(EffectiveMode::VU), TargetMode::HS);
        assert!(err.is_err());
    }

    #[test]
    fn xcause_encoding_round_trips() {
        for e in [Exception::LoadPageFault, Exception::GuestStoreAmoPageFault] {
            let c = TrapCause::Exception(e);
            assert_eq!(TrapCause::decode(c.encode()), c);
        }
        let i = TrapCause::Interrupt(5);
        assert_eq!(TrapCause::decode(i.encode()), i);
    }
}
