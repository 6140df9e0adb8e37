//! Privilege-mode state machine: the three base modes plus the
//! virtualization flag V that turns S/U into VS/VU.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaseMode {
    M,
    S,
    U,
}

impl BaseMode {
    /// Two-bit encoding used by mstatus.MPP.
    pub fn encode(self) -> u64 {
        match self {
            BaseMode::U => 0,
            BaseMode::S => 1,
            BaseMode::M => 3,
        }
    }

    pub fn decode(bits: u64) -> Option<BaseMode> {
        match bits & 3 {
            0 => Some(BaseMode::U),
            1 => Some(BaseMode::S),
            3 => Some(BaseMode::M),
            _ => None,
        }
    }
}

/// The five effective modes once V is folded in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EffectiveMode {
    M,
    HS,
    VS,
    U,
    VU,
}

impl EffectiveMode {
    /// Privilege level used by CSR minimum-privilege checks.
    /// M=3, HS=2 (hypervisor-extended), VS=1, U/VU=0.
    pub fn csr_level(self) -> u8 {
        match self {
            EffectiveMode::M => 3,
            EffectiveMode::HS => 2,
            EffectiveMode::VS => 1,
            EffectiveMode::U | EffectiveMode::VU => 0,
        }
    }

    pub fn is_virtual(self) -> bool {
        matches!(self, EffectiveMode::VS | EffectiveMode::VU)
    }
}

impl std::fmt::Display for EffectiveMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EffectiveMode::M => "M",
            EffectiveMode::HS => "HS",
            EffectiveMode::VS => "VS",
            EffectiveMode::U => "U",
            EffectiveMode::VU => "VU",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("invalid privilege transition: {0}")]
    InvalidTransition(&'static str),
}

/// Current mode: base mode plus the virtualization flag V.
///
/// (M, virt=true) is unrepresentable through the constructor; V only
/// applies to S and U.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PrivilegeState {
    base: BaseMode,
    virt: bool,
}

impl PrivilegeState {
    pub fn new(base: BaseMode, virt: bool) -> Result<Self, StateError> {
        if virt && base == BaseMode::M {
            return Err(StateError::InvalidTransition(
                "machine mode cannot be virtualized",
            ));
        }
        Ok(PrivilegeState { base, virt })
    }

    pub const fn machine() -> Self {
        PrivilegeState { base: BaseMode::M, virt: false }
    }

    pub fn from_effective(mode: EffectiveMode) -> Self {
        match mode {
            EffectiveMode::M => PrivilegeState { base: BaseMode::M, virt: false },
            EffectiveMode::HS => PrivilegeState { base: BaseMode::S, virt: false },
            EffectiveMode::VS => PrivilegeState { base: BaseMode::S, virt: true },
            EffectiveMode::U => PrivilegeState { base: BaseMode::U, virt: false },
            EffectiveMode::VU => PrivilegeState { base: BaseMode::U, virt: true },
        }
    }

    pub fn base(self) -> BaseMode {
        self.base
    }

    pub fn virt(self) -> bool {
        self.virt
    }

    pub fn effective(self) -> EffectiveMode {
        match (self.base, self.virt) {
            (BaseMode::M, _) => EffectiveMode::M,
            (BaseMode::S, false) => EffectiveMode::HS,
            (BaseMode::S, true) => EffectiveMode::VS,
            (BaseMode::U, false) => EffectiveMode::U,
            (BaseMode::U, true) => EffectiveMode::VU,
        }
    }

    /// Test hook: set V. Rejected from M (there is no virtual machine mode).
    pub fn enter_virtualization(self) -> Result<Self, StateError> {
        PrivilegeState::new(self.base, true)
    }

    /// Test hook: clear V.
    pub fn leave_virtualization(self) -> Result<Self, StateError> {
        PrivilegeState::new(self.base, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_mode_mapping() {
        let cases = [
            (BaseMode::M, false, EffectiveMode::M),
            (BaseMode::S, false, EffectiveMode::HS),
            (BaseMode::U, false, EffectiveMode::U),
            (BaseMode::S, true, EffectiveMode::VS),
            (BaseMode::U, true, EffectiveMode::VU),
        ];
        for (base, virt, eff) in cases {
            assert_eq!(PrivilegeState::new(base, virt).unwrap().effective(), eff);
        }
    }

    #[test]
    fn no_virtual_machine_mode() {
        assert!(PrivilegeState::new(BaseMode::M, true).is_err());
        assert!(PrivilegeState::machine().enter_virtualization().is_err());
    }

    #[test]
    fn enter_leave_virtualization() {
        let hs = PrivilegeState::new(BaseMode::S, false).unwrap();
        let vs = hs.enter_virtualization().unwrap();
        assert_eq!(vs.effective(), EffectiveMode::VS);
        let vu = PrivilegeState::new(BaseMode::U, true).unwrap();
        assert_eq!(vu.leave_virtualization().unwrap().effective(), EffectiveMode::U);
    }
}
