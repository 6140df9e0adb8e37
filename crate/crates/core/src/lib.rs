//! Functional model of the RISC-V Hypervisor extension.
//!
//! The model covers the pieces the extension touches: the new virtual
//! privilege modes (VS/VU), the hypervisor CSR file, trap delegation,
//! single- and two-stage Sv39 address translation, and a
//! virtualization-aware TLB. It is event-driven — there is no instruction
//! decoder; memory accesses, CSR accesses and traps are injected
//! explicitly, either through the library API or the scenario DSL.
//!
//! The [`oracle`] module holds independent brute-force re-implementations
//! of the walker and the delegation table. It deliberately shares no walk
//! code with [`ptw`]; differential tests and the `--oracle-check` CLI
//! flag diff the two.

pub mod csr;
pub mod fuzzgen;
pub mod machine;
pub mod mem;
pub mod oracle;
pub mod privilege;
pub mod ptw;
pub mod scenario;
pub mod tlb;
pub mod trap;

pub use machine::Machine;
pub use mem::SparseMemory;
pub use privilege::{BaseMode, EffectiveMode, PrivilegeState};
