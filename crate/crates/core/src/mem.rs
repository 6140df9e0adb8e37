//! Sparse 56-bit physical address space with word-granularity access.
//!
//! Backing is 4 KiB-granular; reads of unbacked addresses are
//! distinguishable from reads of zeroed backed memory. Little-endian
//! byte order throughout.

use std::collections::HashMap;
use thiserror::Error;

pub const FRAME_SHIFT: u64 = 12;
pub const FRAME_SIZE: u64 = 1 << FRAME_SHIFT;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemError {
    #[error("unbacked physical address {0:#x}")]
    Unbacked(u64),
    #[error("misaligned 64-bit access at {0:#x}")]
    Misaligned(u64),
}

#[derive(Default, Clone)]
pub struct SparseMemory {
    frames: HashMap<u64, Box<[u8; FRAME_SIZE as usize]>>,
}

impl SparseMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Back [pa, pa+len) with zeroed frames, rounding out to 4 KiB
    /// boundaries. Idempotent: already-backed frames keep their contents.
    pub fn back_range(&mut self, pa: u64, len: u64) {
        if len == 0 {
            return;
        }
        let first = pa >> FRAME_SHIFT;
        let last = (pa + len - 1) >> FRAME_SHIFT;
        for frame in first..=last {
            self.frames
                .entry(frame)
                .or_insert_with(|| Box::new([0u8; FRAME_SIZE as usize]));
        }
    }

    pub fn is_backed(&self, pa: u64) -> bool {
        self.frames.contains_key(&(pa >> FRAME_SHIFT))
    }

    pub fn read64(&self, pa: u64) -> Result<u64, MemError> {
        if pa % 8 != 0 {
            return Err(MemError::Misaligned(pa));
        }
        let frame = self
            .frames
            .get(&(pa >> FRAME_SHIFT))
            .ok_or(MemError::Unbacked(pa))?;
        let off = (pa & (FRAME_SIZE - 1)) as usize;
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&frame[off..off + 8]);
        Ok(u64::from_le_bytes(buf))
    }

    pub fn write64(&mut self, pa: u64, value: u64) -> Result<(), MemError> {
        if pa % 8 != 0 {
            return Err(MemError::Misaligned(pa));
        }
        let frame = self
            .frames
            .get_mut(&(pa >> FRAME_SHIFT))
            .ok_or(MemError::Unbacked(pa))?;
        let off = (pa & (FRAME_SIZE - 1)) as usize;
        frame[off..off + 8].copy_from_slice(&value.to_le_bytes());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn read_after_write() {
        let mut mem = SparseMemory::new();
        mem.back_range(0x8000_0000, 0x1000);
        mem.write64(0x8000_0000, 0xCF).unwrap();
        assert_eq!(mem.read64(0x8000_0000).unwrap(), 0xCF);
    }

    #[test]
    fn unbacked_read_faults() {
        let mem = SparseMemory::new();
        assert_eq!(mem.read64(0x0), Err(MemError::Unbacked(0x0)));
    }

    #[test]
    fn backing_is_idempotent() {
        let mut mem = SparseMemory::new();
        mem.back_range(0x8000_0000, 0x10000);
        mem.write64(0x8000_0008, 0x1234).unwrap();
        mem.back_range(0x8000_0000, 0x10000);
        assert_eq!(mem.read64(0x8000_0008).unwrap(), 0x1234);
    }

    #[test]
    fn misaligned_access_faults() {
        let mut mem = SparseMemory::new();
        mem.back_range(0, 0x1000);
        assert_eq!(mem.read64(4), Err(MemError::Misaligned(4)));
        assert_eq!(mem.write64(12, 1), Err(MemError::Misaligned(12)));
    }

    proptest! {
        // Frame isolation: writes to one frame never leak into another.
        #[test]
        fn frame_isolation(a in 0u64..16, b in 0u64..16, off_a in 0u64..512, off_b in 0u64..512, v in any::<u64>()) {
            prop_assume!(a != b);
            let mut mem = SparseMemory::new();
            mem.back_range(0, 16 * FRAME_SIZE);
            let pa_b = b * FRAME_SIZE + off_b * 8;
            let before = mem.read64(pa_b).unwrap();
            mem.write64(a * FRAME_SIZE + off_a * 8, v).unwrap();
            prop_assert_eq!(mem.read64(pa_b).unwrap(), before);
        }
    }
}
