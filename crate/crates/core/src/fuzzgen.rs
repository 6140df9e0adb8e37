//! Randomized differential testing: builds randomized page-table images
//! (mixed page sizes, both stages, fault injection on roughly 20% of
//! PTEs), then diffs the machine's translation — TLB on and off —
//! against the brute-force oracle for a batch of random addresses.
//!
//! Seeds are fixed by the caller and reported in the outcome so any run
//! is reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::csr::{addr, atp, mstatus, sstatus};
use crate::machine::{Machine, MachineConfig};
use crate::oracle::{oracle_translate, OracleFault, OracleReport};
use crate::privilege::{BaseMode, PrivilegeState};
use crate::ptw::{Access, Fault, Pte};

const POOL_BASE: u64 = 0x8000_0000;
const DATA_BASE: u64 = 0x9000_0000;

struct Pool {
    next: u64,
}

impl Pool {
    fn alloc(&mut self, m: &mut Machine, frames: u64) -> u64 {
        let pa = self.next;
        m.mem.back_range(pa, frames * 0x1000);
        self.next += frames * 0x1000;
        pa
    }
}

fn vpn(addr: u64, level: u64) -> u64 {
    (addr >> (12 + 9 * level)) & 0x1FF
}

/// Random leaf flags; ~20% of entries get a fault-injecting corruption.
fn leaf_flags(rng: &mut ChaCha8Rng, force_user: bool) -> u64 {
    let mut flags = 0x1u64; // V
    let r = rng.gen_bool(0.85);
    let w = rng.gen_bool(0.6);
    let x = rng.gen_bool(0.5);
    if r {
        flags |= 2;
    }
    if w {
        flags |= 4;
    }
    if x {
        flags |= 8;
    }
    if force_user || rng.gen_bool(0.7) {
        flags |= 0x10;
    }
    if rng.gen_bool(0.1) {
        flags |= 0x20; // G
    }
    flags |= 0xC0; // A|D
    if flags & 0xE == 0 {
        flags |= 2; // make it a leaf at all
    }
    match rng.gen_range(0..10) {
        0 => flags &= !1,    // invalid
        1 => {
            flags |= 4;      // reserved: W without R
            flags &= !2;
        }
        _ => {}
    }
    if rng.gen_bool(0.1) {
        flags &= !0x40; // A=0
    }
    if rng.gen_bool(0.1) {
        flags &= !0x80; // D=0
    }
    flags
}

/// Install a mapping at a random level, sharing intermediate tables,
/// with occasional corruption of the target frame.
#[allow(clippy::too_many_arguments)]
fn install(
    rng: &mut ChaCha8Rng,
    m: &mut Machine,
    pool: &mut Pool,
    root: u64,
    wide_root: bool,
    va: u64,
    target: u64,
    level: u64,
    force_user: bool,
) {
    let mut table = root;
    let mut l = 2;
    while l > level {
        let idx = if wide_root && l == 2 { (va >> 30) & 0x7FF } else { vpn(va, l) };
        let slot = table + idx * 8;
        let cur = m.mem.read64(slot).unwrap_or(0);
        let next = if cur != 0 && !Pte(cur).leaf() && Pte(cur).v() {
            Pte(cur).ppn() << 12
        } else {
            let t = pool.alloc(m, 1);
            // occasionally point a non-leaf at unbacked space
            let ppn = if rng.gen_bool(0.05) { 0x7FF_0000 } else { t >> 12 };
            // the slot itself may sit in an unbacked table left behind by
            // an earlier corruption; the dangling path is a valid fixture
            if m.mem.write64(slot, Pte::build(ppn, 1)).is_err() {
                return;
            }
            t
        };
        table = next;
        l -= 1;
    }
    let idx = if wide_root && level == 2 { (va >> 30) & 0x7FF } else { vpn(va, level) };
    let mut ppn = target >> 12;
    // superpage alignment, occasionally broken on purpose
    let align = (1u64 << (9 * level)) - 1;
    ppn &= !align;
    if level > 0 && rng.gen_bool(0.1) {
        ppn |= 1;
    }
    if rng.gen_bool(0.05) {
        ppn = 0x7FF_8000; // unbacked target
    }
    let flags = leaf_flags(rng, force_user);
    let _ = m.mem.write64(table + idx * 8, Pte::build(ppn, flags));
}

fn describe_machine(res: &Result<u64, Fault>) -> String {
    match res {
        Ok(pa) => format!("pa={pa:#x}"),
        Err(f) => match f {
            Fault::Page { .. } => format!("fault={}", f.cause().name()),
            Fault::GuestPage { gpa, .. } => {
                format!("fault={} gpa={gpa:#x}", f.cause().name())
            }
        },
    }
}

fn describe_oracle(res: &Result<u64, OracleFault>) -> String {
    match res {
        Ok(pa) => format!("pa={pa:#x}"),
        Err(f) => match f.gpa {
            Some(g) => format!("fault={} gpa={g:#x}", f.cause.name()),
            None => format!("fault={}", f.cause.name()),
        },
    }
}

#[derive(Debug, Default)]
pub struct FuzzOutcome {
    pub images: usize,
    pub queries: usize,
    pub disagreements: Vec<OracleReport>,
    pub max_single_stage_accesses: usize,
    pub max_two_stage_accesses: usize,
    /// Set if any walk exceeded the 3 / 15 access bounds.
    pub bound_violations: usize,
    pub seed: u64,
}

/// Build one random image and diff `addrs` random translations.
fn fuzz_image(rng: &mut ChaCha8Rng, addrs: usize, out: &mut FuzzOutcome) {
    let mut m = Machine::new(MachineConfig::default());
    let mut pool = Pool { next: POOL_BASE };
    m.mem.back_range(DATA_BASE, 0x40_0000);

    let virt = rng.gen_bool(0.6);
    let vs_stage_on = rng.gen_bool(0.8);
    let g_stage_on = rng.gen_bool(0.8);
    let s_stage_on = rng.gen_bool(0.85);

    // candidate guest/host virtual addresses, small vpn space so random
    // probes hit the tables often
    let mut vas: Vec<u64> = (0..8)
        .map(|_| {
            (rng.gen_range(0..3u64) << 30)
                | (rng.gen_range(0..4u64) << 21)
                | (rng.gen_range(0..6u64) << 12)
        })
        .collect();
    vas.dedup();

    let mut hgatp = 0u64;
    let g_root = if virt && g_stage_on {
        let root = pool.alloc(&mut m, 4);
        hgatp = (atp::MODE_SV39 << atp::MODE_SHIFT)
            | (u64::from(rng.gen_range(0..4u16)) << atp::ID_SHIFT)
            | (root >> 12);
        Some(root)
    } else {
        None
    };

    if !virt {
        if s_stage_on {
            let root = pool.alloc(&mut m, 1);
            m.csrs.raw_write(
                addr::SATP,
                (atp::MODE_SV39 << atp::MODE_SHIFT)
                    | (u64::from(rng.gen_range(0..4u16)) << atp::ID_SHIFT)
                    | (root >> 12),
            );
            for &va in &vas {
                let level = rng.gen_range(0..3u64);
                let target = DATA_BASE + rng.gen_range(0..0x40u64) * 0x1000;
                install(rng, &mut m, &mut pool, root, false, va, target, level, false);
            }
        }
    } else {
        if vs_stage_on {
            let root = pool.alloc(&mut m, 1);
            m.csrs.raw_write(
                addr::VSATP,
                (atp::MODE_SV39 << atp::MODE_SHIFT)
                    | (u64::from(rng.gen_range(0..4u16)) << atp::ID_SHIFT)
                    | (root >> 12),
            );
            for &va in &vas {
                let level = rng.gen_range(0..3u64);
                // leaf GPAs land in the pool region so the G stage can map them
                let target = POOL_BASE + rng.gen_range(0x100..0x140u64) * 0x1000;
                install(rng, &mut m, &mut pool, root, false, va, target, level, false);
            }
        }
        if let Some(g_root) = g_root {
            m.csrs.raw_write(addr::HGATP, hgatp);
            // G-stage coverage of the pool region (tables + leaf GPAs),
            // mostly identity, mixed page sizes, G-stage leaves user-only
            for i in 0..24u64 {
                let gpa = POOL_BASE + i * 0x1000 * rng.gen_range(1..24u64);
                let level = if rng.gen_bool(0.7) { 0 } else { 1 };
                install(rng, &mut m, &mut pool, g_root, true, gpa, gpa, level, true);
            }
            // a couple of big identity superpages to keep walks alive
            for i in 0..2u64 {
                let gpa = (POOL_BASE >> 30 << 30) + (i << 30);
                if rng.gen_bool(0.8) {
                    install(rng, &mut m, &mut pool, g_root, true, gpa, gpa, 2, true);
                }
            }
            if !vs_stage_on {
                // vsatp Bare: GVAs are GPAs; map the candidate set too
                for &va in &vas {
                    let target = DATA_BASE + rng.gen_range(0..0x40u64) * 0x1000;
                    install(rng, &mut m, &mut pool, g_root, true, va, target, 0, true);
                }
            }
        }
    }

    // random status bits
    let mut mst = 0u64;
    if rng.gen_bool(0.5) {
        mst |= mstatus::SUM;
    }
    if rng.gen_bool(0.5) {
        mst |= mstatus::MXR;
    }
    m.csrs.raw_write(addr::MSTATUS, mst);
    let mut vst = 0u64;
    if rng.gen_bool(0.5) {
        vst |= sstatus::SUM;
    }
    if rng.gen_bool(0.5) {
        vst |= sstatus::MXR;
    }
    m.csrs.raw_write(addr::VSSTATUS, vst);

    let regs = m.mmu_regs();
    for _ in 0..addrs {
        let base = if rng.gen_bool(0.7) && !vas.is_empty() {
            vas[rng.gen_range(0..vas.len())]
        } else {
            (rng.gen_range(0..4u64) << 30)
                | (rng.gen_range(0..4u64) << 21)
                | (rng.gen_range(0..8u64) << 12)
        };
        let va = match rng.gen_range(0..20) {
            0 => base | (1u64 << 40),            // non-canonical / wide
            1 => base | (0xFFFF_FFu64 << 40),    // deeply non-canonical
            _ => base | rng.gen_range(0..0x1000u64) & !7,
        };
        let acc = match rng.gen_range(0..3) {
            0 => Access::Fetch,
            1 => Access::Load,
            _ => Access::Store,
        };
        let base_mode = if rng.gen_bool(0.5) { BaseMode::S } else { BaseMode::U };
        m.mode = if virt {
            PrivilegeState::new(base_mode, true).unwrap()
        } else if rng.gen_bool(0.15) {
            PrivilegeState::machine()
        } else {
            PrivilegeState::new(base_mode, false).unwrap()
        };

        let cached = m.translate(va, acc);
        let uncached = m.translate_uncached(va, acc);
        let expected = oracle_translate(&m.mem, &regs, m.mode, va, acc);

        if let Ok(t) = &uncached {
            let n = t.accesses.len();
            if m.mode.virt() {
                out.max_two_stage_accesses = out.max_two_stage_accesses.max(n);
                if n > 15 {
                    out.bound_violations += 1;
                }
            } else {
                out.max_single_stage_accesses = out.max_single_stage_accesses.max(n);
                if n > 3 {
                    out.bound_violations += 1;
                }
            }
        }

        let exp = describe_oracle(&expected);
        let got_cached = describe_machine(&cached.as_ref().map(|t| t.pa).map_err(|e| e.clone()));
        let got_uncached =
            describe_machine(&uncached.as_ref().map(|t| t.pa).map_err(|e| e.clone()));
        let ctx = format!("mode={} va={va:#x} acc={acc:?}", m.mode.effective());
        for (label, got) in [("tlb-on", got_cached), ("tlb-off", got_uncached)] {
            let rep =
                OracleReport::compare(format!("{ctx} [{label}]"), exp.clone(), got.clone());
            out.queries += 1;
            if !rep.agree {
                out.disagreements.push(rep);
            }
        }
    }
}

/// Run `images` randomized images with `addrs` address probes each.
pub fn run(images: usize, addrs: usize, seed: u64) -> FuzzOutcome {
    let mut out = FuzzOutcome { seed, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..images {
        fuzz_image(&mut rng, addrs, &mut out);
        out.images += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_fuzz_agrees() {
        let out = run(25, 16, 0xC0FFEE);
        assert!(
            out.disagreements.is_empty(),
            "first disagreement: {:?}",
            out.disagreements.first()
        );
        assert_eq!(out.bound_violations, 0);
    }
}
