//! Line-based scenario DSL: parses directive scripts, drives a machine
//! instance, checks expectations, and emits a JSON-lines trace.
//!
//! Grammar (one directive per line, `#` comments):
//!   mode <M|HS|U|VS|VU>
//!   csr <read|write> <name> [0xVALUE]
//!   mem <back|write64|read64> 0xADDR [0xVALUE|0xLEN]
//!   map <stage1|gstage> va=0x.. pa=0x.. size=<4K|2M|1G> perms=<rwxug subset> [asid=0x..] [vmid=0x..]
//!   access <load|store|fetch> va=0x..
//!   trap inject cause=<mnemonic|0xN> [tval=0x..] [gpa=0x..] [epc=0x..] [interrupt]
//!   trap return
//!   fence <sfence.vma|hfence.vvma|hfence.gvma> [addr=0x..] [id=0x..]
//!   expect <ok [pa=0x..] [value=0x..] | trap cause=.. [handled_in=..] [tval=0x..] [htval=0x..] | walk accesses=N | tlb <hit|miss>>
//!
//! `map stage1` builds tables for vsatp when the machine is virtualized,
//! else for satp. Table frames are allocated ascending from 0x8000_0000
//! (stage 1) and 0x9000_0000 (G stage).

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::csr::{self, addr, atp};
use crate::machine::{Machine, MachineConfig};
use crate::oracle::oracle_translate;
use crate::privilege::{EffectiveMode, PrivilegeState};
use crate::ptw::{Access, PageSize};
use crate::tlb::FenceKind;
use crate::trap::{Exception, TargetMode, Trap, TrapCause};

pub const STAGE1_POOL_BASE: u64 = 0x8000_0000;
pub const GSTAGE_POOL_BASE: u64 = 0x9000_0000;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapStage {
    Stage1,
    GStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PermSpec {
    pub r: bool,
    pub w: bool,
    pub x: bool,
    pub u: bool,
    pub g: bool,
}

impl PermSpec {
    fn to_string(self) -> String {
        let mut s = String::new();
        for (on, c) in [(self.r, 'r'), (self.w, 'w'), (self.x, 'x'), (self.u, 'u'), (self.g, 'g')]
        {
            if on {
                s.push(c);
            }
        }
        s
    }

    pub fn leaf_flags(self) -> u64 {
        let mut f = 0xC1u64; // V|A|D
        if self.r {
            f |= 2;
        }
        if self.w {
            f |= 4;
        }
        if self.x {
            f |= 8;
        }
        if self.u {
            f |= 0x10;
        }
        if self.g {
            f |= 0x20;
        }
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpectCause {
    Exception(Exception),
    Interrupt(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expectation {
    Ok { pa: Option<u64>, value: Option<u64> },
    Trap {
        cause: ExpectCause,
        handled_in: Option<TargetMode>,
        tval: Option<u64>,
        htval: Option<u64>,
    },
    WalkAccesses(usize),
    Tlb { hit: bool },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Directive {
    Mode(EffectiveMode),
    CsrRead { name: String, addr: u16 },
    CsrWrite { name: String, addr: u16, value: u64 },
    MemBack { pa: u64, len: u64 },
    MemWrite64 { pa: u64, value: u64 },
    MemRead64 { pa: u64 },
    Map {
        stage: MapStage,
        va: u64,
        pa: u64,
        size: PageSize,
        perms: PermSpec,
        asid: Option<u16>,
        vmid: Option<u16>,
    },
    Access { acc: Access, va: u64 },
    TrapInject {
        cause: ExpectCause,
        tval: u64,
        gpa: Option<u64>,
        epc: u64,
    },
    TrapReturn,
    Fence { kind: FenceKind, addr: Option<u64>, id: Option<u16> },
    Expect(Expectation),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub directives: Vec<(usize, Directive)>,
}

fn parse_u64(tok: &str) -> Result<u64, String> {
    if let Some(hex) = tok.strip_prefix("0x") {
        u64::from_str_radix(hex, 16).map_err(|e| format!("bad hex value {tok:?}: {e}"))
    } else {
        tok.parse::<u64>().map_err(|e| format!("bad value {tok:?}: {e}"))
    }
}

fn kv(tok: &str) -> Option<(&str, &str)> {
    tok.split_once('=')
}

const CAUSE_MNEMONICS: &str = "IllegalInstruction, EcallFromU, EcallFromHS, EcallFromVS, \
     EcallFromM, InstructionPageFault, LoadPageFault, StoreAmoPageFault, \
     GuestInstructionPageFault, GuestLoadPageFault, VirtualInstruction, GuestStoreAmoPageFault";

fn parse_cause(tok: &str, interrupt: bool) -> Result<ExpectCause, String> {
    if interrupt {
        return Ok(ExpectCause::Interrupt(parse_u64(tok)?));
    }
    Exception::from_name(tok)
        .map(ExpectCause::Exception)
        .ok_or_else(|| format!("unknown cause {tok:?}; valid mnemonics: {CAUSE_MNEMONICS}"))
}

fn parse_mode(tok: &str) -> Result<EffectiveMode, String> {
    match tok {
        "M" => Ok(EffectiveMode::M),
        "HS" => Ok(EffectiveMode::HS),
        "VS" => Ok(EffectiveMode::VS),
        "U" => Ok(EffectiveMode::U),
        "VU" => Ok(EffectiveMode::VU),
        _ => Err(format!("unknown mode {tok:?}; expected M|HS|U|VS|VU")),
    }
}

fn parse_size(tok: &str) -> Result<PageSize, String> {
    match tok {
        "4K" => Ok(PageSize::Size4K),
        "2M" => Ok(PageSize::Size2M),
        "1G" => Ok(PageSize::Size1G),
        _ => Err(format!("unknown size {tok:?}; expected 4K|2M|1G")),
    }
}

fn parse_perms(tok: &str) -> Result<PermSpec, String> {
    let mut p = PermSpec::default();
    for c in tok.chars() {
        match c {
            'r' => p.r = true,
            'w' => p.w = true,
            'x' => p.x = true,
            'u' => p.u = true,
            'g' => p.g = true,
            '-' => {}
            _ => return Err(format!("bad perms char {c:?}; expected subset of rwxug")),
        }
    }
    Ok(p)
}

fn parse_directive(line: &str) -> Result<Option<Directive>, String> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let toks: Vec<&str> = line.split_whitespace().collect();
    let need = |n: usize| -> Result<(), String> {
        if toks.len() < n {
            Err(format!("directive {:?} is missing operands", toks[0]))
        } else {
            Ok(())
        }
    };
    let d = match toks[0] {
        "mode" => {
            need(2)?;
            Directive::Mode(parse_mode(toks[1])?)
        }
        "csr" => {
            need(3)?;
            let name = toks[2].to_string();
            let a = csr::addr_of(&name).ok_or_else(|| format!("unknown CSR {name:?}"))?;
            match toks[1] {
                "read" => Directive::CsrRead { name, addr: a },
                "write" => {
                    need(4)?;
                    Directive::CsrWrite { name, addr: a, value: parse_u64(toks[3])? }
                }
                other => return Err(format!("csr verb must be read|write, got {other:?}")),
            }
        }
        "mem" => {
            need(3)?;
            let pa = parse_u64(toks[2])?;
            match toks[1] {
                "back" => {
                    need(4)?;
                    Directive::MemBack { pa, len: parse_u64(toks[3])? }
                }
                "write64" => {
                    need(4)?;
                    Directive::MemWrite64 { pa, value: parse_u64(toks[3])? }
                }
                "read64" => Directive::MemRead64 { pa },
                other => return Err(format!("mem verb must be back|write64|read64, got {other:?}")),
            }
        }
        "map" => {
            need(2)?;
            let stage = match toks[1] {
                "stage1" => MapStage::Stage1,
                "gstage" => MapStage::GStage,
                other => return Err(format!("map stage must be stage1|gstage, got {other:?}")),
            };
            let (mut va, mut pa, mut size, mut perms) = (None, None, None, None);
            let (mut asid, mut vmid) = (None, None);
            for tok in &toks[2..] {
                let (k, v) = kv(tok).ok_or_else(|| format!("expected key=value, got {tok:?}"))?;
                match k {
                    "va" => va = Some(parse_u64(v)?),
                    "pa" => pa = Some(parse_u64(v)?),
                    "size" => size = Some(parse_size(v)?),
                    "perms" => perms = Some(parse_perms(v)?),
                    "asid" => asid = Some(parse_u64(v)? as u16),
                    "vmid" => vmid = Some(parse_u64(v)? as u16),
                    _ => return Err(format!("unknown map operand {k:?}")),
                }
            }
            Directive::Map {
                stage,
                va: va.ok_or("map requires va=")?,
                pa: pa.ok_or("map requires pa=")?,
                size: size.ok_or("map requires size=")?,
                perms: perms.ok_or("map requires perms=")?,
                asid,
                vmid,
            }
        }
        "access" => {
            need(3)?;
            let acc = match toks[1] {
                "load" => Access::Load,
                "store" => Access::Store,
                "fetch" => Access::Fetch,
                other => return Err(format!("access type must be load|store|fetch, got {other:?}")),
            };
            let (k, v) = kv(toks[2]).ok_or("access requires va=0x..")?;
            if k != "va" {
                return Err(format!("access requires va=, got {k:?}"));
            }
            Directive::Access { acc, va: parse_u64(v)? }
        }
        "trap" => {
            need(2)?;
            match toks[1] {
                "return" => Directive::TrapReturn,
                "inject" => {
                    let interrupt = toks.contains(&"interrupt");
                    let (mut cause, mut tval, mut gpa, mut epc) = (None, 0, None, 0);
                    for tok in &toks[2..] {
                        if *tok == "interrupt" {
                            continue;
                        }
                        let (k, v) =
                            kv(tok).ok_or_else(|| format!("expected key=value, got {tok:?}"))?;
                        match k {
                            "cause" => cause = Some(parse_cause(v, interrupt)?),
                            "tval" => tval = parse_u64(v)?,
                            "gpa" => gpa = Some(parse_u64(v)?),
                            "epc" => epc = parse_u64(v)?,
                            _ => return Err(format!("unknown trap operand {k:?}")),
                        }
                    }
                    Directive::TrapInject {
                        cause: cause.ok_or("trap inject requires cause=")?,
                        tval,
                        gpa,
                        epc,
                    }
                }
                other => return Err(format!("trap verb must be inject|return, got {other:?}")),
            }
        }
        "fence" => {
            need(2)?;
            let kind = match toks[1] {
                "sfence.vma" => FenceKind::SfenceVma,
                "hfence.vvma" => FenceKind::HfenceVvma,
                "hfence.gvma" => FenceKind::HfenceGvma,
                other => return Err(format!("unknown fence {other:?}")),
            };
            let (mut a, mut id) = (None, None);
            for tok in &toks[2..] {
                let (k, v) = kv(tok).ok_or_else(|| format!("expected key=value, got {tok:?}"))?;
                match k {
                    "addr" => a = Some(parse_u64(v)?),
                    "id" => id = Some(parse_u64(v)? as u16),
                    _ => return Err(format!("unknown fence operand {k:?}")),
                }
            }
            Directive::Fence { kind, addr: a, id }
        }
        "expect" => {
            need(2)?;
            let e = match toks[1] {
                "ok" => {
                    let (mut pa, mut value) = (None, None);
                    for tok in &toks[2..] {
                        let (k, v) =
                            kv(tok).ok_or_else(|| format!("expected key=value, got {tok:?}"))?;
                        match k {
                            "pa" => pa = Some(parse_u64(v)?),
                            "value" => value = Some(parse_u64(v)?),
                            _ => return Err(format!("unknown expect ok operand {k:?}")),
                        }
                    }
                    Expectation::Ok { pa, value }
                }
                "trap" => {
                    let interrupt = toks.contains(&"interrupt");
                    let (mut cause, mut handled_in, mut tval, mut htval) =
                        (None, None, None, None);
                    for tok in &toks[2..] {
                        if *tok == "interrupt" {
                            continue;
                        }
                        let (k, v) =
                            kv(tok).ok_or_else(|| format!("expected key=value, got {tok:?}"))?;
                        match k {
                            "cause" => cause = Some(parse_cause(v, interrupt)?),
                            "handled_in" => {
                                handled_in = Some(match v {
                                    "M" => TargetMode::M,
                                    "HS" => TargetMode::HS,
                                    "VS" => TargetMode::VS,
                                    other => {
                                        return Err(format!(
                                            "handled_in must be M|HS|VS, got {other:?}"
                                        ))
                                    }
                                })
                            }
                            "tval" => tval = Some(parse_u64(v)?),
                            "htval" => htval = Some(parse_u64(v)?),
                            _ => return Err(format!("unknown expect trap operand {k:?}")),
                        }
                    }
                    Expectation::Trap {
                        cause: cause.ok_or("expect trap requires cause=")?,
                        handled_in,
                        tval,
                        htval,
                    }
                }
                "walk" => {
                    need(3)?;
                    let (k, v) = kv(toks[2]).ok_or("expect walk requires accesses=N")?;
                    if k != "accesses" {
                        return Err(format!("expect walk requires accesses=, got {k:?}"));
                    }
                    Expectation::WalkAccesses(parse_u64(v)? as usize)
                }
                "tlb" => {
                    need(3)?;
                    match toks[2] {
                        "hit" => Expectation::Tlb { hit: true },
                        "miss" => Expectation::Tlb { hit: false },
                        other => return Err(format!("expect tlb takes hit|miss, got {other:?}")),
                    }
                }
                other => {
                    return Err(format!("unknown expectation {other:?}; expected ok|trap|walk|tlb"))
                }
            };
            Directive::Expect(e)
        }
        other => return Err(format!("unknown directive {other:?}")),
    };
    Ok(Some(d))
}

pub fn parse(name: &str, text: &str) -> Result<Scenario, ParseError> {
    let mut directives = Vec::new();
    let mut last_bindable = false;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let parsed =
            parse_directive(raw).map_err(|message| ParseError { line: lineno, message })?;
        if let Some(d) = parsed {
            if matches!(d, Directive::Expect(_)) {
                if !last_bindable {
                    return Err(ParseError {
                        line: lineno,
                        message: "expect must follow an access, csr, mem read or trap directive"
                            .to_string(),
                    });
                }
                // several expects may bind to the same preceding directive
            } else {
                last_bindable = matches!(
                    d,
                    Directive::Access { .. }
                        | Directive::CsrRead { .. }
                        | Directive::CsrWrite { .. }
                        | Directive::MemRead64 { .. }
                        | Directive::TrapInject { .. }
                        | Directive::TrapReturn
                );
            }
            directives.push((lineno, d));
        }
    }
    Ok(Scenario { name: name.to_string(), directives })
}

fn cause_text(c: ExpectCause) -> String {
    match c {
        ExpectCause::Exception(e) => e.name().to_string(),
        ExpectCause::Interrupt(n) => format!("{n:#x}"),
    }
}

/// Canonical text form; `parse(serialize(parse(x)))` is stable.
pub fn serialize(s: &Scenario) -> String {
    let mut out = String::new();
    for (_, d) in &s.directives {
        match d {
            Directive::Mode(m) => writeln!(out, "mode {m}").unwrap(),
            Directive::CsrRead { name, .. } => writeln!(out, "csr read {name}").unwrap(),
            Directive::CsrWrite { name, value, .. } => {
                writeln!(out, "csr write {name} {value:#x}").unwrap()
            }
            Directive::MemBack { pa, len } => writeln!(out, "mem back {pa:#x} {len:#x}").unwrap(),
            Directive::MemWrite64 { pa, value } => {
                writeln!(out, "mem write64 {pa:#x} {value:#x}").unwrap()
            }
            Directive::MemRead64 { pa } => writeln!(out, "mem read64 {pa:#x}").unwrap(),
            Directive::Map { stage, va, pa, size, perms, asid, vmid } => {
                let stage = match stage {
                    MapStage::Stage1 => "stage1",
                    MapStage::GStage => "gstage",
                };
                write!(
                    out,
                    "map {stage} va={va:#x} pa={pa:#x} size={} perms={}",
                    size.name(),
                    perms.to_string()
                )
                .unwrap();
                if let Some(a) = asid {
                    write!(out, " asid={a:#x}").unwrap();
                }
                if let Some(v) = vmid {
                    write!(out, " vmid={v:#x}").unwrap();
                }
                out.push('\n');
            }
            Directive::Access { acc, va } => {
                let acc = match acc {
                    Access::Load => "load",
                    Access::Store => "store",
                    Access::Fetch => "fetch",
                };
                writeln!(out, "access {acc} va={va:#x}").unwrap()
            }
            Directive::TrapInject { cause, tval, gpa, epc } => {
                write!(out, "trap inject cause={}", cause_text(*cause)).unwrap();
                if *tval != 0 {
                    write!(out, " tval={tval:#x}").unwrap();
                }
                if let Some(g) = gpa {
                    write!(out, " gpa={g:#x}").unwrap();
                }
                if *epc != 0 {
                    write!(out, " epc={epc:#x}").unwrap();
                }
                if matches!(cause, ExpectCause::Interrupt(_)) {
                    out.push_str(" interrupt");
                }
                out.push('\n');
            }
            Directive::TrapReturn => out.push_str("trap return\n"),
            Directive::Fence { kind, addr, id } => {
                write!(out, "fence {}", kind.name()).unwrap();
                if let Some(a) = addr {
                    write!(out, " addr={a:#x}").unwrap();
                }
                if let Some(i) = id {
                    write!(out, " id={i:#x}").unwrap();
                }
                out.push('\n');
            }
            Directive::Expect(e) => {
                match e {
                    Expectation::Ok { pa, value } => {
                        out.push_str("expect ok");
                        if let Some(p) = pa {
                            write!(out, " pa={p:#x}").unwrap();
                        }
                        if let Some(v) = value {
                            write!(out, " value={v:#x}").unwrap();
                        }
                    }
                    Expectation::Trap { cause, handled_in, tval, htval } => {
                        write!(out, "expect trap cause={}", cause_text(*cause)).unwrap();
                        if let Some(h) = handled_in {
                            write!(out, " handled_in={h}").unwrap();
                        }
                        if let Some(t) = tval {
                            write!(out, " tval={t:#x}").unwrap();
                        }
                        if let Some(h) = htval {
                            write!(out, " htval={h:#x}").unwrap();
                        }
                        if matches!(cause, ExpectCause::Interrupt(_)) {
                            out.push_str(" interrupt");
                        }
                    }
                    Expectation::WalkAccesses(n) => write!(out, "expect walk accesses={n}").unwrap(),
                    Expectation::Tlb { hit } => {
                        write!(out, "expect tlb {}", if *hit { "hit" } else { "miss" }).unwrap()
                    }
                }
                out.push('\n');
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Trace

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: String,
    #[serde(flatten)]
    pub data: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Default)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    fn emit(&mut self, kind: &str, data: serde_json::Value) {
        let seq = self.events.len() as u64;
        let data = match data {
            serde_json::Value::Object(m) => m,
            _ => serde_json::Map::new(),
        };
        self.events.push(TraceEvent { seq, kind: kind.to_string(), data });
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&serde_json::to_string(e).unwrap());
            s.push('\n');
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Runner

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub tlb_enabled: bool,
    pub tlb_capacity: usize,
    pub oracle_check: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { tlb_enabled: true, tlb_capacity: 16, oracle_check: false }
    }
}

#[derive(Debug, Clone)]
pub struct Failure {
    pub line: usize,
    pub message: String,
}

#[derive(Debug)]
pub struct RunReport {
    pub name: String,
    pub pass: bool,
    pub failures: Vec<Failure>,
    pub trace: Trace,
}

#[derive(Debug, Clone)]
enum StepOutcome {
    Ok { pa: Option<u64>, value: Option<u64>, accesses: Option<usize>, tlb_hit: Option<bool> },
    Trapped {
        cause: TrapCause,
        target: TargetMode,
        tval: u64,
        htval: Option<u64>,
    },
}

/// Deterministic page-table synthesis for `map` directives. Stage-1
/// guest tables live in GPA space; their backing HPAs are resolved
/// through the G-stage mappings this builder itself recorded.
struct MapBuilder {
    s1_host_root: Option<u64>,
    s1_guest_root: Option<u64>,
    g_root: Option<u64>,
    next_s1: u64,
    next_g: u64,
    /// (gpa_base, pa_base, size) from `map gstage` directives.
    g_map: Vec<(u64, u64, PageSize)>,
}

impl MapBuilder {
    fn new() -> MapBuilder {
        MapBuilder {
            s1_host_root: None,
            s1_guest_root: None,
            g_root: None,
            next_s1: STAGE1_POOL_BASE,
            next_g: GSTAGE_POOL_BASE,
            g_map: Vec::new(),
        }
    }

    fn resolve_gpa(&self, gpa: u64) -> Option<u64> {
        self.g_map.iter().find_map(|&(g, p, size)| {
            let mask = !(size.bytes() - 1);
            (gpa & mask == g).then(|| p | (gpa & !mask))
        })
    }

    /// Address of a stage-1 table word in host physical space.
    fn host_pa(&self, m: &Machine, table_addr: u64, guest: bool) -> Result<u64, String> {
        if !guest || atp::is_bare(m.csrs.raw_read(addr::HGATP)) {
            return Ok(table_addr);
        }
        self.resolve_gpa(table_addr).ok_or_else(|| {
            format!("stage1 table gpa {table_addr:#x} is not gstage-mapped; map gstage first")
        })
    }

    fn alloc_s1(&mut self, m: &mut Machine, guest: bool) -> Result<u64, String> {
        let a = self.next_s1;
        self.next_s1 += 0x1000;
        let pa = self.host_pa(m, a, guest)?;
        m.mem.back_range(pa, 0x1000);
        Ok(a)
    }

    fn alloc_g(&mut self, m: &mut Machine, frames: u64) -> u64 {
        let pa = self.next_g;
        self.next_g += frames * 0x1000;
        m.mem.back_range(pa, frames * 0x1000);
        pa
    }

    fn write_s1(&self, m: &mut Machine, a: u64, value: u64, guest: bool) -> Result<(), String> {
        let pa = self.host_pa(m, a, guest)?;
        m.mem.write64(pa, value).map_err(|e| e.to_string())
    }

    fn read_s1(&self, m: &Machine, a: u64, guest: bool) -> Result<u64, String> {
        let pa = self.host_pa(m, a, guest)?;
        m.mem.read64(pa).map_err(|e| e.to_string())
    }

    fn map_stage1(
        &mut self,
        m: &mut Machine,
        va: u64,
        pa: u64,
        size: PageSize,
        perms: PermSpec,
        asid: Option<u16>,
    ) -> Result<(), String> {
        let guest = m.mode.virt();
        let root = match if guest { self.s1_guest_root } else { self.s1_host_root } {
            Some(r) => r,
            None => {
                let r = self.alloc_s1(m, guest)?;
                if guest {
                    self.s1_guest_root = Some(r);
                } else {
                    self.s1_host_root = Some(r);
                }
                r
            }
        };
        let leaf_level = match size {
            PageSize::Size4K => 0u64,
            PageSize::Size2M => 1,
            PageSize::Size1G => 2,
        };
        if pa % size.bytes() != 0 {
            return Err(format!("map pa {pa:#x} is not {}-aligned", size.name()));
        }
        let mut table = root;
        let mut level = 2;
        while level > leaf_level {
            let slot = table + ((va >> (12 + 9 * level)) & 0x1FF) * 8;
            let cur = self.read_s1(m, slot, guest)?;
            table = if cur & 1 == 1 {
                ((cur >> 10) & 0xFFF_FFFF_FFFF) << 12
            } else {
                let t = self.alloc_s1(m, guest)?;
                self.write_s1(m, slot, ((t >> 12) << 10) | 1, guest)?;
                t
            };
            level -= 1;
        }
        let slot = table + ((va >> (12 + 9 * leaf_level)) & 0x1FF) * 8;
        self.write_s1(m, slot, ((pa >> 12) << 10) | perms.leaf_flags(), guest)?;

        let reg = if guest { addr::VSATP } else { addr::SATP };
        let old = m.csrs.raw_read(reg);
        let asid = asid.map(u64::from).unwrap_or((old >> atp::ID_SHIFT) & atp::ASID_MASK as u64);
        m.csrs.raw_write(
            reg,
            (atp::MODE_SV39 << atp::MODE_SHIFT) | (asid << atp::ID_SHIFT) | (root >> 12),
        );
        Ok(())
    }

    fn map_gstage(
        &mut self,
        m: &mut Machine,
        gpa: u64,
        pa: u64,
        size: PageSize,
        perms: PermSpec,
        vmid: Option<u16>,
    ) -> Result<(), String> {
        let root = match self.g_root {
            Some(r) => r,
            None => {
                let r = self.alloc_g(m, 4); // 16 KiB root
                self.g_root = Some(r);
                r
            }
        };
        let leaf_level = match size {
            PageSize::Size4K => 0u64,
            PageSize::Size2M => 1,
            PageSize::Size1G => 2,
        };
        if pa % size.bytes() != 0 {
            return Err(format!("map pa {pa:#x} is not {}-aligned", size.name()));
        }
        let mut table = root;
        let mut level = 2;
        while level > leaf_level {
            let idx = if level == 2 { (gpa >> 30) & 0x7FF } else { (gpa >> (12 + 9 * level)) & 0x1FF };
            let slot = table + idx * 8;
            let cur = m.mem.read64(slot).map_err(|e| e.to_string())?;
            table = if cur & 1 == 1 {
                ((cur >> 10) & 0xFFF_FFFF_FFFF) << 12
            } else {
                let t = self.alloc_g(m, 1);
                m.mem.write64(slot, ((t >> 12) << 10) | 1).map_err(|e| e.to_string())?;
                t
            };
            level -= 1;
        }
        let idx = if leaf_level == 2 { (gpa >> 30) & 0x7FF } else { (gpa >> (12 + 9 * leaf_level)) & 0x1FF };
        m.mem
            .write64(table + idx * 8, ((pa >> 12) << 10) | perms.leaf_flags())
            .map_err(|e| e.to_string())?;
        self.g_map.push((gpa & !(size.bytes() - 1), pa & !(size.bytes() - 1), size));

        let old = m.csrs.raw_read(addr::HGATP);
        let vmid = vmid.map(u64::from).unwrap_or((old >> atp::ID_SHIFT) & atp::VMID_MASK as u64);
        m.csrs.raw_write(
            addr::HGATP,
            (atp::MODE_SV39 << atp::MODE_SHIFT) | (vmid << atp::ID_SHIFT) | (root >> 12),
        );
        Ok(())
    }
}

pub fn run(scenario: &Scenario, cfg: &RunConfig) -> RunReport {
    use serde_json::json;

    let mut m = Machine::new(MachineConfig {
        tlb_enabled: cfg.tlb_enabled,
        tlb_capacity: cfg.tlb_capacity,
    });
    let mut builder = MapBuilder::new();
    let mut trace = Trace::default();
    let mut failures: Vec<Failure> = Vec::new();
    let mut last: Option<StepOutcome> = None;

    let fail = |failures: &mut Vec<Failure>, line: usize, message: String| {
        failures.push(Failure { line, message });
    };

    for (line, d) in &scenario.directives {
        let line = *line;
        match d {
            Directive::Mode(em) => {
                m.mode = PrivilegeState::from_effective(*em);
                trace.emit("mode-change", json!({ "mode": em.to_string(), "line": line }));
            }
            Directive::CsrRead { name, addr: a } => match m.csr_read(*a) {
                Ok(v) => {
                    last = Some(StepOutcome::Ok {
                        pa: None,
                        value: Some(v),
                        accesses: None,
                        tlb_hit: None,
                    });
                }
                Err(e) => {
                    last = Some(raise_csr_trap(&mut m, &mut trace, name, e));
                }
            },
            Directive::CsrWrite { name, addr: a, value } => match m.csr_write(*a, *value) {
                Ok(()) => {
                    trace.emit(
                        "csr-write",
                        json!({ "csr": name, "value": format!("{:#x}", m.csrs.raw_read(*a)) }),
                    );
                    last = Some(StepOutcome::Ok {
                        pa: None,
                        value: None,
                        accesses: None,
                        tlb_hit: None,
                    });
                }
                Err(e) => {
                    last = Some(raise_csr_trap(&mut m, &mut trace, name, e));
                }
            },
            Directive::MemBack { pa, len } => {
                m.mem.back_range(*pa, *len);
            }
            Directive::MemWrite64 { pa, value } => {
                if let Err(e) = m.mem.write64(*pa, *value) {
                    fail(&mut failures, line, format!("mem write64: {e}"));
                }
            }
            Directive::MemRead64 { pa } => match m.mem.read64(*pa) {
                Ok(v) => {
                    last = Some(StepOutcome::Ok {
                        pa: Some(*pa),
                        value: Some(v),
                        accesses: None,
                        tlb_hit: None,
                    });
                }
                Err(e) => {
                    fail(&mut failures, line, format!("mem read64: {e}"));
                    last = None;
                }
            },
            Directive::Map { stage, va, pa, size, perms, asid, vmid } => {
                let res = match stage {
                    MapStage::Stage1 => builder.map_stage1(&mut m, *va, *pa, *size, *perms, *asid),
                    MapStage::GStage => builder.map_gstage(&mut m, *va, *pa, *size, *perms, *vmid),
                };
                if let Err(e) = res {
                    fail(&mut failures, line, format!("map: {e}"));
                }
            }
            Directive::Access { acc, va } => {
                let regs_mode = m.mode;
                match m.translate(*va, *acc) {
                    Ok(t) => {
                        for (pa, val) in &t.accesses {
                            trace.emit(
                                "walk-step",
                                json!({ "pa": format!("{pa:#x}"), "value": format!("{val:#x}") }),
                            );
                        }
                        trace.emit(
                            if t.tlb_hit { "tlb-hit" } else { "tlb-miss" },
                            json!({ "va": format!("{va:#x}") }),
                        );
                        if t.tlb_inserts > 0 {
                            trace.emit("tlb-insert", json!({ "count": t.tlb_inserts }));
                        }
                        if cfg.oracle_check && !t.tlb_hit {
                            let regs = m.mmu_regs();
                            match oracle_translate(&m.mem, &regs, regs_mode, *va, *acc) {
                                Ok(opa) if opa == t.pa => {}
                                other => fail(
                                    &mut failures,
                                    line,
                                    format!(
                                        "oracle disagreement: machine pa={:#x}, oracle {:?}",
                                        t.pa, other
                                    ),
                                ),
                            }
                        }
                        last = Some(StepOutcome::Ok {
                            pa: Some(t.pa),
                            value: None,
                            accesses: Some(t.accesses.len()),
                            tlb_hit: Some(t.tlb_hit),
                        });
                    }
                    Err(f) => {
                        trace.emit("tlb-miss", json!({ "va": format!("{va:#x}") }));
                        if cfg.oracle_check {
                            let regs = m.mmu_regs();
                            match oracle_translate(&m.mem, &regs, regs_mode, *va, *acc) {
                                Err(of) if of.cause == f.cause() => {}
                                other => fail(
                                    &mut failures,
                                    line,
                                    format!(
                                        "oracle disagreement: machine fault {}, oracle {:?}",
                                        f.cause().name(),
                                        other
                                    ),
                                ),
                            }
                        }
                        let trap = f.to_trap();
                        last = Some(raise(&mut m, &mut trace, &trap, *va));
                    }
                }
            }
            Directive::TrapInject { cause, tval, gpa, epc } => {
                let trap = match cause {
                    ExpectCause::Interrupt(code) => Trap::interrupt(*code),
                    ExpectCause::Exception(e) if e.is_guest_page_fault() => {
                        Trap::guest_page_fault(*e, *tval, gpa.unwrap_or(0))
                    }
                    ExpectCause::Exception(e) => Trap::exception(*e, *tval),
                };
                last = Some(raise(&mut m, &mut trace, &trap, *epc));
            }
            Directive::TrapReturn => {
                let from = match m.mode.effective() {
                    EffectiveMode::M => Some(TargetMode::M),
                    EffectiveMode::HS => Some(TargetMode::HS),
                    EffectiveMode::VS => Some(TargetMode::VS),
                    _ => None,
                };
                let res = from
                    .ok_or("trap return from user mode".to_string())
                    .and_then(|f| m.trap_return(f).map_err(|e| e.to_string()));
                match res {
                    Ok(state) => {
                        trace.emit(
                            "mode-change",
                            json!({ "mode": state.effective().to_string(), "reason": "trap-return" }),
                        );
                        last = Some(StepOutcome::Ok {
                            pa: None,
                            value: None,
                            accesses: None,
                            tlb_hit: None,
                        });
                    }
                    Err(e) => {
                        fail(&mut failures, line, format!("trap return: {e}"));
                        last = None;
                    }
                }
            }
            Directive::Fence { kind, addr: a, id } => match m.fence(*kind, *a, *id) {
                Ok(n) => {
                    trace.emit(
                        "tlb-flush",
                        json!({ "fence": kind.name(), "invalidated": n }),
                    );
                }
                Err(e) => fail(&mut failures, line, format!("fence: {e}")),
            },
            Directive::Expect(exp) => {
                if let Some(msg) = check(&last, exp) {
                    fail(&mut failures, line, msg);
                }
            }
        }
    }

    RunReport { name: scenario.name.clone(), pass: failures.is_empty(), failures, trace }
}

fn raise(m: &mut Machine, trace: &mut Trace, trap: &Trap, epc: u64) -> StepOutcome {
    use serde_json::json;
    trace.emit(
        "trap-raised",
        json!({
            "cause": match trap.cause {
                TrapCause::Exception(e) => e.name().to_string(),
                TrapCause::Interrupt(c) => format!("interrupt:{c:#x}"),
            },
            "tval": format!("{:#x}", trap.tval),
        }),
    );
    let origin = m.mode.effective().to_string();
    let outcome = m.raise_trap(trap, epc);
    trace.emit(
        "trap-delegated",
        json!({ "origin": origin, "target": outcome.target.to_string() }),
    );
    trace.emit(
        "mode-change",
        json!({ "mode": outcome.new_state.effective().to_string(), "reason": "trap" }),
    );
    let htval = match outcome.target {
        TargetMode::HS => Some(m.csrs.raw_read(addr::HTVAL)),
        TargetMode::M => Some(m.csrs.raw_read(addr::MTVAL2)),
        TargetMode::VS => None,
    };
    StepOutcome::Trapped { cause: trap.cause, target: outcome.target, tval: trap.tval, htval }
}

fn raise_csr_trap(
    m: &mut Machine,
    trace: &mut Trace,
    _csr_name: &str,
    e: csr::CsrError,
) -> StepOutcome {
    let exc = match e {
        csr::CsrError::VirtualInstruction => Exception::VirtualInstruction,
        csr::CsrError::Illegal => Exception::IllegalInstruction,
    };
    let trap = Trap::exception(exc, 0);
    raise(m, trace, &trap, 0)
}

fn check(last: &Option<StepOutcome>, exp: &Expectation) -> Option<String> {
    let last = match last {
        Some(l) => l,
        None => return Some("expectation has no preceding result".to_string()),
    };
    match (exp, last) {
        (Expectation::Ok { pa, value }, StepOutcome::Ok { pa: apa, value: avalue, .. }) => {
            if let Some(want) = pa {
                match apa {
                    Some(got) if got == want => {}
                    got => {
                        return Some(format!("expected pa={want:#x}, got {got:?}"));
                    }
                }
            }
            if let Some(want) = value {
                match avalue {
                    Some(got) if got == want => {}
                    got => {
                        return Some(format!("expected value={want:#x}, got {got:?}"));
                    }
                }
            }
            None
        }
        (Expectation::Ok { .. }, StepOutcome::Trapped { cause, .. }) => Some(format!(
            "expected ok, got trap {}",
            match cause {
                TrapCause::Exception(e) => e.name().to_string(),
                TrapCause::Interrupt(c) => format!("interrupt:{c:#x}"),
            }
        )),
        (Expectation::Trap { cause, handled_in, tval, htval }, StepOutcome::Trapped {
            cause: acause,
            target,
            tval: atval,
            htval: ahtval,
        }) => {
            let want_code = match cause {
                ExpectCause::Exception(e) => TrapCause::Exception(*e),
                ExpectCause::Interrupt(c) => TrapCause::Interrupt(*c),
            };
            if want_code != *acause {
                return Some(format!("expected cause {want_code:?}, got {acause:?}"));
            }
            if let Some(h) = handled_in {
                if h != target {
                    return Some(format!("expected handled_in={h}, got {target}"));
                }
            }
            if let Some(t) = tval {
                if t != atval {
                    return Some(format!("expected tval={t:#x}, got {atval:#x}"));
                }
            }
            if let Some(h) = htval {
                match ahtval {
                    Some(got) if got == h => {}
                    got => return Some(format!("expected htval={h:#x}, got {got:?}")),
                }
            }
            None
        }
        (Expectation::Trap { .. }, StepOutcome::Ok { pa, .. }) => {
            Some(format!("expected trap, got ok (pa={pa:?})"))
        }
        (Expectation::WalkAccesses(n), StepOutcome::Ok { accesses, .. }) => match accesses {
            Some(got) if got == n => None,
            got => Some(format!("expected walk accesses={n}, got {got:?}")),
        },
        (Expectation::WalkAccesses(_), StepOutcome::Trapped { .. }) => {
            Some("expected walk accesses, but access trapped".to_string())
        }
        (Expectation::Tlb { hit }, StepOutcome::Ok { tlb_hit, .. }) => match tlb_hit {
            Some(got) if got == hit => None,
            got => Some(format!("expected tlb {}, got {got:?}", if *hit { "hit" } else { "miss" })),
        },
        (Expectation::Tlb { .. }, StepOutcome::Trapped { .. }) => {
            Some("expected tlb outcome, but access trapped".to_string())
        }
    }
}

/// Parse and run a scenario from text (library convenience; the CLI
/// reads files itself to report exit codes).
pub fn run_text(name: &str, text: &str, cfg: &RunConfig) -> Result<RunReport, ParseError> {
    let s = parse(name, text)?;
    Ok(run(&s, cfg))
}

/// Resolve a map of CSR names for diagnostics.
pub fn csr_names() -> HashMap<&'static str, u16> {
    csr::IMPLEMENTED
        .iter()
        .filter_map(|&a| csr::name_of(a).map(|n| (n, a)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_mode_directive() {
        let s = parse("t", "mode VS\n").unwrap();
        assert_eq!(s.directives.len(), 1);
        assert_eq!(s.directives[0].1, Directive::Mode(EffectiveMode::VS));
    }

    #[test]
    fn parse_access_without_backing_is_fine() {
        // parse/run separation: missing backing is a runtime concern
        let s = parse("t", "access load va=0x1000\n").unwrap();
        assert!(matches!(s.directives[0].1, Directive::Access { .. }));
    }

    #[test]
    fn bogus_cause_names_valid_mnemonics() {
        let err = parse("t", "access load va=0x0\nexpect trap cause=BogusCause\n").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(err.message.contains("LoadPageFault"), "{}", err.message);
    }

    #[test]
    fn expect_must_follow_bindable_directive() {
        let err = parse("t", "mode VS\nexpect ok\n").unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn serialize_is_parse_stable() {
        let text = "\
# comment
mode HS
mem back 0x80000000 0x10000
map stage1 va=0x1000 pa=0x80004000 size=4K perms=rwxu asid=0x1
access load va=0x1000
expect ok pa=0x80004000
expect walk accesses=3
expect tlb miss
csr read satp
fence sfence.vma addr=0x1000 id=0x1
trap inject cause=EcallFromU
expect trap cause=EcallFromU handled_in=M
trap return
";
        let s1 = parse("t", text).unwrap();
        let round = serialize(&s1);
        let s2 = parse("t", &round).unwrap();
        assert_eq!(serialize(&s2), round);
        let d1: Vec<_> = s1.directives.iter().map(|(_, d)| d.clone()).collect();
        let d2: Vec<_> = s2.directives.iter().map(|(_, d)| d.clone()).collect();
        assert_eq!(d1, d2);
    }

    #[test]
    fn minimal_run_passes() {
        let text = "\
mode HS
mem back 0x80000000 0x100000
map stage1 va=0x4000 pa=0x80080000 size=4K perms=rwxu
mode U
access load va=0x4000
expect ok pa=0x80080000
expect walk accesses=3
access load va=0x4008
expect tlb hit
";
        let report = run_text("t", text, &RunConfig::default()).unwrap();
        assert!(report.pass, "failures: {:?}", report.failures);
    }

    #[test]
    fn wrong_pa_fails_with_diff() {
        let text = "\
mode HS
mem back 0x80000000 0x100000
map stage1 va=0x4000 pa=0x80080000 size=4K perms=rwxu
mode U
access load va=0x4000
expect ok pa=0xdead000
";
        let report = run_text("t", text, &RunConfig::default()).unwrap();
        assert!(!report.pass);
        assert!(report.failures[0].message.contains("expected pa=0xdead000"));
    }

    #[test]
    fn trace_is_deterministic() {
        let text = "\
mode HS
mem back 0x80000000 0x100000
map stage1 va=0x4000 pa=0x80080000 size=4K perms=rwxu
mode U
access load va=0x4000
access store va=0x4000
";
        let a = run_text("t", text, &RunConfig::default()).unwrap();
        let b = run_text("t", text, &RunConfig::default()).unwrap();
        assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl());
        assert!(!a.trace.to_jsonl().is_empty());
    }
}
