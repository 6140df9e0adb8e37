//! Runs the whole scenario corpus under both TLB configurations with
//! oracle checking, plus parser behavior checks.

use std::fs;
use std::path::PathBuf;

use hvsim::scenario::{self, RunConfig};

fn corpus() -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut files: Vec<_> = fs::read_dir(dir)
        .expect("scenario corpus directory")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "scn"))
        .collect();
    files.sort();
    assert!(files.len() >= 20, "corpus has only {} scenarios", files.len());
    files
        .into_iter()
        .map(|p| {
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            (name, fs::read_to_string(&p).unwrap())
        })
        .collect()
}

#[test]
fn corpus_passes_with_tlb() {
    let cfg = RunConfig { oracle_check: true, ..RunConfig::default() };
    for (name, text) in corpus() {
        let s = scenario::parse(&name, &text).unwrap_or_else(|e| panic!("{name}: {e}"));
        let report = scenario::run(&s, &cfg);
        assert!(report.pass, "{name}: {:?}", report.failures);
    }
}

#[test]
fn corpus_passes_without_tlb() {
    // TLB-behavior expectations necessarily differ with caching off;
    // everything else must hold unchanged.
    let cfg = RunConfig { tlb_enabled: false, oracle_check: true, ..RunConfig::default() };
    for (name, text) in corpus() {
        if name == "fence-sfence-stale" {
            // demonstrates stale caching; meaningless without a TLB
            continue;
        }
        let s = scenario::parse(&name, &text).unwrap_or_else(|e| panic!("{name}: {e}"));
        let report = scenario::run(&s, &cfg);
        let non_tlb_failures: Vec<_> = report
            .failures
            .iter()
            .filter(|f| !f.message.contains("tlb"))
            .collect();
        assert!(non_tlb_failures.is_empty(), "{name}: {non_tlb_failures:?}");
    }
}

#[test]
fn corpus_serialization_is_stable() {
    for (name, text) in corpus() {
        let s1 = scenario::parse(&name, &text).unwrap();
        let canon = scenario::serialize(&s1);
        let s2 = scenario::parse(&name, &canon).unwrap();
        assert_eq!(scenario::serialize(&s2), canon, "{name}: serialization unstable");
    }
}

#[test]
fn negative_control_fails() {
    let text = "\
mode HS
map stage1 va=0x4000 pa=0x80004000 size=4K perms=rwx
access load va=0x4000
expect ok pa=0xdeadbeef000
";
    let s = scenario::parse("negative", text).unwrap();
    let report = scenario::run(&s, &RunConfig::default());
    assert!(!report.pass, "intentionally wrong expectation passed");
    assert_eq!(report.failures.len(), 1);
}

#[test]
fn parse_errors_carry_line_numbers() {
    let err = scenario::parse("t", "mode HS\nfrobnicate now\n").unwrap_err();
    assert_eq!(err.line, 2);

    let err =
        scenario::parse("t", "trap inject cause=NoSuchCause\n").unwrap_err();
    assert_eq!(err.line, 1);
    assert!(err.message.contains("GuestStoreAmoPageFault"), "{}", err.message);
}
