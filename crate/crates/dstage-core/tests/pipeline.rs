//! End-to-end runs of the built scenarios, checking the structural
//! invariants: conservation, purge completeness, determinism, coupled-run
//! safety, and scheme degeneracies.

use dstage_core::cluster::Overheads;
use dstage_core::job::JobClass;
use dstage_core::policy::{SchemeKind, SchemeSpec};
use dstage_core::record::RunOutput;
use dstage_core::scenario::{DataParallelConfig, Layers, NetworkConfig, NfvConfig, SizeDist};

fn dp(scheme: SchemeKind, load: f64, seed: u64, requests: usize) -> DataParallelConfig {
    let mut cfg = DataParallelConfig::testbed(SchemeSpec::new(scheme), load, seed);
    cfg.requests = requests;
    cfg
}

fn assert_conservation(out: &RunOutput) {
    for s in &out.stages {
        assert_eq!(
            s.dispatched,
            s.completed + s.purged + s.released + s.resident,
            "conservation violated at {}",
            s.label
        );
    }
}

#[test]
fn single_copy_run_completes_and_drains() {
    let out = dp(SchemeKind::SingleCopy, 0.4, 1, 300).build().run();
    assert!(!out.truncated);
    assert_eq!(out.totals.offered, 300);
    assert_eq!(out.totals.completed, 300);
    assert_eq!(out.records.len(), 300);
    assert_eq!(out.residual_jobs, 0);
    assert_conservation(&out);
    for r in &out.records {
        assert_eq!(r.served_by, JobClass::Primary);
        assert_eq!(r.scheme, "single");
        assert!(r.rct_us >= 100_000, "rct below bare service time: {}", r.rct_us);
        assert_eq!(r.completion_us - r.arrival_us, r.rct_us);
    }
}

#[test]
fn das_purges_every_losing_copy() {
    let out = dp(SchemeKind::Das, 0.4, 2, 400).build().run();
    assert!(!out.truncated);
    assert_eq!(out.totals.completed, 400);
    // Residual scan: nothing left anywhere after the run.
    assert_eq!(out.residual_jobs, 0);
    assert_conservation(&out);
    // Two copies per request, and losers disappear via purge or natural
    // completion only.
    assert_eq!(out.totals.copies_issued, 800);
    assert!(out.totals.copies_purged > 0);
    let dup_wins = out
        .records
        .iter()
        .filter(|r| r.served_by == JobClass::Duplicate)
        .count();
    assert!(dup_wins > 0, "duplicates never won");
}

#[test]
fn same_seed_same_config_is_bit_identical() {
    let a = dp(SchemeKind::Das, 0.4, 7, 300).build().run();
    let b = dp(SchemeKind::Das, 0.4, 7, 300).build().run();
    assert_eq!(a.records.len(), b.records.len());
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.request_id, y.request_id);
        assert_eq!(x.completion_us, y.completion_us);
        assert_eq!(x.rct_us, y.rct_us);
        assert_eq!(x.served_by, y.served_by);
        assert_eq!(x.purges_issued, y.purges_issued);
    }
    let c = dp(SchemeKind::Das, 0.4, 8, 300).build().run();
    assert!(
        a.records.iter().zip(&c.records).any(|(x, y)| x.rct_us != y.rct_us),
        "different seeds produced identical outputs"
    );
}

/// Coupled-run per-job safety in ideal mode: with primaries retained, the
/// primary subsystem is untouched by duplicates, so primary completions are
/// bit-identical to the single-copy run and no request ever does worse.
#[test]
fn coupled_das_never_worse_and_primaries_identical() {
    for load in [0.1, 0.4] {
        let mut single = dp(SchemeKind::SingleCopy, load, 11, 400);
        single.overheads = Overheads::ideal();
        let base = single.build().run();

        let mut das = dp(SchemeKind::Das, load, 11, 400);
        das.overheads = Overheads::ideal();
        das.retain_primary_on_win = true;
        let out = das.build().run();

        assert_eq!(out.primary_completions, base.primary_completions);
        for (s, d) in base.records.iter().zip(&out.records) {
            assert_eq!(s.request_id, d.request_id);
            assert!(
                d.rct_us <= s.rct_us,
                "request {} regressed: das {} vs single {}",
                s.request_id,
                d.rct_us,
                s.rct_us
            );
        }
    }
}

/// With every layer gated off, duplicates exist but get no differential
/// treatment and purges are ignored: exactly the cloning scheme.
#[test]
fn ungated_das_degenerates_to_cloning() {
    let mut das = dp(SchemeKind::Das, 0.3, 5, 300);
    das.layers = Layers::none();
    let a = das.build().run();
    let mut cloning = dp(SchemeKind::Cloning, 0.3, 5, 300);
    cloning.layers = Layers::none();
    let b = cloning.build().run();
    assert_eq!(a.records.len(), b.records.len());
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.rct_us, y.rct_us);
        assert_eq!(x.served_by, y.served_by);
    }
}

/// Cloning and cloning-with-priorities cannot differ while at most one
/// request is ever in the system.
#[test]
fn cloning_equals_cloning_prio_without_contention() {
    let a = dp(SchemeKind::Cloning, 0.002, 9, 40).build().run();
    let b = dp(SchemeKind::CloningPrio, 0.002, 9, 40).build().run();
    assert_eq!(a.records.len(), 40);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.rct_us, y.rct_us);
        assert_eq!(x.served_by, y.served_by);
    }
}

/// A timeout large enough that no request ever restarts makes the
/// timeout-restart scheme behave exactly like single-copy on the same seed.
#[test]
fn appto_without_firings_equals_single_copy() {
    let mut appto = dp(
        SchemeKind::AppTo {
            timeout_us: 3_600_000_000,
        },
        0.3,
        13,
        300,
    );
    appto.overheads = Overheads::ideal();
    let a = appto.build().run();
    let mut single = dp(SchemeKind::SingleCopy, 0.3, 13, 300);
    single.overheads = Overheads::ideal();
    let b = single.build().run();
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.rct_us, y.rct_us);
        assert_eq!(x.completion_us, y.completion_us);
    }
    assert_eq!(a.totals.copies_issued, 300);
}

#[test]
fn hedged_issues_duplicates_only_past_the_threshold() {
    // Threshold far above every completion: behaves like single-copy and
    // the delayed copies are purged straight out of the delay queue.
    let mut hedged = dp(
        SchemeKind::Hedged {
            threshold_us: 3_600_000_000,
        },
        0.3,
        17,
        200,
    );
    hedged.overheads = Overheads::ideal();
    let out = hedged.build().run();
    assert_eq!(out.totals.completed, 200);
    assert_eq!(out.residual_jobs, 0);
    // Every request issued one purge: the never-released duplicate.
    assert!(out.records.iter().all(|r| r.purges_issued == 1));
    let served_dup = out
        .records
        .iter()
        .any(|r| r.served_by == JobClass::Duplicate);
    assert!(!served_dup);
}

#[test]
fn tied_purges_before_service_at_low_load() {
    let mut tied = dp(SchemeKind::Tied, 0.05, 19, 200);
    tied.overheads = Overheads::ideal();
    let out = tied.build().run();
    assert_eq!(out.totals.completed, 200);
    assert_eq!(out.residual_jobs, 0);
    assert_conservation(&out);
    // Exactly one copy ever reaches service: the first starter purges its
    // counterpart (instant purges here), so every request issues one purge.
    assert!(out.records.iter().all(|r| r.purges_issued == 1));
    // A duplicate only wins when the primary's server happens to be busy;
    // at 5% load that is a small minority.
    let dup_wins = out
        .records
        .iter()
        .filter(|r| r.served_by == JobClass::Duplicate)
        .count();
    assert!(dup_wins < 30, "{dup_wins} duplicate wins at near-zero load");
}

#[test]
fn network_scenario_completes_with_hotspots() {
    let mut cfg = NetworkConfig::cloud(SchemeSpec::new(SchemeKind::Das), 0.4, 23);
    cfg.requests = 2_000;
    let out = cfg.build().run();
    assert!(!out.truncated);
    assert_eq!(out.totals.completed, 2_000);
    assert_eq!(out.residual_jobs, 0);
    assert_conservation(&out);
    assert!(out.records.iter().all(|r| r.size_class.token() == "fixed"));
}

#[test]
fn nfv_dedup_emits_each_packet_exactly_once() {
    let mut cfg = NfvConfig::ids_cluster(SchemeSpec::new(SchemeKind::Das), 0.5, 29);
    cfg.requests = 3_000;
    let out = cfg.build().run();
    assert_eq!(out.totals.completed, 3_000);
    let mut ids: Vec<u64> = out.records.iter().map(|r| r.request_id).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 3_000, "duplicate packets escaped the dedup stage");
}

#[test]
fn nfv_duplicate_cap_zero_drops_all_duplicates() {
    let mut cfg = NfvConfig::ids_cluster(SchemeSpec::new(SchemeKind::Das), 0.5, 31);
    cfg.requests = 1_000;
    cfg.duplicate_queue_cap = Some(0);
    let out = cfg.build().run();
    assert_eq!(out.totals.duplicates_dropped, 1_000);
    assert!(out
        .records
        .iter()
        .all(|r| r.served_by == JobClass::Primary));
}

#[test]
fn proxy_discovers_the_storage_concurrency() {
    // Four parallel service slots behind an opaque stage: the throttler
    // should settle within one of the real parallelism. Links are left fast
    // so the disks stay the bottleneck.
    let mut cfg = dp(SchemeKind::SingleCopy, 0.7, 37, 4_000);
    cfg.use_proxy = true;
    cfg.storage_concurrency = 4;
    cfg.server_link = 8_000.0;
    cfg.client_link = 40_000.0;
    cfg.noise = dstage_core::resources::NoiseModel::disabled();
    cfg.proxy.window_us = 200_000;
    cfg.proxy.min_completions = 20;
    cfg.proxy.reprobe = false;
    let out = cfg.build().run();
    assert_eq!(out.totals.completed, 4_000);
    let settled: Vec<_> = out
        .proxies
        .iter()
        .filter_map(|p| p.n_star)
        .collect();
    assert!(!settled.is_empty(), "no proxy settled");
    for n_star in settled {
        assert!(
            (3..=5).contains(&n_star),
            "n_star {n_star} far from the 4 real slots"
        );
    }
}

#[test]
fn backlog_samples_cover_the_run() {
    let out = dp(SchemeKind::SingleCopy, 0.4, 41, 500).build().run();
    assert!(out.backlog.len() >= 10, "only {} samples", out.backlog.len());
    let mut prev = 0;
    for s in &out.backlog {
        assert!(s.at_us >= prev);
        prev = s.at_us;
    }
}
