mod common;

use std::collections::BTreeMap;

use common::*;
use proptest::prelude::*;
use sheetguard::assess::{Classification, UsageMetrics, classify_usage, risk_score};
use sheetguard::control::{
    BoundRule, CadenceRule, ControlPolicy, RegionMode, RegionRule, TrendRule, evaluate_policies, trend_deviation,
};
use sheetguard::diff::{ChangeKind, ChangeSet, volatility_metrics};
use sheetguard::formula::{normalize_relative, translate};
use sheetguard::grid::{CellAddress, CellContent, CellValue, Region};
use sheetguard::ledger::{CellSeries, ChainStatus, Ledger, RecordKind};
use sheetguard::{
    AuditConfig, Finding, Location, RuleId, apply_changes, diff_snapshots, parse_formula, parse_snapshot_file,
    print_formula, write_snapshot_file,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn snapshot_file_round_trips(s in snapshot(40)) {
        let text = write_snapshot_file(&s);
        let back = parse_snapshot_file(&text).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(write_snapshot_file(&back), text);
    }

    #[test]
    fn digest_ignores_metadata(s in snapshot(20), actor in "[a-z]{1,5}", secs in 0i64..1000) {
        let mut t = s.clone();
        t.actor = actor;
        t.timestamp = ts(secs);
        t.attestation = Some("signed".into());
        prop_assert_eq!(s.digest(), t.digest());
    }

    #[test]
    fn formula_print_parse_is_identity(ast in formula(true)) {
        let printed = print_formula(&ast);
        let reparsed = parse_formula(&printed).unwrap();
        prop_assert_eq!(&reparsed, &ast, "printed as {}", printed);
        prop_assert_eq!(print_formula(&reparsed), printed);
    }

    #[test]
    fn translated_copies_normalize_identically(
        ast in formula(true),
        row in 1u32..=2000,
        col in 1u32..=200,
        dr in -300i64..300,
        dc in -40i64..40,
    ) {
        let host = CellAddress::new("S", row, col).unwrap();
        let target_row = i64::from(row) + dr;
        let target_col = i64::from(col) + dc;
        prop_assume!(target_row >= 1 && target_col >= 1);
        let Some(moved) = translate(&ast, dr, dc) else { return Ok(()) };
        let target = CellAddress::new("S", target_row as u32, target_col as u32).unwrap();
        prop_assert_eq!(normalize_relative(&ast, &host), normalize_relative(&moved, &target));
    }

    #[test]
    fn diff_reconstructs_target((a, b) in snapshot_pair(60)) {
        let cs = diff_snapshots(&a, &b).unwrap();
        let rebuilt = apply_changes(&a, &cs).unwrap();
        prop_assert_eq!(rebuilt.digest(), b.digest());
        prop_assert_eq!(&rebuilt.cells, &b.cells);
        prop_assert!(diff_snapshots(&a, &a).unwrap().events.is_empty());
    }

    #[test]
    fn diff_is_antisymmetric((a, b) in snapshot_pair(40)) {
        let forward = diff_snapshots(&a, &b).unwrap();
        let backward = diff_snapshots(&b, &a).unwrap();
        prop_assert_eq!(forward.events.len(), backward.events.len());
        for (f, r) in forward.events.iter().zip(&backward.events) {
            prop_assert_eq!(&f.address, &r.address);
            prop_assert_eq!(&f.before, &r.after);
            prop_assert_eq!(&f.after, &r.before);
            let mirrored = match f.kind {
                ChangeKind::Added => ChangeKind::Removed,
                ChangeKind::Removed => ChangeKind::Added,
                other => other,
            };
            prop_assert_eq!(mirrored, r.kind);
        }
    }

    #[test]
    fn volatility_ratios_are_bounded((a, b) in snapshot_pair(40)) {
        let v = volatility_metrics(&diff_snapshots(&a, &b).unwrap(), &a);
        prop_assert!((0.0..=1.0).contains(&v.structural_volatility));
        prop_assert!((0.0..=1.0).contains(&v.data_volatility));
        prop_assert!(v.added_fraction >= 0.0);
    }

    #[test]
    fn changeset_canonical_round_trips((a, b) in snapshot_pair(40)) {
        let cs = diff_snapshots(&a, &b).unwrap();
        let text = cs.to_canonical();
        let back = ChangeSet::from_canonical(&text).unwrap();
        prop_assert_eq!(&back, &cs);
        prop_assert_eq!(back.to_canonical(), text);
    }
}

fn built_ledger(records: usize) -> Ledger {
    let mut ledger = Ledger::in_memory();
    for i in 0..records {
        ledger.append_record(RecordKind::Attest, format!("ATTEST payload {i}\n").into_bytes()).unwrap();
    }
    ledger
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn any_byte_corruption_is_detected(
        records in 2usize..12,
        pick in any::<prop::sample::Index>(),
        replacement in any::<u8>(),
    ) {
        let ledger = built_ledger(records);
        let mut bytes = ledger.log_bytes();
        let pos = pick.index(bytes.len());
        prop_assume!(bytes[pos] != replacement);
        let seq = bytes[..pos].iter().filter(|b| **b == b'\n').count() as u64;
        bytes[pos] = replacement;
        match Ledger::from_log_bytes(&bytes, BTreeMap::new()).verify_chain() {
            ChainStatus::Broken { seq: bad, .. } => prop_assert!(bad <= seq, "reported {} for corruption in {}", bad, seq),
            ChainStatus::Verified { .. } => prop_assert!(false, "corruption at byte {} undetected", pos),
        }
    }

    #[test]
    fn reordering_records_is_detected(records in 3usize..12, i in any::<prop::sample::Index>(), j in any::<prop::sample::Index>()) {
        let ledger = built_ledger(records);
        let mut lines: Vec<Vec<u8>> = ledger.log_bytes().split(|b| *b == b'\n').map(<[u8]>::to_vec).collect();
        lines.pop();
        let (i, j) = (i.index(records), j.index(records));
        prop_assume!(i != j);
        lines.swap(i, j);
        let mut bytes = lines.join(&b'\n');
        bytes.push(b'\n');
        let status = Ledger::from_log_bytes(&bytes, BTreeMap::new()).verify_chain();
        let flagged = matches!(status, ChainStatus::Broken { seq, .. } if seq <= i.min(j) as u64);
        prop_assert!(flagged, "swap of {} and {} gave {:?}", i, j, status);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn ledger_replays_and_only_grows(
        steps in prop::collection::vec(prop::collection::vec((address(), content()), 0..15), 1..8)
    ) {
        let mut ledger = Ledger::in_memory();
        let (cfg, policy) = (AuditConfig::default(), ControlPolicy::default());
        let mut current = sheetguard::Snapshot::new("wb", ts(0), "ann");
        let mut log = Vec::new();
        for (i, edits) in steps.into_iter().enumerate() {
            current.timestamp = ts(3600 * (i as i64 + 1));
            current.actor = format!("actor{}", i % 3);
            for (a, c) in edits {
                current.set(a, c);
            }
            ledger.ingest_snapshot(&current, &cfg, &policy).unwrap();
            let now = ledger.log_bytes();
            prop_assert!(now.starts_with(&log));
            log = now;
        }
        prop_assert!(ledger.verify_chain().is_verified());

        let view = ledger.view();
        let ingests = view.ingests();
        let mut replayed = view.ingested_snapshot(&ingests[0]).unwrap();
        for (_, cs) in view.changesets() {
            replayed = apply_changes(&replayed, &cs).unwrap();
        }
        prop_assert_eq!(replayed.digest(), ingests.last().unwrap().digest.clone());
        prop_assert_eq!(replayed.digest(), current.digest());
    }
}

fn numeric_series(xs: &[f64]) -> CellSeries {
    let address: CellAddress = "S!A1".parse().unwrap();
    CellSeries { address, points: xs.iter().enumerate().map(|(i, x)| (ts(i as i64), CellValue::Number(*x))).collect() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn trend_matches_exact_oracle(
        xs in prop::collection::vec(-1.0e6f64..1.0e6, 5..40),
        new_value in -1.0e7f64..1.0e7,
        window in 5usize..30,
    ) {
        let mut rule = TrendRule::new("S!A1".parse().unwrap());
        rule.window = window;
        let verdict = trend_deviation(&numeric_series(&xs), new_value, &rule);
        let prior = &xs[xs.len().saturating_sub(window)..];
        let (mean, variance) = exact_mean_variance(prior);
        let stddev = to_f64(&variance).sqrt();
        prop_assert!(rel_close(verdict.mean, to_f64(&mean), 1e-9), "mean {} vs {}", verdict.mean, to_f64(&mean));
        prop_assert!(rel_close(verdict.stddev, stddev, 1e-9), "stddev {} vs {}", verdict.stddev, stddev);
        if stddev > 0.0 {
            let z = (new_value - to_f64(&mean)) / stddev;
            prop_assert!(rel_close(verdict.z, z, 1e-9), "z {} vs {}", verdict.z, z);
            prop_assert_eq!(verdict.violated, verdict.z.abs() > rule.z_threshold);
        }
    }

    #[test]
    fn constant_history_flags_any_departure(c in -1000i32..1000, len in 5usize..25, delta in -3i32..4) {
        let rule = TrendRule::new("S!A1".parse().unwrap());
        let xs = vec![f64::from(c); len];
        let verdict = trend_deviation(&numeric_series(&xs), f64::from(c + delta), &rule);
        prop_assert_eq!(verdict.violated, delta != 0);
        prop_assert_eq!(verdict.z, 0.0);
    }

    #[test]
    fn short_history_never_flags(xs in prop::collection::vec(-100.0f64..100.0, 0..5), new_value in -1e9f64..1e9) {
        let verdict = trend_deviation(&numeric_series(&xs), new_value, &TrendRule::new("S!A1".parse().unwrap()));
        prop_assert!(!verdict.violated);
        prop_assert_eq!(verdict.z, 0.0);
    }
}

fn metrics() -> impl Strategy<Value = UsageMetrics> {
    (0usize..10, 0.0f64..100.0, 0.0f64..=1.0, 0.0f64..=1.0, 0usize..50).prop_map(|(a, p, s, d, n)| UsageMetrics {
        distinct_actors: a,
        persistence_days: p,
        mean_structural_volatility: s,
        mean_data_volatility: d,
        ingest_count: n,
    })
}

fn critical_findings(n: usize) -> Vec<Finding> {
    (0..n).map(|i| Finding::new(RuleId::ErrorValue, Location::Workbook, "e", i.to_string())).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn more_actors_never_leave_operational(m in metrics(), extra in 1usize..5) {
        let more = UsageMetrics { distinct_actors: m.distinct_actors + extra, ..m };
        if classify_usage(&m) == Classification::Operational {
            prop_assert_eq!(classify_usage(&more), Classification::Operational);
        }
        if classify_usage(&more) == Classification::Modeling {
            prop_assert_eq!(classify_usage(&m), Classification::Modeling);
        }
    }

    #[test]
    fn more_structural_churn_never_leaves_modeling(m in metrics(), bump in 0.0f64..1.0) {
        let single = UsageMetrics { distinct_actors: m.distinct_actors.min(1), ..m };
        let churned = UsageMetrics {
            mean_structural_volatility: (single.mean_structural_volatility + bump).min(1.0),
            ..single
        };
        if classify_usage(&single) == Classification::Modeling {
            prop_assert_eq!(classify_usage(&churned), Classification::Modeling);
        }
        if classify_usage(&single) != Classification::Operational {
            prop_assert_ne!(classify_usage(&churned), Classification::Operational);
        }
    }

    #[test]
    fn score_is_bounded_and_monotone(m in metrics(), crit in 0usize..30, which in 0usize..4, step in 0.0f64..1.0) {
        let base = risk_score(&m, &critical_findings(crit));
        prop_assert!((0.0..=100.0).contains(&base));
        let bumped = match which {
            0 => UsageMetrics { distinct_actors: m.distinct_actors + 1, ..m },
            1 => UsageMetrics { persistence_days: m.persistence_days + 100.0 * step, ..m },
            2 => UsageMetrics { mean_data_volatility: (m.mean_data_volatility + step).min(1.0), ..m },
            _ => UsageMetrics { mean_structural_volatility: (m.mean_structural_volatility + step).min(1.0), ..m },
        };
        prop_assert!(risk_score(&bumped, &critical_findings(crit)) >= base);
        prop_assert!(risk_score(&m, &critical_findings(crit + 1)) >= base);
    }
}

fn small_region() -> impl Strategy<Value = Region> {
    (prop::sample::select(vec!["S", "Data"]), 1u32..=20, 1u32..=8, 0u32..6, 0u32..4)
        .prop_map(|(sheet, top, left, h, w)| Region::new(sheet, top, left, top + h, left + w).unwrap())
}

#[derive(Debug, Clone)]
enum Rule {
    Region(RegionRule),
    Cadence(CadenceRule),
    Bound(BoundRule),
    Trend(TrendRule),
}

fn rule() -> impl Strategy<Value = Rule> {
    let mode = prop::sample::select(vec![
        RegionMode::Free,
        RegionMode::FormulaMaintained,
        RegionMode::DataOnly,
        RegionMode::Locked,
    ]);
    let window = prop::sample::select(vec!["Mon-Fri 09-17", "Sat,Sun 00-24", "* 06-08", "Tue 10-11"]);
    prop_oneof![
        (small_region(), mode, any::<bool>()).prop_map(|(region, mode, ticket_required)| Rule::Region(RegionRule {
            region,
            mode,
            ticket_required
        })),
        (small_region(), prop::collection::vec(window, 1..3)).prop_map(|(region, ws)| Rule::Cadence(CadenceRule {
            region,
            windows: ws.iter().map(|w| w.parse().unwrap()).collect(),
        })),
        (small_region(), prop::option::of(-10.0f64..10.0), prop::option::of(10.0f64..500.0))
            .prop_map(|(region, min, max)| Rule::Bound(BoundRule { region, min, max })),
        (address(), 5usize..10).prop_map(|(a, w)| {
            let mut t = TrendRule::new(a);
            t.window = w;
            Rule::Trend(t)
        }),
    ]
}

fn add_rule(policy: &mut ControlPolicy, rule: Rule) {
    match rule {
        Rule::Region(r) => policy.region_rules.push(r),
        Rule::Cadence(r) => policy.cadence_rules.push(r),
        Rule::Bound(r) => policy.bound_rules.push(r),
        Rule::Trend(r) => policy.trend_rules.push(r),
    }
}

fn contains_all(haystack: &[Finding], needles: &[Finding]) -> bool {
    let mut pool: Vec<&Finding> = haystack.iter().collect();
    needles.iter().all(|n| match pool.iter().position(|h| *h == n) {
        Some(i) => {
            pool.swap_remove(i);
            true
        }
        None => false,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn adding_a_rule_never_removes_findings(
        (a, b) in snapshot_pair(40),
        rules in prop::collection::vec(rule(), 0..6),
        extra in rule(),
        history in prop::collection::vec(0.0f64..100.0, 0..8),
    ) {
        let mut ledger = Ledger::in_memory();
        for (i, x) in history.iter().enumerate() {
            let mut h = a.clone();
            h.timestamp = ts(-100_000 + i as i64 * 60);
            for addr in a.cells.keys() {
                h.set(addr.clone(), CellContent::number(*x));
            }
            let _ = ledger.ingest_snapshot(&h, &AuditConfig::default(), &ControlPolicy::default());
        }
        let cs = diff_snapshots(&a, &b).unwrap();
        let mut policy = ControlPolicy::default();
        for r in rules {
            add_rule(&mut policy, r);
        }
        let before = evaluate_policies(&cs, &policy, &ledger.view());
        add_rule(&mut policy, extra);
        let after = evaluate_policies(&cs, &policy, &ledger.view());
        prop_assert!(contains_all(&after, &before), "before {:?}\nafter {:?}", before, after);
    }
}
