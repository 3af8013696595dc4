use safebet::harness::{check_leak, check_security, generate, scenario, ScenarioKind, ScenarioSpec};
use safebet::pipeline::{run, PolicyConfig, SimConfig};
use safebet::trace::OpKind;

fn leaks(kind: ScenarioKind, seed: u64, policy: &str) -> bool {
    let t = generate(&ScenarioSpec::new(kind, seed)).unwrap();
    check_leak(&t, &SimConfig::new(policy.parse().unwrap())).unwrap().leaked
}

#[test]
fn baseline_leaks_and_defenses_hold() {
    for kind in ScenarioKind::ALL {
        for seed in 0..5 {
            assert!(leaks(kind, seed, "baseline"), "{kind} seed {seed}: baseline should leak");
            for p in ["safebet", "nda-restrictive", "nda-permissive-0", "nda-permissive-4"] {
                assert!(!leaks(kind, seed, p), "{kind} seed {seed}: {p} leaked");
            }
        }
    }
}

#[test]
fn static_sources_expose_cross_region_attacks() {
    for kind in ScenarioKind::ALL {
        let want = matches!(kind, ScenarioKind::SpectreV2 | ScenarioKind::SpectreRsb | ScenarioKind::ConfusedDeputy);
        assert_eq!(leaks(kind, 11, "safebet+no-instances"), want, "{kind}");
    }
}

#[test]
fn skipping_revocation_exposes_only_stale_permissions() {
    for kind in ScenarioKind::ALL {
        let want = kind == ScenarioKind::StalePermission;
        assert_eq!(leaks(kind, 12, "safebet+no-revocation"), want, "{kind}");
    }
}

#[test]
fn v1_witness_is_the_dependent_probe_load() {
    let s = scenario::build(&ScenarioSpec::new(ScenarioKind::SpectreV1, 4)).unwrap();
    let v = check_leak(&s.trace, &SimConfig::new(PolicyConfig::baseline())).unwrap();
    let w = v.witness.expect("leak has a witness");
    let op = s.trace.ops().find(|o| o.seq == w.seq).unwrap();
    assert_eq!(op.kind, OpKind::Load);
    assert!(op.wrong_path);
    assert_eq!(op.mem.unwrap().addr, s.transmit_addr);
    assert_eq!(w.reg.0, 3);
}

#[test]
fn stale_permission_invokes_handler_before_attack() {
    let t = generate(&ScenarioSpec::new(ScenarioKind::StalePermission, 0)).unwrap();
    let s = run(&t, &SimConfig::new(PolicyConfig::safebet())).unwrap();
    assert_eq!(s.handler_invocations, 1);
    assert!(s.smact.revoked_entries >= 1);
}

#[test]
fn confused_deputy_has_two_owner_calls_and_one_secret_commit() {
    let t = generate(&ScenarioSpec::new(ScenarioKind::ConfusedDeputy, 0)).unwrap();
    let owner = t.header.owner().unwrap();
    let mut into_owner = 0;
    let ops: Vec<_> = t.ops().filter(|o| !o.wrong_path).collect();
    for w in ops.windows(2) {
        if w[0].kind == OpKind::Call && t.region_of(w[1].pc).unwrap() == owner {
            into_owner += 1;
        }
    }
    assert!(into_owner >= 2);
    let secret_commits = ops
        .iter()
        .filter(|o| o.kind == OpKind::Load)
        .filter(|o| t.header.is_secret(o.mem.unwrap().addr.0, 8) && t.region_of(o.pc).unwrap() == owner)
        .count();
    assert_eq!(secret_commits, 1);
}

#[test]
fn gate_never_delivers_what_the_history_refuses() {
    for kind in ScenarioKind::ALL {
        for p in ["safebet", "safebet+no-inheritance", "safebet+insn-source", "safebet+no-bitmask"] {
            let t = generate(&ScenarioSpec::new(kind, 21)).unwrap();
            let r = check_security(&t, &SimConfig::new(p.parse().unwrap())).unwrap();
            assert!(r.gate_violations.is_empty(), "{kind} under {p}: {:?}", r.gate_violations);
        }
    }
}

#[test]
fn verdicts_are_deterministic() {
    let t = generate(&ScenarioSpec::new(ScenarioKind::SpectreRsb, 5)).unwrap();
    let cfg = SimConfig::new(PolicyConfig::baseline());
    let a = check_security(&t, &cfg).unwrap();
    let b = check_security(&t, &cfg).unwrap();
    assert_eq!(a.verdict, b.verdict);
    assert_eq!(a.stats, b.stats);
}
