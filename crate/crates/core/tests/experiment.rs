use std::path::Path;

use safebet::report::{read_csv, run_experiment, to_csv_string, ExperimentConfig, Report};

fn cfg(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(text, Path::new(".")).unwrap()
}

#[test]
fn warm_table_keeps_safebet_near_baseline() {
    let r = run_experiment(&cfg("traces = [\"synthetic:locality\"]\npolicies = [\"baseline\", \"safebet\"]")).unwrap();
    let sb = r.runs.iter().find(|x| x.policy == "safebet").unwrap();
    let n = sb.norm_time.unwrap();
    assert!((1.0..1.05).contains(&n), "normalized {n}");
}

#[test]
fn size_sweep_is_monotone_on_locality_trace() {
    let r = run_experiment(&cfg(
        r#"traces = ["synthetic:locality", "synthetic:random_load_heavy"]
policies = ["baseline", "safebet"]
geometries = ["128x8", "512x8", "2048x8"]
seeds = [1, 2]"#,
    ))
    .unwrap();
    assert!(!r.size_sweep.is_empty());
    for w in r.size_sweep.chunks(3) {
        assert!(w[0].total_miss >= w[1].total_miss && w[1].total_miss >= w[2].total_miss, "{w:?}");
    }
}

#[test]
fn report_is_reproducible_and_round_trips() {
    let c = cfg(
        r#"traces = ["scenario:spectre_v1", "synthetic:owner_utility"]
policies = ["baseline", "safebet", "safebet+no-inheritance"]
seeds = [0, 7]"#,
    );
    let a = run_experiment(&c).unwrap();
    let b = run_experiment(&c).unwrap();
    let csv = to_csv_string(&a).unwrap();
    assert_eq!(csv, to_csv_string(&b).unwrap());
    assert_eq!(read_csv(csv.as_bytes()).unwrap().len(), 12);
    assert_eq!(Report::from_json(&a.to_json().unwrap()).unwrap(), a);
    for row in read_csv(csv.as_bytes()).unwrap() {
        if row.policy == "baseline" {
            assert_eq!(row.norm_time, Some(1.0));
        }
        let parts = row.smact_miss_slab.unwrap() + row.smact_miss_chunk.unwrap() + row.smact_miss_instance.unwrap();
        assert_eq!(parts, row.smact_miss_total.unwrap());
    }
    assert_eq!(a.safebet_leaks().count(), 0);
}
