use gravred::dpcore::{enumerate_tree, final_probabilities, run_monte_carlo, CorrelationPolicy, ReductionEvent};
use gravred::relfield::SpacetimePoint;
use gravred::scenario::*;
use gravred::Error;

fn built(name: &str) -> (ExperimentSpec, Built) {
    let spec = builtin(name).unwrap();
    let b = build_scenarios(&spec).unwrap();
    (spec, b)
}

#[test]
fn builtins_enumerate_expected_scenarios() {
    let cases = [
        ("fig1", 2),
        ("fig4", 2),
        ("fig2", 3),
        ("fig13", 3),
        ("fig8", 4),
        ("fig16", 3),
        ("fig21", 3),
        ("epr-bohm", 2),
        ("star-n", 3),
        ("star-5", 5),
    ];
    for (name, n) in cases {
        let (_, b) = built(name);
        assert_eq!(b.scenarios.len(), n, "{name}");
        let sum: f64 = b.amplitudes.amplitudes.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "{name}");
    }
}

#[test]
fn unknown_builtin_is_rejected() {
    assert!(matches!(builtin("fig99"), Err(Error::InvalidInput(_))));
    assert!(builtin("star-1").is_err());
}

#[test]
fn fig16_labels_and_amplitudes() {
    let (_, b) = built("fig16");
    assert_eq!(b.amplitudes.labels, vec!["1", "2.1", "2.2"]);
    let a = &b.amplitudes.amplitudes;
    for (x, y) in a.iter().zip([0.2, 0.4, 0.4]) {
        assert!((x - y).abs() < 1e-12);
    }
    // The second detector is armed only when the first one fired.
    let det2 = |k: usize| {
        b.scenarios[k]
            .items
            .iter()
            .find(|i| i.name == "det2")
            .unwrap()
            .markers[0]
            .value_at(10.0)
            .to_string()
    };
    assert_eq!(det2(0), "off");
    assert_eq!(det2(1), "idle");
    assert_eq!(det2(2), "fired");
}

#[test]
fn fig8_labels_are_hierarchical() {
    let (_, b) = built("fig8");
    assert_eq!(b.amplitudes.labels, vec!["1.1", "1.2", "2.1", "2.2"]);
    assert!(b.amplitudes.amplitudes.iter().all(|&w| (w - 0.25).abs() < 1e-12));
}

#[test]
fn fig21_has_three_scenarios_and_field_markers() {
    let (_, b) = built("fig21");
    assert_eq!(b.scenarios.len(), 3);
    let reducer = |k: usize| b.scenarios[k].items.iter().find(|i| i.name == "reducer").unwrap().clone();
    assert_eq!(reducer(0).markers[0].value_at(10.0), "field1");
    assert_eq!(reducer(2).markers[0].value_at(10.0), "field3");
    assert_eq!(reducer(1).markers[0].value_at(10.0), "none");
    // Only the second scenario moves the mass.
    assert_eq!(reducer(0).trajectory.position_at(10.0), [0.0; 3]);
    assert!(reducer(1).trajectory.position_at(10.0)[0] > 0.4e-6);
}

#[test]
fn amplitude_override_must_be_normalized() {
    let mut spec = builtin("fig4").unwrap();
    spec.amplitudes.initial = Some(vec![0.5, 0.6]);
    match spec.validate() {
        Err(Error::Schema(v)) => assert!(v.iter().any(|m| m.starts_with("amplitudes.initial"))),
        other => panic!("expected schema error, got {other:?}"),
    }
    spec.amplitudes.initial = Some(vec![0.3, 0.7]);
    let b = build_scenarios(&spec).unwrap();
    assert_eq!(b.amplitudes.amplitudes, vec![0.3, 0.7]);
    spec.amplitudes.initial = Some(vec![1.0]);
    assert!(matches!(build_scenarios(&spec), Err(Error::Schema(_))));
}

#[test]
fn schema_errors_are_collected() {
    let mut spec = builtin("fig4").unwrap();
    spec.schema = "other/1".into();
    spec.grid.dx = -1.0;
    spec.devices[1].kind = DeviceKind::BeamSplitter {
        ratio: 1.5,
        transmit: "nowhere".into(),
        reflect: "det".into(),
    };
    let Err(Error::Schema(v)) = spec.validate() else { panic!() };
    assert!(v.len() >= 4, "{v:?}");
    assert!(v.iter().any(|m| m.starts_with("schema")));
    assert!(v.iter().any(|m| m.starts_with("grid.dx")));
    assert!(v.iter().any(|m| m.contains("ratio")));
    assert!(v.iter().any(|m| m.contains("\"nowhere\"")));
}

#[test]
fn device_cycles_are_rejected() {
    let mut spec = builtin("fig4").unwrap();
    spec.devices.push(Device {
        name: "m1".into(),
        position: [0.0; 3],
        kind: DeviceKind::Mirror { output: "m2".into() },
    });
    spec.devices.push(Device {
        name: "m2".into(),
        position: [1e-6, 0.0, 0.0],
        kind: DeviceKind::Mirror { output: "m1".into() },
    });
    let Err(Error::Schema(v)) = spec.validate() else { panic!() };
    assert!(v.iter().any(|m| m.contains("cycle")), "{v:?}");
}

#[test]
fn spec_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["fig16", "fig21", "epr-bohm"] {
        let spec = builtin(name).unwrap();
        let path = dir.path().join(format!("{name}.toml"));
        save_spec(&spec, &path).unwrap();
        let back = load_spec(&path).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.hash(), spec.hash());
        assert_eq!(resolve_spec(path.to_str().unwrap()).unwrap(), spec);
    }
    assert_ne!(builtin("fig1").unwrap().hash(), builtin("fig4").unwrap().hash());
}

#[test]
fn handwritten_spec_parses() {
    let text = r#"
schema = "gravred.experiment/1"
name = "single"
duration = 2.0

[grid]
dx = 2.5e-7
dt = 0.05
x_min = -1.5e-6
x_max = 2.5e-6

[[devices]]
name = "src"
kind = "photon-source"
position = [-1e-6, 0.0, 0.0]
emit_at = 0.05
output = "bs"

[[devices]]
name = "bs"
kind = "beam-splitter"
position = [-0.5e-6, 0.0, 0.0]
ratio = 0.5
transmit = "dump"
reflect = "det"

[[devices]]
name = "dump"
kind = "absorber"
position = [2e-6, 0.0, 0.0]

[[devices]]
name = "det"
kind = "detector"
position = [0.0, 0.0, 0.0]
mode = "mass-shift"
shift = [5e-7, 0.0, 0.0]
body = { shape = "sphere", diameter = 1e-6 }

[policies]
correlation = "none"
"#;
    let spec = parse_spec(text).unwrap();
    assert_eq!(spec.policies.correlation, CorrelationPolicy::None);
    assert!(spec.policies.final_measurement);
    let b = build_scenarios(&spec).unwrap();
    assert_eq!(b.scenarios.len(), 2);
    let missing = text.replace("output = \"bs\"", "");
    assert!(matches!(parse_spec(&missing), Err(Error::Schema(_))));
}

#[test]
fn fig13_schedule_is_bundled_per_detector() {
    let (spec, b) = built("fig13");
    let sched = build_schedule(&spec, &b).unwrap();
    let sites = &sched.epochs[0].sites;
    assert_eq!(sites.len(), 3);
    let tree = enumerate_tree(&b.amplitudes, &sched, CorrelationPolicy::None).unwrap();
    assert!(tree.has_transition(0, &[0.5, 0.0, 0.5], 1e-12));
    let p = final_probabilities(&tree).unwrap();
    for (_, w) in p {
        assert!((w - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn fig2_schedule_is_one_global_site() {
    let (spec, b) = built("fig2");
    let sched = build_schedule(&spec, &b).unwrap();
    assert_eq!(sched.epochs[0].sites.len(), 1);
    let tree = enumerate_tree(&b.amplitudes, &sched, CorrelationPolicy::None).unwrap();
    assert!(tree.has_transition(0, &[2.0 / 3.0, 0.0, 1.0 / 3.0], 1e-12));
}

#[test]
fn fig21_first_winner_prediction() {
    let (spec, b) = built("fig21");
    let sched = build_schedule(&spec, &b).unwrap();
    let tree = enumerate_tree(&b.amplitudes, &sched, CorrelationPolicy::FirstWinner).unwrap();
    let p: Vec<f64> = final_probabilities(&tree).unwrap().into_iter().map(|x| x.1).collect();
    for (x, y) in p.iter().zip([0.25, 0.5, 0.25]) {
        assert!((x - y).abs() < 1e-12, "{p:?}");
    }
}

#[test]
fn fig8_far_field_is_independent() {
    // The right experiment's bundle map is unaffected by the left one's outcome.
    let (spec, b) = built("fig8");
    let map = build_field_map(&spec, &b).unwrap();
    let grid = spec.grid();
    let x_r = SpacetimePoint::at_time(5.0, [29.6e-6, 0.0, 0.0]);
    let cell = grid.locate(&x_r).unwrap();
    let part = &map.cells[cell].partition;
    assert_eq!(part, &vec![vec![0, 2], vec![1, 3]]);
    let w: Vec<f64> = part.iter().map(|p| b.amplitudes.weight(p)).collect();
    assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
    // Field at the right detector equals the single-experiment field.
    let one = builtin("fig4").unwrap();
    let ob = build_scenarios(&one).unwrap();
    let omap = build_field_map(&one, &ob).unwrap();
    let ocell = one.grid().locate(&SpacetimePoint::at_time(5.0, [-0.4e-6, 0.0, 0.0])).unwrap();
    let (v8, v4) = (map.cells[cell].value(0, 1), omap.cells[ocell].value(0, 1));
    assert!(v4 > 0.0);
    assert!((v8 - v4).abs() < 1e-12 * v4, "{v8} vs {v4}");
}

fn record(run: u64) -> RunRecord {
    RunRecord {
        spec_hash: "abc".into(),
        engine: "nonrel".into(),
        engine_version: "0.1.0".into(),
        seed: 7,
        run,
        events: vec![ReductionEvent::pair(0.5, 0, 1)],
        outcome: "2".into(),
        final_state: vec![0.0, 1.0],
    }
}

#[test]
fn run_store_round_trips_and_skips_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("runs.jsonl");
    let recs: Vec<RunRecord> = (0..10).map(record).collect();
    persist_runs(&path, &recs[..6]).unwrap();
    let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    use std::io::Write;
    writeln!(f, "{{not json").unwrap();
    writeln!(f, "{{\"spec_hash\": 3}}").unwrap();
    drop(f);
    persist_runs(&path, &recs[6..]).unwrap();
    let (back, skipped) = load_runs(&path).unwrap();
    assert_eq!(back, recs);
    assert_eq!(skipped, 2);
    assert!(matches!(load_runs(&dir.path().join("none.jsonl")), Err(Error::Io { .. })));
}

#[test]
fn frequency_csv_reimports() {
    let (spec, b) = built("fig4");
    let sched = build_schedule(&spec, &b).unwrap();
    let mc = run_monte_carlo(&b.amplitudes, &sched, 200, 3, CorrelationPolicy::None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("freq.csv");
    export_frequencies(&path, &mc.frequencies).unwrap();
    let rows = import_frequencies(&path).unwrap();
    assert_eq!(rows.len(), mc.frequencies.len());
    for (r, f) in rows.iter().zip(&mc.frequencies) {
        assert_eq!(r.0, f.state);
        assert_eq!(r.1, f.probability);
        assert_eq!(r.2, f.stderr);
    }
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("state,probability,stderr\n"));
}

#[test]
fn field_and_bundle_rows_cover_grid() {
    let (spec, b) = built("fig4");
    let map = build_field_map(&spec, &b).unwrap();
    let rows = bundle_rows(&map, &b.amplitudes);
    assert_eq!(rows.len(), spec.grid().len());
    assert!(rows.iter().any(|r| r.partition == "1|2"));
    assert!(rows.iter().any(|r| r.partition == "1,2"));
    let f = field_rows(&map, &b.amplitudes.labels, Some((0, 1)));
    assert!(f.iter().all(|r| r.pair == "1|2"));
    assert!(f.iter().any(|r| r.value > 0.0));
}
