use std::collections::HashMap;

use gravred::constants::HBAR;
use gravred::dpcore::*;
use gravred::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Couplings in units of ħ per second, so rates read directly in s⁻¹.
fn hbar_matrix(m: &[&[f64]]) -> Vec<Vec<f64>> {
    m.iter().map(|r| r.iter().map(|v| v * HBAR).collect()).collect()
}

fn full(n: usize, rate: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { rate * HBAR }).collect())
        .collect()
}

fn probs(tree: &DecayTree) -> Vec<f64> {
    final_probabilities(tree).unwrap().into_iter().map(|(_, p)| p).collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "{a:?} vs {b:?}");
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn step_probabilities_zero_coupling_stays() {
    let s = Superposition::numbered(vec![0.5, 0.5]).unwrap();
    let p = step_probabilities(&s, &full(2, 0.0), 1e-3).unwrap();
    assert_eq!(p.stay, 1.0);
    assert!(p.jumps.iter().all(|j| j.probability == 0.0));
}

#[test]
fn step_probabilities_two_states() {
    let s = Superposition::numbered(vec![0.5, 0.5]).unwrap();
    let p = step_probabilities(&s, &full(2, 1.0), 1e-3).unwrap();
    assert_eq!(p.jumps.len(), 2);
    for j in &p.jumps {
        assert!((j.probability - 5e-4).abs() < 1e-15);
    }
    assert!((p.stay - 0.999).abs() < 1e-15);
}

#[test]
fn step_probabilities_three_equal_states() {
    let s = Superposition::uniform(3).unwrap();
    let dt = 1e-3;
    let p = step_probabilities(&s, &full(3, 2.0), dt).unwrap();
    assert_eq!(p.jumps.len(), 6);
    for j in &p.jumps {
        assert!((j.probability - 2.0 / 3.0 * dt).abs() < 1e-15);
    }
}

#[test]
fn step_too_large_is_rejected() {
    let s = Superposition::numbered(vec![0.5, 0.5]).unwrap();
    match step_probabilities(&s, &full(2, 1.0), 0.2) {
        Err(Error::StepTooLarge { total, .. }) => assert!((total - 0.2).abs() < 1e-12),
        other => panic!("expected step-too-large, got {other:?}"),
    }
}

#[test]
fn sample_step_zero_coupling_never_fires() {
    let s = Superposition::numbered(vec![0.5, 0.5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        assert!(sample_step(&s, &full(2, 0.0), 0.0, 1e-2, &mut rng).unwrap().is_none());
    }
}

fn stepped_history(seed: u64) -> Vec<ReductionEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Superposition::uniform(3).unwrap();
    let e = full(3, 1.0);
    let (mut t, dt) = (0.0, 1e-2);
    let mut out = Vec::new();
    while s.survivors().len() > 1 {
        if let Some(ev) = sample_step(&s, &e, t, dt, &mut rng).unwrap() {
            s = apply_reduction(&s, &ev).unwrap().state;
            out.push(ev);
        }
        t += dt;
    }
    out
}

#[test]
fn sample_step_is_deterministic_per_seed() {
    let a = serde_json::to_string(&stepped_history(7)).unwrap();
    let b = serde_json::to_string(&stepped_history(7)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, serde_json::to_string(&stepped_history(8)).unwrap());
}

#[test]
fn sample_step_symmetric_pair_is_fair() {
    let s = Superposition::numbered(vec![0.5, 0.5]).unwrap();
    let e = full(2, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 100_000;
    let mut wins = 0;
    for _ in 0..n {
        // Steps at the guard limit; repeat until something happens.
        loop {
            if let Some(ev) = sample_step(&s, &e, 0.0, 0.099, &mut rng).unwrap() {
                if ev.winner == vec![0] {
                    wins += 1;
                }
                break;
            }
        }
    }
    let p = wins as f64 / n as f64;
    let sigma = (0.25 / n as f64).sqrt();
    assert!((p - 0.5).abs() < 3.0 * sigma, "{p}");
}

#[test]
fn apply_reduction_examples() {
    let s = Superposition::numbered(vec![0.2, 0.8]).unwrap();
    let r = apply_reduction(&s, &ReductionEvent::pair(0.0, 0, 1)).unwrap();
    assert_eq!(r.state.amplitudes, vec![0.0, 1.0]);
    assert!(!r.noop);

    let s = Superposition::uniform(3).unwrap();
    let r = apply_reduction(&s, &ReductionEvent::pair(0.0, 1, 0)).unwrap();
    assert_close(&r.state.amplitudes, &[2.0 / 3.0, 0.0, 1.0 / 3.0], 1e-15);

    let again = apply_reduction(&r.state, &ReductionEvent::pair(0.0, 1, 2)).unwrap();
    assert!(again.noop);
    assert_eq!(again.state, r.state);

    let last = apply_reduction(&r.state, &ReductionEvent::pair(0.0, 2, 0)).unwrap();
    assert_close(&last.state.amplitudes, &[1.0, 0.0, 0.0], 1e-15);
}

#[test]
fn apply_reduction_rejects_bad_indices() {
    let s = Superposition::numbered(vec![0.5, 0.5]).unwrap();
    assert!(apply_reduction(&s, &ReductionEvent::pair(0.0, 0, 2)).is_err());
    assert!(apply_reduction(&s, &ReductionEvent::pair(0.0, 1, 1)).is_err());
}

#[test]
fn bundle_reduction_is_proportional() {
    let s = Superposition::numbered(vec![0.2, 0.4, 0.4]).unwrap();
    let ev = ReductionEvent {
        time: 0.0,
        loser: vec![0],
        winner: vec![1, 2],
        site: None,
        kind: EventKind::Reduction,
    };
    assert_close(&apply_reduction(&s, &ev).unwrap().state.amplitudes, &[0.0, 0.5, 0.5], 1e-15);
}

#[test]
fn split_examples() {
    let one = Superposition::numbered(vec![1.0]).unwrap();
    let two = split_state(&one, 0, &[0.5, 0.5]).unwrap();
    assert_eq!(two.amplitudes, vec![0.5, 0.5]);
    assert_eq!(two.labels, vec!["1.1", "1.2"]);

    // Beam splitter 1/3 : 2/3, then the second beam halves again.
    let a = split_state(&one, 0, &[1.0 / 3.0, 2.0 / 3.0]).unwrap();
    let b = split_state(&a, 1, &[0.5, 0.5]).unwrap();
    assert_close(&b.amplitudes, &[1.0 / 3.0; 3], 1e-15);

    let merged = apply_reduction(&b, &ReductionEvent::pair(0.0, 2, 1)).unwrap().state;
    assert!((merged.amplitudes.iter().sum::<f64>() - 1.0).abs() < 1e-15);

    assert!(matches!(split_state(&one, 0, &[0.5, 0.4]), Err(Error::InvalidInput(_))));
}

#[test]
fn superposition_validation() {
    assert!(Superposition::numbered(vec![0.5, 0.6]).is_err());
    assert!(Superposition::numbered(vec![-0.1, 1.1]).is_err());
    assert!(Superposition::new(vec![0.5, 0.5], vec!["a".into(), "a".into()]).is_err());
}

fn fig2() -> (Superposition, CouplingsSchedule) {
    (Superposition::uniform(3).unwrap(), CouplingsSchedule::constant(full(3, 1.0)))
}

/// Three beams, each detector distinguishes only its own beam.
fn fig13() -> (Superposition, CouplingsSchedule) {
    let sites = (0..3)
        .map(|i| {
            let others: Vec<usize> = (0..3).filter(|&j| j != i).collect();
            Site::bundled(format!("detector{}", i + 1), vec![vec![i], others], full(2, 1.0))
        })
        .collect();
    let schedule = CouplingsSchedule {
        epochs: vec![Epoch {
            duration: None,
            splits: vec![],
            sites,
        }],
        final_measurement: false,
    };
    (Superposition::uniform(3).unwrap(), schedule)
}

fn reducer() -> (Superposition, CouplingsSchedule) {
    let e = hbar_matrix(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]);
    (Superposition::uniform(3).unwrap(), CouplingsSchedule::constant(e))
}

#[test]
fn fig2_tree_is_born() {
    let (s, sch) = fig2();
    let tree = enumerate_tree(&s, &sch, CorrelationPolicy::None).unwrap();
    assert_close(&probs(&tree), &[1.0 / 3.0; 3], 1e-12);
    assert!(tree.has_transition(0, &[2.0 / 3.0, 0.0, 1.0 / 3.0], 1e-12));
    assert_eq!(tree.leaves().len(), 12);
    let total: f64 = tree.leaves().iter().map(|&l| tree.nodes[l].reach).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn fig13_bundled_transition() {
    let (s, sch) = fig13();
    let tree = enumerate_tree(&s, &sch, CorrelationPolicy::None).unwrap();
    assert!(tree.has_transition(0, &[0.5, 0.0, 0.5], 1e-12));
    assert!(!tree.has_transition(0, &[2.0 / 3.0, 0.0, 1.0 / 3.0], 1e-12));
    assert_close(&probs(&tree), &[1.0 / 3.0; 3], 1e-12);
}

#[test]
fn branch_probabilities_sum_to_one() {
    for (s, sch) in [fig2(), fig13(), reducer()] {
        let tree = enumerate_tree(&s, &sch, CorrelationPolicy::FirstWinner).unwrap();
        for n in &tree.nodes {
            if !n.children.is_empty() {
                let sum: f64 = n.children.iter().map(|&c| tree.nodes[c].probability).sum();
                assert!((sum - 1.0).abs() < 1e-12, "{sum}");
            }
        }
    }
}

#[test]
fn reducer_first_winner() {
    let (s, sch) = reducer();
    let tree = enumerate_tree(&s, &sch, CorrelationPolicy::FirstWinner).unwrap();
    assert_close(&probs(&tree), &[0.25, 0.5, 0.25], 1e-15);
    // Without correlations the same device follows Born's rule once the stall is measured.
    let mut sch = sch;
    sch.final_measurement = true;
    let tree = enumerate_tree(&s, &sch, CorrelationPolicy::None).unwrap();
    assert_close(&probs(&tree), &[1.0 / 3.0; 3], 1e-12);
}

#[test]
fn reducer_born_fallback() {
    // 2→1 leaves (2/3, 0, 1/3) stalled; Born then gives 1/4·2/3 and 1/4·1/3.
    let (s, sch) = reducer();
    let tree = enumerate_tree(&s, &sch, CorrelationPolicy::BornFallback).unwrap();
    assert_close(&probs(&tree), &[0.25, 0.5, 0.25], 1e-15);
    let measured = tree
        .nodes
        .iter()
        .filter(|n| matches!(n.edge, Some(Edge::Measurement { .. })))
        .count();
    assert_eq!(measured, 4);
}

#[test]
fn stalled_schedule_times_out_with_partial_tree() {
    let s = Superposition::uniform(3).unwrap();
    let sch = CouplingsSchedule::constant(full(3, 0.0));
    match enumerate_tree(&s, &sch, CorrelationPolicy::None) {
        Err(Error::Timeout { partial: Some(tree), .. }) => {
            assert!(!tree.complete);
            assert!(final_probabilities(&tree).is_err());
        }
        other => panic!("expected timeout, got {other:?}"),
    }
    let mut sch = sch;
    sch.final_measurement = true;
    let tree = enumerate_tree(&s, &sch, CorrelationPolicy::None).unwrap();
    assert_close(&probs(&tree), &[1.0 / 3.0; 3], 1e-15);
}

#[test]
fn finite_epoch_survival_is_exponential() {
    // Two states, total rate 1/s for 0.7 s, then measured.
    let s = Superposition::numbered(vec![0.3, 0.7]).unwrap();
    let sch = CouplingsSchedule {
        epochs: vec![Epoch {
            duration: Some(0.7),
            splits: vec![],
            sites: vec![Site::plain("a", full(2, 1.0))],
        }],
        final_measurement: true,
    };
    let tree = enumerate_tree(&s, &sch, CorrelationPolicy::None).unwrap();
    let unreduced: f64 = tree.root().children.iter()
        .filter(|&&c| matches!(tree.nodes[c].edge, Some(Edge::Measurement { .. })))
        .map(|&c| tree.nodes[c].reach)
        .sum();
    assert!((unreduced - (-0.7f64).exp()).abs() < 1e-13, "{unreduced}");
    assert_close(&probs(&tree), &[0.3, 0.7], 1e-12);
}

#[test]
fn splits_relabel_and_grow_dimension() {
    // Photon in one beam, then a 50/50 splitter ahead of a conditional detector.
    let s = Superposition::numbered(vec![0.2, 0.8]).unwrap();
    let sch = CouplingsSchedule {
        epochs: vec![
            Epoch {
                duration: Some(0.5),
                splits: vec![],
                sites: vec![Site::plain("a", full(2, 1.0))],
            },
            Epoch {
                duration: None,
                splits: vec![Split {
                    index: 1,
                    fractions: vec![0.5, 0.5],
                }],
                sites: vec![Site::plain("b", full(3, 1.0))],
            },
        ],
        final_measurement: false,
    };
    let tree = enumerate_tree(&s, &sch, CorrelationPolicy::None).unwrap();
    let fp = final_probabilities(&tree).unwrap();
    let labels: Vec<&str> = fp.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(labels, vec!["1", "2.1", "2.2"]);
    assert_close(&fp.iter().map(|p| p.1).collect::<Vec<_>>(), &[0.2, 0.4, 0.4], 1e-12);
}

#[test]
fn invalid_schedules_are_rejected() {
    let s = Superposition::uniform(3).unwrap();
    let bad_shape = CouplingsSchedule::constant(full(2, 1.0));
    assert!(enumerate_tree(&s, &bad_shape, CorrelationPolicy::None).is_err());
    let mut asym = full(3, 1.0);
    asym[0][1] *= 2.0;
    assert!(enumerate_tree(&s, &CouplingsSchedule::constant(asym), CorrelationPolicy::None).is_err());
    let bad_partition = CouplingsSchedule {
        epochs: vec![Epoch {
            duration: None,
            splits: vec![],
            sites: vec![Site::bundled("x", vec![vec![0], vec![0, 1]], full(2, 1.0))],
        }],
        final_measurement: false,
    };
    assert!(enumerate_tree(&s, &bad_partition, CorrelationPolicy::None).is_err());
}

// ---- independent absorbing-chain oracle ----------------------------------------

type Key = Vec<i64>;

fn key(a: &[f64]) -> Key {
    a.iter().map(|v| (v * 1e12).round() as i64).collect()
}

fn oracle_rate(e: f64, loser: f64, winner: f64) -> f64 {
    if loser <= 0.0 || winner <= 0.0 {
        0.0
    } else if e >= 0.0 {
        e / HBAR * winner
    } else {
        -e / HBAR * loser
    }
}

/// Reachable states with their outgoing (target, rate) lists for plain couplings.
fn oracle_chain(start: &[f64], e: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<(usize, f64)>>) {
    let mut states = vec![start.to_vec()];
    let mut index: HashMap<Key, usize> = HashMap::from([(key(start), 0)]);
    let mut out = Vec::new();
    let mut i = 0;
    while i < states.len() {
        let s = states[i].clone();
        let mut edges = Vec::new();
        for k in 0..s.len() {
            for l in 0..s.len() {
                if k == l {
                    continue;
                }
                let r = oracle_rate(e[k][l], s[k], s[l]);
                if r > 0.0 {
                    let mut t = s.clone();
                    t[l] += t[k];
                    t[k] = 0.0;
                    let id = *index.entry(key(&t)).or_insert_with(|| {
                        states.push(t.clone());
                        states.len() - 1
                    });
                    edges.push((id, r));
                }
            }
        }
        out.push(edges);
        i += 1;
    }
    (states, out)
}

/// Dense transient by uniformization.
fn oracle_transient(p0: &[f64], edges: &[Vec<(usize, f64)>], t: f64) -> Vec<f64> {
    let n = p0.len();
    let exit: Vec<f64> = edges.iter().map(|e| e.iter().map(|x| x.1).sum()).collect();
    let lam = exit.iter().fold(0.0_f64, |m, v| m.max(*v));
    if lam == 0.0 {
        return p0.to_vec();
    }
    let mut v = p0.to_vec();
    let mut out = vec![0.0; n];
    let mut w = (-lam * t).exp();
    let mut k = 0;
    loop {
        for i in 0..n {
            out[i] += w * v[i];
        }
        k += 1;
        w *= lam * t / k as f64;
        if k as f64 > lam * t && w < 1e-18 {
            break;
        }
        let mut nv = vec![0.0; n];
        for i in 0..n {
            nv[i] += v[i] * (1.0 - exit[i] / lam);
            for &(j, r) in &edges[i] {
                nv[j] += v[i] * r / lam;
            }
        }
        v = nv;
    }
    out
}

/// Final outcome distribution: finite epochs by uniformization, then absorption.
fn oracle_outcome(start: &[f64], epochs: &[(f64, Vec<Vec<f64>>)], last: &[Vec<f64>]) -> Vec<f64> {
    let n = start.len();
    let mut dist: HashMap<Key, (Vec<f64>, f64)> = HashMap::from([(key(start), (start.to_vec(), 1.0))]);
    for (t, e) in epochs {
        let mut next: HashMap<Key, (Vec<f64>, f64)> = HashMap::new();
        for (s, mass) in dist.values() {
            let (states, edges) = oracle_chain(s, e);
            let mut p0 = vec![0.0; states.len()];
            p0[0] = 1.0;
            let p = oracle_transient(&p0, &edges, *t);
            for (st, pi) in states.iter().zip(p) {
                next.entry(key(st)).or_insert((st.clone(), 0.0)).1 += mass * pi;
            }
        }
        dist = next;
    }
    let mut result = vec![0.0; n];
    for (s, mass) in dist.values() {
        let (states, edges) = oracle_chain(s, last);
        // Absorption probabilities by back-substitution over the acyclic chain.
        let mut absorb: Vec<Vec<f64>> = vec![vec![0.0; n]; states.len()];
        let mut order: Vec<usize> = (0..states.len()).collect();
        order.sort_by_key(|&i| states[i].iter().filter(|v| **v > 0.0).count());
        for i in order {
            let total: f64 = edges[i].iter().map(|x| x.1).sum();
            if total == 0.0 {
                let w = states[i].iter().position(|v| *v > 0.0).unwrap();
                absorb[i][w] = 1.0;
            } else {
                let mut row = vec![0.0; n];
                for &(j, r) in &edges[i] {
                    for q in 0..n {
                        row[q] += r / total * absorb[j][q];
                    }
                }
                absorb[i] = row;
            }
        }
        for q in 0..n {
            result[q] += mass * absorb[0][q];
        }
    }
    result
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, signed: bool) -> Vec<Vec<f64>> {
    use rand::Rng;
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut v: f64 = rng.gen_range(0.2..2.0);
            if signed && rng.gen_bool(0.4) {
                v = -v;
            }
            m[i][j] = v * HBAR;
            m[j][i] = v * HBAR;
        }
    }
    m
}

#[test]
fn signed_four_state_instances_match_absorbing_chain() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..5 {
        let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let mut amps: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let fix = 1.0 - amps[..3].iter().sum::<f64>();
        amps[3] = fix;
        let e1 = random_matrix(&mut rng, 4, true);
        let e2 = random_matrix(&mut rng, 4, true);
        let last = random_matrix(&mut rng, 4, true);
        let (t1, t2) = (rng.gen_range(0.1..1.5), rng.gen_range(0.1..1.5));
        let oracle = oracle_outcome(&amps, &[(t1, e1.clone()), (t2, e2.clone())], &last);

        let s = Superposition::numbered(amps.clone()).unwrap();
        let epoch = |d: Option<f64>, e: Vec<Vec<f64>>| Epoch {
            duration: d,
            splits: vec![],
            sites: vec![Site::plain("x", e)],
        };
        let sch = CouplingsSchedule {
            epochs: vec![epoch(Some(t1), e1), epoch(Some(t2), e2), epoch(None, last)],
            final_measurement: false,
        };
        let tree = enumerate_tree(&s, &sch, CorrelationPolicy::None).unwrap();
        assert_close(&probs(&tree), &oracle, 1e-10);
        // Negative couplings do break Born's rule.
        assert!(probs(&tree).iter().zip(&amps).any(|(p, a)| (p - a).abs() > 1e-6));
    }
}

#[test]
fn every_history_has_dimension_minus_one_reductions() {
    for d in 2..=5 {
        let s = Superposition::uniform(d).unwrap();
        let tree = enumerate_tree(&s, &CouplingsSchedule::constant(full(d, 1.0)), CorrelationPolicy::None).unwrap();
        for leaf in tree.leaves() {
            assert_eq!(tree.reductions_to(leaf), d - 1);
        }
    }
}

// ---- Monte Carlo ---------------------------------------------------------------

#[test]
fn monte_carlo_fig2_is_born_within_three_sigma() {
    let (s, sch) = fig2();
    let mc = run_monte_carlo(&s, &sch, 100_000, 11, CorrelationPolicy::None).unwrap();
    assert_eq!(mc.frequencies.len(), 3);
    for f in &mc.frequencies {
        assert!((f.probability - 1.0 / 3.0).abs() < 3.0 * f.stderr, "{f:?}");
    }
}

#[test]
fn monte_carlo_reducer_matches_tree_within_four_sigma() {
    let (s, sch) = reducer();
    let mc = run_monte_carlo(&s, &sch, 100_000, 5, CorrelationPolicy::FirstWinner).unwrap();
    let exact = [0.25, 0.5, 0.25];
    for (f, p) in mc.frequencies.iter().zip(exact) {
        assert!((f.probability - p).abs() < 4.0 * f.stderr, "{f:?}");
    }
}

#[test]
fn monte_carlo_is_reproducible() {
    let (s, sch) = fig13();
    let a = run_monte_carlo(&s, &sch, 500, 3, CorrelationPolicy::None).unwrap();
    let b = run_monte_carlo(&s, &sch, 500, 3, CorrelationPolicy::None).unwrap();
    assert_eq!(a, b);
    let c = run_monte_carlo(&s, &sch, 500, 4, CorrelationPolicy::None).unwrap();
    assert_ne!(a.runs, c.runs);
}

#[test]
fn single_run_is_a_tree_leaf() {
    let (s, sch) = fig2();
    let tree = enumerate_tree(&s, &sch, CorrelationPolicy::None).unwrap();
    let mc = run_monte_carlo(&s, &sch, 1, 42, CorrelationPolicy::None).unwrap();
    let run = &mc.runs[0];
    assert_eq!(run.events.len(), 2);
    let matches = tree.leaves().into_iter().any(|leaf| {
        let path = tree.path(leaf);
        path.len() == run.events.len()
            && path.iter().zip(&run.events).all(|(e, ev)| match e {
                Edge::Reduction { loser, winner, .. } => *loser == ev.loser && *winner == ev.winner,
                _ => false,
            })
    });
    assert!(matches);
    assert_eq!(mc.frequencies.len(), 1);
    assert_eq!(mc.frequencies[0].count, 1);
}

#[test]
fn monte_carlo_stalls_error_without_measurement() {
    let s = Superposition::uniform(2).unwrap();
    let sch = CouplingsSchedule::constant(full(2, 0.0));
    assert!(matches!(
        run_monte_carlo(&s, &sch, 10, 1, CorrelationPolicy::None),
        Err(Error::Timeout { .. })
    ));
}

// ---- properties ----------------------------------------------------------------

fn arb_instance(
    dims: std::ops::RangeInclusive<usize>,
) -> impl Strategy<Value = (Vec<f64>, Vec<(f64, Vec<Vec<f64>>)>, Vec<Vec<f64>>)> {
    dims.prop_flat_map(|d| {
        let amps = prop::collection::vec(0.01f64..1.0, d);
        let mat = move || prop::collection::vec(0.05f64..3.0, d * d);
        let epochs = prop::collection::vec((0.05f64..2.0, mat()), 0..=2);
        (amps, epochs, mat()).prop_map(move |(raw, epochs, last)| {
            let sum: f64 = raw.iter().sum();
            let mut amps: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let head: f64 = amps[..d - 1].iter().sum();
            amps[d - 1] = 1.0 - head;
            let sym = |m: Vec<f64>| -> Vec<Vec<f64>> {
                (0..d)
                    .map(|i| {
                        (0..d)
                            .map(|j| match i.cmp(&j) {
                                std::cmp::Ordering::Equal => 0.0,
                                std::cmp::Ordering::Less => m[i * d + j] * HBAR,
                                std::cmp::Ordering::Greater => m[j * d + i] * HBAR,
                            })
                            .collect()
                    })
                    .collect()
            };
            let epochs = epochs.into_iter().map(|(t, m)| (t, sym(m))).collect();
            (amps, epochs, sym(last))
        })
    })
}

fn schedule_of(epochs: &[(f64, Vec<Vec<f64>>)], last: &[Vec<f64>]) -> CouplingsSchedule {
    let mut out: Vec<Epoch> = epochs
        .iter()
        .map(|(t, e)| Epoch {
            duration: Some(*t),
            splits: vec![],
            sites: vec![Site::plain("x", e.clone())],
        })
        .collect();
    out.push(Epoch {
        duration: None,
        splits: vec![],
        sites: vec![Site::plain("x", last.to_vec())],
    });
    CouplingsSchedule {
        epochs: out,
        final_measurement: false,
    }
}

/// Split state `j` in two with the given fraction; the children inherit couplings and
/// do not couple to each other.
fn split_matrix(e: &[Vec<f64>], j: usize) -> Vec<Vec<f64>> {
    let n = e.len();
    let src = |i: usize| if i <= j { i } else { i - 1 };
    (0..=n)
        .map(|a| {
            (0..=n)
                .map(|b| {
                    let (sa, sb) = (src(a), src(b));
                    if sa == sb {
                        0.0
                    } else {
                        e[sa][sb]
                    }
                })
                .collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn born_recovery((amps, epochs, last) in arb_instance(2..=5)) {
        let s = Superposition::numbered(amps.clone()).unwrap();
        let tree = enumerate_tree(&s, &schedule_of(&epochs, &last), CorrelationPolicy::None).unwrap();
        let p = probs(&tree);
        for (x, y) in p.iter().zip(&amps) {
            prop_assert!((x - y).abs() < 1e-10, "{:?} vs {:?}", p, amps);
        }
    }

    #[test]
    fn split_invariance((amps, epochs, last) in arb_instance(2..=4), frac in 0.05f64..0.95, pick in 0usize..4) {
        let d = amps.len();
        let j = pick % d;
        let s = Superposition::numbered(amps.clone()).unwrap();
        let base = probs(&enumerate_tree(&s, &schedule_of(&epochs, &last), CorrelationPolicy::None).unwrap());
        let split = split_state(&s, j, &[frac, 1.0 - frac]).unwrap();
        let epochs2: Vec<(f64, Vec<Vec<f64>>)> = epochs.iter().map(|(t, e)| (*t, split_matrix(e, j))).collect();
        // The children never couple to each other, so a final measurement settles them.
        let mut sch = schedule_of(&epochs2, &split_matrix(&last, j));
        sch.final_measurement = true;
        let tree = enumerate_tree(&split, &sch, CorrelationPolicy::None).unwrap();
        let after = probs(&tree);
        for i in 0..d {
            if i == j { continue; }
            let k = if i < j { i } else { i + 1 };
            prop_assert!((after[k] - base[i]).abs() < 1e-10);
        }
        prop_assert!((after[j] + after[j + 1] - base[j]).abs() < 1e-10);
    }
}
