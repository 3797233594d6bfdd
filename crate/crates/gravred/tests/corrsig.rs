use std::collections::HashMap;

use gravred::constants::{C, HBAR, WATER_DENSITY};
use gravred::corrsig::*;
use gravred::dpcore::{enumerate_tree, final_probabilities, CorrelationPolicy, CouplingsSchedule, Superposition};
use gravred::massmodel::{coupling_energy, MassDensity, Primitive};
use gravred::redwave::{ImpactArea, ReductionWave};
use gravred::relfield::{couplings_density, in_future_cone, interval_squared, Grid, SpacetimePoint};
use proptest::prelude::*;

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn correlated_rate_examples() {
    let e = 1e-34;
    let base = correlated_rates(e, 0.3, 0.7, false);
    assert!((base.forward - e / HBAR * 0.7).abs() < 1e-15);
    assert!((base.reverse - e / HBAR * 0.3).abs() < 1e-15);
    let s = correlated_rates(e, 0.3, 0.7, true);
    assert!((s.forward - e / HBAR).abs() < 1e-15);
    assert_eq!(s.reverse, 0.0);
    // Stimulation moves the whole outflow of the pair into one direction.
    assert!((s.forward - (base.forward + base.reverse)).abs() < 1e-15);
    let stall = correlated_rates(0.0, 0.3, 0.7, true);
    assert_eq!((stall.forward, stall.reverse), (0.0, 0.0));
}

#[test]
fn reducer_closed_form() {
    let e = 1.0;
    let m = vec![vec![0.0, e, 0.0], vec![e, 0.0, e], vec![0.0, e, 0.0]];
    let third = 1.0 / 3.0;
    close(&closed_form_star_probs(&m, &[third; 3]).unwrap(), &[0.25, 0.5, 0.25], 1e-15);
    // Equal couplings give Born weights.
    let all = vec![vec![0.0, 2.0, 2.0], vec![2.0, 0.0, 2.0], vec![2.0, 2.0, 0.0]];
    let a = [0.2, 0.5, 0.3];
    close(&closed_form_star_probs(&all, &a).unwrap(), &a, 1e-15);
    assert!(closed_form_star_probs(&vec![vec![0.0; 3]; 3], &a).is_err());
    let asym = vec![vec![0.0, 1.0, 0.0], vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]];
    assert!(closed_form_star_probs(&asym, &a).is_err());
}

#[test]
fn star_centre_gets_one_half_for_any_size() {
    for n in [3, 10, 100] {
        let star = StarCoupling::uniform(n, 0, 1e-34).unwrap();
        star.validate().unwrap();
        let p = closed_form_star_probs(&star.couplings, &vec![1.0 / n as f64; n]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
        for &leaf in &p[1..] {
            assert!((leaf - 1.0 / (2.0 * (n - 1) as f64)).abs() < 1e-12);
        }
    }
    let star = StarCoupling {
        onset: 2.0,
        ..StarCoupling::uniform(3, 1, 1.0).unwrap()
    };
    assert_eq!(star.at(1.0), vec![vec![0.0; 3]; 3]);
    assert_eq!(star.at(2.0)[0][1], 1.0);
}

#[test]
fn reducer_tree_equals_closed_form_exactly() {
    // Reducer: state 2 coupled to 1 and 3, equal thirds. Exact rationals 1/4, 1/2, 1/4.
    let star = StarCoupling::uniform(3, 1, 1e-34).unwrap();
    let s = Superposition::uniform(3).unwrap();
    let tree = enumerate_tree(&s, &CouplingsSchedule::constant(star.couplings.clone()), CorrelationPolicy::FirstWinner).unwrap();
    let p: Vec<f64> = final_probabilities(&tree).unwrap().into_iter().map(|x| x.1).collect();
    assert_eq!(p, vec![0.25, 0.5, 0.25]);
    assert_eq!(closed_form_star_probs(&star.couplings, &s.amplitudes).unwrap(), vec![0.25, 0.5, 0.25]);
}

#[test]
fn attenuation_endpoints_and_midpoint() {
    let born = [1.0 / 3.0; 3];
    let inf = [0.25, 0.5, 0.25];
    let tau = 1e-8;
    close(&attenuated_probs(&born, &inf, 0.0, tau).unwrap(), &inf, 1e-15);
    close(&attenuated_probs(&born, &inf, 1e3, tau).unwrap(), &born, 1e-12);
    let mid = attenuated_probs(&born, &inf, C * tau, tau).unwrap();
    assert!((mid[1] - (1.0 / 3.0 + (-1.0f64).exp() / 6.0)).abs() < 1e-12);
    assert!((mid.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(attenuated_probs(&born, &inf, -1.0, tau).is_err());
    assert!(attenuated_probs(&born, &inf, 1.0, 0.0).is_err());
}

#[test]
fn uniform_and_zero_profiles() {
    let v = 1e-3_f64 * 2e-3 * 5e-4;
    let e_tilde = 4.0e10;
    let r = reducer_decay_rate(|_| e_tilde, &[([0.0; 3], [1e-3, 2e-3, 5e-4])], 1e-10).unwrap();
    assert!((r - C * e_tilde * v).abs() < 1e-9 * r);
    assert_eq!(reducer_decay_rate(|_| 0.0, &[([0.0; 3], [1.0; 3])], 1e-10).unwrap(), 0.0);
    let bad = reducer_decay_rate(|x| 1.0 / x[0], &[([-1.0, 0.0, 0.0], [1.0; 3])], 1e-10);
    assert!(bad.is_err());
}

#[test]
fn shifted_cube_profile_gives_coupling_rate() {
    let side = 1e-6;
    let shift = 0.5e-6;
    let cube = |x: f64| MassDensity::new(vec![Primitive::cuboid([x, 0.0, 0.0], [0.5 * side; 3], WATER_DENSITY * side.powi(3))]);
    let (a, b) = (cube(0.0), cube(shift));
    let e = coupling_energy(&a, &b).unwrap();
    let h = 0.5 * side;
    // Density differs only in the two non-overlapping slabs.
    let boxes = [
        ([-h, -h, -h], [-h + shift, h, h]),
        ([h, -h, -h], [h + shift, h, h]),
    ];
    let rate = reducer_decay_rate(|x| couplings_density(&a, &b, x).unwrap(), &boxes, 1e-4).unwrap();
    assert!((rate - e / HBAR).abs() < 0.01 * e / HBAR, "{rate} vs {}", e / HBAR);
}

#[test]
fn design_window() {
    let r = design_window_check(1e-5, 1e-7, 0.3, DEFAULT_MARGIN).unwrap();
    assert!((r.light_rate - 1e9).abs() < 0.05e9);
    assert!(r.pass && r.detector_ok && r.signaling_ok);
    let fast = design_window_check(1e-5, 1e-10, 0.3, DEFAULT_MARGIN).unwrap();
    assert!(!fast.pass && !fast.signaling_ok && fast.detector_ok);
    let slow = design_window_check(1e-5, 1e-5, 0.3, DEFAULT_MARGIN).unwrap();
    assert!(!slow.pass && !slow.detector_ok);
    assert!(design_window_check(0.0, 1.0, 1.0, 10.0).is_err());
}

#[test]
fn cell_growth_examples() {
    assert!((cell_growth(10, 0.0, 1.0).unwrap() - 0.1).abs() < 1e-15);
    let n = 20;
    let t_cap = (n as f64 / 2.0).ln();
    assert!((cell_growth(n, t_cap, 1.0).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(cell_growth(n, 10.0 * t_cap, 1.0).unwrap(), 0.5);
    assert!(cell_growth(1, 0.0, 1.0).is_err());
}

#[test]
fn signaling_presets() {
    let a = signaling_preset("fig23a").unwrap();
    let ra = a.check();
    assert!(!ra.pass);
    assert!(!ra.offending.is_empty());
    assert!(!a.gate());
    let b = signaling_preset("fig23b").unwrap();
    let rb = b.check();
    assert!(rb.pass, "{rb:?}");
    assert!(rb.relevant > 0);
    assert!(b.gate());
    let c = signaling_preset("colocated").unwrap();
    assert!(c.check().pass);
    assert!(signaling_preset("fig99").is_err());
}

#[test]
fn gate_edge_cases() {
    let mut p = signaling_preset("fig23a").unwrap();
    let fronts = p.fronts();
    // No impact area: nothing to protect.
    p.corr.impact.clear();
    assert!(correlation_gate(&p.grid, &p.stim, &p.corr, &fronts, p.grid.dt));
    assert!(signaling_check(&p.grid, &p.stim.birth, &p.corr, &fronts).pass);
}

#[test]
fn stimulation_area_grows() {
    let p = signaling_preset("fig23b").unwrap();
    let w = &p.stim;
    let at_birth = stimulation_area(w, w.birth_tr, &p.grid);
    for c in &at_birth {
        assert!(interval_squared(&w.birth, &p.grid.center(*c)).abs() < 1e-9);
    }
    let mut prev = at_birth;
    for k in 1..6 {
        let cur = stimulation_area(w, w.birth_tr + 0.3 * k as f64 / C, &p.grid);
        assert!(prev.iter().all(|c| cur.binary_search(c).is_ok()));
        assert!(cur.len() > prev.len());
        prev = cur;
    }
    // Eventually every impact cell inside the cone is swept.
    let all = stimulation_area(w, 10.0 / C, &p.grid);
    let cone = (0..p.grid.len()).filter(|&c| in_future_cone(&w.birth, &p.grid.center(c))).count();
    assert_eq!(all.len(), cone);
}

fn wave(id: usize, parent: Option<usize>, birth: SpacetimePoint, birth_tr: f64, impact: ImpactArea) -> ReductionWave {
    ReductionWave {
        id,
        parent,
        birth,
        birth_tr,
        field: HashMap::new(),
        impact,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    /// Gate allow ⇒ check pass, verified cell by cell on random 1+1 geometries.
    #[test]
    fn gate_is_sound(
        fx in -0.3f64..0.3,
        sdt in 0.05f64..0.6,
        sdx in -1.0f64..1.0,
        lag in 0.0f64..1.0,
        cdx in -0.4f64..0.4,
        cols in proptest::collection::vec(0usize..40, 1..6),
        stim_cols in proptest::collection::vec(0usize..40, 0..10),
        all_space in any::<bool>(),
    ) {
        let grid = Grid { x_min: -0.5, dx: 0.025, nx: 40, t_min: 0.0, dt: 0.025 / C, nt: 80 };
        let father = wave(0, None, SpacetimePoint::new(0.0, fx), 0.0, ImpactArea::All);
        let x_stim = SpacetimePoint::new(sdt, fx + sdx * sdt);
        let s_fs = interval_squared(&father.birth, &x_stim).max(0.0).sqrt();
        let stim_impact = if all_space {
            ImpactArea::All
        } else {
            let mut v: Vec<usize> = stim_cols.iter().flat_map(|&i| (0..grid.nt).map(move |j| grid.index(i, j))).collect();
            v.sort_unstable();
            v.dedup();
            ImpactArea::Cells(v)
        };
        let stim = wave(1, Some(0), x_stim, s_fs / C, stim_impact);
        let t_corr = (s_fs + lag) / C;
        // The correlated event sits on the stimulating front.
        let x_corr = SpacetimePoint::new(x_stim.ct + (lag * lag + cdx * cdx).sqrt(), x_stim.x[0] + cdx);
        let mut impact: Vec<usize> = cols.iter().flat_map(|&i| (0..grid.nt).map(move |j| grid.index(i, j))).collect();
        impact.sort_unstable();
        impact.dedup();
        let corr = CorrelatedEvent { x: x_corr, t_r: t_corr, impact };
        let fronts = front_cells(&[&father, &stim], t_corr, grid.dt, &grid);
        let report = signaling_check(&grid, &x_stim, &corr, &fronts);
        // Independent oracle: every relevant cell checked directly.
        let mut oracle_pass = true;
        for &c in &corr.impact {
            let x = grid.center(c);
            let space_like = interval_squared(&x_corr, &x) < 0.0;
            if space_like && fronts.contains(&c) && !in_future_cone(&x_stim, &x) {
                oracle_pass = false;
            }
        }
        prop_assert_eq!(report.pass, oracle_pass);
        if correlation_gate(&grid, &stim, &corr, &fronts, grid.dt) {
            prop_assert!(report.pass);
        }
    }

    #[test]
    fn first_winner_star_matches_closed_form(
        n in 2usize..6,
        center in 0usize..6,
        weights in proptest::collection::vec(0.05f64..1.0, 6),
        energies in proptest::collection::vec(0.1f64..5.0, 6),
    ) {
        let center = center % n;
        let mut e = vec![vec![0.0; n]; n];
        for k in (0..n).filter(|&k| k != center) {
            e[k][center] = energies[k] * 1e-34;
            e[center][k] = energies[k] * 1e-34;
        }
        let total: f64 = weights[..n].iter().sum();
        let amps: Vec<f64> = weights[..n].iter().map(|w| w / total).collect();
        let s = Superposition::numbered(amps.clone()).unwrap();
        let tree = enumerate_tree(&s, &CouplingsSchedule::constant(e.clone()), CorrelationPolicy::FirstWinner).unwrap();
        let p: Vec<f64> = final_probabilities(&tree).unwrap().into_iter().map(|x| x.1).collect();
        let want = closed_form_star_probs(&e, &amps).unwrap();
        for (x, y) in p.iter().zip(&want) {
            prop_assert!((x - y).abs() < 1e-12, "{:?} vs {:?}", p, want);
        }
    }

    #[test]
    fn attenuation_is_monotone_and_bounded(d1 in 0.0f64..10.0, d2 in 0.0f64..10.0, w in proptest::collection::vec(0.05f64..1.0, 3)) {
        let t: f64 = w.iter().sum();
        let born: Vec<f64> = w.iter().map(|x| x / t).collect();
        let inf = [0.25, 0.5, 0.25];
        let tau = 1e-9;
        let (lo, hi) = (d1.min(d2), d1.max(d2));
        let a = attenuated_probs(&born, &inf, lo, tau).unwrap();
        let b = attenuated_probs(&born, &inf, hi, tau).unwrap();
        for i in 0..3 {
            prop_assert!((b[i] - born[i]).abs() <= (a[i] - born[i]).abs() + 1e-15);
            prop_assert!(a[i] >= born[i].min(inf[i]) - 1e-15 && a[i] <= born[i].max(inf[i]) + 1e-15);
        }
    }
}
