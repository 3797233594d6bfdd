//! Correlated reductions: stimulated rates, star-coupling predictions, the stimulation
//! area, the signaling check with its sufficient gate, and the design-window formulas.

use serde::{Deserialize, Serialize};

use crate::constants::C;
use crate::dpcore::{ordered_rate, stimulated_rate};
use crate::error::{Error, Result};
use crate::massmodel::Vec3;
use crate::quad::{integrate, QuadOptions};
use crate::redwave::{wavefront_band, ReductionWave};
use crate::relfield::{in_future_cone, interval_squared, Grid, SpacetimePoint};

/// Rates of one bundle pair, s⁻¹.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRates {
    /// `loser → winner`.
    pub forward: f64,
    /// `winner → loser`.
    pub reverse: f64,
}

/// Pair rates with `energy` (J) between bundles of weights `loser_weight`, `winner_weight`.
/// A pair stimulated toward the winner decays only forward, at the combined weight.
pub fn correlated_rates(energy: f64, loser_weight: f64, winner_weight: f64, stimulated: bool) -> PairRates {
    if stimulated {
        PairRates {
            forward: stimulated_rate(energy, loser_weight, winner_weight),
            reverse: 0.0,
        }
    } else {
        PairRates {
            forward: ordered_rate(energy, loser_weight, winner_weight),
            reverse: ordered_rate(energy, winner_weight, loser_weight),
        }
    }
}

fn check_couplings(e: &[Vec<f64>], n: usize) -> Result<()> {
    if e.len() != n || e.iter().any(|r| r.len() != n) {
        return Err(Error::invalid(format!("couplings must be {n}×{n}")));
    }
    let scale = e.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        if e[i][i] != 0.0 {
            return Err(Error::invalid(format!("couplings diagonal entry {i} is nonzero")));
        }
        for j in 0..n {
            if !(e[i][j] >= 0.0 && e[i][j].is_finite()) {
                return Err(Error::invalid("couplings must be finite and non-negative"));
            }
            if (e[i][j] - e[j][i]).abs() > 1e-12 * scale {
                return Err(Error::invalid(format!("couplings not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Final probabilities when the first reduction decides: `p_l ∝ (Σ_k E_kl) |c_l|²`.
pub fn closed_form_star_probs(couplings: &[Vec<f64>], amplitudes: &[f64]) -> Result<Vec<f64>> {
    let n = amplitudes.len();
    check_couplings(couplings, n)?;
    let raw: Vec<f64> = (0..n)
        .map(|l| (0..n).map(|k| couplings[k][l]).sum::<f64>() * amplitudes[l])
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("all couplings between populated states vanish"));
    }
    Ok(raw.into_iter().map(|x| x / total).collect())
}

/// Star coupling: a centre state coupled to every leaf, leaves uncoupled; onset time `t0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarCoupling {
    /// J, symmetric with zero diagonal.
    pub couplings: Vec<Vec<f64>>,
    /// s; the coupling is off before it.
    pub onset: f64,
}

impl StarCoupling {
    /// Centre `center` coupled with energy `energy` to each of the other `n - 1` states.
    pub fn uniform(n: usize, center: usize, energy: f64) -> Result<Self> {
        if n < 2 || center >= n || !(energy > 0.0) {
            return Err(Error::invalid("a star needs n ≥ 2, a valid centre and positive energy"));
        }
        let mut e = vec![vec![0.0; n]; n];
        for k in (0..n).filter(|&k| k != center) {
            e[k][center] = energy;
            e[center][k] = energy;
        }
        Ok(StarCoupling {
            couplings: e,
            onset: 0.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_couplings(&self.couplings, self.couplings.len())
    }

    /// Couplings in effect at `t`.
    pub fn at(&self, t: f64) -> Vec<Vec<f64>> {
        if t < self.onset {
            vec![vec![0.0; self.couplings.len()]; self.couplings.len()]
        } else {
            self.couplings.clone()
        }
    }
}

/// `1/τ = c ∫ density d³x` summed over the given boxes, s⁻¹. The density is a couplings
/// density (1/m⁴) such as `Ê·f(x)`.
pub fn reducer_decay_rate(density: impl Fn(Vec3) -> f64, boxes: &[(Vec3, Vec3)], rel_tol: f64) -> Result<f64> {
    let mut total = 0.0;
    for &(lo, hi) in boxes {
        let est = integrate(&density, lo, hi, QuadOptions::rel(rel_tol))?;
        total += est.value;
    }
    if !total.is_finite() {
        return Err(Error::NumericFailure {
            what: "reducer decay rate".into(),
            achieved: total,
        });
    }
    Ok(C * total)
}

/// Probabilities drifting from `p_inf` at `d = 0` to `p_born` as `d → ∞` over `cτ_red`.
pub fn attenuated_probs(p_born: &[f64], p_inf: &[f64], d: f64, tau_red: f64) -> Result<Vec<f64>> {
    if p_born.len() != p_inf.len() {
        return Err(Error::invalid("probability tables differ in length"));
    }
    if !(d >= 0.0) || !(tau_red > 0.0) {
        return Err(Error::invalid("distance must be ≥ 0 and τ_red > 0"));
    }
    let f = (-d / (C * tau_red)).exp();
    Ok(p_born.iter().zip(p_inf).map(|(b, i)| b + (i - b) * f).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub pass: bool,
    /// `1/τ_det`, s⁻¹.
    pub detector_rate: f64,
    /// `1/τ_red`, s⁻¹.
    pub reducer_rate: f64,
    /// `c/d`, s⁻¹.
    pub light_rate: f64,
    /// `1/τ_det · margin ≤ 1/τ_red`.
    pub detector_ok: bool,
    /// `1/τ_red · margin ≤ c/d`.
    pub signaling_ok: bool,
    pub margin: f64,
}

pub const DEFAULT_MARGIN: f64 = 10.0;

/// Check `1/τ_det ≪ 1/τ_red ≪ c/d`, each step by at least `margin`.
pub fn design_window_check(tau_det: f64, tau_red: f64, d: f64, margin: f64) -> Result<DesignReport> {
    for (v, what) in [(tau_det, "tau_det"), (tau_red, "tau_red"), (d, "distance"), (margin, "margin")] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::invalid(format!("{what} must be positive")));
        }
    }
    let (det, red, light) = (1.0 / tau_det, 1.0 / tau_red, C / d);
    let detector_ok = det * margin <= red;
    let signaling_ok = red * margin <= light;
    Ok(DesignReport {
        pass: detector_ok && signaling_ok,
        detector_rate: det,
        reducer_rate: red,
        light_rate: light,
        detector_ok,
        signaling_ok,
        margin,
    })
}

/// Weight of the distinguished state of an `n`-state cell after time `t`: exponential
/// growth from `1/n`, capped at the star limit 0.5.
pub fn cell_growth(n: usize, t: f64, tau_cell: f64) -> Result<f64> {
    if n < 2 || !(tau_cell > 0.0) {
        return Err(Error::invalid("need n ≥ 2 and τ_cell > 0"));
    }
    Ok(((t / tau_cell).exp() / n as f64).min(0.5))
}

// ---------------------------------------------------------------------------------------
// Space-time geometry of correlated reductions

/// Cells whose centre is space-like separated from `x`.
pub fn space_like_area(x: &SpacetimePoint, grid: &Grid) -> Vec<usize> {
    (0..grid.len())
        .filter(|&c| interval_squared(x, &grid.center(c)) < 0.0)
        .collect()
}

/// Cells in the wave's impact area it has swept by `t_r`: `0 ≤ s ≤ c(t_R - t_R,r)`.
pub fn stimulation_area(w: &ReductionWave, t_r: f64, grid: &Grid) -> Vec<usize> {
    let r = w.radius(t_r);
    if r < 0.0 {
        return Vec::new();
    }
    (0..grid.len())
        .filter(|&c| {
            let x = grid.center(c);
            w.impact.contains(c) && in_future_cone(&w.birth, &x) && interval_squared(&w.birth, &x).sqrt() <= r
        })
        .collect()
}

/// Union of the fronts of `waves` during `[t_R, t_R + Δt_R)`, sorted.
pub fn front_cells(waves: &[&ReductionWave], t_r: f64, dt_r: f64, grid: &Grid) -> Vec<usize> {
    let mut v: Vec<usize> = waves
        .iter()
        .filter(|w| w.radius(t_r + dt_r) > 0.0)
        .flat_map(|w| wavefront_band(w, t_r, dt_r, grid))
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// The correlated reduction being judged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelatedEvent {
    pub x: SpacetimePoint,
    /// Its global `t_R`, s.
    pub t_r: f64,
    /// Cells where it changes the amplitude field.
    pub impact: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalingReport {
    pub pass: bool,
    /// Relevant cells outside the stimulating event's future light-cone.
    pub offending: Vec<usize>,
    /// Size of impact ∩ space-like area ∩ fronts.
    pub relevant: usize,
    pub impact: usize,
    pub space_like: usize,
    pub fronts: usize,
}

fn relevant_cells(grid: &Grid, corr: &CorrelatedEvent, fronts: &[usize]) -> (Vec<usize>, usize) {
    let sla = space_like_area(&corr.x, grid);
    let n_sla = sla.len();
    let mut cells: Vec<usize> = corr
        .impact
        .iter()
        .copied()
        .filter(|c| sla.binary_search(c).is_ok() && fronts.binary_search(c).is_ok())
        .collect();
    cells.sort_unstable();
    cells.dedup();
    (cells, n_sla)
}

/// Every front cell in the correlated event's impact area that is space-like to it must
/// lie in the future light-cone of the stimulating event. `fronts` must be sorted.
pub fn signaling_check(grid: &Grid, stim: &SpacetimePoint, corr: &CorrelatedEvent, fronts: &[usize]) -> SignalingReport {
    let (cells, n_sla) = relevant_cells(grid, corr, fronts);
    let offending: Vec<usize> = cells
        .iter()
        .copied()
        .filter(|&c| !in_future_cone(stim, &grid.center(c)))
        .collect();
    SignalingReport {
        pass: offending.is_empty(),
        offending,
        relevant: cells.len(),
        impact: corr.impact.len(),
        space_like: n_sla,
        fronts: fronts.len(),
    }
}

/// Allow stimulated rates only when the stimulating wave has already swept every relevant
/// cell. `fronts` must be sorted and sampled over `[t_R, t_R + dt_r)`; the swept area is
/// taken at the end of that step so the stimulating wave's own band counts as swept.
pub fn correlation_gate(grid: &Grid, stim_wave: &ReductionWave, corr: &CorrelatedEvent, fronts: &[usize], dt_r: f64) -> bool {
    let (cells, _) = relevant_cells(grid, corr, fronts);
    if cells.is_empty() {
        return true;
    }
    let swept = stimulation_area(stim_wave, corr.t_r + dt_r, grid);
    cells.iter().all(|c| swept.binary_search(c).is_ok())
}

/// A ready-made signaling geometry: father wave, stimulating wave and correlated event.
#[derive(Debug, Clone)]
pub struct SignalingPreset {
    pub name: String,
    pub grid: Grid,
    pub father: ReductionWave,
    pub stim: ReductionWave,
    pub corr: CorrelatedEvent,
}

impl SignalingPreset {
    pub fn fronts(&self) -> Vec<usize> {
        front_cells(&[&self.father, &self.stim], self.corr.t_r, self.grid.dt, &self.grid)
    }

    pub fn check(&self) -> SignalingReport {
        signaling_check(&self.grid, &self.stim.birth, &self.corr, &self.fronts())
    }

    pub fn gate(&self) -> bool {
        correlation_gate(&self.grid, &self.stim, &self.corr, &self.fronts(), self.grid.dt)
    }
}

/// Reducer geometry on a metre-scale 1+1 grid: detectors 0.3 m left and right of the
/// reducer, the father wave born below the stimulating event, the correlated reduction at
/// the reducer `lag` metres (of `ct_R`) after the stimulating one.
pub fn reducer_preset(name: &str, lag: f64) -> Result<SignalingPreset> {
    use crate::redwave::ImpactArea;
    use std::collections::HashMap;
    if !(lag > 0.0) {
        return Err(Error::invalid("lag must be positive"));
    }
    let dx = 0.01;
    let grid = Grid {
        x_min: -0.5,
        dx,
        nx: 100,
        t_min: 0.0,
        dt: dx / C,
        nt: 300,
    };
    let father = ReductionWave {
        id: 0,
        parent: None,
        birth: SpacetimePoint::new(0.0, 0.0),
        birth_tr: 0.0,
        field: HashMap::new(),
        impact: ImpactArea::All,
    };
    // Stimulating reduction at the reducer, 0.5 m of ct after the father's birth.
    let x_stim = SpacetimePoint::new(0.5, 0.0);
    let stim = ReductionWave {
        id: 1,
        parent: Some(0),
        birth: x_stim,
        birth_tr: 0.5 / C,
        field: HashMap::new(),
        impact: ImpactArea::All,
    };
    let x_corr = SpacetimePoint::new(0.5 + lag, 0.0);
    // Reducer and detectors 1 and 2, all times.
    let columns: Vec<usize> = [-0.3, 0.0, 0.3]
        .iter()
        .flat_map(|&x: &f64| {
            let i = ((x - grid.x_min) / dx).floor() as i64;
            [i - 1, i, i + 1]
        })
        .filter(|&i| i >= 0 && (i as usize) < grid.nx)
        .map(|i| i as usize)
        .collect();
    let mut impact: Vec<usize> = (0..grid.nt)
        .flat_map(|j| columns.iter().map(move |&i| (i, j)))
        .map(|(i, j)| grid.index(i, j))
        .collect();
    impact.sort_unstable();
    Ok(SignalingPreset {
        name: name.into(),
        grid,
        father,
        stim,
        corr: CorrelatedEvent {
            x: x_corr,
            t_r: (0.5 + lag) / C,
            impact,
        },
    })
}

/// Presets by name: `fig23a` (correlated reduction right after the stimulating one),
/// `fig23b` (much later) and `colocated`.
pub fn signaling_preset(name: &str) -> Result<SignalingPreset> {
    match name {
        "fig23a" => reducer_preset(name, 0.05),
        "fig23b" => reducer_preset(name, 1.0),
        "colocated" => {
            let mut p = reducer_preset(name, 0.05)?;
            p.corr.x = p.stim.birth;
            p.corr.t_r = p.stim.birth_tr;
            // Its changes are confined to its own future light-cone.
            let x = p.corr.x;
            p.corr.impact = (0..p.grid.len()).filter(|&c| in_future_cone(&x, &p.grid.center(c))).collect();
            Ok(p)
        }
        other => Err(Error::invalid(format!(
            "unknown signaling preset {other:?}; known: fig23a, fig23b, colocated"
        ))),
    }
}
