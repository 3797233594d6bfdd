//! Reduction waves: hyperboloid fronts sweeping a 1+1 grid, each carrying a share of the
//! amplitude field, and the stochastic sweep that turns the couplings field into events.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::C;
use crate::dpcore::{apply_reduction, run_rng, tally, EventKind, Frequency, ReductionEvent, RunTrace, Superposition};
use crate::error::{Error, Result};
use crate::relfield::{in_future_cone, interval_squared, FieldMap, Grid, SpacetimePoint};

/// Amplitude changes at or below this size do not count towards an impact area.
pub const AMPLITUDE_TOL: f64 = 1e-12;

/// Default bound on the total event probability of one sweep step.
pub const MAX_SWEEP_PROBABILITY: f64 = 0.1;

/// Cells where a reduction changed the amplitude field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImpactArea {
    All,
    /// Sorted cell indices.
    Cells(Vec<usize>),
}

impl ImpactArea {
    pub fn contains(&self, cell: usize) -> bool {
        match self {
            ImpactArea::All => true,
            ImpactArea::Cells(c) => c.binary_search(&cell).is_ok(),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, ImpactArea::Cells(c) if c.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionWave {
    pub id: usize,
    pub parent: Option<usize>,
    pub birth: SpacetimePoint,
    /// Global `t_R` at the birth point, s.
    pub birth_tr: f64,
    /// Per cell, one entry per bundle of that cell's partition. Missing cells are zero.
    pub field: HashMap<usize, Vec<f64>>,
    pub impact: ImpactArea,
}

impl ReductionWave {
    pub fn field_at(&self, cell: usize) -> Option<&[f64]> {
        self.field.get(&cell).map(|v| v.as_slice())
    }

    pub fn is_active(&self) -> bool {
        self.field.values().any(|v| v.iter().any(|&x| x > 0.0))
    }

    /// Front radius `c(t_R - t_R,r)`; negative before birth.
    pub fn radius(&self, t_r: f64) -> f64 {
        C * (t_r - self.birth_tr)
    }

    /// Coordinate time at which the front of radius `s` crosses the column at `x1`.
    fn crossing_time(&self, s: f64, x1: f64) -> f64 {
        let dx = x1 - self.birth.x[0];
        self.birth.t() + (s * s + dx * dx).sqrt() / C
    }
}

/// Part of a front sweep inside one cell: coordinate-time overlap of the band with the cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPiece {
    pub cell: usize,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl BandPiece {
    pub fn duration(&self) -> f64 {
        self.t_hi - self.t_lo
    }
}

/// Cells whose midpoint interval to the birth point lies in `[c(t_R - t_R,r), c(t_R + Δt_R - t_R,r))`.
pub fn wavefront_band(w: &ReductionWave, t_r: f64, dt_r: f64, grid: &Grid) -> Vec<usize> {
    let (s0, s1) = (w.radius(t_r), w.radius(t_r + dt_r));
    (0..grid.len())
        .filter(|&cell| {
            let x = grid.center(cell);
            if !in_future_cone(&w.birth, &x) {
                return false;
            }
            let s = interval_squared(&w.birth, &x).max(0.0).sqrt();
            s >= s0 && s < s1
        })
        .collect()
}

/// [`wavefront_band`] restricted to the wave's impact area.
pub fn effective_wavefront(w: &ReductionWave, t_r: f64, dt_r: f64, grid: &Grid) -> Vec<usize> {
    let mut v = wavefront_band(w, t_r, dt_r, grid);
    v.retain(|&c| w.impact.contains(c));
    v
}

/// Exact per-column band: for each column, the time span swept between the two fronts,
/// split over the cells it overlaps.
pub fn band_pieces(w: &ReductionWave, t_r: f64, dt_r: f64, grid: &Grid) -> Vec<BandPiece> {
    let s1 = w.radius(t_r + dt_r);
    if s1 <= 0.0 {
        return Vec::new();
    }
    let s0 = w.radius(t_r).max(0.0);
    let mut out = Vec::new();
    for i in 0..grid.nx {
        let (lo, hi) = grid.x_range(i);
        let x1 = 0.5 * (lo + hi);
        let (ta, tb) = (w.crossing_time(s0, x1), w.crossing_time(s1, x1));
        if tb <= grid.t_min || ta >= grid.t_max() || tb <= ta {
            continue;
        }
        let j0 = (((ta - grid.t_min) / grid.dt).floor().max(0.0)) as usize;
        let j1 = ((((tb - grid.t_min) / grid.dt).floor()) as usize).min(grid.nt - 1);
        for j in j0..=j1 {
            let (clo, chi) = grid.t_range(j);
            let (a, b) = (ta.max(clo), tb.min(chi));
            if b > a {
                out.push(BandPiece {
                    cell: grid.index(i, j),
                    t_lo: a,
                    t_hi: b,
                });
            }
        }
    }
    out
}

/// `t_R` of a point on the front of `wave`: accumulated intervals back to the root.
pub fn global_tr(x: &SpacetimePoint, wave: usize, waves: &[ReductionWave]) -> Result<f64> {
    let w = waves
        .get(wave)
        .ok_or_else(|| Error::state(format!("unknown wave {wave}")))?;
    if x.ct < w.birth.ct || interval_squared(&w.birth, x) < -cone_slack(&w.birth, x) {
        return Err(Error::invalid("point is outside the wave's future light-cone"));
    }
    let mut total = interval_squared(&w.birth, x).max(0.0).sqrt();
    let mut cur = w;
    let mut hops = 0;
    while let Some(p) = cur.parent {
        let parent = waves
            .get(p)
            .ok_or_else(|| Error::state(format!("wave {} has missing parent {p}", cur.id)))?;
        hops += 1;
        if hops > waves.len() {
            return Err(Error::state("cycle in the wave parent chain"));
        }
        let s2 = interval_squared(&parent.birth, &cur.birth);
        if s2 < -cone_slack(&parent.birth, &cur.birth) {
            return Err(Error::state(format!("wave {} born outside its parent's light-cone", cur.id)));
        }
        total += s2.max(0.0).sqrt();
        cur = parent;
    }
    Ok(cur.birth_tr + total / C)
}

/// Rounding allowance on `s²` for points on or near a light-cone.
fn cone_slack(a: &SpacetimePoint, b: &SpacetimePoint) -> f64 {
    let scale = (b.ct - a.ct).abs() + (0..3).map(|i| (b.x[i] - a.x[i]).abs()).sum::<f64>();
    1e-9 * scale * scale
}

/// Cells where any bundled amplitude differs by more than [`AMPLITUDE_TOL`].
pub fn impact_area(before: &[Vec<f64>], after: &[Vec<f64>]) -> Result<Vec<usize>> {
    if before.len() != after.len() {
        return Err(Error::invalid("amplitude fields are on different grids"));
    }
    let mut out = Vec::new();
    for (cell, (a, b)) in before.iter().zip(after).enumerate() {
        if a.len() != b.len() {
            return Err(Error::invalid(format!("cell {cell} has different bundle counts")));
        }
        if a.iter().zip(b).any(|(x, y)| (x - y).abs() > AMPLITUDE_TOL) {
            out.push(cell);
        }
    }
    Ok(out)
}

/// One applied reduction in the wave engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveEvent {
    pub t_r: f64,
    pub x: SpacetimePoint,
    pub cell: usize,
    /// Scenario indices of the decaying and winning bundles.
    pub loser: Vec<usize>,
    pub winner: Vec<usize>,
    pub trigger: usize,
    pub spawned: usize,
    pub kind: EventKind,
}

/// Scenario amplitudes plus the reduction waves over a fixed field map.
#[derive(Debug, Clone)]
pub struct WaveSystem<'a> {
    pub map: &'a FieldMap,
    pub state: Superposition,
    pub waves: Vec<ReductionWave>,
    pub t_r: f64,
}

impl<'a> WaveSystem<'a> {
    /// Root wave born at `root`, covering all space with the initial amplitude field.
    pub fn new(map: &'a FieldMap, state: Superposition, root: SpacetimePoint) -> Result<Self> {
        state.validate()?;
        let grid = &map.grid;
        for (cell, f) in map.cells.iter().enumerate() {
            if f.partition.iter().flatten().any(|&i| i >= state.dim()) {
                return Err(Error::invalid(format!("cell {cell} refers to a scenario beyond the superposition")));
            }
        }
        let mut field = HashMap::with_capacity(grid.len());
        for cell in 0..grid.len() {
            if !in_future_cone(&root, &grid.center(cell)) {
                return Err(Error::invalid("root wave must be born in the past light-cone of the whole grid"));
            }
            let a = bundled(&map.cells[cell].partition, &state);
            field.insert(cell, a);
        }
        let wave = ReductionWave {
            id: 0,
            parent: None,
            birth: root,
            birth_tr: 0.0,
            field,
            impact: ImpactArea::All,
        };
        let t_r = grid_entry_tr(&wave, grid);
        Ok(WaveSystem {
            map,
            state,
            waves: vec![wave],
            t_r,
        })
    }

    /// Root born `lead` seconds before the grid starts, above the grid's centre column.
    pub fn with_lead(map: &'a FieldMap, state: Superposition, lead: f64) -> Result<Self> {
        if !(lead > 0.0) {
            return Err(Error::invalid("root lead time must be positive"));
        }
        let g = &map.grid;
        let xc = g.x_min + 0.5 * g.nx as f64 * g.dx;
        Self::new(map, state, SpacetimePoint::at_time(g.t_min - lead, [xc, 0.0, 0.0]))
    }

    pub fn grid(&self) -> &Grid {
        &self.map.grid
    }

    /// `|c_î|²(x)` at a cell.
    pub fn amplitude_field(&self, cell: usize) -> Vec<f64> {
        bundled(&self.map.cells[cell].partition, &self.state)
    }

    /// Largest `|Σ_r Δ_r|c_î|² - |c_î|²|` over cells and bundles.
    pub fn decomposition_error(&self) -> f64 {
        let mut worst = 0.0_f64;
        for cell in 0..self.grid().len() {
            let a = self.amplitude_field(cell);
            for (i, ai) in a.iter().enumerate() {
                let sum: f64 = self
                    .waves
                    .iter()
                    .filter_map(|w| w.field_at(cell).map(|f| f[i]))
                    .sum();
                worst = worst.max((sum - ai).abs());
            }
        }
        worst
    }

    /// Smallest per-wave component anywhere (0 if every stored entry is non-negative and some is 0).
    pub fn min_wave_value(&self) -> f64 {
        self.waves
            .iter()
            .flat_map(|w| w.field.values().flatten().copied())
            .fold(f64::INFINITY, f64::min)
    }

    /// Whether every wave's stored cells lie in its birth future light-cone.
    pub fn waves_inside_cones(&self) -> bool {
        self.waves.iter().all(|w| {
            w.field
                .iter()
                .all(|(&cell, v)| v.iter().all(|&x| x == 0.0) || in_future_cone(&w.birth, &self.grid().center(cell)))
        })
    }

    /// Whether no active front can still reach an unswept part of the grid.
    pub fn finished(&self) -> bool {
        if self.state.survivors().len() <= 1 {
            return true;
        }
        let t_max = self.grid().t_max();
        self.waves
            .iter()
            .filter(|w| w.is_active())
            .all(|w| w.birth.t() + w.radius(self.t_r).max(0.0) / C >= t_max)
    }
}

fn bundled(partition: &[Vec<usize>], state: &Superposition) -> Vec<f64> {
    partition.iter().map(|b| state.weight(b)).collect()
}

/// `t_R` at which the front first touches the grid's earliest row.
fn grid_entry_tr(w: &ReductionWave, grid: &Grid) -> f64 {
    let dt = (grid.t_min - w.birth.t()).max(0.0);
    w.birth_tr + dt
}

/// Apply a decay of bundle `loser` in favour of `winner` (indices into the partition of
/// `cell`) at `x`, triggered by wave `trigger`; spawns the new wave.
pub fn apply_event(
    sys: &mut WaveSystem,
    x: SpacetimePoint,
    cell: usize,
    trigger: usize,
    loser: usize,
    winner: usize,
    kind: EventKind,
) -> Result<WaveEvent> {
    let grid = *sys.grid();
    if cell >= grid.len() {
        return Err(Error::invalid(format!("cell {cell} outside the grid")));
    }
    let part = &sys.map.cells[cell].partition;
    if loser >= part.len() || winner >= part.len() || loser == winner {
        return Err(Error::invalid(format!(
            "bundles {loser} -> {winner} invalid for a cell with {} bundles",
            part.len()
        )));
    }
    let (lset, wset) = (part[loser].clone(), part[winner].clone());
    if sys.state.weight(&lset) <= 0.0 {
        return Err(Error::state(format!("bundle {lset:?} has no amplitude left")));
    }
    let birth_tr = global_tr(&x, trigger, &sys.waves)?;
    let ev = ReductionEvent {
        time: x.t(),
        loser: lset.clone(),
        winner: wset.clone(),
        site: Some(format!("cell {cell}")),
        kind,
    };
    let next = apply_reduction(&sys.state, &ev)?.state;
    let id = sys.waves.len();
    let mut field = HashMap::new();
    let mut impact = Vec::new();
    for c in 0..grid.len() {
        let partition = &sys.map.cells[c].partition;
        let a = bundled(partition, &sys.state);
        let b = bundled(partition, &next);
        if a == b {
            continue;
        }
        if a.iter().zip(&b).any(|(p, q)| (p - q).abs() > AMPLITUDE_TOL) {
            impact.push(c);
        }
        let inside = in_future_cone(&x, &grid.center(c));
        let mut gain = vec![0.0; a.len()];
        for i in 0..a.len() {
            if inside && b[i] >= a[i] {
                gain[i] = b[i] - a[i];
                continue;
            }
            let scale = if a[i] > 0.0 { b[i] / a[i] } else { 0.0 };
            for w in sys.waves.iter_mut() {
                if let Some(f) = w.field.get_mut(&c) {
                    f[i] *= scale;
                }
            }
        }
        if gain.iter().any(|&g| g > 0.0) {
            field.insert(c, gain);
        }
    }
    sys.state = next;
    sys.waves.push(ReductionWave {
        id,
        parent: Some(trigger),
        birth: x,
        birth_tr,
        field,
        impact: ImpactArea::Cells(impact),
    });
    Ok(WaveEvent {
        t_r: birth_tr,
        x,
        cell,
        loser: lset,
        winner: wset,
        trigger,
        spawned: id,
        kind,
    })
}

/// One possible decay during a sweep step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub wave: usize,
    pub cell: usize,
    pub loser: usize,
    pub winner: usize,
    pub probability: f64,
    /// Middle of the band piece inside the cell.
    pub x: SpacetimePoint,
}

/// All decay channels of the step `[t_R, t_R + Δt_R)` with their probabilities.
pub fn sweep_candidates(sys: &WaveSystem, dt_r: f64) -> Vec<Candidate> {
    let grid = sys.grid();
    let mut out = Vec::new();
    for w in sys.waves.iter().filter(|w| w.is_active()) {
        for piece in band_pieces(w, sys.t_r, dt_r, grid) {
            if !w.impact.contains(piece.cell) {
                continue;
            }
            let Some(f) = w.field_at(piece.cell) else { continue };
            let cf = &sys.map.cells[piece.cell];
            if cf.pairs.is_empty() {
                continue;
            }
            let (i, _) = grid.coords(piece.cell);
            let (lo, hi) = grid.x_range(i);
            let x = SpacetimePoint::at_time(0.5 * (piece.t_lo + piece.t_hi), [0.5 * (lo + hi), 0.0, 0.0]);
            let measure = grid.dx * C * piece.duration();
            let amps = bundled(&cf.partition, &sys.state);
            for &(a, b, v) in &cf.pairs {
                // Bundles already reduced away take no part.
                if amps[a] <= 0.0 || amps[b] <= 0.0 {
                    continue;
                }
                // Negative field: swap the decay direction and use the loser's share.
                let (ab, ba) = if v >= 0.0 { (f[b], f[a]) } else { (f[a], f[b]) };
                for (loser, winner, share) in [(a, b, ab), (b, a, ba)] {
                    let p = v.abs() * share * measure;
                    if p > 0.0 {
                        out.push(Candidate {
                            wave: w.id,
                            cell: piece.cell,
                            loser,
                            winner,
                            probability: p,
                            x,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Total event probability of a sweep step.
pub fn sweep_probability(sys: &WaveSystem, dt_r: f64) -> f64 {
    sweep_candidates(sys, dt_r).iter().map(|c| c.probability).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub probability: f64,
    pub event: Option<WaveEvent>,
}

/// Advance `t_R` by one step, possibly firing one event (after which `t_R` stops at the
/// event).
pub fn sweep_step<R: Rng + ?Sized>(sys: &mut WaveSystem, dt_r: f64, max_probability: f64, rng: &mut R) -> Result<SweepOutcome> {
    if !(dt_r > 0.0) {
        return Err(Error::invalid("sweep step must be positive"));
    }
    let cands = sweep_candidates(sys, dt_r);
    let total: f64 = cands.iter().map(|c| c.probability).sum();
    if total >= max_probability {
        return Err(Error::StepTooLarge {
            total,
            limit: max_probability,
        });
    }
    let u: f64 = rng.gen();
    if u >= total {
        sys.t_r += dt_r;
        return Ok(SweepOutcome {
            probability: total,
            event: None,
        });
    }
    let mut acc = 0.0;
    let mut chosen = cands[cands.len() - 1];
    for c in &cands {
        acc += c.probability;
        if u < acc {
            chosen = *c;
            break;
        }
    }
    let start = sys.t_r;
    let ev = apply_event(sys, chosen.x, chosen.cell, chosen.wave, chosen.loser, chosen.winner, EventKind::Reduction)?;
    sys.t_r = ev.t_r.clamp(start, start + dt_r);
    Ok(SweepOutcome {
        probability: total,
        event: Some(ev),
    })
}

/// Force Born-weighted reductions at a measurement cell once an active front crosses it
/// during `[t_R, t_R + Δt_R)`, until one bundle is left there.
pub fn measurement_crossing<R: Rng + ?Sized>(sys: &mut WaveSystem, device: usize, dt_r: f64, rng: &mut R) -> Result<Vec<WaveEvent>> {
    let grid = *sys.grid();
    if device >= grid.len() {
        return Err(Error::invalid(format!("device cell {device} outside the grid")));
    }
    let weights = sys.amplitude_field(device);
    let live: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    if live.len() <= 1 {
        return Ok(Vec::new());
    }
    let mut hit = None;
    for w in sys.waves.iter().filter(|w| w.is_active()) {
        if !w.field_at(device).is_some_and(|f| f.iter().any(|&v| v > 0.0)) {
            continue;
        }
        if let Some(p) = band_pieces(w, sys.t_r, dt_r, &grid).into_iter().find(|p| p.cell == device) {
            hit = Some((w.id, p));
            break;
        }
    }
    let Some((trigger, piece)) = hit else {
        return Ok(Vec::new());
    };
    let u: f64 = rng.gen();
    let total: f64 = live.iter().map(|&i| weights[i]).sum();
    let mut acc = 0.0;
    let mut winner = live[live.len() - 1];
    for &i in &live {
        acc += weights[i] / total;
        if u < acc {
            winner = i;
            break;
        }
    }
    let (i, _) = grid.coords(device);
    let (lo, hi) = grid.x_range(i);
    let x = SpacetimePoint::at_time(0.5 * (piece.t_lo + piece.t_hi), [0.5 * (lo + hi), 0.0, 0.0]);
    let mut events = Vec::new();
    for &loser in live.iter().filter(|&&l| l != winner) {
        events.push(apply_event(sys, x, device, trigger, loser, winner, EventKind::Measurement)?);
    }
    Ok(events)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveOptions {
    /// How long before the grid starts the root wave is born, s.
    pub root_lead: f64,
    /// Largest sweep step, s; halved whenever a step gets too likely.
    pub dtr: f64,
    pub max_step_probability: f64,
    /// Cells holding measurement devices.
    #[serde(default)]
    pub devices: Vec<usize>,
    /// Born-sample the survivors once every front has left the grid.
    pub final_measurement: bool,
    pub max_steps: usize,
    /// Keep per-step sweep records.
    #[serde(default)]
    pub trace: bool,
}

impl WaveOptions {
    pub fn for_grid(grid: &Grid) -> Self {
        WaveOptions {
            root_lead: 1.0,
            dtr: 0.5 * grid.dt,
            max_step_probability: MAX_SWEEP_PROBABILITY,
            devices: Vec::new(),
            final_measurement: true,
            max_steps: 1_000_000,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub t_r: f64,
    pub dt_r: f64,
    pub wave: usize,
    pub cells: Vec<usize>,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveRun {
    pub trace: RunTrace,
    pub events: Vec<WaveEvent>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweeps: Vec<SweepRecord>,
    pub steps: usize,
}

fn sweep_records(sys: &WaveSystem, dt_r: f64) -> Vec<SweepRecord> {
    let cands = sweep_candidates(sys, dt_r);
    sys.waves
        .iter()
        .filter(|w| w.is_active())
        .map(|w| {
            let mut cells: Vec<usize> = band_pieces(w, sys.t_r, dt_r, sys.grid())
                .into_iter()
                .map(|p| p.cell)
                .filter(|&c| w.impact.contains(c))
                .collect();
            cells.dedup();
            SweepRecord {
                t_r: sys.t_r,
                dt_r,
                wave: w.id,
                cells,
                probability: cands.iter().filter(|c| c.wave == w.id).map(|c| c.probability).sum(),
            }
        })
        .collect()
}

/// Run one history; `check` is called after every event (used by invariant tests).
pub fn run_waves_with(
    map: &FieldMap,
    initial: &Superposition,
    opts: &WaveOptions,
    seed: u64,
    run: u64,
    check: &mut dyn FnMut(&WaveSystem) -> Result<()>,
) -> Result<WaveRun> {
    run_inner(map, initial, opts, seed, run, check).map(|(r, _)| r)
}

/// Same history as [`run_waves`], plus every reduction wave it produced.
pub fn replay_waves(
    map: &FieldMap,
    initial: &Superposition,
    opts: &WaveOptions,
    seed: u64,
    run: u64,
) -> Result<(WaveRun, Vec<ReductionWave>)> {
    run_inner(map, initial, opts, seed, run, &mut |_| Ok(()))
}

fn run_inner(
    map: &FieldMap,
    initial: &Superposition,
    opts: &WaveOptions,
    seed: u64,
    run: u64,
    check: &mut dyn FnMut(&WaveSystem) -> Result<()>,
) -> Result<(WaveRun, Vec<ReductionWave>)> {
    if !(opts.dtr > 0.0) || !(opts.max_step_probability > 0.0 && opts.max_step_probability <= 1.0) {
        return Err(Error::invalid("sweep step and probability bound must be positive"));
    }
    let mut sys = WaveSystem::with_lead(map, initial.clone(), opts.root_lead)?;
    let mut rng = run_rng(seed, run);
    let mut dt = opts.dtr;
    let min_dt = opts.dtr * 1e-12;
    let mut events = Vec::new();
    let mut sweeps = Vec::new();
    let mut steps = 0;
    while !sys.finished() {
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::Timeout {
                reason: format!("wave run exceeded {} sweep steps", opts.max_steps),
                partial: None,
            });
        }
        let mut forced = Vec::new();
        for &d in &opts.devices {
            forced.extend(measurement_crossing(&mut sys, d, dt, &mut rng)?);
        }
        if !forced.is_empty() {
            for _ in &forced {
                check(&sys)?;
            }
            events.extend(forced);
            continue;
        }
        let pending = if opts.trace { sweep_records(&sys, dt) } else { Vec::new() };
        match sweep_step(&mut sys, dt, opts.max_step_probability, &mut rng) {
            Err(Error::StepTooLarge { total, .. }) => {
                dt *= 0.5;
                if dt < min_dt {
                    return Err(Error::NumericFailure {
                        what: "sweep step collapsed below resolution".into(),
                        achieved: total,
                    });
                }
            }
            Err(e) => return Err(e),
            Ok(out) => {
                sweeps.extend(pending);
                if let Some(ev) = out.event {
                    check(&sys)?;
                    events.push(ev);
                } else if out.probability < 0.1 * opts.max_step_probability {
                    dt = (2.0 * dt).min(opts.dtr);
                }
            }
        }
    }
    let mut log: Vec<ReductionEvent> = events
        .iter()
        .map(|e| ReductionEvent {
            time: e.x.t(),
            loser: e.loser.clone(),
            winner: e.winner.clone(),
            site: Some(format!("cell {}", e.cell)),
            kind: e.kind,
        })
        .collect();
    let survivors = sys.state.survivors();
    if survivors.len() > 1 {
        if !opts.final_measurement {
            return Err(Error::Timeout {
                reason: format!("{} scenarios survive the grid and no final measurement is declared", survivors.len()),
                partial: None,
            });
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = survivors[survivors.len() - 1];
        for &i in &survivors {
            acc += sys.state.amplitudes[i];
            if u < acc {
                pick = i;
                break;
            }
        }
        let ev = ReductionEvent {
            time: sys.grid().t_max(),
            loser: survivors.iter().copied().filter(|&i| i != pick).collect(),
            winner: vec![pick],
            site: None,
            kind: EventKind::Measurement,
        };
        sys.state = apply_reduction(&sys.state, &ev)?.state;
        log.push(ev);
    }
    let winner = sys.state.survivors()[0];
    let out = WaveRun {
        trace: RunTrace {
            run,
            seed,
            events: log,
            outcome: sys.state.labels[winner].clone(),
            final_state: sys.state.clone(),
        },
        events,
        sweeps,
        steps,
    };
    Ok((out, sys.waves))
}

pub fn run_waves(map: &FieldMap, initial: &Superposition, opts: &WaveOptions, seed: u64, run: u64) -> Result<WaveRun> {
    run_waves_with(map, initial, opts, seed, run, &mut |_| Ok(()))
}

/// Independent runs on their own random streams, in parallel; results in run order.
pub fn simulate_waves(
    map: &FieldMap,
    initial: &Superposition,
    opts: &WaveOptions,
    n_runs: u64,
    seed: u64,
) -> Result<(Vec<Frequency>, Vec<WaveRun>)> {
    if n_runs == 0 {
        return Err(Error::invalid("at least one run is required"));
    }
    let runs: Vec<WaveRun> = (0..n_runs)
        .into_par_iter()
        .map(|i| run_waves(map, initial, opts, seed, i))
        .collect::<Result<_>>()?;
    let traces: Vec<RunTrace> = runs.iter().map(|r| r.trace.clone()).collect();
    Ok((tally(&traces), runs))
}
