//! Space-time representation: classical scenarios as world-line histories, local
//! distinguishability and bundling, amplitude fields and the couplings field.
//!
//! The engine grid is 1+1 (`ct`, `x¹`); bodies keep their 3-D geometry and the field is
//! integrated over the transverse plane, so that `value · Δx¹ · cΔt` is a probability.

use std::collections::HashMap;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{C, G, HBAR};
use crate::dpcore::Superposition;
use crate::error::{Error, Result};
use crate::massmodel::{signed_difference, signed_kernel_at, MassDensity, Primitive, Vec3};
use crate::quad::gauss_legendre;

/// Default pose quantization used to decide local distinguishability, m.
pub const DEFAULT_DISTINGUISH: f64 = 1e-13;

const TRANSVERSE_ORDER: usize = 8;
const LINE_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpacetimePoint {
    /// `x⁰ = ct`, m.
    pub ct: f64,
    pub x: Vec3,
}

impl SpacetimePoint {
    /// Point of the 1+1 plane.
    pub fn new(ct: f64, x1: f64) -> Self {
        SpacetimePoint { ct, x: [x1, 0.0, 0.0] }
    }

    pub fn at_time(t: f64, x: Vec3) -> Self {
        SpacetimePoint { ct: C * t, x }
    }

    pub fn t(&self) -> f64 {
        self.ct / C
    }

    pub fn is_finite(&self) -> bool {
        self.ct.is_finite() && self.x.iter().all(|v| v.is_finite())
    }
}

/// `(Δx⁰)² - |Δx⃗|²`.
pub fn interval_squared(a: &SpacetimePoint, b: &SpacetimePoint) -> f64 {
    let dt = b.ct - a.ct;
    let dx = [b.x[0] - a.x[0], b.x[1] - a.x[1], b.x[2] - a.x[2]];
    dt * dt - (dx[0] * dx[0] + dx[1] * dx[1] + dx[2] * dx[2])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Separation {
    Timelike,
    Lightlike,
    Spacelike,
}

/// `√|s²|` together with the causal character of the separation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub value: f64,
    pub kind: Separation,
}

pub fn minkowski_interval(a: &SpacetimePoint, b: &SpacetimePoint) -> Interval {
    let s2 = interval_squared(a, b);
    let kind = if s2 > 0.0 {
        Separation::Timelike
    } else if s2 == 0.0 {
        Separation::Lightlike
    } else {
        Separation::Spacelike
    };
    Interval {
        value: s2.abs().sqrt(),
        kind,
    }
}

/// Whether `x` lies in the closed future light-cone of `origin`.
pub fn in_future_cone(origin: &SpacetimePoint, x: &SpacetimePoint) -> bool {
    x.ct >= origin.ct && interval_squared(origin, x) >= 0.0
}

/// Lorentz boost with velocity `beta · c` along `x¹`.
pub fn boost_x(p: &SpacetimePoint, beta: f64) -> SpacetimePoint {
    let gamma = 1.0 / (1.0 - beta * beta).sqrt();
    SpacetimePoint {
        ct: gamma * (p.ct - beta * p.x[0]),
        x: [gamma * (p.x[0] - beta * p.ct), p.x[1], p.x[2]],
    }
}

/// Piecewise-linear centre position; constant before the first and after the last knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `(t, position)` knots, strictly increasing in time.
    pub knots: Vec<(f64, Vec3)>,
}

impl Trajectory {
    pub fn fixed(at: Vec3) -> Self {
        Trajectory { knots: vec![(0.0, at)] }
    }

    /// At rest at `from`, then moves to `from + shift` during `[t0, t0 + duration]`.
    pub fn shift(from: Vec3, shift: Vec3, t0: f64, duration: f64) -> Self {
        let to = [from[0] + shift[0], from[1] + shift[1], from[2] + shift[2]];
        Trajectory {
            knots: vec![(t0, from), (t0 + duration, to)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots.is_empty() {
            return Err(Error::invalid("trajectory needs at least one knot"));
        }
        for w in self.knots.windows(2) {
            let ((t0, p0), (t1, p1)) = (w[0], w[1]);
            if !(t1 > t0) {
                return Err(Error::invalid("trajectory knots must be strictly time-ordered"));
            }
            let d = ((p1[0] - p0[0]).powi(2) + (p1[1] - p0[1]).powi(2) + (p1[2] - p0[2]).powi(2)).sqrt();
            if d / (t1 - t0) >= C {
                return Err(Error::invalid("trajectory segment moves at or above the speed of light"));
            }
        }
        Ok(())
    }

    pub fn position_at(&self, t: f64) -> Vec3 {
        let k = &self.knots;
        if t <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            let ((t0, p0), (t1, p1)) = (w[0], w[1]);
            if t <= t1 {
                let f = (t - t0) / (t1 - t0);
                return [0, 1, 2].map(|i| p0[i] + f * (p1[i] - p0[i]));
            }
        }
        k[k.len() - 1].1
    }
}

/// A non-gravitating local observable with a piecewise-constant value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub name: String,
    #[serde(default)]
    pub initial: String,
    /// `(t, value)` switch points, time-ordered.
    #[serde(default)]
    pub changes: Vec<(f64, String)>,
}

impl Marker {
    pub fn value_at(&self, t: f64) -> &str {
        let mut v = self.initial.as_str();
        for (tc, val) in &self.changes {
            if t >= *tc {
                v = val;
            }
        }
        v
    }
}

/// A body (possibly massless) following a trajectory, with attached markers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldItem {
    pub name: String,
    /// Geometry in the body frame, centred on the trajectory point.
    #[serde(default)]
    pub body: MassDensity,
    pub trajectory: Trajectory,
    #[serde(default)]
    pub markers: Vec<Marker>,
}

impl WorldItem {
    pub fn density_at(&self, t: f64) -> MassDensity {
        self.body.translated(self.trajectory.position_at(t))
    }

    /// Distance from `x` to the body's bounding box at time `t` (to the centre if massless).
    fn distance(&self, t: f64, x: Vec3) -> f64 {
        let c = self.trajectory.position_at(t);
        let mut half = [0.0_f64; 3];
        for p in &self.body.primitives {
            let pc = p.center();
            let h = p.half_widths();
            for i in 0..3 {
                half[i] = half[i].max(pc[i].abs() + h[i]);
            }
        }
        (0..3)
            .map(|i| ((x[i] - c[i]).abs() - half[i]).max(0.0).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// A complete, never-superposed history of every body and marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalScenario {
    pub id: String,
    pub items: Vec<WorldItem>,
    /// Earliest time the history is known; retarded evaluation before it fails.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history_start: Option<f64>,
}

impl ClassicalScenario {
    pub fn validate(&self) -> Result<()> {
        for it in &self.items {
            it.trajectory
                .validate()
                .map_err(|e| Error::invalid(format!("scenario {} item {}: {e}", self.id, it.name)))?;
            it.body.validate()?;
        }
        Ok(())
    }

    pub fn density_at(&self, t: f64) -> MassDensity {
        let mut prims: Vec<Primitive> = Vec::new();
        for it in &self.items {
            prims.extend(it.density_at(t).primitives);
        }
        MassDensity::new(prims)
    }

    fn pose_key(&self, t: f64, delta: f64) -> Vec<[i64; 3]> {
        self.items
            .iter()
            .map(|it| quantize(it.trajectory.position_at(t), delta))
            .collect()
    }
}

fn quantize(p: Vec3, delta: f64) -> [i64; 3] {
    p.map(|v| (v / delta).round() as i64)
}

/// Locality radius and pose quantization of the bundling rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BundlingOptions {
    pub radius: f64,
    pub delta: f64,
}

impl BundlingOptions {
    pub fn with_radius(radius: f64) -> Self {
        BundlingOptions {
            radius,
            delta: DEFAULT_DISTINGUISH,
        }
    }
}

/// Everything observable near a point: nearby items' quantized poses and marker values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LocalDescriptor(pub Vec<(String, [i64; 3], Vec<(String, String)>)>);

pub fn local_configuration(s: &ClassicalScenario, x: &SpacetimePoint, opts: &BundlingOptions) -> LocalDescriptor {
    let t = x.t();
    let mut out: Vec<(String, [i64; 3], Vec<(String, String)>)> = s
        .items
        .iter()
        .filter(|it| it.distance(t, x.x) <= opts.radius)
        .map(|it| {
            let markers = it
                .markers
                .iter()
                .map(|m| (m.name.clone(), m.value_at(t).to_string()))
                .collect();
            (it.name.clone(), quantize(it.trajectory.position_at(t), opts.delta), markers)
        })
        .collect();
    out.sort();
    LocalDescriptor(out)
}

/// Scenarios grouped by equal local descriptors; blocks ordered by first member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundlePartition {
    pub blocks: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
}

impl BundlePartition {
    pub fn dim(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_of(&self, scenario: usize) -> Option<usize> {
        self.blocks.iter().position(|b| b.contains(&scenario))
    }

    /// `a1,a2|b1` with 1-based scenario positions.
    pub fn label(&self) -> String {
        self.blocks
            .iter()
            .map(|b| b.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("|")
    }
}

pub fn partition_at(x: &SpacetimePoint, scenarios: &[ClassicalScenario], opts: &BundlingOptions) -> Vec<Vec<usize>> {
    let mut blocks: Vec<(LocalDescriptor, Vec<usize>)> = Vec::new();
    for (i, s) in scenarios.iter().enumerate() {
        let d = local_configuration(s, x, opts);
        match blocks.iter_mut().find(|(k, _)| *k == d) {
            Some((_, b)) => b.push(i),
            None => blocks.push((d, vec![i])),
        }
    }
    blocks.into_iter().map(|(_, b)| b).collect()
}

pub fn bundle_at(
    x: &SpacetimePoint,
    scenarios: &[ClassicalScenario],
    amplitudes: &Superposition,
    opts: &BundlingOptions,
) -> Result<BundlePartition> {
    if amplitudes.dim() != scenarios.len() {
        return Err(Error::invalid("one amplitude per scenario required"));
    }
    let blocks = partition_at(x, scenarios, opts);
    let weights = blocks.iter().map(|b| amplitudes.weight(b)).collect();
    Ok(BundlePartition { blocks, weights })
}

/// Bundled squared amplitudes at `x` and the local dimension `D(x)`.
pub fn amplitude_field_at(
    x: &SpacetimePoint,
    scenarios: &[ClassicalScenario],
    amplitudes: &Superposition,
    opts: &BundlingOptions,
) -> Result<(Vec<f64>, usize)> {
    let p = bundle_at(x, scenarios, amplitudes, opts)?;
    let d = p.dim();
    Ok((p.weights, d))
}

/// `Ẽ = (G/ħc) Δρ Δψ` at a 3-D point for two instantaneous configurations, 1/m⁴.
pub fn couplings_density(a: &MassDensity, b: &MassDensity, x: Vec3) -> Result<f64> {
    let diff = signed_difference(a, b);
    let drho: f64 = diff.iter().map(|(s, p)| s * p.density_at(x)).sum();
    if drho == 0.0 {
        return Ok(0.0);
    }
    Ok(G / (HBAR * C) * drho * signed_kernel_at(&diff, x)?)
}

fn line_from(diff: &[(f64, Primitive)], x1: f64, dpsi: &dyn Fn(Vec3) -> f64) -> f64 {
    let mut acc = 0.0;
    for (s, p) in diff {
        acc += s * p.transverse_integral(x1, dpsi, TRANSVERSE_ORDER);
    }
    G / (HBAR * C) * acc
}

/// `∫∫ Ẽ dx² dx³` on the plane `x¹ = x1`, 1/m².
pub fn line_density(a: &MassDensity, b: &MassDensity, x1: f64) -> Result<f64> {
    let diff = signed_difference(a, b);
    if diff.is_empty() {
        return Ok(0.0);
    }
    let failed = Mutex::new(None);
    let dpsi = |y: Vec3| match signed_kernel_at(&diff, y) {
        Ok(v) => v,
        Err(e) => {
            *failed.lock().unwrap() = Some(e);
            0.0
        }
    };
    let v = line_from(&diff, x1, &dpsi);
    match failed.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

/// Breakpoints along `x¹` where the signed difference density switches.
fn x_breaks(diff: &[(f64, Primitive)]) -> Vec<f64> {
    let mut v: Vec<f64> = Vec::new();
    for (_, p) in diff {
        let (c, h) = (p.center()[0], p.half_widths()[0]);
        v.push(c - h);
        v.push(c + h);
    }
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Mean of `line(x¹)` over `[lo, hi]`, integrated piecewise between body faces.
fn cell_mean(diff: &[(f64, Primitive)], lo: f64, hi: f64, line: &dyn Fn(f64) -> f64) -> f64 {
    let breaks = x_breaks(diff);
    let (Some(first), Some(last)) = (breaks.first(), breaks.last()) else {
        return 0.0;
    };
    if hi <= *first || lo >= *last {
        return 0.0;
    }
    let mut cuts = vec![lo];
    cuts.extend(breaks.iter().copied().filter(|b| *b > lo && *b < hi));
    cuts.push(hi);
    let rule = gauss_legendre(LINE_ORDER);
    let mut acc = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0].max(*first), w[1].min(*last));
        if b <= a {
            continue;
        }
        let (m, h) = (0.5 * (a + b), 0.5 * (b - a));
        for (u, wu) in rule.iter() {
            acc += wu * h * line(m + h * u);
        }
    }
    acc / (hi - lo)
}

/// Cell average of [`line_density`] over `[lo, hi]`.
pub fn line_density_cell(a: &MassDensity, b: &MassDensity, lo: f64, hi: f64) -> Result<f64> {
    let diff = signed_difference(a, b);
    if diff.is_empty() {
        return Ok(0.0);
    }
    let failed = Mutex::new(None);
    let dpsi = |y: Vec3| match signed_kernel_at(&diff, y) {
        Ok(v) => v,
        Err(e) => {
            *failed.lock().unwrap() = Some(e);
            0.0
        }
    };
    let v = cell_mean(&diff, lo, hi, &|x1| line_from(&diff, x1, &dpsi));
    match failed.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

/// Transverse-integrated field between two scenarios at `x`, from their poses at `t(x)`.
pub fn field_quasistatic_at(x: &SpacetimePoint, k: &ClassicalScenario, l: &ClassicalScenario) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::invalid("non-finite space-time point"));
    }
    let t = x.t();
    line_density(&k.density_at(t), &l.density_at(t), x.x[0])
}

/// Retarded time at which light leaving the item reaches `x` at `t`.
fn retarded_time(item: &WorldItem, x: Vec3, t: f64) -> f64 {
    let mut tr = t;
    for _ in 0..200 {
        let p = item.trajectory.position_at(tr);
        let d = ((x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2) + (x[2] - p[2]).powi(2)).sqrt();
        let next = t - d / C;
        if (next - tr).abs() <= 1e-15 * (1.0 + t.abs()) {
            return next;
        }
        tr = next;
    }
    tr
}

/// Mass density of the scenario with every item at its own retarded pose as seen from `(y, t)`.
fn retarded_density(s: &ClassicalScenario, y: Vec3, t: f64) -> Result<MassDensity> {
    let mut prims = Vec::new();
    for item in &s.items {
        if item.body.primitives.is_empty() {
            continue;
        }
        let tr = retarded_time(item, y, t);
        if let Some(start) = s.history_start {
            if tr < start {
                return Err(Error::InsufficientHistory(format!(
                    "item {} needed at t = {tr:.6e} s, history starts at {start:.6e} s",
                    item.name
                )));
            }
        }
        prims.extend(item.density_at(tr).primitives);
    }
    Ok(MassDensity::new(prims))
}

/// `ψ_k - ψ_l` from retarded poses; bodies at equal retarded poses cancel exactly.
fn retarded_dpsi(k: &ClassicalScenario, l: &ClassicalScenario, y: Vec3, t: f64) -> Result<f64> {
    let diff = signed_difference(&retarded_density(k, y, t)?, &retarded_density(l, y, t)?);
    signed_kernel_at(&diff, y)
}

/// Like [`field_quasistatic_at`] but with potentials from retarded source positions.
///
/// Slow-motion reading: only the 00 part of the metric perturbation matters and every
/// body is taken at the retarded time of its centre.
pub fn field_retarded_at(x: &SpacetimePoint, k: &ClassicalScenario, l: &ClassicalScenario) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::invalid("non-finite space-time point"));
    }
    let t = x.t();
    let diff = signed_difference(&k.density_at(t), &l.density_at(t));
    if diff.is_empty() {
        return Ok(0.0);
    }
    // Probe once so history errors surface instead of vanishing inside quadrature.
    retarded_dpsi(k, l, x.x, t)?;
    let failed = Mutex::new(None);
    let dpsi = |y: Vec3| match retarded_dpsi(k, l, y, t) {
        Ok(v) => v,
        Err(e) => {
            *failed.lock().unwrap() = Some(e);
            0.0
        }
    };
    let v = line_from(&diff, x.x[0], &dpsi);
    match failed.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

/// Uniform 1+1 grid of cells `(i, j)`: `x¹ ∈ [x_min + iΔx, …)`, `t ∈ [t_min + jΔt, …)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_min: f64,
    pub dx: f64,
    pub nx: usize,
    pub t_min: f64,
    pub dt: f64,
    pub nt: usize,
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        if !(self.dx > 0.0 && self.dt > 0.0) || self.nx == 0 || self.nt == 0 {
            return Err(Error::invalid("grid needs positive steps and at least one cell"));
        }
        if !(self.x_min.is_finite() && self.t_min.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nx * self.nt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell % self.nx, cell / self.nx)
    }

    pub fn x_range(&self, i: usize) -> (f64, f64) {
        let lo = self.x_min + i as f64 * self.dx;
        (lo, lo + self.dx)
    }

    pub fn t_range(&self, j: usize) -> (f64, f64) {
        let lo = self.t_min + j as f64 * self.dt;
        (lo, lo + self.dt)
    }

    pub fn center(&self, cell: usize) -> SpacetimePoint {
        let (i, j) = self.coords(cell);
        SpacetimePoint::at_time(
            self.t_min + (j as f64 + 0.5) * self.dt,
            [self.x_min + (i as f64 + 0.5) * self.dx, 0.0, 0.0],
        )
    }

    pub fn t_max(&self) -> f64 {
        self.t_min + self.nt as f64 * self.dt
    }

    /// Cell containing `p`, if any.
    pub fn locate(&self, p: &SpacetimePoint) -> Option<usize> {
        let fi = ((p.x[0] - self.x_min) / self.dx).floor();
        let fj = ((p.t() - self.t_min) / self.dt).floor();
        if fi < 0.0 || fj < 0.0 || fi >= self.nx as f64 || fj >= self.nt as f64 {
            return None;
        }
        Some(self.index(fi as usize, fj as usize))
    }

    /// Same extent with both steps halved.
    pub fn refined(&self) -> Grid {
        Grid {
            dx: 0.5 * self.dx,
            nx: 2 * self.nx,
            dt: 0.5 * self.dt,
            nt: 2 * self.nt,
            ..*self
        }
    }

    /// Coordinate 4-volume of one cell per unit transverse area, m².
    pub fn cell_volume(&self) -> f64 {
        self.dx * C * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Evaluator {
    #[default]
    Quasistatic,
    Retarded,
}

impl std::str::FromStr for Evaluator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quasistatic" => Ok(Self::Quasistatic),
            "retarded" => Ok(Self::Retarded),
            o => Err(Error::invalid(format!("unknown evaluator {o:?} (quasistatic, retarded)"))),
        }
    }
}

/// Bundles of one cell and the field between each unordered bundle pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellField {
    pub partition: Vec<Vec<usize>>,
    /// `(a, b, Ẽ)` with `a < b` bundle indices; only nonzero entries.
    pub pairs: Vec<(usize, usize, f64)>,
}

impl CellField {
    pub fn value(&self, a: usize, b: usize) -> f64 {
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        self.pairs
            .iter()
            .find(|p| p.0 == a && p.1 == b)
            .map(|p| p.2)
            .unwrap_or(0.0)
    }
}

/// The couplings field of a set of scenarios over a grid.
///
/// Each bundle is represented by its lowest-index scenario; members are locally
/// indistinguishable, so the choice only matters at the locality-radius scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldMap {
    pub grid: Grid,
    pub cells: Vec<CellField>,
}

impl FieldMap {
    pub fn build(
        scenarios: &[ClassicalScenario],
        grid: &Grid,
        opts: &BundlingOptions,
        evaluator: Evaluator,
    ) -> Result<FieldMap> {
        grid.validate()?;
        for s in scenarios {
            s.validate()?;
        }
        type Key = (usize, usize, usize, Vec<[i64; 3]>, Vec<[i64; 3]>);
        let cache: Mutex<HashMap<Key, f64>> = Mutex::new(HashMap::new());
        let cells: Vec<Result<CellField>> = (0..grid.len())
            .into_par_iter()
            .map(|cell| {
                let x = grid.center(cell);
                let partition = partition_at(&x, scenarios, opts);
                let (i, _) = grid.coords(cell);
                let (lo, hi) = grid.x_range(i);
                let t = x.t();
                let mut pairs = Vec::new();
                for a in 0..partition.len() {
                    for b in (a + 1)..partition.len() {
                        let (ka, kb) = (partition[a][0], partition[b][0]);
                        let (sa, sb) = (&scenarios[ka], &scenarios[kb]);
                        let v = match evaluator {
                            Evaluator::Quasistatic => {
                                let key = (ka, kb, i, sa.pose_key(t, opts.delta), sb.pose_key(t, opts.delta));
                                let hit = cache.lock().unwrap().get(&key).copied();
                                match hit {
                                    Some(v) => v,
                                    None => {
                                        let v = line_density_cell(&sa.density_at(t), &sb.density_at(t), lo, hi)?;
                                        cache.lock().unwrap().insert(key, v);
                                        v
                                    }
                                }
                            }
                            Evaluator::Retarded => {
                                let diff = signed_difference(&sa.density_at(t), &sb.density_at(t));
                                let failed = Mutex::new(None);
                                let v = cell_mean(&diff, lo, hi, &|x1| {
                                    let p = SpacetimePoint { ct: x.ct, x: [x1, 0.0, 0.0] };
                                    field_retarded_at(&p, sa, sb).unwrap_or_else(|e| {
                                        *failed.lock().unwrap() = Some(e);
                                        0.0
                                    })
                                });
                                if let Some(e) = failed.into_inner().unwrap() {
                                    return Err(e);
                                }
                                v
                            }
                        };
                        if v != 0.0 {
                            pairs.push((a, b, v));
                        }
                    }
                }
                Ok(CellField { partition, pairs })
            })
            .collect();
        Ok(FieldMap {
            grid: *grid,
            cells: cells.into_iter().collect::<Result<_>>()?,
        })
    }

    /// `Σ_cells value · Δx¹ · cΔt` for one bundle pair given by representative scenarios.
    pub fn integrated(&self, k: usize, l: usize) -> f64 {
        let vol = self.grid.cell_volume();
        self.cells
            .iter()
            .map(|c| match (block_index(&c.partition, k), block_index(&c.partition, l)) {
                (Some(a), Some(b)) if a != b => c.value(a, b) * vol,
                _ => 0.0,
            })
            .sum()
    }
}

fn block_index(partition: &[Vec<usize>], scenario: usize) -> Option<usize> {
    partition.iter().position(|b| b.contains(&scenario))
}
