//! Declarative experiment descriptions, the built-in thought experiments, scenario
//! enumeration from the device dataflow, and persistence of runs and result tables.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constants::{C, HBAR, WATER_DENSITY};
use crate::dpcore::{CorrelationPolicy, CouplingsSchedule, Epoch, Frequency, ReductionEvent, Site, Superposition};
use crate::error::{Error, Result};
use crate::massmodel::{coupling_energy, couplings_matrix, MassDensity, Primitive, Vec3};
use crate::relfield::{
    partition_at, BundlingOptions, ClassicalScenario, Evaluator, FieldMap, Grid, Marker, SpacetimePoint, Trajectory,
    WorldItem, DEFAULT_DISTINGUISH,
};

/// Schema id written into, and required from, every spec file.
pub const SCHEMA_ID: &str = "gravred.experiment/1";

/// Names accepted by [`builtin`]; `star-n` also takes a size suffix such as `star-7`.
pub const BUILTINS: &[&str] = &["fig1", "fig2", "fig4", "fig8", "fig13", "fig16", "fig21", "epr-bohm", "star-n"];

/// Marker carried by every detector: `off` (not armed), `idle` or `fired`.
pub const DETECTOR_MARKER: &str = "state";
/// Marker carried by a reducer: `none` or the value applied by a firing detector.
pub const REDUCER_MARKER: &str = "field";

const NORM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub schema: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    /// Length of the simulated window, s.
    pub duration: f64,
    pub grid: GridSpec,
    pub devices: Vec<Device>,
    #[serde(default)]
    pub amplitudes: AmplitudeSpec,
    #[serde(default)]
    pub policies: Policies,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dx: f64,
    pub dt: f64,
    pub x_min: f64,
    pub x_max: f64,
    #[serde(default)]
    pub t_min: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeSpec {
    /// Overrides the amplitudes derived from split ratios; one per scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Policies {
    pub correlation: CorrelationPolicy,
    pub final_measurement: bool,
    /// Bundle scenarios per device site in the non-relativistic schedule.
    pub bundling: bool,
    pub evaluator: Evaluator,
    /// Locality radius, m; one grid cell when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    pub distinguish: f64,
    pub seed: u64,
    pub runs: u64,
    /// Root reduction wave birth, s before the grid starts.
    pub root_lead: f64,
}

impl Default for Policies {
    fn default() -> Self {
        Policies {
            correlation: CorrelationPolicy::FirstWinner,
            final_measurement: true,
            bundling: true,
            evaluator: Evaluator::Quasistatic,
            radius: None,
            distinguish: DEFAULT_DISTINGUISH,
            seed: 0,
            runs: 1000,
            root_lead: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub name: String,
    pub position: Vec3,
    #[serde(flatten)]
    pub kind: DeviceKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorMode {
    /// A rigid mass is shifted on detection.
    MassShift,
    /// Only a switch flips; decay time is `tau_det`.
    MddConserving,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum BodySpec {
    Cube {
        side: f64,
        #[serde(default = "water")]
        density: f64,
    },
    Sphere {
        diameter: f64,
        #[serde(default = "water")]
        density: f64,
    },
}

fn water() -> f64 {
    WATER_DENSITY
}

impl BodySpec {
    pub fn density(&self) -> MassDensity {
        match *self {
            BodySpec::Cube { side, density } => MassDensity::new(vec![Primitive::cuboid(
                [0.0; 3],
                [0.5 * side; 3],
                density * side.powi(3),
            )]),
            BodySpec::Sphere { diameter, density } => {
                let r = 0.5 * diameter;
                MassDensity::new(vec![Primitive::sphere(
                    [0.0; 3],
                    r,
                    density * 4.0 / 3.0 * std::f64::consts::PI * r.powi(3),
                )])
            }
        }
    }

    fn check(&self, at: &str, errs: &mut Vec<String>) {
        let (size, density) = match *self {
            BodySpec::Cube { side, density } => (side, density),
            BodySpec::Sphere { diameter, density } => (diameter, density),
        };
        if !(size > 0.0 && size.is_finite()) {
            errs.push(format!("{at}: body size must be positive"));
        }
        if !(density > 0.0 && density.is_finite()) {
            errs.push(format!("{at}: body density must be positive"));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DeviceKind {
    PhotonSource {
        emit_at: f64,
        output: String,
        /// Fires only in scenarios where this detector fired.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        enabled_by: Option<String>,
    },
    BeamSplitter {
        /// Transmitted fraction of the intensity.
        ratio: f64,
        transmit: String,
        reflect: String,
    },
    Mirror {
        output: String,
    },
    Detector {
        mode: DetectorMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        body: Option<BodySpec>,
        #[serde(default)]
        shift: Vec3,
        #[serde(default = "default_shift_speed")]
        shift_speed: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tau_det: Option<f64>,
        /// Detectors that fire together with this one (wired records).
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        triggers: Vec<String>,
    },
    Absorber {},
    Reducer {
        body: BodySpec,
        shift: Vec3,
        #[serde(default = "default_shift_speed")]
        shift_speed: f64,
        /// Detectors whose firing shifts the mass.
        shift_on: Vec<String>,
        /// Detector name → applied field value (a marker, no mass change).
        #[serde(default)]
        fields: BTreeMap<String, String>,
    },
    MeasurementDevice {
        /// Time the device reads out, s.
        at: f64,
    },
}

fn default_shift_speed() -> f64 {
    1e-4
}

impl ExperimentSpec {
    /// All schema problems at once, each prefixed with its field path.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.schema != SCHEMA_ID {
            errs.push(format!("schema: expected {SCHEMA_ID:?}, found {:?}", self.schema));
        }
        if self.name.trim().is_empty() {
            errs.push("name: must not be empty".into());
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            errs.push("duration: must be positive".into());
        }
        let g = &self.grid;
        if !(g.dx > 0.0 && g.dx.is_finite()) {
            errs.push("grid.dx: must be positive".into());
        }
        if !(g.dt > 0.0 && g.dt.is_finite()) {
            errs.push("grid.dt: must be positive".into());
        }
        if !(g.x_max > g.x_min) {
            errs.push("grid.x_max: must exceed grid.x_min".into());
        }
        if !g.t_min.is_finite() {
            errs.push("grid.t_min: must be finite".into());
        }
        let p = &self.policies;
        if let Some(r) = p.radius {
            if !(r > 0.0) {
                errs.push("policies.radius: must be positive".into());
            }
        }
        if !(p.distinguish > 0.0) {
            errs.push("policies.distinguish: must be positive".into());
        }
        if !(p.root_lead > 0.0) {
            errs.push("policies.root_lead: must be positive".into());
        }
        if p.runs == 0 {
            errs.push("policies.runs: must be at least 1".into());
        }
        if let Some(a) = &self.amplitudes.initial {
            if a.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
                errs.push("amplitudes.initial: each entry must lie in [0, 1]".into());
            }
            let sum: f64 = a.iter().sum();
            if (sum - 1.0).abs() > NORM_TOL {
                errs.push(format!("amplitudes.initial: must sum to 1, sums to {sum}"));
            }
        }
        if self.devices.is_empty() {
            errs.push("devices: at least one device is required".into());
        }
        let mut names = HashSet::new();
        for d in &self.devices {
            if !names.insert(d.name.as_str()) {
                errs.push(format!("devices.{}: duplicate name", d.name));
            }
        }
        let kind_of: HashMap<&str, &DeviceKind> = self.devices.iter().map(|d| (d.name.as_str(), &d.kind)).collect();
        let is_detector = |n: &str| matches!(kind_of.get(n), Some(DeviceKind::Detector { .. }));
        let is_optical = |n: &str| {
            matches!(
                kind_of.get(n),
                Some(DeviceKind::BeamSplitter { .. } | DeviceKind::Mirror { .. } | DeviceKind::Detector { .. } | DeviceKind::Absorber {})
            )
        };
        for d in &self.devices {
            let at = format!("devices.{}", d.name);
            if d.position.iter().any(|v| !v.is_finite()) {
                errs.push(format!("{at}.position: must be finite"));
            } else if d.position[0] < g.x_min || d.position[0] > g.x_max {
                errs.push(format!("{at}.position: x = {} outside the grid extent", d.position[0]));
            }
            let optical = |errs: &mut Vec<String>, field: &str, target: &str| {
                if !is_optical(target) {
                    errs.push(format!("{at}.{field}: {target:?} is not a beam splitter, mirror, detector or absorber"));
                }
            };
            match &d.kind {
                DeviceKind::PhotonSource {
                    emit_at,
                    output,
                    enabled_by,
                } => {
                    optical(&mut errs, "output", output);
                    if !emit_at.is_finite() {
                        errs.push(format!("{at}.emit_at: must be finite"));
                    }
                    if let Some(e) = enabled_by {
                        if !is_detector(e) {
                            errs.push(format!("{at}.enabled_by: {e:?} is not a detector"));
                        }
                    }
                }
                DeviceKind::BeamSplitter {
                    ratio,
                    transmit,
                    reflect,
                } => {
                    if !(*ratio > 0.0 && *ratio < 1.0) {
                        errs.push(format!("{at}.ratio: must lie in (0, 1), found {ratio}"));
                    }
                    optical(&mut errs, "transmit", transmit);
                    optical(&mut errs, "reflect", reflect);
                }
                DeviceKind::Mirror { output } => optical(&mut errs, "output", output),
                DeviceKind::Detector {
                    mode,
                    body,
                    shift,
                    shift_speed,
                    tau_det,
                    triggers,
                } => {
                    if let Some(b) = body {
                        b.check(&format!("{at}.body"), &mut errs);
                    }
                    if *mode == DetectorMode::MassShift && body.is_none() {
                        errs.push(format!("{at}.body: a mass-shift detector needs a body"));
                    }
                    check_shift(&at, shift, *shift_speed, &mut errs);
                    if let Some(t) = tau_det {
                        if !(*t > 0.0) {
                            errs.push(format!("{at}.tau_det: must be positive"));
                        }
                    }
                    for t in triggers {
                        if !is_detector(t) {
                            errs.push(format!("{at}.triggers: {t:?} is not a detector"));
                        }
                    }
                }
                DeviceKind::Absorber {} => {}
                DeviceKind::Reducer {
                    body,
                    shift,
                    shift_speed,
                    shift_on,
                    fields,
                } => {
                    body.check(&format!("{at}.body"), &mut errs);
                    check_shift(&at, shift, *shift_speed, &mut errs);
                    for t in shift_on.iter().chain(fields.keys()) {
                        if !is_detector(t) {
                            errs.push(format!("{at}: trigger {t:?} is not a detector"));
                        }
                    }
                }
                DeviceKind::MeasurementDevice { at: t } => {
                    if !t.is_finite() {
                        errs.push(format!("{at}.at: must be finite"));
                    }
                }
            }
        }
        if !self.devices.iter().any(|d| matches!(d.kind, DeviceKind::PhotonSource { .. })) {
            errs.push("devices: no photon source".into());
        }
        if errs.is_empty() {
            if let Err(Error::InvalidInput(m)) = self.check_acyclic() {
                errs.push(format!("devices: {m}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(errs))
        }
    }

    fn device(&self, name: &str) -> &Device {
        self.devices.iter().find(|d| d.name == name).expect("validated reference")
    }

    /// Dataflow edges: optical links, enabling and triggering wires.
    fn edges(&self) -> Vec<(&str, &str)> {
        let mut e = Vec::new();
        for d in &self.devices {
            let n = d.name.as_str();
            match &d.kind {
                DeviceKind::PhotonSource { output, enabled_by, .. } => {
                    e.push((n, output.as_str()));
                    if let Some(src) = enabled_by {
                        e.push((src.as_str(), n));
                    }
                }
                DeviceKind::BeamSplitter { transmit, reflect, .. } => {
                    e.push((n, transmit.as_str()));
                    e.push((n, reflect.as_str()));
                }
                DeviceKind::Mirror { output } => e.push((n, output.as_str())),
                DeviceKind::Detector { triggers, .. } => e.extend(triggers.iter().map(|t| (n, t.as_str()))),
                DeviceKind::Reducer { shift_on, fields, .. } => {
                    e.extend(shift_on.iter().chain(fields.keys()).map(|t| (t.as_str(), n)));
                }
                DeviceKind::Absorber {} | DeviceKind::MeasurementDevice { .. } => {}
            }
        }
        e
    }

    fn check_acyclic(&self) -> Result<()> {
        let edges = self.edges();
        let mut adj: HashMap<&str, Vec<&str>> = HashMap::new();
        for (a, b) in &edges {
            adj.entry(a).or_default().push(b);
        }
        // 0 unvisited, 1 on stack, 2 done
        let mut mark: HashMap<&str, u8> = HashMap::new();
        fn visit<'a>(n: &'a str, adj: &HashMap<&'a str, Vec<&'a str>>, mark: &mut HashMap<&'a str, u8>) -> Result<()> {
            match mark.get(n) {
                Some(1) => return Err(Error::invalid(format!("device graph has a cycle through {n:?}"))),
                Some(2) => return Ok(()),
                _ => {}
            }
            mark.insert(n, 1);
            for m in adj.get(n).into_iter().flatten() {
                visit(m, adj, mark)?;
            }
            mark.insert(n, 2);
            Ok(())
        }
        for d in &self.devices {
            visit(&d.name, &adj, &mut mark)?;
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        let g = &self.grid;
        Grid {
            x_min: g.x_min,
            dx: g.dx,
            nx: ((g.x_max - g.x_min) / g.dx).round().max(1.0) as usize,
            t_min: g.t_min,
            dt: g.dt,
            nt: (self.duration / g.dt).round().max(1.0) as usize,
        }
    }

    pub fn bundling(&self) -> BundlingOptions {
        BundlingOptions {
            radius: self.policies.radius.unwrap_or(self.grid.dx),
            delta: self.policies.distinguish,
        }
    }

    /// Cells of the measurement devices.
    pub fn device_cells(&self) -> Vec<usize> {
        let grid = self.grid();
        self.devices
            .iter()
            .filter_map(|d| match d.kind {
                DeviceKind::MeasurementDevice { at } => grid.locate(&SpacetimePoint::at_time(at, d.position)),
                _ => None,
            })
            .collect()
    }

    /// Canonical content hash of the experiment (hex SHA-256 of its TOML form).
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_shift(at: &str, shift: &Vec3, speed: f64, errs: &mut Vec<String>) {
    if shift.iter().any(|v| !v.is_finite()) {
        errs.push(format!("{at}.shift: must be finite"));
    }
    if !(speed > 0.0 && speed < C) {
        errs.push(format!("{at}.shift_speed: must be positive and below c"));
    }
}

/// Parse and validate spec text.
pub fn parse_spec(text: &str) -> Result<ExperimentSpec> {
    let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Schema(vec![e.to_string()]))?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_spec(&text).map_err(|e| match e {
        Error::Schema(v) => Error::Schema(v.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
        other => other,
    })
}

pub fn save_spec(spec: &ExperimentSpec, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(spec).map_err(|e| Error::invalid(format!("cannot serialize spec: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Spec given as a built-in name or a file path.
pub fn resolve_spec(name_or_path: &str) -> Result<ExperimentSpec> {
    let p = Path::new(name_or_path);
    if p.exists() {
        load_spec(p)
    } else {
        builtin(name_or_path)
    }
}

/// Scenarios of a spec with their initial squared amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct Built {
    pub scenarios: Vec<ClassicalScenario>,
    pub amplitudes: Superposition,
}

#[derive(Debug, Clone)]
struct Outcome {
    /// Detector → detection time.
    fired: BTreeMap<String, f64>,
    /// Source → enabling time.
    enabled: BTreeMap<String, f64>,
    weight: f64,
    label: Vec<usize>,
}

/// Photon paths from `start`: `(terminal, probability, path length)`.
fn paths<'a>(spec: &'a ExperimentSpec, from: &Device, start: &'a str) -> Vec<(&'a str, f64, f64)> {
    let mut out = Vec::new();
    let mut stack = vec![(start, 1.0, dist(&from.position, &spec.device(start).position))];
    while let Some((name, p, len)) = stack.pop() {
        let d = spec.device(name);
        match &d.kind {
            DeviceKind::BeamSplitter {
                ratio,
                transmit,
                reflect,
            } => {
                // Reflect pushed first so the transmitted branch is enumerated first.
                for (next, f) in [(reflect, 1.0 - ratio), (transmit, *ratio)] {
                    let l = len + dist(&d.position, &spec.device(next).position);
                    stack.push((next.as_str(), p * f, l));
                }
            }
            DeviceKind::Mirror { output } => {
                let l = len + dist(&d.position, &spec.device(output).position);
                stack.push((output.as_str(), p, l));
            }
            _ => out.push((d.name.as_str(), p, len)),
        }
    }
    out
}

fn dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn fire(spec: &ExperimentSpec, o: &mut Outcome, detector: &str, t: f64) {
    if o.fired.contains_key(detector) {
        return;
    }
    o.fired.insert(detector.to_string(), t);
    let d = spec.device(detector);
    if let DeviceKind::Detector { triggers, .. } = &d.kind {
        for tname in triggers {
            fire(spec, o, tname, t);
        }
    }
}

/// Sources ordered so that every enabling detector's source comes first.
fn source_order(spec: &ExperimentSpec) -> Vec<&Device> {
    let sources: Vec<&Device> = spec
        .devices
        .iter()
        .filter(|d| matches!(d.kind, DeviceKind::PhotonSource { .. }))
        .collect();
    let feeds = |s: &Device| -> HashSet<String> {
        let DeviceKind::PhotonSource { output, .. } = &s.kind else {
            unreachable!()
        };
        let mut set: HashSet<String> = paths(spec, s, output).into_iter().map(|p| p.0.to_string()).collect();
        // include wired triggers
        let mut frontier: Vec<String> = set.iter().cloned().collect();
        while let Some(n) = frontier.pop() {
            if let DeviceKind::Detector { triggers, .. } = &spec.device(&n).kind {
                for t in triggers {
                    if set.insert(t.clone()) {
                        frontier.push(t.clone());
                    }
                }
            }
        }
        set
    };
    let mut done: Vec<&Device> = Vec::new();
    let mut left = sources;
    while !left.is_empty() {
        let before = left.len();
        let mut i = 0;
        while i < left.len() {
            let DeviceKind::PhotonSource { enabled_by, .. } = &left[i].kind else {
                unreachable!()
            };
            let ready = match enabled_by {
                None => true,
                Some(e) => left.iter().all(|s| !feeds(s).contains(e)),
            };
            if ready {
                done.push(left.remove(i));
            } else {
                i += 1;
            }
        }
        if left.len() == before {
            // Acyclicity was validated; keep remaining order.
            done.append(&mut left);
        }
    }
    done
}

/// Detectors reachable from conditional sources: their marker starts `off`.
fn conditional_detectors(spec: &ExperimentSpec) -> HashMap<String, String> {
    let mut out = HashMap::new();
    for s in &spec.devices {
        if let DeviceKind::PhotonSource {
            output,
            enabled_by: Some(_),
            ..
        } = &s.kind
        {
            for (t, _, _) in paths(spec, s, output) {
                out.insert(t.to_string(), s.name.clone());
            }
        }
    }
    out
}

/// One scenario per maximal combination of photon outcomes, built forward from the
/// device logic.
pub fn build_scenarios(spec: &ExperimentSpec) -> Result<Built> {
    spec.validate()?;
    let mut outcomes = vec![Outcome {
        fired: BTreeMap::new(),
        enabled: BTreeMap::new(),
        weight: 1.0,
        label: Vec::new(),
    }];
    for src in source_order(spec) {
        let DeviceKind::PhotonSource {
            emit_at,
            output,
            enabled_by,
        } = &src.kind
        else {
            unreachable!()
        };
        let branches = paths(spec, src, output);
        let mut next = Vec::new();
        for o in outcomes {
            let start = match enabled_by {
                None => Some(*emit_at),
                Some(e) => o.fired.get(e).map(|&t| {
                    let lag = dist(&spec.device(e).position, &src.position) / C;
                    (t + lag).max(*emit_at)
                }),
            };
            let Some(t0) = start else {
                next.push(o);
                continue;
            };
            for (k, (terminal, p, len)) in branches.iter().enumerate() {
                let mut b = o.clone();
                b.enabled.insert(src.name.clone(), t0);
                b.weight *= p;
                b.label.push(k + 1);
                if matches!(spec.device(terminal).kind, DeviceKind::Detector { .. }) {
                    fire(spec, &mut b, terminal, t0 + len / C);
                }
                next.push(b);
            }
        }
        outcomes = next;
    }
    let conditional = conditional_detectors(spec);
    let mut scenarios = Vec::new();
    let mut weights = Vec::new();
    let mut labels = Vec::new();
    for o in &outcomes {
        let label = o.label.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(".");
        let items = spec
            .devices
            .iter()
            .filter_map(|d| world_item(d, o, &conditional))
            .collect();
        scenarios.push(ClassicalScenario {
            id: format!("C{label}"),
            items,
            history_start: None,
        });
        weights.push(o.weight);
        labels.push(label);
    }
    let amplitudes = match &spec.amplitudes.initial {
        Some(a) => {
            if a.len() != scenarios.len() {
                return Err(Error::Schema(vec![format!(
                    "amplitudes.initial: {} entries for {} scenarios",
                    a.len(),
                    scenarios.len()
                )]));
            }
            a.clone()
        }
        None => weights,
    };
    Ok(Built {
        scenarios,
        amplitudes: Superposition::new(amplitudes, labels)?,
    })
}

fn shift_trajectory(at: Vec3, shift: Vec3, speed: f64, t: Option<f64>) -> Trajectory {
    let len = (shift[0].powi(2) + shift[1].powi(2) + shift[2].powi(2)).sqrt();
    match t {
        Some(t) if len > 0.0 => Trajectory::shift(at, shift, t, len / speed),
        _ => Trajectory::fixed(at),
    }
}

fn world_item(d: &Device, o: &Outcome, conditional: &HashMap<String, String>) -> Option<WorldItem> {
    match &d.kind {
        DeviceKind::Detector {
            body,
            shift,
            shift_speed,
            ..
        } => {
            let fired = o.fired.get(&d.name).copied();
            let mut changes = Vec::new();
            let initial = match conditional.get(&d.name) {
                Some(src) => {
                    if let Some(&t) = o.enabled.get(src) {
                        changes.push((t, "idle".to_string()));
                    }
                    "off"
                }
                None => "idle",
            };
            if let Some(t) = fired {
                changes.push((t, "fired".to_string()));
            }
            Some(WorldItem {
                name: d.name.clone(),
                body: body.as_ref().map(|b| b.density()).unwrap_or_default(),
                trajectory: shift_trajectory(d.position, *shift, *shift_speed, fired),
                markers: vec![Marker {
                    name: DETECTOR_MARKER.into(),
                    initial: initial.into(),
                    changes,
                }],
            })
        }
        DeviceKind::Reducer {
            body,
            shift,
            shift_speed,
            shift_on,
            fields,
        } => {
            let shifted = shift_on
                .iter()
                .filter_map(|n| o.fired.get(n).copied())
                .reduce(f64::min);
            let mut changes: Vec<(f64, String)> = fields
                .iter()
                .filter_map(|(n, v)| o.fired.get(n).map(|&t| (t, v.clone())))
                .collect();
            changes.sort_by(|a, b| a.0.total_cmp(&b.0));
            Some(WorldItem {
                name: d.name.clone(),
                body: body.density(),
                trajectory: shift_trajectory(d.position, *shift, *shift_speed, shifted),
                markers: vec![Marker {
                    name: REDUCER_MARKER.into(),
                    initial: "none".into(),
                    changes,
                }],
            })
        }
        _ => None,
    }
}

/// Latest time any detection or shift settles, s.
fn settle_time(spec: &ExperimentSpec, built: &Built) -> f64 {
    let mut t = spec.grid.t_min;
    for s in &built.scenarios {
        for it in &s.items {
            if let Some(k) = it.trajectory.knots.last() {
                t = t.max(k.0);
            }
            for m in &it.markers {
                for c in &m.changes {
                    t = t.max(c.0);
                }
            }
        }
    }
    t
}

/// Non-relativistic schedule: one site per gravitating or switching device with bundles
/// from local distinguishability, or one global site when bundling is off.
pub fn build_schedule(spec: &ExperimentSpec, built: &Built) -> Result<CouplingsSchedule> {
    let t = settle_time(spec, built) + 1e-9;
    let n = built.scenarios.len();
    let opts = spec.bundling();
    let mut sites = Vec::new();
    if !spec.policies.bundling {
        sites.push(Site::plain("global", couplings_at(spec, built, t)?));
    } else {
        for d in &spec.devices {
            let (body, tau) = match &d.kind {
                DeviceKind::Detector { body, tau_det, .. } => (body.is_some(), *tau_det),
                DeviceKind::Reducer { .. } => (true, None),
                _ => continue,
            };
            let x = SpacetimePoint::at_time(t, d.position);
            let partition = partition_at(&x, &built.scenarios, &opts);
            let m = partition.len();
            if m < 2 {
                continue;
            }
            let mut e = vec![vec![0.0; m]; m];
            for a in 0..m {
                for b in (a + 1)..m {
                    let (ka, kb) = (partition[a][0], partition[b][0]);
                    let mut v = 0.0;
                    if body {
                        let item = |k: usize| {
                            built.scenarios[k]
                                .items
                                .iter()
                                .find(|i| i.name == d.name)
                                .map(|i| i.density_at(t))
                                .unwrap_or_default()
                        };
                        v += coupling_energy(&item(ka), &item(kb))?;
                    }
                    if let Some(tau) = tau {
                        if detector_state(&built.scenarios[ka], &d.name, t) != detector_state(&built.scenarios[kb], &d.name, t) {
                            v += HBAR / tau;
                        }
                    }
                    e[a][b] = v;
                    e[b][a] = v;
                }
            }
            if e.iter().flatten().any(|&v| v != 0.0) {
                sites.push(Site::bundled(d.name.clone(), partition, e));
            }
        }
    }
    let schedule = CouplingsSchedule {
        epochs: vec![Epoch {
            duration: None,
            splits: Vec::new(),
            sites,
        }],
        final_measurement: spec.policies.final_measurement,
    };
    schedule.validate(n)?;
    Ok(schedule)
}

/// Whole-scenario couplings matrix once every device has settled, detector terms included.
pub fn global_couplings(spec: &ExperimentSpec, built: &Built) -> Result<Vec<Vec<f64>>> {
    couplings_at(spec, built, settle_time(spec, built) + 1e-9)
}

fn couplings_at(spec: &ExperimentSpec, built: &Built, t: f64) -> Result<Vec<Vec<f64>>> {
    let n = built.scenarios.len();
    let densities: Vec<MassDensity> = built.scenarios.iter().map(|s| s.density_at(t)).collect();
    let mut e = couplings_matrix(&densities)?;
    for d in &spec.devices {
        if let DeviceKind::Detector {
            tau_det: Some(tau), ..
        } = &d.kind
        {
            let sc = &built.scenarios;
            for k in 0..n {
                for l in 0..n {
                    if k != l && detector_state(&sc[k], &d.name, t) != detector_state(&sc[l], &d.name, t) {
                        e[k][l] += HBAR / tau;
                    }
                }
            }
        }
    }
    Ok(e)
}

fn detector_state<'a>(s: &'a ClassicalScenario, name: &str, t: f64) -> Option<&'a str> {
    s.items
        .iter()
        .find(|i| i.name == name)
        .and_then(|i| i.markers.first())
        .map(|m| m.value_at(t))
}

/// Couplings field of the experiment's scenarios on its grid.
pub fn build_field_map(spec: &ExperimentSpec, built: &Built) -> Result<FieldMap> {
    FieldMap::build(&built.scenarios, &spec.grid(), &spec.bundling(), spec.policies.evaluator)
}

// ---------------------------------------------------------------------------------------
// Built-in experiments

fn dev(name: &str, x: f64, kind: DeviceKind) -> Device {
    Device {
        name: name.into(),
        position: [x, 0.0, 0.0],
        kind,
    }
}

fn source(output: &str, enabled_by: Option<&str>, emit_at: f64) -> DeviceKind {
    DeviceKind::PhotonSource {
        emit_at,
        output: output.into(),
        enabled_by: enabled_by.map(Into::into),
    }
}

fn splitter(ratio: f64, transmit: &str, reflect: &str) -> DeviceKind {
    DeviceKind::BeamSplitter {
        ratio,
        transmit: transmit.into(),
        reflect: reflect.into(),
    }
}

/// Detector shifting a 1 µm water cube by 0.5 µm.
fn mass_detector() -> DeviceKind {
    DeviceKind::Detector {
        mode: DetectorMode::MassShift,
        body: Some(BodySpec::Cube {
            side: 1e-6,
            density: WATER_DENSITY,
        }),
        shift: [0.5e-6, 0.0, 0.0],
        shift_speed: default_shift_speed(),
        tau_det: None,
        triggers: Vec::new(),
    }
}

fn mdd_detector(triggers: &[&str]) -> DeviceKind {
    DeviceKind::Detector {
        mode: DetectorMode::MddConserving,
        body: None,
        shift: [0.0; 3],
        shift_speed: default_shift_speed(),
        tau_det: None,
        triggers: triggers.iter().map(|s| s.to_string()).collect(),
    }
}

fn base(name: &str, description: &str, x_min: f64, x_max: f64, devices: Vec<Device>) -> ExperimentSpec {
    ExperimentSpec {
        schema: SCHEMA_ID.into(),
        name: name.into(),
        description: description.into(),
        duration: 6.0,
        grid: GridSpec {
            dx: 0.25e-6,
            dt: 0.05,
            x_min,
            x_max,
            t_min: 0.0,
        },
        devices,
        amplitudes: AmplitudeSpec::default(),
        policies: Policies::default(),
    }
}

/// Photon split onto one mass-shift detector or an absorber; `p` is the detection share.
fn one_detector(name: &str, description: &str, p: f64) -> ExperimentSpec {
    base(
        name,
        description,
        -1.5e-6,
        2.5e-6,
        vec![
            dev("source", -1.0e-6, source("bs", None, 0.05)),
            dev("bs", -0.5e-6, splitter(1.0 - p, "dump", "det")),
            dev("dump", 2.0e-6, DeviceKind::Absorber {}),
            dev("det", 0.0, mass_detector()),
        ],
    )
}

/// Photon split into three equal beams onto three mass-shift detectors.
fn three_detectors(name: &str, description: &str, bundling: bool) -> ExperimentSpec {
    let mut s = base(
        name,
        description,
        -1.5e-6,
        22.0e-6,
        vec![
            dev("source", -1.0e-6, source("bs1", None, 0.05)),
            dev("bs1", -0.5e-6, splitter(1.0 / 3.0, "det1", "bs2")),
            dev("bs2", 5.0e-6, splitter(0.5, "det2", "det3")),
            dev("det1", 0.0, mass_detector()),
            dev("det2", 10.0e-6, mass_detector()),
            dev("det3", 20.0e-6, mass_detector()),
        ],
    );
    s.policies.bundling = bundling;
    s
}

fn star(n: usize) -> Result<ExperimentSpec> {
    if n < 2 {
        return Err(Error::invalid("a star needs at least 2 branches"));
    }
    let mut devices = vec![dev("source", -4.0e-6, source("bs1", None, 0.05))];
    let dets: Vec<String> = (1..=n).map(|i| format!("det{i}")).collect();
    for i in 1..n {
        let next = if i + 1 < n { format!("bs{}", i + 1) } else { dets[n - 1].clone() };
        devices.push(dev(
            &format!("bs{i}"),
            -3.0e-6,
            splitter(1.0 / (n - i + 1) as f64, &dets[i - 1], &next),
        ));
    }
    for d in &dets {
        devices.push(dev(d, -2.0e-6, mdd_detector(&[])));
    }
    // The second detector shifts the reducer; the others apply distinct fields.
    let fields = dets
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != 1)
        .map(|(i, d)| (d.clone(), format!("field{}", i + 1)))
        .collect();
    devices.push(dev(
        "reducer",
        0.0,
        DeviceKind::Reducer {
            body: BodySpec::Cube {
                side: 1e-6,
                density: WATER_DENSITY,
            },
            shift: [0.5e-6, 0.0, 0.0],
            shift_speed: default_shift_speed(),
            shift_on: vec![dets[1].clone()],
            fields,
        },
    ));
    let mut s = base(
        &format!("star-{n}"),
        "Star coupling: one scenario shifts the reducer mass, the others only switch fields",
        -4.5e-6,
        2.5e-6,
        devices,
    );
    s.policies.radius = Some(1e-6);
    Ok(s)
}

/// A canonical thought-experiment spec by name.
pub fn builtin(name: &str) -> Result<ExperimentSpec> {
    let spec = match name {
        "fig1" => one_detector("fig1", "Photon detected or not by a detector with a shifting rigid mass", 0.5),
        "fig4" => one_detector("fig4", "Shifted versus unshifted rigid mass after a 50/50 split", 0.5),
        "fig2" => three_detectors("fig2", "Three equal beams, one global couplings matrix", false),
        "fig13" => three_detectors("fig13", "Three equal beams, couplings bundled per detector", true),
        "fig8" => base(
            "fig8",
            "Two independent one-detector experiments far apart",
            -1.5e-6,
            32.0e-6,
            vec![
                dev("source_l", -1.0e-6, source("bs_l", None, 0.05)),
                dev("bs_l", -0.5e-6, splitter(0.5, "dump_l", "det_l")),
                dev("dump_l", 2.0e-6, DeviceKind::Absorber {}),
                dev("det_l", 0.0, mass_detector()),
                dev("source_r", 29.0e-6, source("bs_r", None, 0.05)),
                dev("bs_r", 29.5e-6, splitter(0.5, "dump_r", "det_r")),
                dev("dump_r", 31.5e-6, DeviceKind::Absorber {}),
                dev("det_r", 30.0e-6, mass_detector()),
            ],
        ),
        "fig16" => base(
            "fig16",
            "Second experiment performed only if the first detector fires",
            -1.5e-6,
            22.0e-6,
            vec![
                dev("source1", -1.0e-6, source("bs1", None, 0.05)),
                dev("bs1", -0.5e-6, splitter(0.2, "dump1", "det1")),
                dev("dump1", 2.0e-6, DeviceKind::Absorber {}),
                dev("det1", 0.0, mass_detector()),
                dev("source2", 18.5e-6, source("bs2", Some("det1"), 0.05)),
                dev("bs2", 19.0e-6, splitter(0.5, "dump2", "det2")),
                dev("dump2", 21.5e-6, DeviceKind::Absorber {}),
                dev("det2", 20.0e-6, mass_detector()),
            ],
        ),
        "fig21" => {
            let mut s = star(3)?;
            s.name = "fig21".into();
            s.description = "Reducer: detector 2 shifts the mass, detectors 1 and 3 apply fields".into();
            s
        }
        "epr-bohm" => {
            let mut s = base(
                "epr-bohm",
                "Spin pair: left and right outcomes recorded by switch-only detectors",
                -1.5e-6,
                42.0e-6,
                vec![
                    dev("source", 20.0e-6, source("bs", None, 0.05)),
                    dev("bs", 20.0e-6, splitter(0.5, "left_up", "left_down")),
                    dev("left_up", 0.0, mdd_detector(&["right_down"])),
                    dev("left_down", 0.5e-6, mdd_detector(&["right_up"])),
                    dev("right_up", 40.0e-6, mdd_detector(&[])),
                    dev("right_down", 40.5e-6, mdd_detector(&[])),
                ],
            );
            for d in s.devices.iter_mut() {
                if let DeviceKind::Detector { tau_det, .. } = &mut d.kind {
                    *tau_det = Some(1.0);
                }
            }
            s.policies.radius = Some(1e-6);
            s
        }
        "star-n" => star(3)?,
        other => match other.strip_prefix("star-").and_then(|n| n.parse::<usize>().ok()) {
            Some(n) => star(n)?,
            None => {
                return Err(Error::invalid(format!(
                    "unknown built-in {other:?}; known: {}",
                    BUILTINS.join(", ")
                )))
            }
        },
    };
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------------------
// Persistence

/// One persisted run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec_hash: String,
    pub engine: String,
    pub engine_version: String,
    pub seed: u64,
    pub run: u64,
    pub events: Vec<ReductionEvent>,
    pub outcome: String,
    pub final_state: Vec<f64>,
}

/// Append records, one JSON object per line.
pub fn persist_runs(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Read a run store; unreadable lines are skipped and counted.
pub fn load_runs(path: &Path) -> Result<(Vec<RunRecord>, usize)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut skipped = 0;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(e) => {
                log::warn!("{}:{}: skipping corrupted run record: {e}", path.display(), i + 1);
                skipped += 1;
            }
        }
    }
    Ok((out, skipped))
}

/// Write any serializable rows as JSON lines (wave traces and the like).
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrequencyRow {
    state: String,
    probability: f64,
    stderr: f64,
}

/// `state,probability,stderr`.
pub fn write_frequencies_csv<W: Write>(out: W, freqs: &[Frequency]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for f in freqs {
        w.serialize(FrequencyRow {
            state: f.state.clone(),
            probability: f.probability,
            stderr: f.stderr,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_frequencies(path: &Path, freqs: &[Frequency]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_frequencies_csv(f, freqs).map_err(|e| csv_err(path, e))
}

/// Rows `(state, probability, stderr)` of a frequency table.
pub fn import_frequencies(path: &Path) -> Result<Vec<(String, f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize::<FrequencyRow>()
        .map(|row| row.map(|x| (x.state, x.probability, x.stderr)).map_err(|e| csv_err(path, e)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldRow {
    pub x1: f64,
    pub ct: f64,
    pub pair: String,
    pub value: f64,
}

/// Field map rows for every cell and every bundle pair (pair named by member scenarios).
pub fn field_rows(map: &FieldMap, labels: &[String], only: Option<(usize, usize)>) -> Vec<FieldRow> {
    let name = |b: &[usize]| b.iter().map(|&i| labels[i].as_str()).collect::<Vec<_>>().join("+");
    let mut rows = Vec::new();
    for (cell, cf) in map.cells.iter().enumerate() {
        let x = map.grid.center(cell);
        let m = cf.partition.len();
        for a in 0..m {
            for b in (a + 1)..m {
                if let Some((k, l)) = only {
                    let (pa, pb) = (&cf.partition[a], &cf.partition[b]);
                    let hit = (pa.contains(&k) && pb.contains(&l)) || (pa.contains(&l) && pb.contains(&k));
                    if !hit {
                        continue;
                    }
                }
                rows.push(FieldRow {
                    x1: x.x[0],
                    ct: x.ct,
                    pair: format!("{}|{}", name(&cf.partition[a]), name(&cf.partition[b])),
                    value: cf.value(a, b),
                });
            }
        }
    }
    rows
}

pub fn write_csv_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn export_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_rows(f, rows).map_err(|e| csv_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleRow {
    pub x1: f64,
    pub ct: f64,
    pub partition: String,
    pub amplitudes: String,
}

/// Bundle map rows: partition label and bundled amplitudes per cell.
pub fn bundle_rows(map: &FieldMap, amplitudes: &Superposition) -> Vec<BundleRow> {
    map.cells
        .iter()
        .enumerate()
        .map(|(cell, cf)| {
            let x = map.grid.center(cell);
            let label = cf
                .partition
                .iter()
                .map(|b| b.iter().map(|&i| amplitudes.labels[i].as_str()).collect::<Vec<_>>().join(","))
                .collect::<Vec<_>>()
                .join("|");
            let amps = cf
                .partition
                .iter()
                .map(|b| format!("{}", amplitudes.weight(b)))
                .collect::<Vec<_>>()
                .join(";");
            BundleRow {
                x1: x.x[0],
                ct: x.ct,
                partition: label,
                amplitudes: amps,
            }
        })
        .collect()
}
