use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;

use gravred::corrsig::{
    attenuated_probs, design_window_check, front_cells, signaling_check, correlation_gate, signaling_preset,
    CorrelatedEvent, SignalingReport,
};
use gravred::dpcore::{enumerate_tree, final_probabilities, run_monte_carlo, CorrelationPolicy, DecayTree, Edge, Frequency};
use gravred::massmodel::{
    coupling_energy_with, decay_time, water_sphere, CouplingOptions, MassDensity, Method, Primitive,
};
use gravred::redwave::{replay_waves, simulate_waves, ImpactArea, WaveOptions};
use gravred::scenario::{
    build_field_map, build_scenarios, build_schedule, bundle_rows, export_csv, export_frequencies, field_rows,
    global_couplings, persist_runs, resolve_spec, save_spec, ExperimentSpec, RunRecord,
};
use log::{info, warn};
use serde::Serialize;

use crate::{
    CouplingsArgs, DesignArgs, Engine, FieldMapArgs, Format, GridFlags, MethodArg, PredictArgs, Preset, SignalingArgs,
    SimulateArgs, SpecArgs, TreeArgs,
};

#[derive(Debug)]
pub enum Failure {
    Input(String),
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Input(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

type Res<T> = Result<T, Failure>;

/// What a finished command produced.
#[derive(Debug)]
pub struct CommandResult {
    pub summary: String,
    pub files: Vec<PathBuf>,
    /// Set when a requested check did not hold.
    pub assertion_failed: Option<String>,
}

impl CommandResult {
    pub fn exit_code(&self) -> u8 {
        if self.assertion_failed.is_some() {
            4
        } else {
            0
        }
    }
}

pub struct Output {
    pub dir: PathBuf,
    pub format: Format,
}

impl Output {
    fn path(&self, stem: &str, ext: &str) -> Res<PathBuf> {
        fs::create_dir_all(&self.dir).map_err(|e| Failure::Input(format!("cannot create {}: {e}", self.dir.display())))?;
        Ok(self.dir.join(format!("{stem}.{ext}")))
    }

    /// Rows as `<stem>.csv`, or the JSON value as `<stem>.json`.
    fn table<T: Serialize, J: Serialize>(&self, stem: &str, rows: &[T], json: &J) -> Res<PathBuf> {
        match self.format {
            Format::Csv => {
                let p = self.path(stem, "csv")?;
                export_csv(&p, rows)?;
                Ok(p)
            }
            Format::Json => self.json(stem, json),
        }
    }

    fn json<J: Serialize>(&self, stem: &str, value: &J) -> Res<PathBuf> {
        let p = self.path(stem, "json")?;
        let f = File::create(&p).map_err(|e| Failure::Input(format!("cannot write {}: {e}", p.display())))?;
        serde_json::to_writer_pretty(BufWriter::new(f), value)
            .map_err(|e| Failure::Input(format!("cannot write {}: {e}", p.display())))?;
        Ok(p)
    }
}

fn load(spec: &str) -> Res<ExperimentSpec> {
    let s = resolve_spec(spec)?;
    s.validate()?;
    Ok(s)
}

fn apply_grid(spec: &mut ExperimentSpec, g: &GridFlags) -> Res<()> {
    if let Some([dx, dt, extent]) = g.grid {
        spec.grid.dx = dx;
        spec.grid.dt = dt;
        spec.grid.x_max = spec.grid.x_min + extent;
    }
    if let Some(dt) = g.dt {
        spec.grid.dt = dt;
    }
    spec.validate()?;
    Ok(())
}

fn wave_options(spec: &ExperimentSpec, dtr: Option<f64>) -> WaveOptions {
    let grid = spec.grid();
    let mut opts = WaveOptions::for_grid(&grid);
    if let Some(d) = dtr {
        opts.dtr = d;
    }
    opts.root_lead = spec.policies.root_lead;
    opts.devices = spec.device_cells();
    opts.final_measurement = spec.policies.final_measurement;
    opts
}

fn fmt_probs<'a>(it: impl IntoIterator<Item = (&'a str, f64)>) -> String {
    it.into_iter().map(|(l, p)| format!("{l}={p:.6}")).collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------------------------
// couplings

#[derive(Serialize)]
struct CouplingRow {
    k: String,
    l: String,
    energy_j: f64,
    /// Empty when the pair never decays.
    tau_s: Option<f64>,
}

#[derive(Serialize)]
struct CouplingTable<'a> {
    source: &'a str,
    labels: &'a [String],
    energy_j: &'a [Vec<f64>],
    tau_s: Vec<Vec<Option<f64>>>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn couplings(out: &Output, a: CouplingsArgs) -> Res<CommandResult> {
    let (source, labels, e) = match (&a.spec, a.preset) {
        (Some(name), _) => {
            let spec = load(name)?;
            let built = build_scenarios(&spec)?;
            (spec.name.clone(), built.amplitudes.labels.clone(), global_couplings(&spec, &built)?)
        }
        (None, Some(p)) => {
            if !(a.diameter > 0.0 && a.diameter.is_finite()) || !(a.density > 0.0 && a.density.is_finite()) {
                return Err(Failure::Input("diameter and density must be positive".into()));
            }
            let sep = match p {
                Preset::IdenticalPair => 0.0,
                _ => a.separation.unwrap_or(5.0 * a.diameter),
            };
            if !sep.is_finite() || sep < 0.0 {
                return Err(Failure::Input("separation must be non-negative".into()));
            }
            let sphere = match p {
                Preset::WaterSphere => water_sphere([0.0; 3], a.diameter),
                _ => {
                    let r = 0.5 * a.diameter;
                    let mass = a.density * 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
                    Primitive::sphere([0.0; 3], r, mass)
                }
            };
            let here = MassDensity::new(vec![sphere]);
            let there = here.translated([sep, 0.0, 0.0]);
            let opts = CouplingOptions {
                method: match a.method {
                    MethodArg::Analytic => Method::Analytic,
                    MethodArg::Quadrature => Method::Quadrature,
                },
                ..CouplingOptions::default()
            };
            let v = coupling_energy_with(&here, &there, opts)?;
            let name = match p {
                Preset::WaterSphere => "water-sphere",
                Preset::SpherePair => "sphere-pair",
                Preset::IdenticalPair => "identical-pair",
            };
            info!("{name}: diameter {} m, separation {sep} m", a.diameter);
            (name.to_string(), vec!["here".into(), "there".into()], vec![vec![0.0, v], vec![v, 0.0]])
        }
        (None, None) => unreachable!("clap requires a spec or a preset"),
    };
    let taus: Vec<Vec<f64>> = e
        .iter()
        .map(|row| row.iter().map(|&v| decay_time(v)).collect::<gravred::Result<Vec<_>>>())
        .collect::<gravred::Result<_>>()?;
    let mut rows = Vec::new();
    for (k, lk) in labels.iter().enumerate() {
        for (l, ll) in labels.iter().enumerate() {
            rows.push(CouplingRow {
                k: lk.clone(),
                l: ll.clone(),
                energy_j: e[k][l],
                tau_s: finite(taus[k][l]),
            });
        }
    }
    let json = CouplingTable {
        source: &source,
        labels: &labels,
        energy_j: &e,
        tau_s: taus.iter().map(|r| r.iter().map(|&v| finite(v)).collect()).collect(),
    };
    let file = out.table("couplings", &rows, &json)?;
    let max_e = e.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    let min_tau = taus.iter().flatten().fold(f64::INFINITY, |m, &v| m.min(v));
    Ok(CommandResult {
        summary: format!(
            "couplings {source}: {} states, max E = {max_e:.6e} J, shortest tau = {min_tau:.6e} s",
            labels.len()
        ),
        files: vec![file],
        assertion_failed: None,
    })
}

// ---------------------------------------------------------------------------------------
// tree

#[derive(Serialize)]
struct LeafRow {
    state: String,
    probability: f64,
}

#[derive(Serialize)]
struct NodeRow {
    node: usize,
    parent: Option<usize>,
    edge: String,
    probability: f64,
    reach: f64,
    amplitudes: String,
    terminal: bool,
}

#[derive(Serialize)]
struct TreeDoc<'a> {
    experiment: &'a str,
    policy: String,
    complete: bool,
    leaves: &'a [LeafRow],
    tree: &'a DecayTree,
}

fn edge_text(e: &Option<Edge>) -> String {
    let ids = |v: &[usize]| v.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join("+");
    match e {
        None => String::new(),
        Some(Edge::Reduction { site, loser, winner }) => format!("{site}: {} -> {}", ids(loser), ids(winner)),
        Some(Edge::Measurement { outcome }) => format!("measure {}", outcome + 1),
        Some(Edge::Cascade { outcome }) => format!("cascade {}", outcome + 1),
    }
}

pub fn tree(out: &Output, a: TreeArgs) -> Res<CommandResult> {
    let spec = load(&a.spec)?;
    let built = build_scenarios(&spec)?;
    let schedule = build_schedule(&spec, &built)?;
    let tree = enumerate_tree(&built.amplitudes, &schedule, a.policy)?;
    let leaves: Vec<LeafRow> = final_probabilities(&tree)?
        .into_iter()
        .map(|(state, probability)| LeafRow { state, probability })
        .collect();
    let mut files = Vec::new();
    match out.format {
        Format::Csv => {
            let nodes: Vec<NodeRow> = tree
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| NodeRow {
                    node: i,
                    parent: n.parent,
                    edge: edge_text(&n.edge),
                    probability: n.probability,
                    reach: n.reach,
                    amplitudes: n.state.amplitudes.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "),
                    terminal: n.terminal.is_some(),
                })
                .collect();
            let p = out.path("leaves", "csv")?;
            export_csv(&p, &leaves)?;
            files.push(p);
            let p = out.path("tree", "csv")?;
            export_csv(&p, &nodes)?;
            files.push(p);
        }
        Format::Json => {
            files.push(out.json(
                "tree",
                &TreeDoc {
                    experiment: &spec.name,
                    policy: a.policy.to_string(),
                    complete: tree.complete,
                    leaves: &leaves,
                    tree: &tree,
                },
            )?);
        }
    }
    Ok(CommandResult {
        summary: format!(
            "tree {} ({}): {} nodes, final {}",
            spec.name,
            a.policy,
            tree.nodes.len(),
            fmt_probs(leaves.iter().map(|l| (l.state.as_str(), l.probability)))
        ),
        files,
        assertion_failed: None,
    })
}

// ---------------------------------------------------------------------------------------
// simulate

pub fn simulate(out: &Output, a: SimulateArgs) -> Res<CommandResult> {
    let mut spec = load(&a.spec)?;
    apply_grid(&mut spec, &a.grid)?;
    let runs = a.runs.unwrap_or(spec.policies.runs);
    let seed = a.seed.unwrap_or(spec.policies.seed);
    let built = build_scenarios(&spec)?;
    let version = env!("CARGO_PKG_VERSION").to_string();
    let hash = spec.hash();
    let record = |run: u64, events, outcome: &str, final_state: &[f64]| RunRecord {
        spec_hash: hash.clone(),
        engine: a.engine.name().into(),
        engine_version: version.clone(),
        seed,
        run,
        events,
        outcome: outcome.into(),
        final_state: final_state.to_vec(),
    };
    let (freqs, records): (Vec<Frequency>, Vec<RunRecord>) = match a.engine {
        Engine::Nonrel => {
            let schedule = build_schedule(&spec, &built)?;
            let mc = run_monte_carlo(&built.amplitudes, &schedule, runs, seed, a.policy)?;
            let recs = mc
                .runs
                .into_iter()
                .map(|r| record(r.run, r.events, &r.outcome, &r.final_state.amplitudes))
                .collect();
            (mc.frequencies, recs)
        }
        Engine::Waves => {
            if a.policy != CorrelationPolicy::None {
                warn!("the waves engine runs without correlations; --policy {} ignored", a.policy);
            }
            let map = build_field_map(&spec, &built)?;
            let opts = wave_options(&spec, a.dtr);
            let (freqs, wave_runs) = simulate_waves(&map, &built.amplitudes, &opts, runs, seed)?;
            let recs = wave_runs
                .into_iter()
                .map(|r| {
                    let t = r.trace;
                    record(t.run, t.events, &t.outcome, &t.final_state.amplitudes)
                })
                .collect();
            (freqs, recs)
        }
    };
    let mut files = Vec::new();
    match out.format {
        Format::Csv => {
            let p = out.path("frequencies", "csv")?;
            export_frequencies(&p, &freqs)?;
            files.push(p);
        }
        Format::Json => files.push(out.json("frequencies", &freqs)?),
    }
    let store = out.path("runs", "jsonl")?;
    if store.exists() {
        fs::remove_file(&store).map_err(|e| Failure::Input(format!("cannot replace {}: {e}", store.display())))?;
    }
    persist_runs(&store, &records)?;
    files.push(store);
    let table = freqs
        .iter()
        .map(|f| format!("{}={:.4}±{:.4}", f.state, f.probability, f.stderr))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(CommandResult {
        summary: format!("simulate {} {}: {runs} runs seed {seed}, {table}", spec.name, a.engine.name()),
        files,
        assertion_failed: None,
    })
}

// ---------------------------------------------------------------------------------------
// field-map

#[derive(Serialize)]
struct IntegratedRow {
    k: String,
    l: String,
    integrated: f64,
}

#[derive(Serialize)]
struct FieldDoc<'a> {
    experiment: &'a str,
    evaluator: &'a gravred::relfield::Evaluator,
    grid: &'a gravred::relfield::Grid,
    integrated: &'a [IntegratedRow],
    field: &'a [gravred::scenario::FieldRow],
    bundles: &'a [gravred::scenario::BundleRow],
}

pub fn field_map(out: &Output, a: FieldMapArgs) -> Res<CommandResult> {
    let mut spec = load(&a.spec)?;
    if let Some(ev) = a.evaluator {
        spec.policies.evaluator = ev;
    }
    apply_grid(&mut spec, &a.grid)?;
    let built = build_scenarios(&spec)?;
    let labels = &built.amplitudes.labels;
    let only = match &a.pair {
        Some(p) => {
            let idx = |l: &String| {
                built
                    .amplitudes
                    .index_of(l)
                    .ok_or_else(|| Failure::Input(format!("no scenario labelled {l:?} (have {})", labels.join(", "))))
            };
            let (k, l) = (idx(&p.0)?, idx(&p.1)?);
            if k == l {
                return Err(Failure::Input("--pair needs two different scenarios".into()));
            }
            Some((k, l))
        }
        None => None,
    };
    let map = build_field_map(&spec, &built)?;
    let rows = field_rows(&map, labels, only);
    let bundles = bundle_rows(&map, &built.amplitudes);
    let pairs: Vec<(usize, usize)> = match only {
        Some(p) => vec![p],
        None => (0..labels.len()).flat_map(|k| ((k + 1)..labels.len()).map(move |l| (k, l))).collect(),
    };
    let integrated: Vec<IntegratedRow> = pairs
        .iter()
        .map(|&(k, l)| IntegratedRow {
            k: labels[k].clone(),
            l: labels[l].clone(),
            integrated: map.integrated(k, l),
        })
        .collect();
    let mut files = Vec::new();
    match out.format {
        Format::Csv => {
            let p = out.path("field_map", "csv")?;
            export_csv(&p, &rows)?;
            files.push(p);
            let p = out.path("bundles", "csv")?;
            export_csv(&p, &bundles)?;
            files.push(p);
            let p = out.path("integrated", "csv")?;
            export_csv(&p, &integrated)?;
            files.push(p);
        }
        Format::Json => files.push(out.json(
            "field_map",
            &FieldDoc {
                experiment: &spec.name,
                evaluator: &spec.policies.evaluator,
                grid: &map.grid,
                integrated: &integrated,
                field: &rows,
                bundles: &bundles,
            },
        )?),
    }
    let nonzero = rows.iter().filter(|r| r.value != 0.0).count();
    let ints = integrated
        .iter()
        .map(|r| format!("{}|{}={:.6e}", r.k, r.l, r.integrated))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(CommandResult {
        summary: format!(
            "field-map {} {:?}: {} cells, {nonzero} nonzero entries, integrated {ints}",
            spec.name,
            spec.policies.evaluator,
            map.grid.len()
        )
        .to_lowercase(),
        files,
        assertion_failed: None,
    })
}

// ---------------------------------------------------------------------------------------
// check-signaling

#[derive(Serialize)]
struct SignalingRow {
    case: String,
    pass: bool,
    gate_allows: bool,
    relevant: usize,
    offending: usize,
    impact: usize,
    space_like: usize,
    fronts: usize,
}

#[derive(Serialize)]
struct SignalingDoc<'a> {
    case: &'a str,
    gate_allows: bool,
    report: &'a SignalingReport,
    offending_points: Vec<(f64, f64)>,
}

pub fn check_signaling(out: &Output, a: SignalingArgs) -> Res<CommandResult> {
    let (case, grid, report, gate) = if let Some(name) = &a.preset {
        let p = signaling_preset(name)?;
        (name.clone(), p.grid, p.check(), p.gate())
    } else {
        let name = a.spec.as_deref().expect("clap requires a preset or a spec");
        let mut spec = load(name)?;
        apply_grid(&mut spec, &a.grid)?;
        let seed = a.seed.unwrap_or(spec.policies.seed);
        let built = build_scenarios(&spec)?;
        let map = build_field_map(&spec, &built)?;
        let opts = wave_options(&spec, a.dtr);
        let (run, waves) = replay_waves(&map, &built.amplitudes, &opts, seed, a.run)?;
        let (si, ci) = (a.stim.unwrap(), a.corr.unwrap());
        let n = run.events.len();
        if si >= n || ci >= n || si >= ci {
            return Err(Failure::Input(format!(
                "need stim < corr < {n} (the history has {n} wave events), got stim {si}, corr {ci}"
            )));
        }
        let (stim, corr) = (&run.events[si], &run.events[ci]);
        let grid = map.grid;
        let impact = match &waves[corr.spawned].impact {
            ImpactArea::All => (0..grid.len()).collect(),
            ImpactArea::Cells(c) => c.clone(),
        };
        let event = CorrelatedEvent {
            x: corr.x,
            t_r: corr.t_r,
            impact,
        };
        let earlier: Vec<_> = waves.iter().filter(|w| w.id < corr.spawned).collect();
        let fronts = front_cells(&earlier, corr.t_r, opts.dtr, &grid);
        let report = signaling_check(&grid, &stim.x, &event, &fronts);
        let gate = correlation_gate(&grid, &waves[stim.spawned], &event, &fronts, opts.dtr);
        (format!("{} seed {seed} run {} events {si}->{ci}", spec.name, a.run), grid, report, gate)
    };
    let row = SignalingRow {
        case: case.clone(),
        pass: report.pass,
        gate_allows: gate,
        relevant: report.relevant,
        offending: report.offending.len(),
        impact: report.impact,
        space_like: report.space_like,
        fronts: report.fronts,
    };
    let doc = SignalingDoc {
        case: &case,
        gate_allows: gate,
        report: &report,
        offending_points: report
            .offending
            .iter()
            .map(|&c| {
                let x = grid.center(c);
                (x.x[0], x.ct)
            })
            .collect(),
    };
    let file = out.table("signaling", &[row], &doc)?;
    let verdict = if report.pass { "pass" } else { "FAIL" };
    Ok(CommandResult {
        summary: format!(
            "check-signaling {case}: {verdict}, {} of {} relevant cells outside the stimulating light-cone, gate {}",
            report.offending.len(),
            report.relevant,
            if gate { "allows" } else { "denies" }
        ),
        files: vec![file],
        assertion_failed: (!report.pass).then(|| format!("{case} violates the signaling constraint")),
    })
}

// ---------------------------------------------------------------------------------------
// predict

#[derive(Serialize)]
struct PredictionRow {
    d: f64,
    state: String,
    probability: f64,
}

pub fn predict(out: &Output, a: PredictArgs) -> Res<CommandResult> {
    let spec = load(&a.spec)?;
    let built = build_scenarios(&spec)?;
    let schedule = build_schedule(&spec, &built)?;
    let tree = enumerate_tree(&built.amplitudes, &schedule, CorrelationPolicy::FirstWinner)?;
    let limit: Vec<f64> = final_probabilities(&tree)?.into_iter().map(|(_, p)| p).collect();
    let born = &built.amplitudes.amplitudes;
    if limit.len() != born.len() {
        return Err(Failure::Numeric("correlated limit does not cover every state".into()));
    }
    let ds: Vec<f64> = match a.sweep {
        Some((start, _, 1)) => vec![start],
        Some((start, stop, n)) => (0..n).map(|i| start + (stop - start) * i as f64 / (n - 1) as f64).collect(),
        None => a.d.clone(),
    };
    let mut rows = Vec::new();
    for &d in &ds {
        let p = attenuated_probs(born, &limit, d, a.tau_red)?;
        for (i, v) in p.into_iter().enumerate() {
            rows.push(PredictionRow {
                d,
                state: built.amplitudes.labels[i].clone(),
                probability: v,
            });
        }
    }
    let file = out.table("predictions", &rows, &rows)?;
    let n = born.len();
    let first = fmt_probs(rows[..n].iter().map(|r| (r.state.as_str(), r.probability)));
    let last = fmt_probs(rows[rows.len() - n..].iter().map(|r| (r.state.as_str(), r.probability)));
    Ok(CommandResult {
        summary: format!(
            "predict {}: {} distances, tau_red {} s, d={}: {first}; d={}: {last}",
            spec.name,
            ds.len(),
            a.tau_red,
            ds[0],
            ds[ds.len() - 1]
        ),
        files: vec![file],
        assertion_failed: None,
    })
}

// ---------------------------------------------------------------------------------------
// design

pub fn design(out: &Output, a: DesignArgs) -> Res<CommandResult> {
    let r = design_window_check(a.tau_det, a.tau_red, a.d, a.margin)?;
    let file = out.table("design", std::slice::from_ref(&r), &r)?;
    let mut why = Vec::new();
    if !r.detector_ok {
        why.push("reducer is not fast enough against the detector");
    }
    if !r.signaling_ok {
        why.push("reducer is not slow enough against light travel");
    }
    Ok(CommandResult {
        summary: format!(
            "design: {}, 1/tau_det {:.3e} 1/tau_red {:.3e} c/d {:.3e} s^-1 (margin {})",
            if r.pass { "pass" } else { "FAIL" },
            r.detector_rate,
            r.reducer_rate,
            r.light_rate,
            r.margin
        ),
        files: vec![file],
        assertion_failed: (!r.pass).then(|| why.join("; ")),
    })
}

// ---------------------------------------------------------------------------------------
// spec

pub fn spec(out: &Output, a: SpecArgs) -> Res<CommandResult> {
    let spec = load(&a.spec)?;
    let p = out.path(&spec.name, "toml")?;
    save_spec(&spec, &p)?;
    Ok(CommandResult {
        summary: format!("spec {}: {} devices, hash {}", spec.name, spec.devices.len(), spec.hash()),
        files: vec![p],
        assertion_failed: None,
    })
}
