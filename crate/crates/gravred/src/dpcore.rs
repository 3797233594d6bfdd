//! Non-relativistic stochastic reduction.
//!
//! A superposition of scenarios decays pair by pair. Within a piecewise-constant epoch
//! the ordered pair `k → l` fires at rate `(E_kl/ħ)|c_l|²`, so the process is a
//! time-inhomogeneous Markov jump process. [`enumerate_tree`] integrates the competing
//! exponentials exactly; [`run_monte_carlo`] samples trajectories with the same rates.
//!
//! Couplings act between *bundles*: each [`Site`] partitions the scenarios into blocks
//! that are indistinguishable there. A plain non-relativistic run is a single site with
//! singleton blocks.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::HBAR;
use crate::error::{Error, Result};

/// Tolerance on `Σ|c|² = 1`.
pub const NORM_TOL: f64 = 1e-12;

/// Largest total event probability allowed in one discrete step.
pub const MAX_STEP_PROBABILITY: f64 = 0.1;

const MAX_TREE_NODES: usize = 2_000_000;

/// Squared amplitudes over labelled scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Superposition {
    pub amplitudes: Vec<f64>,
    pub labels: Vec<String>,
}

impl Superposition {
    pub fn new(amplitudes: Vec<f64>, labels: Vec<String>) -> Result<Self> {
        let s = Superposition { amplitudes, labels };
        s.validate()?;
        Ok(s)
    }

    /// Scenarios labelled `1..=n`.
    pub fn numbered(amplitudes: Vec<f64>) -> Result<Self> {
        let labels = (1..=amplitudes.len()).map(|i| i.to_string()).collect();
        Self::new(amplitudes, labels)
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::numbered(vec![1.0 / n as f64; n])
    }

    pub fn validate(&self) -> Result<()> {
        if self.amplitudes.is_empty() {
            return Err(Error::invalid("superposition has no states"));
        }
        if self.amplitudes.len() != self.labels.len() {
            return Err(Error::invalid(format!(
                "{} amplitudes but {} labels",
                self.amplitudes.len(),
                self.labels.len()
            )));
        }
        for (i, a) in self.amplitudes.iter().enumerate() {
            if !(0.0..=1.0 + NORM_TOL).contains(a) {
                return Err(Error::invalid(format!("|c_{}|² = {a} outside [0, 1]", i + 1)));
            }
        }
        let sum: f64 = self.amplitudes.iter().sum();
        if (sum - 1.0).abs() > NORM_TOL {
            return Err(Error::invalid(format!("squared amplitudes sum to {sum}, expected 1")));
        }
        for (i, l) in self.labels.iter().enumerate() {
            if self.labels[..i].contains(l) {
                return Err(Error::invalid(format!("duplicate label {l:?}")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    /// Indices with positive weight.
    pub fn survivors(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.amplitudes[i] > 0.0).collect()
    }

    pub fn weight(&self, members: &[usize]) -> f64 {
        members.iter().map(|&i| self.amplitudes[i]).sum()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    fn collapsed(&self, winner: usize) -> Superposition {
        let mut amplitudes = vec![0.0; self.dim()];
        amplitudes[winner] = 1.0;
        Superposition {
            amplitudes,
            labels: self.labels.clone(),
        }
    }

    fn norm_error(&self) -> f64 {
        (self.amplitudes.iter().sum::<f64>() - 1.0).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    /// Stochastic pair (or bundle) decay.
    Reduction,
    /// Born sampling by a declared final measurement.
    Measurement,
    /// Stall resolved in favour of the first winner.
    Cascade,
}

/// A Heisenberg reduction: every loser member is zeroed and the winner members absorb
/// its weight in proportion to their own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionEvent {
    pub time: f64,
    pub loser: Vec<usize>,
    pub winner: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site: Option<String>,
    #[serde(default = "default_kind")]
    pub kind: EventKind,
}

fn default_kind() -> EventKind {
    EventKind::Reduction
}

impl ReductionEvent {
    pub fn pair(time: f64, loser: usize, winner: usize) -> Self {
        ReductionEvent {
            time,
            loser: vec![loser],
            winner: vec![winner],
            site: None,
            kind: EventKind::Reduction,
        }
    }
}

/// Result of [`apply_reduction`]; `noop` flags a loser that already had zero weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub state: Superposition,
    pub noop: bool,
}

pub fn apply_reduction(s: &Superposition, ev: &ReductionEvent) -> Result<Applied> {
    for &i in ev.loser.iter().chain(&ev.winner) {
        if i >= s.dim() {
            return Err(Error::invalid(format!("state index {i} out of range for dimension {}", s.dim())));
        }
    }
    if ev.loser.is_empty() || ev.winner.is_empty() {
        return Err(Error::invalid("reduction needs a loser and a winner"));
    }
    if ev.loser.iter().any(|i| ev.winner.contains(i)) {
        return Err(Error::invalid("loser and winner overlap"));
    }
    let lost = s.weight(&ev.loser);
    if lost == 0.0 {
        log::warn!("reduction of an empty state {:?} ignored", ev.loser);
        return Ok(Applied {
            state: s.clone(),
            noop: true,
        });
    }
    let won = s.weight(&ev.winner);
    if won <= 0.0 {
        return Err(Error::state(format!("winner {:?} has zero weight", ev.winner)));
    }
    let mut next = s.clone();
    let gain = (won + lost) / won;
    for &i in &ev.winner {
        next.amplitudes[i] *= gain;
    }
    for &i in &ev.loser {
        next.amplitudes[i] = 0.0;
    }
    debug_assert!(next.norm_error() <= NORM_TOL, "normalization drift {}", next.norm_error());
    Ok(Applied { state: next, noop: false })
}

/// Replace state `index` by children weighted by `fractions`, labelled `<parent>.<i>`.
pub fn split_state(s: &Superposition, index: usize, fractions: &[f64]) -> Result<Superposition> {
    if index >= s.dim() {
        return Err(Error::invalid(format!("split index {index} out of range")));
    }
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::invalid("split fractions must be non-negative"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > NORM_TOL {
        return Err(Error::invalid(format!("split fractions sum to {total}, expected 1")));
    }
    let parent = s.amplitudes[index];
    let mut amplitudes = s.amplitudes[..index].to_vec();
    let mut labels = s.labels[..index].to_vec();
    for (i, f) in fractions.iter().enumerate() {
        amplitudes.push(parent * f);
        labels.push(format!("{}.{}", s.labels[index], i + 1));
    }
    amplitudes.extend_from_slice(&s.amplitudes[index + 1..]);
    labels.extend_from_slice(&s.labels[index + 1..]);
    Ok(Superposition { amplitudes, labels })
}

/// Rate of `loser → winner` for an unstimulated pair, s⁻¹.
///
/// Negative couplings invert the decay direction: the rate is `|E|/ħ` times the
/// loser's own weight.
pub fn ordered_rate(energy: f64, loser_weight: f64, winner_weight: f64) -> f64 {
    if loser_weight <= 0.0 || winner_weight <= 0.0 || energy == 0.0 {
        return 0.0;
    }
    if energy > 0.0 {
        energy / HBAR * winner_weight
    } else {
        -energy / HBAR * loser_weight
    }
}

/// Rate of a pair stimulated toward `winner`; the reverse direction is frozen.
pub fn stimulated_rate(energy: f64, loser_weight: f64, winner_weight: f64) -> f64 {
    if loser_weight <= 0.0 || winner_weight <= 0.0 {
        return 0.0;
    }
    energy.abs() / HBAR * (loser_weight + winner_weight)
}

fn validate_couplings(e: &[Vec<f64>], dim: usize) -> Result<()> {
    if e.len() != dim || e.iter().any(|row| row.len() != dim) {
        return Err(Error::invalid(format!("couplings matrix must be {dim}×{dim}")));
    }
    let scale = e.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
    for i in 0..dim {
        if e[i][i] != 0.0 {
            return Err(Error::invalid(format!("couplings diagonal entry {i} is {}", e[i][i])));
        }
        for j in 0..dim {
            if !e[i][j].is_finite() {
                return Err(Error::invalid("couplings must be finite"));
            }
            if (e[i][j] - e[j][i]).abs() > 1e-12 * scale {
                return Err(Error::invalid(format!("couplings not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Jump {
    pub loser: usize,
    pub winner: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepProbabilities {
    pub jumps: Vec<Jump>,
    pub stay: f64,
}

/// Per-ordered-pair jump probabilities over a short step `dt`.
pub fn step_probabilities(s: &Superposition, e: &[Vec<f64>], dt: f64) -> Result<StepProbabilities> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("step must be positive and finite, got {dt}")));
    }
    validate_couplings(e, s.dim())?;
    let n = s.dim();
    let mut jumps = Vec::with_capacity(n * n.saturating_sub(1));
    let mut total = 0.0;
    for k in 0..n {
        for l in 0..n {
            if k == l {
                continue;
            }
            let p = ordered_rate(e[k][l], s.amplitudes[k], s.amplitudes[l]) * dt;
            total += p;
            jumps.push(Jump {
                loser: k,
                winner: l,
                probability: p,
            });
        }
    }
    if total >= MAX_STEP_PROBABILITY {
        return Err(Error::StepTooLarge {
            total,
            limit: MAX_STEP_PROBABILITY,
        });
    }
    Ok(StepProbabilities { jumps, stay: 1.0 - total })
}

/// Draw one step outcome; an event is stamped with time `t + dt`.
pub fn sample_step<R: Rng + ?Sized>(
    s: &Superposition,
    e: &[Vec<f64>],
    t: f64,
    dt: f64,
    rng: &mut R,
) -> Result<Option<ReductionEvent>> {
    let probs = step_probabilities(s, e, dt)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for j in &probs.jumps {
        acc += j.probability;
        if u < acc {
            return Ok(Some(ReductionEvent::pair(t + dt, j.loser, j.winner)));
        }
    }
    Ok(None)
}

/// Couplings between the bundles of one partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub name: String,
    /// Blocks of scenario indices; disjoint and exhaustive.
    pub partition: Vec<Vec<usize>>,
    /// Bundle-level couplings, J.
    pub couplings: Vec<Vec<f64>>,
}

impl Site {
    /// Every scenario its own bundle.
    pub fn plain(name: impl Into<String>, couplings: Vec<Vec<f64>>) -> Self {
        let partition = (0..couplings.len()).map(|i| vec![i]).collect();
        Site {
            name: name.into(),
            partition,
            couplings,
        }
    }

    pub fn bundled(name: impl Into<String>, partition: Vec<Vec<usize>>, couplings: Vec<Vec<f64>>) -> Self {
        Site {
            name: name.into(),
            partition,
            couplings,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let mut seen = vec![false; dim];
        for block in &self.partition {
            if block.is_empty() {
                return Err(Error::invalid(format!("site {}: empty bundle", self.name)));
            }
            for &i in block {
                if i >= dim || seen[i] {
                    return Err(Error::invalid(format!(
                        "site {}: partition is not a partition of 0..{dim}",
                        self.name
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid(format!("site {}: partition misses states", self.name)));
        }
        validate_couplings(&self.couplings, self.partition.len())
            .map_err(|e| Error::invalid(format!("site {}: {e}", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub index: usize,
    pub fractions: Vec<f64>,
}

/// A stretch of constant couplings. Splits apply at its start, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    /// Seconds; `None` runs until nothing can decay.
    pub duration: Option<f64>,
    #[serde(default)]
    pub splits: Vec<Split>,
    pub sites: Vec<Site>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingsSchedule {
    pub epochs: Vec<Epoch>,
    /// A measurement at the end resolves whatever superposition is left by Born's rule.
    #[serde(default)]
    pub final_measurement: bool,
}

impl CouplingsSchedule {
    /// One unbounded epoch with a single plain site.
    pub fn constant(couplings: Vec<Vec<f64>>) -> Self {
        CouplingsSchedule {
            epochs: vec![Epoch {
                duration: None,
                splits: vec![],
                sites: vec![Site::plain("all", couplings)],
            }],
            final_measurement: false,
        }
    }

    pub fn validate(&self, initial_dim: usize) -> Result<()> {
        if self.epochs.is_empty() {
            return Err(Error::invalid("schedule has no epochs"));
        }
        let mut dim = initial_dim;
        for (i, ep) in self.epochs.iter().enumerate() {
            match ep.duration {
                Some(d) if !(d >= 0.0 && d.is_finite()) => {
                    return Err(Error::invalid(format!("epoch {i}: duration must be finite and ≥ 0")))
                }
                None if i + 1 != self.epochs.len() => {
                    return Err(Error::invalid(format!("epoch {i}: only the last epoch may be unbounded")))
                }
                _ => {}
            }
            for sp in &ep.splits {
                if sp.index >= dim {
                    return Err(Error::invalid(format!("epoch {i}: split index {} out of range", sp.index)));
                }
                if sp.fractions.is_empty() {
                    return Err(Error::invalid(format!("epoch {i}: split without children")));
                }
                dim += sp.fractions.len() - 1;
            }
            for site in &ep.sites {
                site.validate(dim).map_err(|e| Error::invalid(format!("epoch {i}: {e}")))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationPolicy {
    /// No correlation effect; outcomes follow Born's rule.
    #[default]
    None,
    /// Correlated rates; a stall hands the outcome to the first winner.
    FirstWinner,
    /// Correlated rates; a stall is resolved by Born's rule among survivors.
    BornFallback,
}

impl std::str::FromStr for CorrelationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "first-winner" => Ok(Self::FirstWinner),
            "born-fallback" => Ok(Self::BornFallback),
            other => Err(Error::invalid(format!(
                "unknown correlation policy {other:?} (none, first-winner, born-fallback)"
            ))),
        }
    }
}

impl std::fmt::Display for CorrelationPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::FirstWinner => "first-winner",
            Self::BornFallback => "born-fallback",
        })
    }
}

/// Correlation memory along one history. Bundles are keyed by sorted label sets so that
/// they survive index shifts from splits.
#[derive(Debug, Clone, Default)]
struct Memory {
    first_winner: Option<Vec<String>>,
    /// (site, loser bundle, winner bundle): pair stimulated toward the winner.
    stimulated: Vec<(String, Vec<String>, Vec<String>)>,
}

impl Memory {
    fn stimulation(&self, site: &str, a: &[String], b: &[String]) -> Option<bool> {
        self.stimulated.iter().find_map(|(s, lo, wi)| {
            if s != site {
                None
            } else if lo == a && wi == b {
                Some(true)
            } else if lo == b && wi == a {
                Some(false)
            } else {
                None
            }
        })
    }

    fn relabel(&mut self, parent: &str, children: &[String]) {
        let fix = |set: &mut Vec<String>| {
            if let Some(p) = set.iter().position(|l| l == parent) {
                set.remove(p);
                set.extend(children.iter().cloned());
                set.sort();
            }
        };
        if let Some(w) = &mut self.first_winner {
            fix(w);
        }
        for (_, lo, wi) in &mut self.stimulated {
            fix(lo);
            fix(wi);
        }
    }
}

fn label_set(s: &Superposition, members: &[usize]) -> Vec<String> {
    let mut v: Vec<String> = members.iter().map(|&i| s.labels[i].clone()).collect();
    v.sort();
    v
}

#[derive(Debug, Clone)]
struct Transition {
    site: usize,
    loser: usize,
    winner: usize,
    rate: f64,
}

fn transitions(s: &Superposition, epoch: &Epoch, memory: &Memory, policy: CorrelationPolicy) -> Vec<Transition> {
    let mut out = Vec::new();
    for (si, site) in epoch.sites.iter().enumerate() {
        let weights: Vec<f64> = site.partition.iter().map(|b| s.weight(b)).collect();
        let sets: Vec<Vec<String>> = if policy == CorrelationPolicy::None {
            Vec::new()
        } else {
            site.partition.iter().map(|b| label_set(s, b)).collect()
        };
        for a in 0..site.partition.len() {
            for b in 0..site.partition.len() {
                let energy = site.couplings[a][b];
                if a == b || energy == 0.0 {
                    continue;
                }
                let stim = if policy == CorrelationPolicy::None {
                    None
                } else {
                    memory.stimulation(&site.name, &sets[a], &sets[b])
                };
                let rate = match stim {
                    Some(true) => stimulated_rate(energy, weights[a], weights[b]),
                    Some(false) => 0.0,
                    None => ordered_rate(energy, weights[a], weights[b]),
                };
                if rate > 0.0 {
                    out.push(Transition {
                        site: si,
                        loser: a,
                        winner: b,
                        rate,
                    });
                }
            }
        }
    }
    out
}

fn fire(
    s: &Superposition,
    memory: &Memory,
    epoch: &Epoch,
    t: &Transition,
    policy: CorrelationPolicy,
    time: f64,
) -> Result<(Superposition, Memory, ReductionEvent)> {
    let site = &epoch.sites[t.site];
    let ev = ReductionEvent {
        time,
        loser: site.partition[t.loser].clone(),
        winner: site.partition[t.winner].clone(),
        site: Some(site.name.clone()),
        kind: EventKind::Reduction,
    };
    let next = apply_reduction(s, &ev)?.state;
    let mut mem = memory.clone();
    if policy != CorrelationPolicy::None {
        let win = label_set(s, &site.partition[t.winner]);
        if mem.first_winner.is_none() {
            mem.first_winner = Some(win.clone());
        }
        for (m, block) in site.partition.iter().enumerate() {
            if m == t.winner {
                continue;
            }
            let other = label_set(s, block);
            if mem.stimulation(&site.name, &other, &win).is_none() {
                mem.stimulated.push((site.name.clone(), other, win.clone()));
            }
        }
    }
    Ok((next, mem, ev))
}

fn apply_splits(s: &Superposition, memory: &mut Memory, splits: &[Split]) -> Result<Superposition> {
    let mut cur = s.clone();
    for sp in splits {
        let parent = cur.labels[sp.index].clone();
        cur = split_state(&cur, sp.index, &sp.fractions)?;
        let children: Vec<String> = cur.labels[sp.index..sp.index + sp.fractions.len()].to_vec();
        memory.relabel(&parent, &children);
    }
    Ok(cur)
}

/// How a history with several survivors and no live couplings ends.
enum Stall {
    Measure(Vec<(usize, f64)>),
    Cascade(Vec<(usize, f64)>),
    Stuck,
}

fn resolve_stall(s: &Superposition, memory: &Memory, policy: CorrelationPolicy, final_measurement: bool) -> Stall {
    let born = |idx: Vec<usize>| {
        let total = s.weight(&idx);
        idx.into_iter().map(|i| (i, s.amplitudes[i] / total)).collect::<Vec<_>>()
    };
    if policy == CorrelationPolicy::FirstWinner {
        if let Some(w) = &memory.first_winner {
            let idx: Vec<usize> = w
                .iter()
                .filter_map(|l| s.index_of(l))
                .filter(|&i| s.amplitudes[i] > 0.0)
                .collect();
            if !idx.is_empty() {
                return Stall::Cascade(born(idx));
            }
        }
    }
    if policy == CorrelationPolicy::BornFallback || final_measurement {
        return Stall::Measure(born(s.survivors()));
    }
    Stall::Stuck
}

/// Edge label of a decay tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Edge {
    Reduction {
        site: String,
        loser: Vec<usize>,
        winner: Vec<usize>,
    },
    Measurement {
        outcome: usize,
    },
    Cascade {
        outcome: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeNode {
    pub parent: Option<usize>,
    pub edge: Option<Edge>,
    /// Epoch in which the edge fired.
    pub epoch: usize,
    /// State right after the edge.
    pub state: Superposition,
    pub children: Vec<usize>,
    /// Conditional probability of the edge given the parent.
    pub probability: f64,
    /// Probability that a history passes through this node.
    pub reach: f64,
    /// Final state if the history ends here.
    pub terminal: Option<Superposition>,
}

/// Every possible reduction history with exact probabilities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayTree {
    pub nodes: Vec<TreeNode>,
    /// False when some probability got stuck in an unresolved superposition.
    pub complete: bool,
}

impl DecayTree {
    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    /// Indices of nodes where histories end.
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].terminal.is_some()).collect()
    }

    /// Edges from the root down to `node`.
    pub fn path(&self, node: usize) -> Vec<&Edge> {
        let mut out = Vec::new();
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            out.push(self.nodes[cur].edge.as_ref().expect("non-root nodes carry an edge"));
            cur = p;
        }
        out.reverse();
        out
    }

    /// Number of stochastic reductions on the path to `node`.
    pub fn reductions_to(&self, node: usize) -> usize {
        self.path(node)
            .into_iter()
            .filter(|e| matches!(e, Edge::Reduction { .. }))
            .count()
    }

    /// Whether some node directly below the root carries the given amplitudes.
    pub fn has_transition(&self, from: usize, to: &[f64], tol: f64) -> bool {
        self.nodes[from].children.iter().any(|&c| {
            let a = &self.nodes[c].state.amplitudes;
            a.len() == to.len() && a.iter().zip(to).all(|(x, y)| (x - y).abs() <= tol)
        })
    }
}

struct Builder<'a> {
    schedule: &'a CouplingsSchedule,
    policy: CorrelationPolicy,
    nodes: Vec<TreeNode>,
    /// Probability that ends at each node.
    end_mass: Vec<f64>,
    stuck: f64,
}

struct Front {
    node: usize,
    mass: f64,
    state: Superposition,
    memory: Memory,
}

impl<'a> Builder<'a> {
    fn push(&mut self, parent: usize, edge: Edge, epoch: usize, state: Superposition) -> Result<usize> {
        if self.nodes.len() >= MAX_TREE_NODES {
            return Err(Error::Timeout {
                reason: format!("decay tree exceeds {MAX_TREE_NODES} nodes"),
                partial: None,
            });
        }
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            parent: Some(parent),
            edge: Some(edge),
            epoch,
            state,
            children: Vec::new(),
            probability: 0.0,
            reach: 0.0,
            terminal: None,
        });
        self.end_mass.push(0.0);
        self.nodes[parent].children.push(id);
        Ok(id)
    }

    fn reaction(&self, t: &Transition, epoch: &Epoch) -> Edge {
        let site = &epoch.sites[t.site];
        Edge::Reduction {
            site: site.name.clone(),
            loser: site.partition[t.loser].clone(),
            winner: site.partition[t.winner].clone(),
        }
    }

    /// History ends at `f`: leaf, Born/cascade edges, or stuck.
    fn terminate(&mut self, f: Front, epoch: usize) -> Result<()> {
        let survivors = f.state.survivors();
        if survivors.len() <= 1 {
            self.end_mass[f.node] += f.mass;
            self.nodes[f.node].terminal = Some(f.state);
            return Ok(());
        }
        let (weights, cascade) = match resolve_stall(&f.state, &f.memory, self.policy, self.schedule.final_measurement) {
            Stall::Measure(w) => (w, false),
            Stall::Cascade(w) => (w, true),
            Stall::Stuck => {
                self.end_mass[f.node] += f.mass;
                self.stuck += f.mass;
                return Ok(());
            }
        };
        for (i, p) in weights {
            let edge = if cascade {
                Edge::Cascade { outcome: i }
            } else {
                Edge::Measurement { outcome: i }
            };
            let leaf = f.state.collapsed(i);
            let id = self.push(f.node, edge, epoch, leaf.clone())?;
            self.end_mass[id] += f.mass * p;
            self.nodes[id].terminal = Some(leaf);
        }
        Ok(())
    }

    /// Unbounded epoch: follow the embedded jump chain to the end.
    fn run_out(&mut self, start: Front, ei: usize) -> Result<()> {
        let epoch = &self.schedule.epochs[ei];
        let mut stack = vec![start];
        while let Some(f) = stack.pop() {
            let trans = transitions(&f.state, epoch, &f.memory, self.policy);
            if trans.is_empty() {
                self.terminate(f, ei)?;
                continue;
            }
            let total: f64 = trans.iter().map(|t| t.rate).sum();
            for t in &trans {
                let (state, memory, _) = fire(&f.state, &f.memory, epoch, t, self.policy, f64::NAN)?;
                let edge = self.reaction(t, epoch);
                let id = self.push(f.node, edge, ei, state.clone())?;
                stack.push(Front {
                    node: id,
                    mass: f.mass * t.rate / total,
                    state,
                    memory,
                });
            }
        }
        Ok(())
    }

    /// Bounded epoch of length `duration`: transient distribution over the histories
    /// that start at `start`.
    fn transient(&mut self, start: Front, ei: usize, duration: f64) -> Result<Vec<Front>> {
        let epoch = &self.schedule.epochs[ei];
        // Local histories in breadth-first order; parents precede children.
        let mut local: Vec<(usize, Option<usize>, f64, Superposition, Memory)> =
            vec![(start.node, None, 0.0, start.state.clone(), start.memory.clone())];
        let mut exit = Vec::new();
        let mut i = 0;
        while i < local.len() {
            let trans = transitions(&local[i].3, epoch, &local[i].4, self.policy);
            exit.push(trans.iter().map(|t| t.rate).sum::<f64>());
            for t in &trans {
                let (state, memory, _) = fire(&local[i].3, &local[i].4, epoch, t, self.policy, f64::NAN)?;
                let edge = self.reaction(t, epoch);
                let id = self.push(local[i].0, edge, ei, state.clone())?;
                local.push((id, Some(i), t.rate, state, memory));
            }
            i += 1;
        }
        let parents: Vec<Option<usize>> = local.iter().map(|l| l.1).collect();
        let inflow: Vec<f64> = local.iter().map(|l| l.2).collect();
        let occupancy = tree_transient(&parents, &inflow, &exit, duration);
        Ok(local
            .into_iter()
            .zip(occupancy)
            .filter(|(_, p)| *p > 0.0)
            .map(|((node, _, _, state, memory), p)| Front {
                node,
                mass: start.mass * p,
                state,
                memory,
            })
            .collect())
    }
}

/// Occupation probabilities at time `t` of a jump process on a rooted tree started at
/// the root (index 0). `inflow[n]` is the rate from the parent into `n`, `exit[n]` the
/// total rate out of `n`.
///
/// `exp(Qt)` is lower triangular along ancestry, so each row is stored over the node's
/// ancestors only. Taylor series on a short step, then repeated squaring.
fn tree_transient(parents: &[Option<usize>], inflow: &[f64], exit: &[f64], t: f64) -> Vec<f64> {
    let n = parents.len();
    let mut anc: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut a = match parents[i] {
            Some(p) => anc[p].clone(),
            None => Vec::new(),
        };
        a.push(i);
        anc.push(a);
    }
    let lmax = exit.iter().fold(0.0_f64, |m, v| m.max(*v));
    if lmax * t == 0.0 {
        let mut v = vec![0.0; n];
        v[0] = 1.0;
        return v;
    }
    let squarings = ((lmax * t / 0.5).log2().ceil()).max(0.0) as i32;
    let tau = t / 2f64.powi(squarings);
    type Mat = Vec<Vec<f64>>;
    let mul = |a: &Mat, b: &Mat| -> Mat {
        (0..n)
            .map(|i| {
                let d = anc[i].len();
                (0..d)
                    .map(|k| (k..d).map(|j| a[i][j] * b[anc[i][j]][k]).sum())
                    .collect()
            })
            .collect()
    };
    let x: Mat = (0..n)
        .map(|i| {
            let d = anc[i].len();
            let mut row = vec![0.0; d];
            row[d - 1] = -exit[i] * tau;
            if d >= 2 {
                row[d - 2] = inflow[i] * tau;
            }
            row
        })
        .collect();
    let identity: Mat = (0..n)
        .map(|i| {
            let mut row = vec![0.0; anc[i].len()];
            *row.last_mut().unwrap() = 1.0;
            row
        })
        .collect();
    let mut sum = identity.clone();
    let mut term = identity;
    for j in 1..=24 {
        term = mul(&term, &x);
        let f = 1.0 / j as f64;
        let mut small = true;
        for (srow, trow) in sum.iter_mut().zip(term.iter_mut()) {
            for (s, v) in srow.iter_mut().zip(trow.iter_mut()) {
                *v *= f;
                *s += *v;
                small &= v.abs() < 1e-18;
            }
        }
        if small {
            break;
        }
    }
    for _ in 0..squarings {
        sum = mul(&sum, &sum);
    }
    sum.iter().map(|row| row[0].max(0.0)).collect()
}

/// Exact decay tree of `initial` under `schedule`.
///
/// Histories that end in an unresolved superposition make the result a
/// [`Error::Timeout`] carrying the partial tree.
pub fn enumerate_tree(
    initial: &Superposition,
    schedule: &CouplingsSchedule,
    policy: CorrelationPolicy,
) -> Result<DecayTree> {
    initial.validate()?;
    schedule.validate(initial.dim())?;
    let mut b = Builder {
        schedule,
        policy,
        nodes: vec![TreeNode {
            parent: None,
            edge: None,
            epoch: 0,
            state: initial.clone(),
            children: Vec::new(),
            probability: 1.0,
            reach: 0.0,
            terminal: None,
        }],
        end_mass: vec![0.0],
        stuck: 0.0,
    };
    let mut frontier = vec![Front {
        node: 0,
        mass: 1.0,
        state: initial.clone(),
        memory: Memory::default(),
    }];
    let last = schedule.epochs.len() - 1;
    for (ei, epoch) in schedule.epochs.iter().enumerate() {
        for f in &mut frontier {
            f.state = apply_splits(&f.state, &mut f.memory, &epoch.splits)?;
        }
        let mut next = Vec::new();
        for f in frontier {
            match epoch.duration {
                None => b.run_out(f, ei)?,
                Some(d) => next.extend(b.transient(f, ei, d)?),
            }
        }
        frontier = next;
        if ei == last {
            for f in std::mem::take(&mut frontier) {
                b.terminate(f, ei)?;
            }
        }
    }
    let Builder {
        mut nodes,
        end_mass,
        stuck,
        ..
    } = b;
    for i in (0..nodes.len()).rev() {
        let r = end_mass[i] + nodes[i].children.iter().map(|&c| nodes[c].reach).sum::<f64>();
        nodes[i].reach = r;
    }
    for i in 1..nodes.len() {
        let p = nodes[i].parent.unwrap();
        let pr = nodes[p].reach;
        nodes[i].probability = if pr > 0.0 { nodes[i].reach / pr } else { 0.0 };
    }
    let tree = DecayTree {
        nodes,
        complete: stuck == 0.0,
    };
    if !tree.complete {
        return Err(Error::Timeout {
            reason: format!("probability {stuck:.3e} remains in unresolved superpositions (no final measurement)"),
            partial: Some(Box::new(tree)),
        });
    }
    Ok(tree)
}

/// Probability of each final state, ordered by state index.
pub fn final_probabilities(tree: &DecayTree) -> Result<Vec<(String, f64)>> {
    if !tree.complete {
        return Err(Error::invalid("decay tree is incomplete"));
    }
    let mut acc: Vec<(usize, String, f64)> = Vec::new();
    for leaf in tree.leaves() {
        let node = &tree.nodes[leaf];
        let state = node.terminal.as_ref().unwrap();
        for i in state.survivors() {
            let label = &state.labels[i];
            match acc.iter_mut().find(|(_, l, _)| l == label) {
                Some(e) => e.2 += node.reach * state.amplitudes[i],
                None => acc.push((i, label.clone(), node.reach * state.amplitudes[i])),
            }
        }
    }
    acc.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    Ok(acc.into_iter().map(|(_, l, p)| (l, p)).collect())
}

/// One sampled history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub run: u64,
    pub seed: u64,
    pub events: Vec<ReductionEvent>,
    pub outcome: String,
    pub final_state: Superposition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frequency {
    pub state: String,
    pub count: u64,
    pub probability: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub frequencies: Vec<Frequency>,
    pub runs: Vec<RunTrace>,
}

/// Generator for run `run` of a batch seeded with `seed`: its own ChaCha stream.
pub fn run_rng(seed: u64, run: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run);
    rng
}

fn pick<R: Rng + ?Sized>(weights: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let mut acc = 0.0;
    for (i, w) in weights {
        acc += w / total;
        if u < acc {
            return *i;
        }
    }
    weights.last().expect("non-empty weights").0
}

/// Sample one history with exact exponential waiting times.
pub fn sample_history<R: Rng + ?Sized>(
    initial: &Superposition,
    schedule: &CouplingsSchedule,
    policy: CorrelationPolicy,
    rng: &mut R,
) -> Result<(Vec<ReductionEvent>, Superposition)> {
    let mut state = initial.clone();
    let mut memory = Memory::default();
    let mut events = Vec::new();
    let mut t = 0.0;
    for epoch in &schedule.epochs {
        state = apply_splits(&state, &mut memory, &epoch.splits)?;
        let end = epoch.duration.map(|d| t + d);
        loop {
            let trans = transitions(&state, epoch, &memory, policy);
            let total: f64 = trans.iter().map(|x| x.rate).sum();
            if total == 0.0 {
                break;
            }
            let u: f64 = rng.gen();
            let wait = -(1.0 - u).ln() / total;
            if let Some(end) = end {
                if t + wait >= end {
                    break;
                }
            }
            t += wait;
            let weights: Vec<(usize, f64)> = trans.iter().enumerate().map(|(i, x)| (i, x.rate)).collect();
            let chosen = &trans[pick(&weights, rng)];
            let (s, m, ev) = fire(&state, &memory, epoch, chosen, policy, t)?;
            state = s;
            memory = m;
            events.push(ev);
        }
        if let Some(end) = end {
            t = end;
        }
    }
    if state.survivors().len() > 1 {
        let (weights, kind) = match resolve_stall(&state, &memory, policy, schedule.final_measurement) {
            Stall::Measure(w) => (w, EventKind::Measurement),
            Stall::Cascade(w) => (w, EventKind::Cascade),
            Stall::Stuck => {
                return Err(Error::Timeout {
                    reason: "history ends in an unresolved superposition (no final measurement)".into(),
                    partial: None,
                })
            }
        };
        let win = pick(&weights, rng);
        let losers: Vec<usize> = state.survivors().into_iter().filter(|&i| i != win).collect();
        events.push(ReductionEvent {
            time: t,
            loser: losers,
            winner: vec![win],
            site: None,
            kind,
        });
        state = state.collapsed(win);
    }
    Ok((events, state))
}

/// `n_runs` independent histories; run `i` draws from stream `i` of `seed`, so results
/// do not depend on the thread count.
pub fn run_monte_carlo(
    initial: &Superposition,
    schedule: &CouplingsSchedule,
    n_runs: u64,
    seed: u64,
    policy: CorrelationPolicy,
) -> Result<MonteCarlo> {
    if n_runs == 0 {
        return Err(Error::invalid("need at least one run"));
    }
    initial.validate()?;
    schedule.validate(initial.dim())?;
    let runs: Vec<RunTrace> = (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = run_rng(seed, run);
            let (events, final_state) = sample_history(initial, schedule, policy, &mut rng)?;
            let winner = final_state.survivors()[0];
            Ok(RunTrace {
                run,
                seed,
                events,
                outcome: final_state.labels[winner].clone(),
                final_state,
            })
        })
        .collect::<Result<_>>()?;
    let frequencies = tally(&runs);
    Ok(MonteCarlo { frequencies, runs })
}

/// Outcome frequencies with binomial standard errors, ordered by final state index.
pub fn tally(runs: &[RunTrace]) -> Vec<Frequency> {
    let mut counts: HashMap<&str, (usize, u64)> = HashMap::new();
    for r in runs {
        let idx = r.final_state.index_of(&r.outcome).unwrap_or(usize::MAX);
        counts.entry(&r.outcome).or_insert((idx, 0)).1 += 1;
    }
    let n = runs.len() as f64;
    let mut out: Vec<(usize, Frequency)> = counts
        .into_iter()
        .map(|(label, (idx, c))| {
            let p = c as f64 / n;
            (
                idx,
                Frequency {
                    state: label.to_string(),
                    count: c,
                    probability: p,
                    stderr: (p * (1.0 - p) / n).sqrt(),
                },
            )
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.state.cmp(&b.1.state)));
    out.into_iter().map(|(_, f)| f).collect()
}
