//! Label propagation over a [`PropagationGraph`].
//!
//! Two update rules are available. Linear diffusion replaces a tracklet's
//! vector with the alpha-weighted sum of its neighbors' vectors. Competitive
//! consensus collects, for every class, the strongest weighted support any
//! single neighbor offers (or the mean of the `top_k` strongest) and turns the
//! supports into a distribution with a tempered softmax. That softmax is the
//! exact maximizer over the simplex of
//!
//! ```text
//! sum_c p(c) * alpha_{k,z(c)} * p_{z(c)}(c)  +  T * H(p)
//! ```
//!
//! where `z(c)` picks the strongest source for class `c`, so each update is
//! one coordinate-ascent step; [`objective`] evaluates that function.
//!
//! Progressive propagation freezes confident tracklets after every sweep:
//! either a growing fraction `r = base + increment * iter` of the touched
//! tracklets, or every tracklet whose confidence reaches a threshold. Frozen
//! tracklets are never updated again.
//!
//! Tracklets start as all-zero vectors and stay "untouched" until some
//! neighbor offers nonzero evidence; untouched tracklets are never softmaxed
//! to a uniform vector and never frozen.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeRef, PropagationGraph};

/// L-infinity change below which a sweep counts as converged.
pub const CONVERGENCE_TOL: f64 = 1e-12;

const BELIEF_MAGIC: &[u8; 8] = b"PPCCBELF";
const BELIEF_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Mode {
    /// Linear diffusion.
    #[serde(rename = "lp")]
    #[value(name = "lp")]
    LinearDiffusion,
    /// Competitive consensus.
    #[serde(rename = "ppcc")]
    #[value(name = "ppcc")]
    CompetitiveConsensus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Schedule {
    None,
    Step { base: f64, increment: f64 },
    Threshold { threshold: f64 },
}

impl Schedule {
    pub const STEP: Schedule = Schedule::Step { base: 0.5, increment: 0.1 };
    pub const THRESHOLD: Schedule = Schedule::Threshold { threshold: 0.5 };

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::None => "none",
            Schedule::Step { .. } => "step",
            Schedule::Threshold { .. } => "threshold",
        }
    }

    /// Frozen fraction targeted by the step schedule after sweep `iter`.
    pub fn step_ratio(base: f64, increment: f64, iter: usize) -> f64 {
        (base + increment * iter as f64).min(1.0)
    }
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Schedule::None),
            "step" => Ok(Schedule::STEP),
            "threshold" => Ok(Schedule::THRESHOLD),
            other => Err(Error::Config(format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum UpdateOrder {
    /// In place, ascending tracklet index.
    #[value(name = "seq")]
    Sequential,
    /// Double-buffered: every sweep reads the previous generation only.
    #[value(name = "sync")]
    Synchronous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationParams {
    pub mode: Mode,
    pub temperature: f64,
    pub top_k: usize,
    pub schedule: Schedule,
    pub max_iters: usize,
    pub order: UpdateOrder,
}

impl Default for PropagationParams {
    fn default() -> Self {
        Self {
            mode: Mode::CompetitiveConsensus,
            temperature: 0.1,
            top_k: 1,
            schedule: Schedule::STEP,
            max_iters: 8,
            order: UpdateOrder::Sequential,
        }
    }
}

impl PropagationParams {
    /// Linear diffusion without freezing.
    pub fn linear_diffusion() -> Self {
        Self {
            mode: Mode::LinearDiffusion,
            schedule: Schedule::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.top_k < 1 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        match self.schedule {
            Schedule::Step { base, increment } if !(0.0..=1.0).contains(&base) || increment.is_nan() || increment < 0.0 => {
                Err(Error::Config(format!("step schedule base {base} / increment {increment} out of range")))
            }
            Schedule::Threshold { threshold } if !(0.0..=1.0).contains(&threshold) => {
                Err(Error::Config(format!("threshold {threshold} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// Per-tracklet probability vectors plus frozen/touched masks. Portrait
/// vectors are one-hot and implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    num_classes: usize,
    probs: Vec<f64>,
    frozen: Vec<bool>,
    touched: Vec<bool>,
    iteration: usize,
}

impl BeliefState {
    /// All tracklets untouched, nothing frozen.
    pub fn new(num_classes: usize, num_tracklets: usize) -> Self {
        Self {
            num_classes,
            probs: vec![0.0; num_classes * num_tracklets],
            frozen: vec![false; num_tracklets],
            touched: vec![false; num_tracklets],
            iteration: 0,
        }
    }

    /// Builds a state from explicit per-tracklet score vectors. Any vector with
    /// a nonzero entry is marked touched.
    pub fn from_scores(num_classes: usize, scores: Vec<Vec<f64>>) -> Result<Self> {
        let mut state = Self::new(num_classes, scores.len());
        for (k, v) in scores.into_iter().enumerate() {
            if v.len() != num_classes {
                return Err(Error::DimensionMismatch {
                    entity: format!("score vector of tracklet {k}"),
                    expected: num_classes,
                    found: v.len(),
                });
            }
            state.set(k, &v);
        }
        Ok(state)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_tracklets(&self) -> usize {
        self.frozen.len()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn prob(&self, k: usize) -> &[f64] {
        &self.probs[k * self.num_classes..(k + 1) * self.num_classes]
    }

    pub fn is_frozen(&self, k: usize) -> bool {
        self.frozen[k]
    }

    pub fn is_touched(&self, k: usize) -> bool {
        self.touched[k]
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }

    pub fn touched_count(&self) -> usize {
        self.touched.iter().filter(|&&t| t).count()
    }

    /// Maximum entry of the tracklet's vector.
    pub fn confidence(&self, k: usize) -> f64 {
        self.prob(k).iter().copied().fold(0.0, f64::max)
    }

    /// p_j(c) for any node; portraits are one-hot.
    pub fn node_prob(&self, node: NodeRef, class: usize) -> f64 {
        match node {
            NodeRef::Portrait(c) => f64::from(c as usize == class),
            NodeRef::Tracklet(j) => self.probs[j as usize * self.num_classes + class],
        }
    }

    /// Overwrites the vector of tracklet `k` and marks it touched when any
    /// entry is nonzero.
    pub fn set(&mut self, k: usize, v: &[f64]) {
        self.probs[k * self.num_classes..(k + 1) * self.num_classes].copy_from_slice(v);
        if v.iter().any(|&x| x != 0.0) {
            self.touched[k] = true;
        }
    }

    pub fn freeze(&mut self, ks: &[usize]) {
        for &k in ks {
            self.frozen[k] = true;
        }
    }

    /// Encoding: magic "PPCCBELF", u32 version, u32 C, u32 M, u32 iteration,
    /// then M*C f32 probabilities (row per tracklet), a frozen bitmap and a
    /// touched bitmap of ceil(M/8) bytes each. Little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.num_tracklets();
        let mut out = Vec::with_capacity(24 + self.probs.len() * 4 + 2 * m.div_ceil(8));
        out.extend_from_slice(BELIEF_MAGIC);
        for v in [BELIEF_VERSION, self.num_classes as u32, m as u32, self.iteration as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &p in &self.probs {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out.extend_from_slice(&bitmap(&self.frozen));
        out.extend_from_slice(&bitmap(&self.touched));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidInput(format!("beliefs: {m}"));
        if bytes.len() < 24 || &bytes[..8] != BELIEF_MAGIC {
            return Err(bad("bad magic or truncated header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        if word(0) != BELIEF_VERSION as usize {
            return Err(bad("unsupported version"));
        }
        let (c, m, iteration) = (word(1), word(2), word(3));
        let body = m * c * 4;
        let mask = m.div_ceil(8);
        if bytes.len() != 24 + body + 2 * mask {
            return Err(bad("length does not match header"));
        }
        let probs = bytes[24..24 + body]
            .chunks_exact(4)
            .map(|x| f32::from_le_bytes(x.try_into().unwrap()) as f64)
            .collect();
        let frozen = unbitmap(&bytes[24 + body..24 + body + mask], m);
        let touched = unbitmap(&bytes[24 + body + mask..], m);
        Ok(Self { num_classes: c, probs, frozen, touched, iteration })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::format(path, "beliefs", e))
    }
}

fn bitmap(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unbitmap(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect()
}

/// Linear diffusion: sum_j alpha_kj p_j, not renormalized. A tracklet
/// without neighbors keeps its current vector.
pub fn linear_diffusion_update(k: usize, graph: &PropagationGraph, state: &BeliefState) -> Vec<f64> {
    let neighbors = graph.neighbors(k);
    if neighbors.is_empty() {
        return state.prob(k).to_vec();
    }
    (0..state.num_classes())
        .map(|c| neighbors.iter().map(|n| n.alpha * state.node_prob(n.node, c)).sum())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub eta: Vec<f64>,
    /// False when no neighbor offered nonzero support for any class.
    pub touched: bool,
}

/// Per-class strongest support alpha_kj * p_j(c). With `top_k > 1` the support
/// is the mean of the `top_k` largest contributions, over however many
/// neighbors exist when there are fewer.
pub fn consensus_evidence(k: usize, graph: &PropagationGraph, state: &BeliefState, top_k: usize) -> Evidence {
    let neighbors = graph.neighbors(k);
    let c = state.num_classes();
    let mut eta = vec![0.0; c];
    if !neighbors.is_empty() {
        let top_k = top_k.max(1);
        let mut contrib = Vec::with_capacity(neighbors.len());
        for (class, e) in eta.iter_mut().enumerate() {
            if top_k == 1 {
                *e = neighbors
                    .iter()
                    .map(|n| n.alpha * state.node_prob(n.node, class))
                    .fold(0.0, f64::max);
            } else {
                contrib.clear();
                contrib.extend(neighbors.iter().map(|n| n.alpha * state.node_prob(n.node, class)));
                contrib.sort_unstable_by(|a, b| b.total_cmp(a));
                let m = top_k.min(contrib.len());
                *e = contrib[..m].iter().sum::<f64>() / m as f64;
            }
        }
    }
    let touched = eta.iter().any(|&x| x != 0.0);
    Evidence { eta, touched }
}

/// Tempered softmax `exp(eta/T) / sum exp(eta/T)`, shifted by `max eta`.
pub fn consensus_update(eta: &[f64], temperature: f64) -> Vec<f64> {
    let max = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = eta.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    out
}

/// Shannon entropy in nats with 0 log 0 = 0.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// `<p, eta> + T * H(p)`.
pub fn objective_value(eta: &[f64], p: &[f64], temperature: f64) -> f64 {
    p.iter().zip(eta).map(|(a, b)| a * b).sum::<f64>() + temperature * entropy(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveReport {
    pub value: f64,
    /// Selected source per class; `None` when the tracklet has no neighbors.
    pub sources: Vec<Option<NodeRef>>,
    pub entropy: f64,
}

/// Evaluates the coordinate-ascent objective at `p` for tracklet `k`,
/// selecting for every class the neighbor with the largest alpha_kj p_j(c)
/// (first in neighbor order on ties).
pub fn objective(
    k: usize,
    p: &[f64],
    graph: &PropagationGraph,
    state: &BeliefState,
    temperature: f64,
) -> Result<ObjectiveReport> {
    let c = state.num_classes();
    if p.len() != c {
        return Err(Error::DimensionMismatch { entity: "probability vector".into(), expected: c, found: p.len() });
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&x| x < -1e-6 || !x.is_finite()) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("vector is off the simplex (sum {sum})")));
    }
    let neighbors = graph.neighbors(k);
    let mut sources = Vec::with_capacity(c);
    let mut eta = vec![0.0; c];
    for (class, e) in eta.iter_mut().enumerate() {
        let mut best: Option<(NodeRef, f64)> = None;
        for n in neighbors {
            let v = n.alpha * state.node_prob(n.node, class);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((n.node, v));
            }
        }
        *e = best.map_or(0.0, |(_, v)| v);
        sources.push(best.map(|(node, _)| node));
    }
    let h = entropy(p);
    Ok(ObjectiveReport { value: objective_value(&eta, p, temperature), sources, entropy: h })
}

/// Tracklets to freeze after sweep `iter`, disjoint from the frozen set.
///
/// The step schedule grows the frozen share of touched tracklets to
/// `floor(r * touched)` with `r = min(1, base + increment * iter)`, taking the
/// most confident unfrozen tracklets first (ties by ascending index). The
/// threshold schedule freezes every touched tracklet with confidence at or
/// above the threshold.
pub fn freezing_decision(state: &BeliefState, schedule: &Schedule, iter: usize) -> Vec<usize> {
    let m = state.num_tracklets();
    let candidates = (0..m).filter(|&k| state.is_touched(k) && !state.is_frozen(k));
    match *schedule {
        Schedule::None => Vec::new(),
        Schedule::Threshold { threshold } => candidates.filter(|&k| state.confidence(k) >= threshold).collect(),
        Schedule::Step { base, increment } => {
            let r = Schedule::step_ratio(base, increment, iter);
            let touched = state.touched_count();
            let frozen_touched = (0..m).filter(|&k| state.is_touched(k) && state.is_frozen(k)).count();
            let target = (r * touched as f64 + 1e-9).floor() as usize;
            let need = target.saturating_sub(frozen_touched);
            let mut ranked: Vec<(usize, f64)> = candidates.map(|k| (k, state.confidence(k))).collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut out: Vec<usize> = ranked.into_iter().take(need).map(|(k, _)| k).collect();
            out.sort_unstable();
            out
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub updated: usize,
    pub touched: usize,
    pub frozen: usize,
    pub newly_frozen: usize,
    pub mean_confidence: f64,
    pub max_delta: f64,
    /// Largest |sum_c p(c) - 1| over touched tracklets.
    pub max_simplex_error: f64,
}

#[derive(Debug, Clone)]
pub struct PropagationRun {
    pub state: BeliefState,
    pub stats: Vec<IterationStats>,
}

fn update_rule(k: usize, graph: &PropagationGraph, state: &BeliefState, params: &PropagationParams) -> Option<Vec<f64>> {
    match params.mode {
        Mode::LinearDiffusion => {
            let v = linear_diffusion_update(k, graph, state);
            v.iter().any(|&x| x != 0.0).then_some(v)
        }
        Mode::CompetitiveConsensus => {
            let ev = consensus_evidence(k, graph, state, params.top_k);
            ev.touched.then(|| consensus_update(&ev.eta, params.temperature))
        }
    }
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn propagate(graph: &PropagationGraph, params: &PropagationParams) -> Result<PropagationRun> {
    propagate_with(graph, params, |_, _| {})
}

/// Runs propagation, calling `observe` after every sweep (post-freezing).
pub fn propagate_with(
    graph: &PropagationGraph,
    params: &PropagationParams,
    mut observe: impl FnMut(&BeliefState, &IterationStats),
) -> Result<PropagationRun> {
    params.validate()?;
    let m = graph.num_tracklets();
    let mut state = BeliefState::new(graph.num_classes(), m);
    let mut stats = Vec::new();

    for iter in 0..params.max_iters {
        let mut updated = 0;
        let mut max_delta: f64 = 0.0;
        match params.order {
            UpdateOrder::Sequential => {
                for k in 0..m {
                    if state.is_frozen(k) {
                        continue;
                    }
                    if let Some(v) = update_rule(k, graph, &state, params) {
                        max_delta = max_delta.max(linf(state.prob(k), &v));
                        state.set(k, &v);
                        updated += 1;
                    }
                }
            }
            UpdateOrder::Synchronous => {
                let next: Vec<Option<Vec<f64>>> = (0..m)
                    .into_par_iter()
                    .map(|k| if state.is_frozen(k) { None } else { update_rule(k, graph, &state, params) })
                    .collect();
                for (k, v) in next.into_iter().enumerate() {
                    if let Some(v) = v {
                        max_delta = max_delta.max(linf(state.prob(k), &v));
                        state.set(k, &v);
                        updated += 1;
                    }
                }
            }
        }
        state.iteration = iter + 1;

        let newly = freezing_decision(&state, &params.schedule, iter);
        state.freeze(&newly);

        let touched: Vec<usize> = (0..m).filter(|&k| state.is_touched(k)).collect();
        let mean_confidence = if touched.is_empty() {
            0.0
        } else {
            touched.iter().map(|&k| state.confidence(k)).sum::<f64>() / touched.len() as f64
        };
        let max_simplex_error = touched
            .iter()
            .map(|&k| (state.prob(k).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        let s = IterationStats {
            iteration: iter,
            updated,
            touched: touched.len(),
            frozen: state.frozen_count(),
            newly_frozen: newly.len(),
            mean_confidence,
            max_delta,
            max_simplex_error,
        };
        observe(&state, &s);
        stats.push(s);

        if state.frozen_count() == m || max_delta <= CONVERGENCE_TOL {
            break;
        }
    }
    Ok(PropagationRun { state, stats })
}

/// Writes one JSON object per sweep.
pub fn write_stats(stats: &[IterationStats], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for s in stats {
        serde_json::to_writer(&mut buf, s).map_err(|e| Error::format(path, "stats", e))?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
