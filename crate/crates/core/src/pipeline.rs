//! End-to-end runs: synthesize, build the graph, propagate, evaluate, and
//! persist every artifact; plus one-axis ablation sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, rankings_csv, EvalOptions, EvalReport, Setting};
use crate::graph::{build_graph, GraphParams, PropagationGraph};
use crate::matching::{match_scores, MatchKind};
use crate::propagation::{
    propagate_with, write_stats, BeliefState, IterationStats, Mode, PropagationParams, Schedule,
};
use crate::synth::{generate, Preset, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Portrait vs. mean tracklet face feature.
    FaceMatch,
    /// Portrait vs. mean tracklet body feature.
    IdeMatch,
    /// 0.8 face + 0.2 body matching.
    FusedMatch,
    /// Linear diffusion over the tracklet graph, no freezing.
    Lp,
    /// Competitive consensus over instances, without temporal links.
    PpccV,
    /// Competitive consensus over tracklets (visual and temporal links).
    PpccVt,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FaceMatch,
        Method::IdeMatch,
        Method::FusedMatch,
        Method::Lp,
        Method::PpccV,
        Method::PpccVt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FaceMatch => "face-match",
            Method::IdeMatch => "ide-match",
            Method::FusedMatch => "fused-match",
            Method::Lp => "lp",
            Method::PpccV => "ppcc-v",
            Method::PpccVt => "ppcc-vt",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// When set, replaces `synth` with the preset's configuration.
    pub preset: Option<Preset>,
    pub synth: SynthConfig,
    pub graph: GraphParams,
    pub propagation: PropagationParams,
    pub method: Method,
    pub setting: Setting,
    pub include_others_in_recall: bool,
    pub out_dir: PathBuf,
    /// Overrides the synthetic seed when set.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            synth: SynthConfig::default(),
            graph: GraphParams::default(),
            propagation: PropagationParams::default(),
            method: Method::PpccVt,
            setting: Setting::Across,
            include_others_in_recall: false,
            out_dir: PathBuf::from("run"),
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn for_preset(preset: Preset, seed: u64, method: Method, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            preset: Some(preset),
            method,
            out_dir: out_dir.into(),
            seed: Some(seed),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The synthetic config actually used, with preset and seed applied.
    pub fn resolved_synth(&self) -> SynthConfig {
        let mut cfg = match self.preset {
            Some(p) => p.config(self.synth.seed),
            None => self.synth.clone(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg
    }

    /// Propagation parameters after the method's overrides.
    pub fn resolved_propagation(&self) -> PropagationParams {
        match self.method {
            Method::Lp => PropagationParams {
                mode: Mode::LinearDiffusion,
                schedule: Schedule::None,
                ..self.propagation.clone()
            },
            _ => PropagationParams {
                mode: Mode::CompetitiveConsensus,
                ..self.propagation.clone()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved_synth().validate()?;
        self.graph.validate()?;
        self.resolved_propagation().validate()
    }
}

pub struct PipelineOutput {
    pub report: EvalReport,
    pub beliefs: BeliefState,
    pub stats: Vec<IterationStats>,
    pub dataset: Dataset,
}

pub const DATASET_DIR: &str = "dataset";
pub const GRAPH_FILE: &str = "graph.bin";
pub const BELIEFS_FILE: &str = "beliefs.bin";
pub const STATS_FILE: &str = "stats.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const RANKINGS_FILE: &str = "rankings.csv";
pub const CONFIG_FILE: &str = "config.json";

/// Averages instance beliefs back onto their tracklets; untouched instances
/// count as zero vectors.
pub fn aggregate_instances(state: &BeliefState, owner: &[usize], num_tracklets: usize) -> Result<BeliefState> {
    let c = state.num_classes();
    let mut sums = vec![vec![0.0; c]; num_tracklets];
    let mut counts = vec![0usize; num_tracklets];
    for (i, &k) in owner.iter().enumerate() {
        counts[k] += 1;
        for (s, &p) in sums[k].iter_mut().zip(state.prob(i)) {
            *s += p;
        }
    }
    for (v, n) in sums.iter_mut().zip(&counts) {
        v.iter_mut().for_each(|x| *x /= (*n).max(1) as f64);
    }
    BeliefState::from_scores(c, sums)
}

fn propagate_dataset(
    ds: &Dataset,
    cfg: &RunConfig,
    out: &Path,
    observe: impl FnMut(&BeliefState, &IterationStats),
) -> Result<(BeliefState, Vec<IterationStats>)> {
    let params = cfg.resolved_propagation();
    let (graph_ds, owner) = if cfg.method == Method::PpccV {
        let (exploded, owner) = ds.explode_tracklets();
        (exploded, Some(owner))
    } else {
        (ds.clone(), None)
    };
    let graph = build_graph(&graph_ds, &cfg.graph).map_err(Error::in_step("build-graph"))?;
    graph.save(&out.join(GRAPH_FILE)).map_err(Error::in_step("build-graph"))?;
    PropagationGraph::load(&out.join(GRAPH_FILE)).map_err(Error::in_step("build-graph"))?;

    let run = propagate_with(&graph, &params, observe).map_err(Error::in_step("propagate"))?;
    let state = match owner {
        Some(owner) => aggregate_instances(&run.state, &owner, ds.num_tracklets()).map_err(Error::in_step("propagate"))?,
        None => run.state,
    };
    Ok((state, run.stats))
}

/// Runs every step, writing artifacts into `cfg.out_dir`. The report is
/// computed from the beliefs as serialized, so `evaluate` on the written files
/// reproduces it.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput> {
    run_pipeline_with(cfg, |_, _| {})
}

/// [`run_pipeline`] with a per-sweep observer on the propagated graph (the
/// instance graph for PPCC-v). Never called for matching baselines.
pub fn run_pipeline_with(
    cfg: &RunConfig,
    observe: impl FnMut(&BeliefState, &IterationStats),
) -> Result<PipelineOutput> {
    cfg.validate()?;
    let out = cfg.out_dir.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = RunConfig {
        preset: None,
        synth: cfg.resolved_synth(),
        seed: None,
        ..cfg.clone()
    };
    let config_json = serde_json::to_string_pretty(&resolved).expect("config serializes") + "\n";
    fs::write(out.join(CONFIG_FILE), config_json).map_err(|e| Error::io(out.join(CONFIG_FILE), e))?;

    let ds = generate(&resolved.synth).map_err(Error::in_step("synth"))?;
    let ds_dir = out.join(DATASET_DIR);
    save_dataset(&ds, &ds_dir).map_err(Error::in_step("synth"))?;
    let ds = load_dataset(&ds_dir).map_err(Error::in_step("synth"))?;

    let (state, stats) = match cfg.method {
        Method::FaceMatch | Method::IdeMatch | Method::FusedMatch => {
            let kind = match cfg.method {
                Method::FaceMatch => MatchKind::Face,
                Method::IdeMatch => MatchKind::Body,
                _ => MatchKind::Fused(cfg.graph.fusion.unwrap_or_default()),
            };
            (match_scores(&ds, kind).map_err(Error::in_step("match"))?, Vec::new())
        }
        Method::Lp | Method::PpccV | Method::PpccVt => propagate_dataset(&ds, cfg, out, observe)?,
    };
    let beliefs_path = out.join(BELIEFS_FILE);
    state.save(&beliefs_path).map_err(Error::in_step("propagate"))?;
    write_stats(&stats, &out.join(STATS_FILE)).map_err(Error::in_step("propagate"))?;

    let beliefs = BeliefState::load(&beliefs_path).map_err(Error::in_step("evaluate"))?;
    let opts = EvalOptions {
        include_others_in_recall: cfg.include_others_in_recall,
    };
    let (report, ranked) = evaluate(&beliefs, &ds, cfg.setting, opts).map_err(Error::in_step("evaluate"))?;
    report.save(&out.join(REPORT_FILE)).map_err(Error::in_step("evaluate"))?;
    fs::write(out.join(RANKINGS_FILE), rankings_csv(&ranked, &ds))
        .map_err(|e| Error::in_step("evaluate")(Error::io(out.join(RANKINGS_FILE), e)))?;

    Ok(PipelineOutput {
        report,
        beliefs,
        stats,
        dataset: ds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Temperature,
    Topk,
    Schedule,
    Method,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Temperature => "temperature",
            AblationAxis::Topk => "topk",
            AblationAxis::Schedule => "schedule",
            AblationAxis::Method => "method",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub value: String,
    pub map: f64,
    pub r1: f64,
    pub r3: f64,
    pub r5: f64,
}

fn apply_axis(base: &RunConfig, axis: AblationAxis, value: &str) -> Result<RunConfig> {
    let mut cfg = base.clone();
    let parse_err = |e: &dyn std::fmt::Display| Error::Config(format!("bad {} value `{value}`: {e}", axis.name()));
    match axis {
        AblationAxis::Temperature => cfg.propagation.temperature = value.parse().map_err(|e| parse_err(&e))?,
        AblationAxis::Topk => cfg.propagation.top_k = value.parse().map_err(|e| parse_err(&e))?,
        AblationAxis::Schedule => cfg.propagation.schedule = value.parse()?,
        AblationAxis::Method => cfg.method = value.parse()?,
    }
    cfg.out_dir = base.out_dir.join(format!("{}_{value}", axis.name()));
    Ok(cfg)
}

/// One full pipeline run per value of `axis`, everything else fixed. Writes
/// `ablation_<axis>.csv` under the base output directory.
pub fn run_ablation(base: &RunConfig, axis: AblationAxis, values: &[String]) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| apply_axis(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(&configs) {
        let out = run_pipeline(cfg)?;
        rows.push(AblationRow {
            value: value.clone(),
            map: out.report.map,
            r1: out.report.recall_at(1),
            r3: out.report.recall_at(3),
            r5: out.report.recall_at(5),
        });
    }
    fs::create_dir_all(&base.out_dir).map_err(|e| Error::io(&base.out_dir, e))?;
    let path = base.out_dir.join(format!("ablation_{}.csv", axis.name()));
    fs::write(&path, ablation_csv(axis, &rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub fn ablation_csv(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let mut s = format!("{},mAP,R@1,R@3,R@5\n", axis.name());
    for r in rows {
        writeln!(s, "{},{:.6},{:.6},{:.6},{:.6}", r.value, r.map, r.r1, r.r3, r.r5).unwrap();
    }
    s
}
