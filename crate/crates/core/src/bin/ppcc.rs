use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ppcc::evaluation::{evaluate, rankings_csv, EvalOptions};
use ppcc::graph::FusionWeights;
use ppcc::pipeline::{ablation_csv, run_ablation, run_pipeline, AblationAxis, Method, RunConfig};
use ppcc::propagation::{propagate, write_stats, BeliefState, Mode, PropagationParams, Schedule, UpdateOrder};
use ppcc::synth::{generate, Preset, SynthConfig};
use ppcc::{build_graph, load_dataset, save_dataset, Channel, Error, GraphParams, PropagationGraph, Setting};

#[derive(Parser)]
#[command(name = "ppcc", version, about = "Portrait-to-tracklet identity propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the tracklet graph of a dataset.
    BuildGraph {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Propagate portrait labels over a graph.
    Propagate {
        #[arg(long)]
        graph: PathBuf,
        #[command(flatten)]
        prop: PropArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Score beliefs against a dataset's ground truth.
    Evaluate {
        #[arg(long)]
        beliefs: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "across")]
        setting: Setting,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dump_rankings: Option<PathBuf>,
        #[arg(long)]
        rk_include_others: bool,
    },
    /// Full pipeline: synth, build-graph, propagate, evaluate.
    Run {
        #[command(flatten)]
        run: RunArgs,
    },
    /// One pipeline run per value of a single parameter.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: AblationAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

#[derive(Args, Default)]
struct GraphArgs {
    #[arg(long)]
    knn: Option<usize>,
    #[arg(long)]
    floor: Option<f64>,
    /// Face,body weights for tracklet-tracklet links, or "off".
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    portrait_channel: Option<String>,
    #[arg(long)]
    gallery_channel: Option<String>,
}

impl GraphArgs {
    fn apply(&self, p: &mut GraphParams) -> ppcc::Result<()> {
        if let Some(k) = self.knn {
            p.knn = k;
        }
        if let Some(f) = self.floor {
            p.floor = f;
        }
        if let Some(f) = &self.fusion {
            p.fusion = parse_fusion(f)?;
        }
        if let Some(c) = &self.portrait_channel {
            p.portrait_channel = c.parse::<Channel>()?;
        }
        if let Some(c) = &self.gallery_channel {
            p.gallery_channel = c.parse::<Channel>()?;
        }
        Ok(())
    }
}

fn parse_fusion(s: &str) -> ppcc::Result<Option<FusionWeights>> {
    if s == "off" || s == "none" {
        return Ok(None);
    }
    let parts: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::Config(format!("bad fusion weights `{s}`: {e}")))?;
    match parts.as_slice() {
        [face, body] => Ok(Some(FusionWeights { face: *face, body: *body })),
        _ => Err(Error::Config(format!("fusion needs two weights, got `{s}`"))),
    }
}

#[derive(Args, Default)]
struct PropArgs {
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    topk: Option<usize>,
    /// none | step | threshold
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long, value_enum)]
    order: Option<UpdateOrder>,
}

impl PropArgs {
    fn apply(&self, p: &mut PropagationParams) -> ppcc::Result<()> {
        if let Some(m) = self.mode {
            p.mode = m;
        }
        if let Some(t) = self.temperature {
            p.temperature = t;
        }
        if let Some(k) = self.topk {
            p.top_k = k;
        }
        if let Some(s) = &self.schedule {
            p.schedule = s.parse::<Schedule>()?;
        }
        if let Some(n) = self.max_iters {
            p.max_iters = n;
        }
        if let Some(o) = self.order {
            p.order = o;
        }
        Ok(())
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long, value_enum)]
    setting: Option<Setting>,
    #[arg(long)]
    rk_include_others: bool,
    #[command(flatten)]
    graph: GraphArgs,
    #[command(flatten)]
    prop: PropArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> ppcc::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = self.preset {
            cfg.preset = Some(p);
        }
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(s) = self.setting {
            cfg.setting = s;
        }
        if self.rk_include_others {
            cfg.include_others_in_recall = true;
        }
        self.graph.apply(&mut cfg.graph)?;
        self.prop.apply(&mut cfg.propagation)?;
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(cfg)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> ppcc::Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> ppcc::Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn run(cli: Cli) -> ppcc::Result<()> {
    match cli.command {
        Command::Synth { config, preset, seed, out } => {
            let mut cfg: SynthConfig = match (config, preset) {
                (Some(_), Some(_)) => return Err(Error::Config("use either --config or --preset".into())),
                (Some(path), None) => read_json(&path)?,
                (None, Some(p)) => p.config(0),
                (None, None) => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let ds = generate(&cfg)?;
            save_dataset(&ds, &out)?;
            eprintln!(
                "wrote {} portraits, {} tracklets ({} nodes) to {}",
                ds.num_classes(),
                ds.num_tracklets(),
                ds.num_nodes(),
                out.display()
            );
        }
        Command::BuildGraph { dataset, graph, out } => {
            let mut params = GraphParams::default();
            graph.apply(&mut params)?;
            params.validate()?;
            let ds = load_dataset(&dataset)?;
            let g = build_graph(&ds, &params)?;
            g.save(&out)?;
            eprintln!("wrote graph with {} tracklets, {} edges to {}", g.num_tracklets(), g.num_edges(), out.display());
        }
        Command::Propagate { graph, prop, out, stats } => {
            let mut params = PropagationParams::default();
            prop.apply(&mut params)?;
            params.validate()?;
            let g = PropagationGraph::load(&graph)?;
            let run = propagate(&g, &params)?;
            run.state.save(&out)?;
            if let Some(path) = stats {
                write_stats(&run.stats, &path)?;
            }
            eprintln!(
                "{} sweeps, {} touched, {} frozen",
                run.stats.len(),
                run.state.touched_count(),
                run.state.frozen_count()
            );
        }
        Command::Evaluate { beliefs, dataset, setting, out, dump_rankings, rk_include_others } => {
            let ds = load_dataset(&dataset)?;
            let b = BeliefState::load(&beliefs)?;
            let opts = EvalOptions { include_others_in_recall: rk_include_others };
            let (report, ranked) = evaluate(&b, &ds, setting, opts)?;
            match out {
                Some(path) => report.save(&path)?,
                None => print!("{}", report.to_json()),
            }
            if let Some(path) = dump_rankings {
                write(&path, rankings_csv(&ranked, &ds))?;
            }
            eprintln!(
                "{}: mAP {:.4}  R@1 {:.4}  R@3 {:.4}  R@5 {:.4}",
                setting.name(),
                report.map,
                report.recall_at(1),
                report.recall_at(3),
                report.recall_at(5)
            );
        }
        Command::Run { run } => {
            let cfg = run.config()?;
            let out = run_pipeline(&cfg)?;
            let r = &out.report;
            println!(
                "{} {}: mAP {:.4}  R@1 {:.4}  R@3 {:.4}  R@5 {:.4}",
                cfg.method.name(),
                r.setting.name(),
                r.map,
                r.recall_at(1),
                r.recall_at(3),
                r.recall_at(5)
            );
        }
        Command::Ablate { run, axis, values } => {
            let cfg = run.config()?;
            let rows = run_ablation(&cfg, axis, &values)?;
            print!("{}", ablation_csv(axis, &rows));
        }
    }
    Ok(())
}

fn init_threads() -> ppcc::Result<()> {
    if let Ok(v) = std::env::var("PPCC_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("PPCC_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|_| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
