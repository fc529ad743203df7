//! Python bindings: datasets, graphs, propagation and evaluation.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;

use ppcc::graph::FusionWeights;
use ppcc::{Channel, Error, Method, Mode, Preset, Schedule, Setting, UpdateOrder};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingFile(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn parse_mode(s: &str) -> PyResult<Mode> {
    match s {
        "ppcc" => Ok(Mode::CompetitiveConsensus),
        "lp" => Ok(Mode::LinearDiffusion),
        other => Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
    }
}

fn parse_order(s: &str) -> PyResult<UpdateOrder> {
    match s {
        "seq" => Ok(UpdateOrder::Sequential),
        "sync" => Ok(UpdateOrder::Synchronous),
        other => Err(PyValueError::new_err(format!("unknown order `{other}`"))),
    }
}

/// Portraits, tracklets and their per-instance features.
#[pyclass(name = "Dataset", module = "pyppcc", frozen)]
pub struct PyDataset(ppcc::Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ppcc::load_dataset(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ppcc::save_dataset(&self.0, &path).map_err(to_py)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    #[getter]
    fn num_tracklets(&self) -> usize {
        self.0.num_tracklets()
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.0.num_nodes()
    }

    #[getter]
    fn cast_ids(&self) -> Vec<String> {
        self.0.portraits_by_class().iter().map(|p| p.cast_id.clone()).collect()
    }

    #[getter]
    fn movies(&self) -> Vec<String> {
        self.0.movies().into_iter().map(String::from).collect()
    }

    /// Ground-truth class per tracklet, -1 for OTHERS.
    #[getter]
    fn labels(&self) -> Vec<i32> {
        self.0.tracklets.iter().map(|t| t.gt).collect()
    }

    /// (id, movie, row_start, row_end, gt) per tracklet.
    fn tracklets(&self) -> Vec<(u32, String, u32, u32, i32)> {
        self.0.tracklets.iter().map(|t| (t.id, t.movie.clone(), t.row_start, t.row_end, t.gt)).collect()
    }

    /// Feature row of `channel` ("face" or "body"); None when absent.
    fn feature(&self, channel: &str, row: usize) -> PyResult<Option<Vec<f32>>> {
        let store = self.0.store(parse::<Channel>(channel)?);
        if row >= store.rows() {
            return Err(PyValueError::new_err(format!("row {row} out of range for {} rows", store.rows())));
        }
        Ok(store.row(row).map(<[f32]>::to_vec))
    }

    /// Every validation problem, as messages. Empty when the dataset is valid.
    fn validate(&self) -> Vec<String> {
        ppcc::validate_dataset(&self.0).iter().map(ToString::to_string).collect()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(classes={}, tracklets={})", self.0.num_classes(), self.0.num_tracklets())
    }
}

/// Sparse, normalized neighbor lists of every tracklet.
#[pyclass(name = "Graph", module = "pyppcc", frozen)]
pub struct PyGraph(ppcc::PropagationGraph);

#[pymethods]
impl PyGraph {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ppcc::PropagationGraph::load(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(to_py)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    #[getter]
    fn num_tracklets(&self) -> usize {
        self.0.num_tracklets()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.0.num_edges()
    }

    /// (node id, affinity, alpha) per neighbor of tracklet `k`. Node ids
    /// below `num_classes` are portraits.
    fn neighbors(&self, k: usize) -> PyResult<Vec<(u32, f64, f64)>> {
        if k >= self.0.num_tracklets() {
            return Err(PyValueError::new_err(format!("tracklet {k} out of range")));
        }
        let c = self.0.num_classes();
        Ok(self.0.neighbors(k).iter().map(|n| (n.node.id(c), n.affinity, n.alpha)).collect())
    }

    fn __repr__(&self) -> String {
        format!("Graph(tracklets={}, edges={})", self.0.num_tracklets(), self.0.num_edges())
    }
}

/// Class probabilities per tracklet plus frozen and touched masks.
#[pyclass(name = "Beliefs", module = "pyppcc", frozen)]
pub struct PyBeliefs(ppcc::BeliefState);

#[pymethods]
impl PyBeliefs {
    #[new]
    fn new(scores: Vec<Vec<f64>>, num_classes: usize) -> PyResult<Self> {
        ppcc::BeliefState::from_scores(num_classes, scores).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ppcc::BeliefState::load(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(to_py)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    #[getter]
    fn num_tracklets(&self) -> usize {
        self.0.num_tracklets()
    }

    #[getter]
    fn frozen_count(&self) -> usize {
        self.0.frozen_count()
    }

    #[getter]
    fn touched_count(&self) -> usize {
        self.0.touched_count()
    }

    fn prob(&self, k: usize) -> PyResult<Vec<f64>> {
        self.check(k)?;
        Ok(self.0.prob(k).to_vec())
    }

    fn is_frozen(&self, k: usize) -> PyResult<bool> {
        self.check(k)?;
        Ok(self.0.is_frozen(k))
    }

    fn is_touched(&self, k: usize) -> PyResult<bool> {
        self.check(k)?;
        Ok(self.0.is_touched(k))
    }

    fn to_list(&self) -> Vec<Vec<f64>> {
        (0..self.0.num_tracklets()).map(|k| self.0.prob(k).to_vec()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Beliefs(classes={}, tracklets={}, frozen={})",
            self.0.num_classes(),
            self.0.num_tracklets(),
            self.0.frozen_count()
        )
    }
}

impl PyBeliefs {
    fn check(&self, k: usize) -> PyResult<()> {
        if k >= self.0.num_tracklets() {
            return Err(PyValueError::new_err(format!("tracklet {k} out of range")));
        }
        Ok(())
    }
}

/// Evaluation summary: mAP, R@k and per-query AP.
#[pyclass(name = "Report", module = "pyppcc", frozen)]
pub struct PyReport(ppcc::EvalReport);

#[pymethods]
impl PyReport {
    #[getter]
    fn setting(&self) -> &'static str {
        self.0.setting.name()
    }

    #[getter]
    fn map(&self) -> f64 {
        self.0.map
    }

    #[getter]
    fn recall(&self) -> BTreeMap<String, f64> {
        self.0.recall.clone()
    }

    /// (query, ap) per query.
    fn query_aps(&self) -> Vec<(String, f64)> {
        self.0.queries.iter().map(|q| (q.query.clone(), q.ap)).collect()
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    fn __repr__(&self) -> String {
        format!("Report(setting={}, map={:.4})", self.0.setting.name(), self.0.map)
    }
}

/// Synthetic dataset from a preset ("easy", "hard", "noisy").
#[pyfunction]
#[pyo3(signature = (preset = "hard", seed = 0))]
fn generate(preset: &str, seed: u64) -> PyResult<PyDataset> {
    ppcc::generate(&parse::<Preset>(preset)?.config(seed)).map(PyDataset).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (dataset, knn = 20, floor = 0.0, fusion = Some((0.8, 0.2))))]
fn build_graph(dataset: &PyDataset, knn: usize, floor: f64, fusion: Option<(f64, f64)>) -> PyResult<PyGraph> {
    let params = ppcc::GraphParams {
        knn,
        floor,
        fusion: fusion.map(|(face, body)| FusionWeights { face, body }),
        ..ppcc::GraphParams::default()
    };
    ppcc::build_graph(&dataset.0, &params).map(PyGraph).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (graph, mode = "ppcc", temperature = 0.1, top_k = 1, schedule = "step", max_iters = 8, order = "seq"))]
fn propagate(
    graph: &PyGraph,
    mode: &str,
    temperature: f64,
    top_k: usize,
    schedule: &str,
    max_iters: usize,
    order: &str,
) -> PyResult<PyBeliefs> {
    let params = ppcc::PropagationParams {
        mode: parse_mode(mode)?,
        temperature,
        top_k,
        schedule: parse::<Schedule>(schedule)?,
        max_iters,
        order: parse_order(order)?,
    };
    ppcc::propagate(&graph.0, &params).map(|run| PyBeliefs(run.state)).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (beliefs, dataset, setting = "across", include_others = false))]
fn evaluate(beliefs: &PyBeliefs, dataset: &PyDataset, setting: &str, include_others: bool) -> PyResult<PyReport> {
    let opts = ppcc::EvalOptions { include_others_in_recall: include_others };
    ppcc::evaluate(&beliefs.0, &dataset.0, parse::<Setting>(setting)?, opts)
        .map(|(report, _)| PyReport(report))
        .map_err(to_py)
}

/// Generates, builds, propagates and evaluates, writing every artifact to
/// `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, preset = "hard", seed = 0, method = "ppcc-vt", setting = "across"))]
fn run_pipeline(out_dir: PathBuf, preset: &str, seed: u64, method: &str, setting: &str) -> PyResult<PyReport> {
    let mut cfg = ppcc::RunConfig::for_preset(parse::<Preset>(preset)?, seed, parse::<Method>(method)?, out_dir);
    cfg.setting = parse::<Setting>(setting)?;
    ppcc::run_pipeline(&cfg).map(|out| PyReport(out.report)).map_err(to_py)
}

/// Cosine similarity of two equal-length vectors.
#[pyfunction]
fn cosine_affinity(u: Vec<f32>, v: Vec<f32>) -> PyResult<f64> {
    ppcc::cosine_affinity(&u, &v).map_err(to_py)
}

/// Tempered softmax of an evidence vector.
#[pyfunction]
#[pyo3(signature = (eta, temperature = 0.1))]
fn consensus_update(eta: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) || eta.is_empty() {
        return Err(PyValueError::new_err("need a positive temperature and a non-empty evidence vector"));
    }
    Ok(ppcc::consensus_update(&eta, temperature))
}

/// AP of a ranked relevance list; 0 when nothing is relevant.
#[pyfunction]
fn average_precision(relevant: Vec<bool>) -> f64 {
    ppcc::average_precision(&relevant)
}

/// Gallery indices ranked for `class`, with their scores.
#[pyfunction]
fn rank_gallery(beliefs: &PyBeliefs, class: usize, gallery: Vec<usize>) -> PyResult<Vec<(usize, f64)>> {
    ppcc::rank_gallery(class, &beliefs.0, &gallery).map_err(to_py)
}

#[pymodule]
fn pyppcc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("OTHERS", ppcc::OTHERS)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyBeliefs>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(build_graph, m)?)?;
    m.add_function(wrap_pyfunction!(propagate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_affinity, m)?)?;
    m.add_function(wrap_pyfunction!(consensus_update, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(rank_gallery, m)?)?;
    Ok(())
}
