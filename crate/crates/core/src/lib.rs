//! Identity search over person tracklets from a single labeled portrait per
//! cast member.
//!
//! Labels spread from portraits to gallery tracklets over a graph of visual
//! links (strongest instance pair per tracklet pair) and temporal links (one
//! shared belief per tracklet). The main update is competitive consensus with
//! progressive freezing; linear diffusion and direct matching are included as
//! baselines, together with mAP and R@k evaluation and a seeded synthetic
//! gallery generator.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod matching;
pub mod pipeline;
pub mod propagation;
pub mod synth;

pub use dataset::{load_dataset, save_dataset, validate_dataset, Channel, Dataset, FeatureStore, Portrait, Tracklet, Violation, OTHERS};
pub use error::{Error, Result};
pub use evaluation::{average_precision, evaluate, mean_ap, rank_gallery, recall_at_k, EvalOptions, EvalReport, Setting};
pub use graph::{build_graph, cosine_affinity, tracklet_pair_affinity, GraphParams, NodeRef, PropagationGraph};
pub use pipeline::{run_ablation, run_pipeline, run_pipeline_with, AblationAxis, Method, RunConfig};
pub use propagation::{
    consensus_evidence, consensus_update, freezing_decision, linear_diffusion_update, objective, propagate,
    propagate_with, BeliefState, Mode, PropagationParams, Schedule, UpdateOrder,
};
pub use synth::{generate, Preset, SynthConfig};
