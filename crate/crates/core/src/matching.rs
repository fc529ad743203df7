//! Direct portrait-to-tracklet matching baselines.
//!
//! A tracklet is represented by the mean of its present instance features;
//! its score for class `c` is `(1 + cos) / 2` against portrait `c`, so scores
//! live in `[0, 1]` and ranking is unchanged. Tracklets with nothing to
//! compare stay untouched and sink to the bottom of every ranking.

use serde::{Deserialize, Serialize};

use crate::dataset::{Channel, Dataset, FeatureStore, Portrait};
use crate::error::Result;
use crate::graph::{cosine_affinity, FusionWeights};
use crate::propagation::BeliefState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MatchKind {
    Face,
    Body,
    /// Weighted cosine; a channel missing on either side contributes 0.
    Fused(FusionWeights),
}

fn mean_row(store: &FeatureStore, rows: impl Iterator<Item = usize>) -> Option<Vec<f32>> {
    let mut acc = vec![0.0f64; store.dim()];
    let mut n = 0usize;
    for r in rows {
        if let Some(v) = store.row(r) {
            acc.iter_mut().zip(v).for_each(|(a, &x)| *a += x as f64);
            n += 1;
        }
    }
    (n > 0 && acc.iter().any(|&x| x != 0.0)).then(|| acc.iter().map(|&x| (x / n as f64) as f32).collect())
}

fn portrait_row(p: &Portrait, channel: Channel) -> Option<usize> {
    match channel {
        Channel::Face => Some(p.face_row as usize),
        Channel::Body => p.body_row.map(|r| r as usize),
    }
}

fn channel_cos(ds: &Dataset, mean: Option<&[f32]>, p: &Portrait, channel: Channel) -> Result<Option<f64>> {
    let store = ds.store(channel);
    match (mean, portrait_row(p, channel).and_then(|r| store.row(r))) {
        (Some(m), Some(v)) => Ok(Some(cosine_affinity(m, v)?)),
        _ => Ok(None),
    }
}

/// Scores every tracklet against every portrait.
pub fn match_scores(ds: &Dataset, kind: MatchKind) -> Result<BeliefState> {
    let portraits = ds.portraits_by_class();
    let mut scores = Vec::with_capacity(ds.num_tracklets());
    for t in &ds.tracklets {
        let face = mean_row(&ds.face, t.rows());
        let body = mean_row(&ds.body, t.rows());
        let mut v = vec![0.0; portraits.len()];
        for (c, p) in portraits.iter().enumerate() {
            let cos = match kind {
                MatchKind::Face => channel_cos(ds, face.as_deref(), p, Channel::Face)?,
                MatchKind::Body => channel_cos(ds, body.as_deref(), p, Channel::Body)?,
                MatchKind::Fused(w) => {
                    let f = channel_cos(ds, face.as_deref(), p, Channel::Face)?;
                    let b = channel_cos(ds, body.as_deref(), p, Channel::Body)?;
                    (f.is_some() || b.is_some())
                        .then(|| w.face * f.unwrap_or(0.0) + w.body * b.unwrap_or(0.0))
                }
            };
            if let Some(cos) = cos {
                v[c] = (1.0 + cos) / 2.0;
            }
        }
        scores.push(v);
    }
    BeliefState::from_scores(portraits.len(), scores)
}
