//! Search protocol and metrics.
//!
//! A query is a cast member; the gallery is ranked by each tracklet's belief
//! for that cast member's class. Under [`Setting::In`] a query is a (cast,
//! movie) pair ranked against the movie's full gallery including OTHERS;
//! under [`Setting::Across`] it is ranked against every credited tracklet.
//! R@k ranks identities per tracklet instead.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::propagation::BeliefState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    In,
    Across,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::In => "in",
            Setting::Across => "across",
        }
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" => Ok(Setting::In),
            "across" => Ok(Setting::Across),
            other => Err(Error::Config(format!("unknown setting `{other}`"))),
        }
    }
}

/// Orders `gallery` by descending belief in `class`; untouched tracklets score
/// zero and ties go to the lower tracklet index.
pub fn rank_gallery(class: usize, beliefs: &BeliefState, gallery: &[usize]) -> Result<Vec<(usize, f64)>> {
    if class >= beliefs.num_classes() {
        return Err(Error::InvalidInput(format!(
            "class {class} outside 0..{}",
            beliefs.num_classes()
        )));
    }
    let mut ranked = Vec::with_capacity(gallery.len());
    for &k in gallery {
        if k >= beliefs.num_tracklets() {
            return Err(Error::InvalidInput(format!("tracklet {k} has no belief vector")));
        }
        let score = if beliefs.is_touched(k) { beliefs.prob(k)[class] } else { 0.0 };
        ranked.push((k, score));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// Mean over relevant positions of precision at that position; 0 when nothing
/// is relevant.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: String,
    pub class: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub movie: Option<String>,
    pub gallery_size: usize,
    pub positives: usize,
    pub ap: f64,
    /// Set for queries that were excluded from the mean or scored as 0 by rule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
    #[serde(skip)]
    pub ranking: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub setting: Setting,
    pub map: f64,
    pub queries: Vec<QueryResult>,
}

fn check_cover(beliefs: &BeliefState, ds: &Dataset) -> Result<()> {
    if beliefs.num_tracklets() != ds.num_tracklets() || beliefs.num_classes() != ds.num_classes() {
        return Err(Error::InvalidInput(format!(
            "beliefs cover {} tracklets x {} classes, dataset has {} x {}",
            beliefs.num_tracklets(),
            beliefs.num_classes(),
            ds.num_tracklets(),
            ds.num_classes()
        )));
    }
    Ok(())
}

struct Query {
    name: String,
    class: usize,
    movie: Option<String>,
    gallery: Vec<usize>,
}

fn queries(ds: &Dataset, setting: Setting) -> Vec<Query> {
    let cast = ds.portraits_by_class();
    match setting {
        Setting::Across => {
            let gallery: Vec<usize> = (0..ds.num_tracklets()).filter(|&k| ds.tracklets[k].label().is_some()).collect();
            cast.iter()
                .map(|p| Query {
                    name: p.cast_id.clone(),
                    class: p.class_index as usize,
                    movie: None,
                    gallery: gallery.clone(),
                })
                .collect()
        }
        Setting::In => {
            let mut out = Vec::new();
            for movie in ds.movies() {
                let gallery: Vec<usize> = (0..ds.num_tracklets()).filter(|&k| ds.tracklets[k].movie == movie).collect();
                for p in &cast {
                    out.push(Query {
                        name: format!("{}@{movie}", p.cast_id),
                        class: p.class_index as usize,
                        movie: Some(movie.to_string()),
                        gallery: gallery.clone(),
                    });
                }
            }
            out
        }
    }
}

/// Per-query AP and their unweighted mean. Queries with an empty gallery are
/// reported but left out of the mean; queries without positives count as 0.
pub fn mean_ap(beliefs: &BeliefState, ds: &Dataset, setting: Setting) -> Result<MapResult> {
    check_cover(beliefs, ds)?;
    let mut results = Vec::new();
    for q in queries(ds, setting) {
        let ranking = rank_gallery(q.class, beliefs, &q.gallery)?;
        let relevant: Vec<bool> = ranking.iter().map(|&(k, _)| ds.tracklets[k].label() == Some(q.class)).collect();
        let positives = relevant.iter().filter(|&&r| r).count();
        let flag = if q.gallery.is_empty() {
            Some("empty gallery; excluded".to_string())
        } else if positives == 0 {
            Some("no positives".to_string())
        } else {
            None
        };
        results.push(QueryResult {
            query: q.name,
            class: q.class,
            movie: q.movie,
            gallery_size: q.gallery.len(),
            positives,
            ap: average_precision(&relevant),
            flag,
            ranking,
        });
    }
    let counted: Vec<f64> = results.iter().filter(|r| r.gallery_size > 0).map(|r| r.ap).collect();
    let map = if counted.is_empty() { 0.0 } else { counted.iter().sum::<f64>() / counted.len() as f64 };
    Ok(MapResult { setting, map, queries: results })
}

/// Ranks identities for `k` by descending belief, ties by ascending class.
pub fn rank_identities(beliefs: &BeliefState, k: usize) -> Vec<usize> {
    let p = beliefs.prob(k);
    let mut classes: Vec<usize> = (0..p.len()).collect();
    classes.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    classes
}

/// Fraction of credited tracklets whose true identity is within the top `k`
/// of their identity ranking. With `include_others`, OTHERS tracklets join the
/// denominator and always count as misses.
pub fn recall_at_k(beliefs: &BeliefState, ds: &Dataset, ks: &[usize], include_others: bool) -> Result<Vec<(usize, f64)>> {
    check_cover(beliefs, ds)?;
    let mut hits = vec![0usize; ks.len()];
    let mut total = 0usize;
    for (k, t) in ds.tracklets.iter().enumerate() {
        match t.label() {
            Some(gt) => {
                total += 1;
                let ranked = rank_identities(beliefs, k);
                let pos = ranked.iter().position(|&c| c == gt).expect("gt is a valid class");
                for (h, &kk) in hits.iter_mut().zip(ks) {
                    if pos < kk {
                        *h += 1;
                    }
                }
            }
            None if include_others => total += 1,
            None => {}
        }
    }
    Ok(ks
        .iter()
        .zip(hits)
        .map(|(&kk, h)| (kk, if total == 0 { 0.0 } else { h as f64 / total as f64 }))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    pub include_others_in_recall: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub map: f64,
    pub recall: BTreeMap<String, f64>,
    pub num_queries: usize,
    pub gallery_sizes: Vec<usize>,
    pub queries: Vec<QueryResult>,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.recall[&format!("R@{k}")]
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

pub const RECALL_KS: [usize; 3] = [1, 3, 5];

pub fn evaluate(beliefs: &BeliefState, ds: &Dataset, setting: Setting, opts: EvalOptions) -> Result<(EvalReport, MapResult)> {
    let m = mean_ap(beliefs, ds, setting)?;
    let recall = recall_at_k(beliefs, ds, &RECALL_KS, opts.include_others_in_recall)?
        .into_iter()
        .map(|(k, r)| (format!("R@{k}"), r))
        .collect();
    let report = EvalReport {
        setting,
        map: m.map,
        recall,
        num_queries: m.queries.len(),
        gallery_sizes: m.queries.iter().map(|q| q.gallery_size).collect(),
        queries: m.queries.clone(),
    };
    Ok((report, m))
}

/// CSV of every ranking: `query,rank,tracklet,score,relevant`.
pub fn rankings_csv(result: &MapResult, ds: &Dataset) -> String {
    let mut out = String::from("query,rank,tracklet,score,relevant\n");
    for q in &result.queries {
        for (rank, &(k, score)) in q.ranking.iter().enumerate() {
            let relevant = ds.tracklets[k].label() == Some(q.class);
            writeln!(out, "{},{},{},{},{}", q.query, rank + 1, ds.tracklets[k].id, score, relevant as u8).unwrap();
        }
    }
    out
}
