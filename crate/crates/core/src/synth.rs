//! Seeded synthetic galleries.
//!
//! Every identity owns one face anchor and one body anchor on the unit
//! sphere. A portrait sits near its face anchor. A tracklet picks an identity
//! (or a distractor identity, recorded as OTHERS), starts its body walk near
//! the identity's body anchor and drifts along the sphere instance by
//! instance; face rows are kept with probability `face_visible_prob`.
//!
//! Randomness comes from ChaCha8 with one stream per entity, all keyed by the
//! same 64-bit seed:
//!
//! | stream            | entity                              |
//! |-------------------|-------------------------------------|
//! | `0`               | layout (identities, lengths, order) |
//! | `1 + c`           | anchors of cast member `c`          |
//! | `2^32 + d`        | anchors of distractor `d`           |
//! | `2 * 2^32 + c`    | portrait of cast member `c`         |
//! | `3 * 2^32 + k`    | instances of tracklet `k`           |
//!
//! Tracklets are generated in parallel; the output does not depend on the
//! worker count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Channel, Dataset, FeatureStore, Portrait, Tracklet, OTHERS};
use crate::error::{Error, Result};

const STREAM_LAYOUT: u64 = 0;
const STREAM_DISTRACTOR: u64 = 1 << 32;
const STREAM_PORTRAIT: u64 = 2 << 32;
const STREAM_TRACKLET: u64 = 3 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_tracklets: usize,
    pub num_movies: usize,
    /// Size of the pool of distractor identities OTHERS tracklets draw from.
    pub num_distractors: usize,
    pub face_dim: usize,
    pub body_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub face_visible_prob: f64,
    /// Norm of the per-step body random walk, and of the tracklet's initial
    /// offset from its identity's body anchor.
    pub body_drift: f64,
    /// Norm of the isotropic noise added to every instance and portrait face.
    pub noise: f64,
    pub others_fraction: f64,
    /// Norm of the offset between a portrait's body feature and its anchor.
    pub portrait_body_gap: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            num_tracklets: 50,
            num_movies: 1,
            num_distractors: 5,
            face_dim: 32,
            body_dim: 32,
            min_len: 1,
            max_len: 6,
            face_visible_prob: 0.8,
            body_drift: 0.1,
            noise: 0.1,
            others_fraction: 0.1,
            portrait_body_gap: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Noise-free: every instance shows its face and matches its portrait.
    Easy,
    /// Faces are rare and bodies drift: most tracklets are reachable only
    /// through body-space links.
    Hard,
    /// Heavy feature noise, near-useless bodies and many OTHERS tracklets.
    Noisy,
}

impl Preset {
    pub fn config(self, seed: u64) -> SynthConfig {
        let base = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        match self {
            Preset::Easy => SynthConfig {
                num_movies: 1,
                face_visible_prob: 1.0,
                body_drift: 0.0,
                noise: 0.0,
                others_fraction: 0.0,
                ..base
            },
            Preset::Hard => SynthConfig {
                num_movies: 2,
                face_dim: 4,
                body_dim: 16,
                min_len: 1,
                max_len: 2,
                face_visible_prob: 0.3,
                body_drift: 0.6,
                noise: 0.4,
                others_fraction: 0.3,
                portrait_body_gap: 2.0,
                ..base
            },
            Preset::Noisy => SynthConfig {
                num_movies: 2,
                body_dim: 4,
                min_len: 1,
                max_len: 4,
                face_visible_prob: 0.5,
                body_drift: 1.5,
                noise: 0.8,
                others_fraction: 0.3,
                portrait_body_gap: 2.0,
                ..base
            },
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Preset::Easy),
            "hard" => Ok(Preset::Hard),
            "noisy" => Ok(Preset::Noisy),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let counts = [
            ("num_classes", self.num_classes),
            ("num_tracklets", self.num_tracklets),
            ("num_movies", self.num_movies),
            ("num_distractors", self.num_distractors),
            ("face_dim", self.face_dim),
            ("body_dim", self.body_dim),
            ("min_len", self.min_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v < 1) {
            return bad(format!("{name} must be at least 1"));
        }
        if self.max_len < self.min_len {
            return bad(format!("max_len {} is below min_len {}", self.max_len, self.min_len));
        }
        if self.face_dim > u16::MAX as usize || self.body_dim > u16::MAX as usize {
            return bad("feature dimensions must fit in 16 bits".into());
        }
        if !(0.0..=1.0).contains(&self.face_visible_prob) {
            return bad(format!("face_visible_prob {} outside [0, 1]", self.face_visible_prob));
        }
        if !(0.0..1.0).contains(&self.others_fraction) {
            return bad(format!("others_fraction {} outside [0, 1)", self.others_fraction));
        }
        for (name, s) in [
            ("body_drift", self.body_drift),
            ("noise", self.noise),
            ("portrait_body_gap", self.portrait_body_gap),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        if self.num_tracklets < self.num_classes * self.num_movies {
            return bad(format!(
                "num_tracklets {} cannot cover every (class, movie) pair ({} x {})",
                self.num_tracklets, self.num_classes, self.num_movies
            ));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Adds an isotropic perturbation of expected norm `scale` to `x`.
fn perturb(rng: &mut impl Rng, x: &[f64], scale: f64) -> Vec<f64> {
    let k = scale / (x.len() as f64).sqrt();
    x.iter().map(|&v| v + k * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn project(mut x: Vec<f64>) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    x
}

fn unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim);
        if v.iter().any(|&x| x != 0.0) {
            return project(v);
        }
    }
}

fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

struct Anchors {
    face: Vec<f64>,
    body: Vec<f64>,
}

fn anchors(cfg: &SynthConfig, stream_id: u64) -> Anchors {
    let mut rng = stream(cfg.seed, stream_id);
    Anchors {
        face: unit(&mut rng, cfg.face_dim),
        body: unit(&mut rng, cfg.body_dim),
    }
}

#[derive(Clone, Copy)]
enum Identity {
    Cast(usize),
    Distractor(usize),
}

struct Slot {
    identity: Identity,
    movie: usize,
    len: usize,
}

fn layout(cfg: &SynthConfig) -> Vec<Slot> {
    let mut rng = stream(cfg.seed, STREAM_LAYOUT);
    let mut slots = Vec::with_capacity(cfg.num_tracklets);
    // One credited tracklet per (class, movie) pair, so every IN query has a
    // positive.
    for c in 0..cfg.num_classes {
        for m in 0..cfg.num_movies {
            slots.push((Identity::Cast(c), m));
        }
    }
    while slots.len() < cfg.num_tracklets {
        let movie = rng.random_range(0..cfg.num_movies);
        let identity = if rng.random_bool(cfg.others_fraction) {
            Identity::Distractor(rng.random_range(0..cfg.num_distractors))
        } else {
            Identity::Cast(rng.random_range(0..cfg.num_classes))
        };
        slots.push((identity, movie));
    }
    slots.shuffle(&mut rng);
    slots
        .into_iter()
        .map(|(identity, movie)| Slot {
            identity,
            movie,
            len: rng.random_range(cfg.min_len..=cfg.max_len),
        })
        .collect()
}

struct Instances {
    face: Vec<Option<Vec<f32>>>,
    body: Vec<Vec<f32>>,
}

fn tracklet_instances(cfg: &SynthConfig, k: usize, slot: &Slot, anchors: &Anchors) -> Instances {
    let mut rng = stream(cfg.seed, STREAM_TRACKLET + k as u64);
    let mut walk = project(perturb(&mut rng, &anchors.body, cfg.body_drift));
    let mut face = Vec::with_capacity(slot.len);
    let mut body = Vec::with_capacity(slot.len);
    for i in 0..slot.len {
        if i > 0 {
            walk = project(perturb(&mut rng, &walk, cfg.body_drift));
        }
        body.push(to_f32(&perturb(&mut rng, &walk, cfg.noise)));
        let f = perturb(&mut rng, &anchors.face, cfg.noise);
        face.push(rng.random_bool(cfg.face_visible_prob).then(|| to_f32(&f)));
    }
    Instances { face, body }
}

/// Generates a dataset. Deterministic in `cfg` (including its seed).
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let cast: Vec<Anchors> = (0..cfg.num_classes).map(|c| anchors(cfg, 1 + c as u64)).collect();
    let distractors: Vec<Anchors> = (0..cfg.num_distractors)
        .map(|d| anchors(cfg, STREAM_DISTRACTOR + d as u64))
        .collect();
    let slots = layout(cfg);

    let c = cfg.num_classes;
    let total_rows = c + slots.iter().map(|s| s.len).sum::<usize>();
    let mut face = FeatureStore::new(Channel::Face, cfg.face_dim, total_rows);
    let mut body = FeatureStore::new(Channel::Body, cfg.body_dim, total_rows);

    let mut portraits = Vec::with_capacity(c);
    for (class, a) in cast.iter().enumerate() {
        let mut rng = stream(cfg.seed, STREAM_PORTRAIT + class as u64);
        let f = perturb(&mut rng, &a.face, cfg.noise);
        let b = project(perturb(&mut rng, &a.body, cfg.portrait_body_gap));
        face.set_row(class, &to_f32(&f))?;
        body.set_row(class, &to_f32(&b))?;
        portraits.push(Portrait {
            cast_id: format!("cast_{class:03}"),
            class_index: class as u32,
            face_row: class as u32,
            body_row: Some(class as u32),
        });
    }

    let generated: Vec<Instances> = slots
        .par_iter()
        .enumerate()
        .map(|(k, slot)| {
            let a = match slot.identity {
                Identity::Cast(i) => &cast[i],
                Identity::Distractor(d) => &distractors[d],
            };
            tracklet_instances(cfg, k, slot, a)
        })
        .collect();

    let mut tracklets = Vec::with_capacity(slots.len());
    let mut row = c;
    for (k, (slot, inst)) in slots.iter().zip(generated).enumerate() {
        let start = row;
        for (f, b) in inst.face.iter().zip(&inst.body) {
            if let Some(f) = f {
                face.set_row(row, f)?;
            }
            body.set_row(row, b)?;
            row += 1;
        }
        tracklets.push(Tracklet {
            id: k as u32,
            movie: format!("movie_{:02}", slot.movie),
            row_start: start as u32,
            row_end: row as u32,
            gt: match slot.identity {
                Identity::Cast(i) => i as i32,
                Identity::Distractor(_) => OTHERS,
            },
        });
    }

    Ok(Dataset::from_parts(portraits, tracklets, face, body, Some("synthetic".into())))
}
