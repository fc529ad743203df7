//! Tracklet-level propagation graph.
//!
//! Every tracklet keeps at most one visual link to each other tracklet and to
//! each portrait: the strongest instance pair between the two. Links below the
//! affinity floor (and non-positive links) are dropped, each tracklet keeps its
//! `knn` strongest links, and the kept affinities are normalized into weights
//! `alpha` that sum to one per tracklet. Portraits are sources only and carry
//! no neighbor list. Temporal links are structural: a tracklet is a single
//! node.
//!
//! # Binary format
//!
//! All integers and floats little-endian.
//!
//! ```text
//! header
//!   8 bytes  magic "PPCCGRPH"
//!   u32      format version (1)
//!   u32      num_classes C
//!   u32      num_tracklets M
//!   u32      knn
//!   f64      affinity floor
//!   u8       portrait channel (0 face, 1 body)
//!   u8       gallery channel
//!   u8       fusion enabled (0/1)
//!   u8       reserved (0)
//!   f64      fusion face weight
//!   f64      fusion body weight
//! then for each tracklet k in 0..M
//!   u32      neighbor count n
//!   n x { u32 neighbor node id, f64 affinity, f64 alpha,
//!         u32 anchor row in k, u32 anchor row in neighbor }
//! ```
//!
//! Node ids put portraits first: portrait of class `c` is `c`, tracklet `k`
//! is `C + k`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Channel, Dataset, FeatureStore, Portrait, Tracklet};
use crate::error::{Error, Result};

const GRAPH_MAGIC: &[u8; 8] = b"PPCCGRPH";
const GRAPH_VERSION: u32 = 1;

/// Cosine similarity `u.v / (|u| |v|)`, accumulated in f64.
pub fn cosine_affinity(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            entity: "cosine operands".into(),
            expected: u.len(),
            found: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidInput("cosine of a zero-norm vector".into()));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// The other side of a candidate link.
#[derive(Debug, Clone, Copy)]
pub enum Endpoint<'a> {
    Tracklet(&'a Tracklet),
    Portrait(&'a Portrait),
}

impl Endpoint<'_> {
    fn rows(&self, channel: Channel) -> Vec<usize> {
        match self {
            Endpoint::Tracklet(t) => t.rows().collect(),
            Endpoint::Portrait(p) => match channel {
                Channel::Face => vec![p.face_row as usize],
                Channel::Body => p.body_row.map(|r| r as usize).into_iter().collect(),
            },
        }
    }
}

/// Strongest instance-pair affinity and the pair attaining it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairAffinity {
    pub affinity: f64,
    /// (row in the first endpoint, row in the second).
    pub anchor: (usize, usize),
}

/// Max cosine over all present row pairs of `a` and `b` in `store`. `None`
/// when either side has no present row. Ties keep the first pair in row order.
pub fn tracklet_pair_affinity(
    a: &Tracklet,
    b: Endpoint<'_>,
    store: &FeatureStore,
) -> Result<Option<PairAffinity>> {
    let mut best: Option<PairAffinity> = None;
    let other = b.rows(store.channel());
    for ra in a.rows() {
        let Some(u) = store.row(ra) else { continue };
        for &rb in &other {
            let Some(v) = store.row(rb) else { continue };
            let affinity = cosine_affinity(u, v)?;
            if best.is_none_or(|x| affinity > x.affinity) {
                best = Some(PairAffinity { affinity, anchor: (ra, rb) });
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub face: f64,
    pub body: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { face: 0.8, body: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphParams {
    pub knn: usize,
    pub floor: f64,
    pub portrait_channel: Channel,
    pub gallery_channel: Channel,
    /// Face/body fusion for tracklet-tracklet instance pairs where both
    /// instances have both channels present. `None` disables fusion.
    pub fusion: Option<FusionWeights>,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            knn: 20,
            floor: 0.0,
            portrait_channel: Channel::Face,
            gallery_channel: Channel::Body,
            fusion: Some(FusionWeights::default()),
        }
    }
}

impl GraphParams {
    pub fn validate(&self) -> Result<()> {
        if self.knn < 1 {
            return Err(Error::Config("knn must be at least 1".into()));
        }
        if !self.floor.is_finite() {
            return Err(Error::Config("affinity floor must be finite".into()));
        }
        if let Some(w) = self.fusion {
            if w.face < 0.0 || w.body < 0.0 || (w.face + w.body - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "fusion weights {},{} must be non-negative and sum to 1",
                    w.face, w.body
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeRef {
    Portrait(u32),
    Tracklet(u32),
}

impl NodeRef {
    pub fn id(self, num_classes: usize) -> u32 {
        match self {
            NodeRef::Portrait(c) => c,
            NodeRef::Tracklet(k) => num_classes as u32 + k,
        }
    }

    pub fn from_id(id: u32, num_classes: usize) -> Self {
        if (id as usize) < num_classes {
            NodeRef::Portrait(id)
        } else {
            NodeRef::Tracklet(id - num_classes as u32)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub node: NodeRef,
    /// Strongest instance-pair affinity between the tracklet and this node.
    pub affinity: f64,
    /// Normalized weight; sums to one over a tracklet's neighbors.
    pub alpha: f64,
    /// (row in the owning tracklet, row in the neighbor).
    pub anchor: (u32, u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationGraph {
    num_classes: usize,
    params: GraphParams,
    neighbors: Vec<Vec<Neighbor>>,
}

impl PropagationGraph {
    /// Assembles a graph from raw affinities, applying the floor, top-K and
    /// normalization steps. Mostly useful for hand-built graphs.
    pub fn from_affinities(
        num_classes: usize,
        params: GraphParams,
        candidates: Vec<Vec<(NodeRef, f64)>>,
    ) -> Result<Self> {
        params.validate()?;
        let neighbors = candidates
            .into_iter()
            .map(|c| {
                let c = c.into_iter().map(|(node, affinity)| (node, PairAffinity { affinity, anchor: (0, 0) }));
                sparsify(c.collect(), &params)
            })
            .collect();
        Ok(Self { num_classes, params, neighbors })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_tracklets(&self) -> usize {
        self.neighbors.len()
    }

    pub fn params(&self) -> &GraphParams {
        &self.params
    }

    pub fn neighbors(&self, k: usize) -> &[Neighbor] {
        &self.neighbors[k]
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.num_edges() * 28 + self.neighbors.len() * 4);
        out.extend_from_slice(GRAPH_MAGIC);
        for v in [GRAPH_VERSION, self.num_classes as u32, self.neighbors.len() as u32, self.params.knn as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.params.floor.to_le_bytes());
        let fusion = self.params.fusion;
        out.extend_from_slice(&[
            channel_code(self.params.portrait_channel),
            channel_code(self.params.gallery_channel),
            fusion.is_some() as u8,
            0,
        ]);
        let w = fusion.unwrap_or(FusionWeights { face: 0.0, body: 0.0 });
        out.extend_from_slice(&w.face.to_le_bytes());
        out.extend_from_slice(&w.body.to_le_bytes());
        for list in &self.neighbors {
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for n in list {
                out.extend_from_slice(&n.node.id(self.num_classes).to_le_bytes());
                out.extend_from_slice(&n.affinity.to_le_bytes());
                out.extend_from_slice(&n.alpha.to_le_bytes());
                out.extend_from_slice(&n.anchor.0.to_le_bytes());
                out.extend_from_slice(&n.anchor.1.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != GRAPH_MAGIC {
            return Err(Error::InvalidInput("not a graph file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != GRAPH_VERSION {
            return Err(Error::InvalidInput(format!("unsupported graph version {version}")));
        }
        let num_classes = r.u32()? as usize;
        let m = r.u32()? as usize;
        let knn = r.u32()? as usize;
        let floor = r.f64()?;
        let flags = r.take(4)?;
        let (pc, gc, fused) = (channel_from(flags[0])?, channel_from(flags[1])?, flags[2] != 0);
        let (wf, wb) = (r.f64()?, r.f64()?);
        let params = GraphParams {
            knn,
            floor,
            portrait_channel: pc,
            gallery_channel: gc,
            fusion: fused.then_some(FusionWeights { face: wf, body: wb }),
        };
        let total = num_classes + m;
        let mut neighbors = Vec::with_capacity(m);
        for _ in 0..m {
            let n = r.u32()? as usize;
            let mut list = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let id = r.u32()?;
                if id as usize >= total {
                    return Err(Error::InvalidInput(format!("neighbor id {id} out of range")));
                }
                list.push(Neighbor {
                    node: NodeRef::from_id(id, num_classes),
                    affinity: r.f64()?,
                    alpha: r.f64()?,
                    anchor: (r.u32()?, r.u32()?),
                });
            }
            neighbors.push(list);
        }
        if r.pos != bytes.len() {
            return Err(Error::InvalidInput("trailing bytes after graph".into()));
        }
        Ok(Self { num_classes, params, neighbors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::format(path, "graph", e))
    }
}

fn channel_code(c: Channel) -> u8 {
    match c {
        Channel::Face => 0,
        Channel::Body => 1,
    }
}

fn channel_from(b: u8) -> Result<Channel> {
    match b {
        0 => Ok(Channel::Face),
        1 => Ok(Channel::Body),
        _ => Err(Error::InvalidInput(format!("bad channel code {b}"))),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::InvalidInput("truncated graph".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Unit-normalized copy of a feature store, for fast repeated cosines.
struct UnitRows {
    dim: usize,
    data: Vec<f64>,
    present: Vec<bool>,
}

impl UnitRows {
    fn new(store: &FeatureStore) -> Self {
        let dim = store.dim();
        let mut data = vec![0.0; store.rows() * dim];
        let mut present = vec![false; store.rows()];
        for (r, p) in present.iter_mut().enumerate() {
            if let Some(v) = store.row(r) {
                let n = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                if n > 0.0 {
                    for (d, &x) in data[r * dim..(r + 1) * dim].iter_mut().zip(v) {
                        *d = x as f64 / n;
                    }
                    *p = true;
                }
            }
        }
        Self { dim, data, present }
    }

    fn dot(&self, a: usize, b: usize) -> Option<f64> {
        if !(self.present[a] && self.present[b]) {
            return None;
        }
        let (x, y) = (&self.data[a * self.dim..(a + 1) * self.dim], &self.data[b * self.dim..(b + 1) * self.dim]);
        Some(x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>().clamp(-1.0, 1.0))
    }
}

struct Affinities<'a> {
    portrait: &'a UnitRows,
    gallery: &'a UnitRows,
    fusion: Option<(FusionWeights, &'a UnitRows, &'a UnitRows)>,
}

impl Affinities<'_> {
    fn gallery_pair(&self, a: usize, b: usize) -> Option<f64> {
        if let Some((w, face, body)) = self.fusion {
            if let (Some(f), Some(g)) = (face.dot(a, b), body.dot(a, b)) {
                return Some(w.face * f + w.body * g);
            }
        }
        self.gallery.dot(a, b)
    }

    fn best<I, J>(&self, rows_a: I, rows_b: J, pair: impl Fn(usize, usize) -> Option<f64>) -> Option<PairAffinity>
    where
        I: Iterator<Item = usize>,
        J: Iterator<Item = usize> + Clone,
    {
        let mut best: Option<PairAffinity> = None;
        for a in rows_a {
            for b in rows_b.clone() {
                if let Some(affinity) = pair(a, b) {
                    if best.is_none_or(|x| affinity > x.affinity) {
                        best = Some(PairAffinity { affinity, anchor: (a, b) });
                    }
                }
            }
        }
        best
    }
}

/// Drops links below the floor or non-positive, keeps the `knn` strongest
/// (ties by ascending node id) and normalizes.
fn sparsify(mut cands: Vec<(NodeRef, PairAffinity)>, params: &GraphParams) -> Vec<Neighbor> {
    cands.retain(|(_, p)| p.affinity > 0.0 && p.affinity >= params.floor);
    cands.sort_by(|(na, a), (nb, b)| b.affinity.total_cmp(&a.affinity).then(na.cmp(nb)));
    cands.truncate(params.knn);
    let total: f64 = cands.iter().map(|(_, p)| p.affinity).sum();
    cands
        .into_iter()
        .map(|(node, p)| Neighbor {
            node,
            affinity: p.affinity,
            alpha: p.affinity / total,
            anchor: (p.anchor.0 as u32, p.anchor.1 as u32),
        })
        .collect()
}

/// Builds the sparse tracklet graph for `ds`. Parallel over tracklets.
pub fn build_graph(ds: &Dataset, params: &GraphParams) -> Result<PropagationGraph> {
    params.validate()?;
    let face = UnitRows::new(&ds.face);
    let body = UnitRows::new(&ds.body);
    let unit = |c: Channel| match c {
        Channel::Face => &face,
        Channel::Body => &body,
    };
    let aff = Affinities {
        portrait: unit(params.portrait_channel),
        gallery: unit(params.gallery_channel),
        fusion: params.fusion.map(|w| (w, &face, &body)),
    };

    let portraits: Vec<(u32, Vec<usize>)> = ds
        .portraits
        .iter()
        .map(|p| (p.class_index, Endpoint::Portrait(p).rows(params.portrait_channel)))
        .collect();

    let neighbors = ds
        .tracklets
        .par_iter()
        .enumerate()
        .map(|(k, t)| {
            let mut cands = Vec::new();
            for (class, rows) in &portraits {
                let pair = |a, b| aff.portrait.dot(a, b);
                if let Some(p) = aff.best(t.rows(), rows.iter().copied(), pair) {
                    cands.push((NodeRef::Portrait(*class), p));
                }
            }
            for (l, other) in ds.tracklets.iter().enumerate() {
                if l == k {
                    continue;
                }
                if let Some(p) = aff.best(t.rows(), other.rows(), |a, b| aff.gallery_pair(a, b)) {
                    cands.push((NodeRef::Tracklet(l as u32), p));
                }
            }
            sparsify(cands, params)
        })
        .collect();

    Ok(PropagationGraph {
        num_classes: ds.num_classes(),
        params: params.clone(),
        neighbors,
    })
}
