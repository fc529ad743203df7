//! In-memory and on-disk data model: portraits, tracklets and per-channel
//! instance features.
//!
//! # On-disk layout
//!
//! A dataset directory holds
//!
//! * `manifest.json` with keys `version`, `num_classes`, `num_tracklets`,
//!   `channels` (`[{name, dim, rows, file}]`), `portraits_file`,
//!   `tracklets_file` and an optional `split` tag;
//! * one feature matrix per channel;
//! * portraits and tracklets as JSON Lines.
//!
//! A feature matrix file is an 8-byte header followed by the row-major
//! matrix and a presence bitmap:
//!
//! ```text
//! offset 0  2 bytes   magic "PF"
//! offset 2  u32 LE    rows
//! offset 6  u16 LE    dim
//! offset 8  rows*dim  f32 LE values (absent rows are written as zeros)
//! ...       ceil(rows/8) bytes presence bitmap, bit i%8 of byte i/8
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth label of a tracklet that belongs to no credited cast member.
pub const OTHERS: i32 = -1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
const FEATURE_MAGIC: [u8; 2] = *b"PF";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Face,
    Body,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Face => "face",
            Channel::Body => "body",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "face" => Ok(Channel::Face),
            "body" => Ok(Channel::Body),
            other => Err(Error::Config(format!("unknown channel `{other}`"))),
        }
    }
}

/// Dense row-major embedding matrix for one channel, with a presence flag per
/// row. Absent rows hold zeros and must never be read as features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    channel: Channel,
    dim: usize,
    data: Vec<f32>,
    present: Vec<bool>,
}

impl FeatureStore {
    /// A store with `rows` absent rows.
    pub fn new(channel: Channel, dim: usize, rows: usize) -> Self {
        Self {
            channel,
            dim,
            data: vec![0.0; rows * dim],
            present: vec![false; rows],
        }
    }

    pub fn channel(&self) -> Channel {
        self.channel
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.present.len()
    }

    pub fn is_present(&self, row: usize) -> bool {
        self.present.get(row).copied().unwrap_or(false)
    }

    /// The feature vector of `row`, or `None` when the row is absent or out
    /// of range.
    pub fn row(&self, row: usize) -> Option<&[f32]> {
        if self.is_present(row) {
            Some(&self.data[row * self.dim..(row + 1) * self.dim])
        } else {
            None
        }
    }

    /// Raw row contents regardless of presence.
    pub fn raw_row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn set_row(&mut self, row: usize, values: &[f32]) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::DimensionMismatch {
                entity: format!("{} row {row}", self.channel),
                expected: self.dim,
                found: values.len(),
            });
        }
        if row >= self.rows() {
            return Err(Error::InvalidInput(format!(
                "{} row {row} out of range ({} rows)",
                self.channel,
                self.rows()
            )));
        }
        self.data[row * self.dim..(row + 1) * self.dim].copy_from_slice(values);
        self.present[row] = true;
        Ok(())
    }

    pub fn clear_row(&mut self, row: usize) {
        self.data[row * self.dim..(row + 1) * self.dim].fill(0.0);
        self.present[row] = false;
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let rows = self.rows();
        let mut out = Vec::with_capacity(8 + self.data.len() * 4 + rows.div_ceil(8));
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u16).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut mask = vec![0u8; rows.div_ceil(8)];
        for (i, &p) in self.present.iter().enumerate() {
            if p {
                mask[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&mask);
        out
    }

    /// Decodes a feature file, checking it against the manifest's declared
    /// dimension and row count.
    pub fn from_bytes(
        channel: Channel,
        bytes: &[u8],
        expected_dim: usize,
        expected_rows: usize,
        path: &Path,
    ) -> Result<Self> {
        if bytes.len() < 8 || bytes[0..2] != FEATURE_MAGIC {
            return Err(Error::format(path, "feature matrix", "bad magic or truncated header"));
        }
        let rows = u32::from_le_bytes([bytes[2], bytes[3], bytes[4], bytes[5]]) as usize;
        let dim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        if dim != expected_dim {
            return Err(Error::DimensionMismatch {
                entity: format!("channel {channel}"),
                expected: expected_dim,
                found: dim,
            });
        }
        if rows != expected_rows {
            return Err(Error::DimensionMismatch {
                entity: format!("channel {channel} row count"),
                expected: expected_rows,
                found: rows,
            });
        }
        let body = rows * dim * 4;
        let expected_len = 8 + body + rows.div_ceil(8);
        if bytes.len() != expected_len {
            return Err(Error::format(
                path,
                "feature matrix",
                format!("expected {expected_len} bytes, found {}", bytes.len()),
            ));
        }
        let data = bytes[8..8 + body]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mask = &bytes[8 + body..];
        let present = (0..rows).map(|i| mask[i / 8] & (1 << (i % 8)) != 0).collect();
        Ok(Self {
            channel,
            dim,
            data,
            present,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Portrait {
    pub cast_id: String,
    #[serde(rename = "class")]
    pub class_index: u32,
    pub face_row: u32,
    pub body_row: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tracklet {
    pub id: u32,
    pub movie: String,
    pub row_start: u32,
    pub row_end: u32,
    /// Class index of the credited cast member, or [`OTHERS`].
    pub gt: i32,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.row_end.saturating_sub(self.row_start) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> std::ops::Range<usize> {
        self.row_start as usize..self.row_end as usize
    }

    /// Ground-truth class, `None` for OTHERS.
    pub fn label(&self) -> Option<usize> {
        usize::try_from(self.gt).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: Channel,
    pub dim: usize,
    pub rows: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub num_classes: usize,
    pub num_tracklets: usize,
    pub channels: Vec<ChannelSpec>,
    pub portraits_file: String,
    pub tracklets_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl Manifest {
    pub fn channel(&self, channel: Channel) -> Option<&ChannelSpec> {
        self.channels.iter().find(|c| c.name == channel)
    }
}

/// A complete gallery: labeled portraits, tracklets with ground truth, and
/// one feature store per channel. Immutable once loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub portraits: Vec<Portrait>,
    pub tracklets: Vec<Tracklet>,
    pub face: FeatureStore,
    pub body: FeatureStore,
}

impl Dataset {
    /// Assembles a dataset and fills in a manifest consistent with the parts.
    pub fn from_parts(
        portraits: Vec<Portrait>,
        tracklets: Vec<Tracklet>,
        face: FeatureStore,
        body: FeatureStore,
        split: Option<String>,
    ) -> Self {
        let manifest = Manifest {
            version: FORMAT_VERSION,
            num_classes: portraits.len(),
            num_tracklets: tracklets.len(),
            channels: vec![
                ChannelSpec {
                    name: Channel::Face,
                    dim: face.dim(),
                    rows: face.rows(),
                    file: "face.f32".into(),
                },
                ChannelSpec {
                    name: Channel::Body,
                    dim: body.dim(),
                    rows: body.rows(),
                    file: "body.f32".into(),
                },
            ],
            portraits_file: "portraits.jsonl".into(),
            tracklets_file: "tracklets.jsonl".into(),
            split,
        };
        Self {
            manifest,
            portraits,
            tracklets,
            face,
            body,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.portraits.len()
    }

    pub fn num_tracklets(&self) -> usize {
        self.tracklets.len()
    }

    /// N = C + sum of tracklet lengths.
    pub fn num_nodes(&self) -> usize {
        self.num_classes() + self.tracklets.iter().map(Tracklet::len).sum::<usize>()
    }

    pub fn store(&self, channel: Channel) -> &FeatureStore {
        match channel {
            Channel::Face => &self.face,
            Channel::Body => &self.body,
        }
    }

    /// Portrait of class `c`, if any.
    pub fn portrait_of(&self, class: usize) -> Option<&Portrait> {
        self.portraits.iter().find(|p| p.class_index as usize == class)
    }

    /// Portraits indexed by class. Requires a valid dataset.
    pub fn portraits_by_class(&self) -> Vec<&Portrait> {
        let mut out: Vec<&Portrait> = self.portraits.iter().collect();
        out.sort_by_key(|p| p.class_index);
        out
    }

    /// Splits every tracklet into single-instance tracklets, dropping the
    /// identity-invariance constraint. Returns the exploded dataset and, for
    /// each new tracklet, the index of the tracklet it came from.
    pub fn explode_tracklets(&self) -> (Dataset, Vec<usize>) {
        let mut tracklets = Vec::with_capacity(self.num_nodes());
        let mut owner = Vec::with_capacity(self.num_nodes());
        for (k, t) in self.tracklets.iter().enumerate() {
            for r in t.rows() {
                tracklets.push(Tracklet {
                    id: tracklets.len() as u32,
                    movie: t.movie.clone(),
                    row_start: r as u32,
                    row_end: r as u32 + 1,
                    gt: t.gt,
                });
                owner.push(k);
            }
        }
        let mut manifest = self.manifest.clone();
        manifest.num_tracklets = tracklets.len();
        let ds = Dataset {
            manifest,
            portraits: self.portraits.clone(),
            tracklets,
            face: self.face.clone(),
            body: self.body.clone(),
        };
        (ds, owner)
    }

    /// Distinct movie ids in order of first appearance.
    pub fn movies(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.tracklets
            .iter()
            .filter(|t| seen.insert(t.movie.as_str()))
            .map(|t| t.movie.as_str())
            .collect()
    }
}

/// One broken dataset invariant, naming the offending entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ClassCountMismatch { declared: usize, portraits: usize },
    TrackletCountMismatch { declared: usize, tracklets: usize },
    MissingChannel { channel: Channel },
    ChannelShape { channel: Channel, declared_dim: usize, declared_rows: usize, dim: usize, rows: usize },
    NodeCountMismatch { channel: Channel, rows: usize, nodes: usize },
    ClassBijection { classes: Vec<u32> },
    DuplicateCastId { cast_id: String },
    DuplicateTrackletId { id: u32 },
    EmptyTracklet { id: u32 },
    TrackletOutOfBounds { id: u32, row_end: u32, rows: usize },
    OverlappingTracklets { first: u32, second: u32 },
    PortraitRowOutOfBounds { cast_id: String, row: u32 },
    PortraitRowShared { cast_id: String, row: u32 },
    PortraitFaceAbsent { cast_id: String },
    GroundTruthOutOfRange { id: u32, gt: i32 },
    NonFiniteFeature { channel: Channel, row: usize },
    ZeroNormFeature { channel: Channel, row: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            ClassCountMismatch { declared, portraits } => {
                write!(f, "manifest declares {declared} classes but {portraits} portraits exist")
            }
            TrackletCountMismatch { declared, tracklets } => {
                write!(f, "manifest declares {declared} tracklets but {tracklets} exist")
            }
            MissingChannel { channel } => write!(f, "channel {channel} missing from manifest"),
            ChannelShape { channel, declared_dim, declared_rows, dim, rows } => write!(
                f,
                "channel {channel} declared {declared_rows}x{declared_dim} but store is {rows}x{dim}"
            ),
            NodeCountMismatch { channel, rows, nodes } => {
                write!(f, "channel {channel} has {rows} rows but the dataset has {nodes} nodes")
            }
            ClassBijection { classes } => {
                write!(f, "portrait classes {classes:?} are not a bijection onto 0..C")
            }
            DuplicateCastId { cast_id } => write!(f, "duplicate cast id {cast_id}"),
            DuplicateTrackletId { id } => write!(f, "duplicate tracklet id {id}"),
            EmptyTracklet { id } => write!(f, "tracklet {id} has no instances"),
            TrackletOutOfBounds { id, row_end, rows } => {
                write!(f, "tracklet {id} ends at row {row_end} beyond {rows} rows")
            }
            OverlappingTracklets { first, second } => {
                write!(f, "tracklets {first} and {second} have overlapping row ranges")
            }
            PortraitRowOutOfBounds { cast_id, row } => {
                write!(f, "portrait {cast_id} references row {row} out of bounds")
            }
            PortraitRowShared { cast_id, row } => {
                write!(f, "portrait {cast_id} row {row} is shared with another node")
            }
            PortraitFaceAbsent { cast_id } => write!(f, "portrait {cast_id} has no face feature"),
            GroundTruthOutOfRange { id, gt } => {
                write!(f, "tracklet {id} has ground truth {gt} outside the class range")
            }
            NonFiniteFeature { channel, row } => write!(f, "{channel} row {row} has non-finite entries"),
            ZeroNormFeature { channel, row } => write!(f, "{channel} row {row} has zero norm"),
        }
    }
}

/// Checks every dataset invariant. Empty iff the dataset is well formed.
pub fn validate_dataset(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let c = ds.portraits.len();
    if ds.manifest.num_classes != c {
        out.push(Violation::ClassCountMismatch { declared: ds.manifest.num_classes, portraits: c });
    }
    if ds.manifest.num_tracklets != ds.tracklets.len() {
        out.push(Violation::TrackletCountMismatch {
            declared: ds.manifest.num_tracklets,
            tracklets: ds.tracklets.len(),
        });
    }

    let nodes = ds.num_nodes();
    for store in [&ds.face, &ds.body] {
        let ch = store.channel();
        match ds.manifest.channel(ch) {
            None => out.push(Violation::MissingChannel { channel: ch }),
            Some(spec) if spec.dim != store.dim() || spec.rows != store.rows() => {
                out.push(Violation::ChannelShape {
                    channel: ch,
                    declared_dim: spec.dim,
                    declared_rows: spec.rows,
                    dim: store.dim(),
                    rows: store.rows(),
                })
            }
            Some(_) => {}
        }
        if store.rows() != nodes {
            out.push(Violation::NodeCountMismatch { channel: ch, rows: store.rows(), nodes });
        }
        for row in 0..store.rows() {
            if let Some(v) = store.row(row) {
                if v.iter().any(|x| !x.is_finite()) {
                    out.push(Violation::NonFiniteFeature { channel: ch, row });
                } else if v.iter().all(|&x| x == 0.0) {
                    out.push(Violation::ZeroNormFeature { channel: ch, row });
                }
            }
        }
    }

    let mut classes: Vec<u32> = ds.portraits.iter().map(|p| p.class_index).collect();
    classes.sort_unstable();
    if classes.iter().enumerate().any(|(i, &k)| i as u32 != k) {
        out.push(Violation::ClassBijection { classes });
    }

    let mut cast_ids = HashSet::new();
    for p in &ds.portraits {
        if !cast_ids.insert(p.cast_id.as_str()) {
            out.push(Violation::DuplicateCastId { cast_id: p.cast_id.clone() });
        }
    }

    let rows = ds.face.rows().max(ds.body.rows());
    let mut ids = HashSet::new();
    for t in &ds.tracklets {
        if !ids.insert(t.id) {
            out.push(Violation::DuplicateTrackletId { id: t.id });
        }
        if t.is_empty() {
            out.push(Violation::EmptyTracklet { id: t.id });
        } else if t.row_end as usize > rows {
            out.push(Violation::TrackletOutOfBounds { id: t.id, row_end: t.row_end, rows });
        }
        if t.gt != OTHERS && (t.gt < 0 || t.gt as usize >= c) {
            out.push(Violation::GroundTruthOutOfRange { id: t.id, gt: t.gt });
        }
    }
    if let Some((a, b)) = first_overlap(&ds.tracklets) {
        out.push(Violation::OverlappingTracklets { first: a, second: b });
    }

    let mut owned: HashSet<u32> = ds
        .tracklets
        .iter()
        .flat_map(|t| t.row_start..t.row_end.max(t.row_start))
        .collect();
    for p in &ds.portraits {
        let mut refs = vec![p.face_row];
        refs.extend(p.body_row.filter(|&b| b != p.face_row));
        for row in refs {
            if row as usize >= rows {
                out.push(Violation::PortraitRowOutOfBounds { cast_id: p.cast_id.clone(), row });
            } else if !owned.insert(row) {
                out.push(Violation::PortraitRowShared { cast_id: p.cast_id.clone(), row });
            }
        }
        if !ds.face.is_present(p.face_row as usize) {
            out.push(Violation::PortraitFaceAbsent { cast_id: p.cast_id.clone() });
        }
    }
    out
}

fn first_overlap(tracklets: &[Tracklet]) -> Option<(u32, u32)> {
    let mut spans: Vec<&Tracklet> = tracklets.iter().filter(|t| !t.is_empty()).collect();
    spans.sort_by_key(|t| (t.row_start, t.id));
    spans
        .windows(2)
        .find(|w| w[1].row_start < w[0].row_end)
        .map(|w| (w[0].id, w[1].id))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path, what: &'static str) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, what, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::format(path, "record", e))?;
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

/// Resolves a dataset location: either the manifest file itself or the
/// directory containing `manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads and validates a dataset. `path` may name the manifest or its directory.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_path = manifest_path(path);
    let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let manifest: Manifest = serde_json::from_slice(&read_file(&manifest_path)?)
        .map_err(|e| Error::format(&manifest_path, "manifest", e))?;

    let load_store = |channel: Channel| -> Result<FeatureStore> {
        let spec = manifest.channel(channel).ok_or_else(|| {
            Error::format(&manifest_path, "manifest", format!("channel {channel} not declared"))
        })?;
        let path = dir.join(&spec.file);
        FeatureStore::from_bytes(channel, &read_file(&path)?, spec.dim, spec.rows, &path)
    };
    let face = load_store(Channel::Face)?;
    let body = load_store(Channel::Body)?;
    let portraits: Vec<Portrait> = read_jsonl(&dir.join(&manifest.portraits_file), "portrait record")?;
    let tracklets: Vec<Tracklet> = read_jsonl(&dir.join(&manifest.tracklets_file), "tracklet record")?;

    let ds = Dataset {
        manifest,
        portraits,
        tracklets,
        face,
        body,
    };
    let violations = validate_dataset(&ds);
    // Overlaps and duplicates also skew the node count, so report them first.
    let specific = violations
        .iter()
        .find_map(|v| specific_error(v).filter(|e| !matches!(e, Error::DimensionMismatch { .. })))
        .or_else(|| violations.iter().find_map(specific_error));
    if let Some(err) = specific {
        return Err(err);
    }
    if !violations.is_empty() {
        return Err(Error::InvalidDataset(violations));
    }
    Ok(ds)
}

fn specific_error(v: &Violation) -> Option<Error> {
    match v {
        Violation::DuplicateTrackletId { id } => Some(Error::DuplicateId { kind: "tracklet", id: id.to_string() }),
        Violation::DuplicateCastId { cast_id } => Some(Error::DuplicateId { kind: "cast", id: cast_id.clone() }),
        Violation::OverlappingTracklets { first, second } => {
            Some(Error::OverlappingRows { first: *first, second: *second })
        }
        Violation::NodeCountMismatch { channel, rows, nodes } => Some(Error::DimensionMismatch {
            entity: format!("channel {channel} rows vs node count"),
            expected: *nodes,
            found: *rows,
        }),
        _ => None,
    }
}

/// Writes `ds` into `dir` using the file names recorded in its manifest.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for store in [&ds.face, &ds.body] {
        let spec = ds.manifest.channel(store.channel()).ok_or_else(|| {
            Error::InvalidInput(format!("channel {} not declared in manifest", store.channel()))
        })?;
        write_file(&dir.join(&spec.file), &store.to_bytes())?;
    }
    write_jsonl(&dir.join(&ds.manifest.portraits_file), &ds.portraits)?;
    write_jsonl(&dir.join(&ds.manifest.tracklets_file), &ds.tracklets)?;
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&ds.manifest).map_err(|e| Error::format(&path, "manifest", e))?;
    json.write_all(b"\n").expect("writing to a Vec cannot fail");
    write_file(&path, &json)
}
