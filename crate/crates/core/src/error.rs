use std::path::PathBuf;

use crate::dataset::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} in {}: {detail}", path.display())]
    Format {
        path: PathBuf,
        what: &'static str,
        detail: String,
    },

    #[error("dimension mismatch for {entity}: expected {expected}, found {found}")]
    DimensionMismatch {
        entity: String,
        expected: usize,
        found: usize,
    },

    #[error("overlapping row ranges between tracklet {first} and tracklet {second}")]
    OverlappingRows { first: u32, second: u32 },

    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: String },

    #[error("invalid dataset: {}", join_violations(.0))]
    InvalidDataset(Vec<Violation>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("step `{step}` failed: {source}")]
    Step {
        step: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, what: &'static str, detail: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            what,
            detail: detail.to_string(),
        }
    }

    pub(crate) fn in_step(step: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Step {
            step,
            source: Box::new(source),
        }
    }

    /// True for errors caused by bad configuration rather than a failing step.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}
