use std::path::PathBuf;

use chrono::NaiveDate;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit codes used by the CLI.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DEGENERATE: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("duplicate person_id {0:?}")]
    DuplicatePerson(String),

    #[error("line {line}: unknown person_id {person_id:?}")]
    UnknownPerson { line: u64, person_id: String },

    #[error("line {line}: event kind {kind} is not compatible with code system {system}")]
    KindSystemMismatch { line: u64, kind: String, system: String },

    #[error("event for person {person_id:?} dated {date} lies outside enrollment {start}..={end}")]
    OutsideEnrollment {
        person_id: String,
        date: NaiveDate,
        start: NaiveDate,
        end: NaiveDate,
    },

    #[error("conflicting phecode mapping for {version} {code:?}: {first} vs {second}")]
    PhecodeConflict {
        version: String,
        code: String,
        first: String,
        second: String,
    },

    #[error("invalid phecode {0:?}")]
    InvalidPhecode(String),

    #[error("invalid synthetic config: {0}")]
    SynthConfig(String),

    #[error(
        "{context} has a single class (n_pos={n_pos}, n_neg={n_neg}, prevalence={:.4}); \
         try another seed or a larger cohort",
        *n_pos as f64 / (*n_pos + *n_neg).max(1) as f64
    )]
    SingleClass {
        context: String,
        n_pos: usize,
        n_neg: usize,
    },

    #[error("{0} cohort has zero eligible persons")]
    EmptyCohort(String),

    #[error("training set is empty; cannot build a vocabulary")]
    EmptyTrainingSet,

    #[error("vocabulary intersection is empty; cross-source evaluation impossible")]
    EmptyIntersection,

    #[error("feature index {index} out of range for vocabulary of size {size}")]
    IndexOutOfRange { index: u32, size: usize },

    #[error("model produced a non-finite output")]
    NonFinite,

    #[error("non-finite score in scored set")]
    NonFiniteScore,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unsupported model format version {found} (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },

    #[error("corrupt model file: {0}")]
    ModelCorrupt(String),

    #[error("vocabulary fingerprint {found:016x} does not match model fingerprint {expected:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Innermost error, looking through stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) | Error::SynthConfig(_) => EXIT_CONFIG,
            Error::SingleClass { .. }
            | Error::EmptyCohort(_)
            | Error::EmptyTrainingSet
            | Error::EmptyIntersection => EXIT_DEGENERATE,
            _ => EXIT_DATA,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
