use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}:{line}: malformed row: {message}")]
    MalformedRow {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: expected header `{expected}`, found `{found}`")]
    InvalidHeader {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("invalid granularity level {0}, expected 0, 1 or 2")]
    InvalidLevel(u8),

    #[error("duplicate region {region}")]
    DuplicateRegion { region: String },

    #[error("orphan region {region}: level > 0 requires a parent")]
    OrphanRegion { region: String },

    #[error("region {region}: parent {parent} must be exactly one level above")]
    BadParentLevel { region: String, parent: String },

    #[error("unknown region {region} ({context})")]
    UnknownRegion { region: String, context: String },

    #[error("lexicon maps query `{query}` to more than one symptom")]
    DuplicateLexiconQuery { query: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("query log is empty and no date range was configured")]
    EmptyLog,

    #[error("bound_user_day called on a mixed group: {expected} vs {found}")]
    MixedUserDayGroup { expected: String, found: String },

    #[error("bound_user_day called on an empty group")]
    EmptyUserDayGroup,

    #[error("count key outside the fixed keyspace: {key}")]
    OutsideKeyspace { key: String },

    #[error("weekly summation requires a daily table")]
    NotDailyTable,

    #[error("weekly summation called on a noisy table; noise is added after summation")]
    NoisySumInput,

    #[error("table {table} already carries noise")]
    AlreadyNoisy { table: String },

    #[error("noise params do not match the table: expected {expected}, found {found}")]
    ParamsMismatch { expected: String, found: String },

    #[error("laplace scale must be positive, got {scale}")]
    NonPositiveScale { scale: f64 },

    #[error("budget already charged for {charge}")]
    DoubleCharge { charge: String },

    #[error(
        "symptom series (level {level}, {symptom}, {region}) already noised at {existing} \
         granularity; refusing {requested}"
    )]
    GranularityConflict {
        level: u8,
        symptom: String,
        region: String,
        existing: String,
        requested: String,
    },

    #[error("ledger total {actual} does not match expected {expected}")]
    LedgerMismatch { expected: f64, actual: f64 },

    #[error("log has {user_days} user-days, exhaustive checking is capped at {max}; sample the log first")]
    LogTooLarge { user_days: usize, max: usize },

    #[error(
        "sensitivity bound violated: removing ({user}, {date}) moves the level-{level} {kind} \
         table by L1 {l1} > {bound}"
    )]
    SensitivityViolation {
        user: String,
        date: String,
        level: u8,
        kind: String,
        l1: f64,
        bound: f64,
    },

    #[error("verification failed: {0}")]
    VerificationFailed(String),

    #[error("internal: missing cell {key}")]
    MissingCell { key: String },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// CLI exit code: 1 for input/configuration errors, 2 for invariant or
    /// verification failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Csv { .. }
            | Error::MalformedRow { .. }
            | Error::InvalidHeader { .. }
            | Error::InvalidLevel(_)
            | Error::DuplicateRegion { .. }
            | Error::OrphanRegion { .. }
            | Error::BadParentLevel { .. }
            | Error::UnknownRegion { .. }
            | Error::DuplicateLexiconQuery { .. }
            | Error::InvalidConfig(_)
            | Error::EmptyLog
            | Error::LogTooLarge { .. } => 1,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

/// Attach a pipeline stage name to any error bubbling out of `result`.
pub fn at_stage<T>(stage: &'static str, result: Result<T>) -> Result<T> {
    result.map_err(|e| Error::Stage {
        stage,
        source: Box::new(e),
    })
}
