use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Binary or text data file that does not follow its layout.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Line-oriented file that failed to parse.
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A training set without positives or without negatives.
    #[error("degenerate sample set: {positives} positives, {negatives} negatives")]
    DegenerateSamples { positives: usize, negatives: usize },

    /// Boosting could not meet the stage targets within the weak-classifier budget.
    #[error(
        "stage {stage} stuck after {nweak} weak classifiers: hit rate {hit_rate:.6}, \
         false alarm {false_alarm:.6}; slacken -minhitrate or -maxfalsealarm"
    )]
    StageStuck {
        stage: usize,
        hit_rate: f64,
        false_alarm: f64,
        nweak: usize,
    },

    #[error("least squares needs at least 2 points, got {0}")]
    InsufficientPoints(usize),

    #[error("points are vertically aligned; line slope is undefined")]
    VerticalLine,

    #[error("inter-ocular distance is zero")]
    MetricUndefined,

    #[error("could not place negative samples in {image}: {msg}")]
    Generation { image: String, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
