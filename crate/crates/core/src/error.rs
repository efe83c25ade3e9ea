use std::path::PathBuf;

use intuition_autograd::AutogradError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON at byte {offset}: {message}")]
    Json { offset: usize, message: String },
    #[error("record {index}: unknown label {label:?}")]
    UnknownLabel { index: usize, label: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("cannot sample {requested} items from a population of {population}")]
    SampleTooLarge { requested: usize, population: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing loss component {part} for phase {phase}")]
    MissingLossPart { phase: u8, part: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("vocabulary hash {found} does not match checkpoint hash {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("non-finite gradient for {param} in batch {batch}")]
    NonFiniteGradient { param: String, batch: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Tensor(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(text: &str, err: &serde_json::Error) -> Self {
        Error::Json {
            offset: byte_offset(text, err.line(), err.column()),
            message: err.to_string(),
        }
    }
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub(crate) fn read_to_string(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &std::path::Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_count_bytes_across_lines() {
        assert_eq!(byte_offset("abc\ndef", 2, 2), 5);
        assert_eq!(byte_offset("abc", 1, 1), 0);
    }
}
