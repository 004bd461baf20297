use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] spmkd_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed file contents, located by byte offset.
    #[error("{path}: parse error at byte {offset}: {detail}")]
    Parse { path: PathBuf, offset: u64, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("csv {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("plot: {0}")]
    Plot(String),
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}
