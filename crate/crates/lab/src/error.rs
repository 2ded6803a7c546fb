use std::io;
use std::path::{Path, PathBuf};

/// Failures reading or writing the on-disk formats.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{file}: {msg} (byte offset {offset})")]
    Parse { file: String, offset: u64, msg: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] decorr_core::Error),
    /// A pipeline stage aborted; partial logs are on disk.
    #[error("stage {stage} failed: {source}")]
    Stage { stage: String, source: Box<FormatError> },
}

impl FormatError {
    pub(crate) fn parse(file: &str, offset: usize, msg: impl Into<String>) -> Self {
        FormatError::Parse {
            file: file.to_string(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    /// Offset of a parse error, if this is one.
    pub fn offset(&self) -> Option<u64> {
        match self {
            FormatError::Parse { offset, .. } => Some(*offset),
            FormatError::Stage { source, .. } => source.offset(),
            _ => None,
        }
    }
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

pub(crate) fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `bytes`, creating parent directories.
pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| FormatError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn label(path: &Path) -> String {
    path.display().to_string()
}

/// Bounds-checked little cursor over a byte slice.
pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub file: &'a str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], file: &'a str) -> Self {
        Reader { bytes, pos: 0, file }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::parse(
                self.file,
                self.bytes.len(),
                format!("truncated while reading {what}: need {n} bytes at {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
