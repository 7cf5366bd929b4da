use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tempfile::NamedTempFile;

/// Output files written to temporaries next to their destinations and
/// renamed into place together. Dropping an uncommitted set deletes the
/// temporaries.
#[derive(Default)]
pub struct Staged {
    files: Vec<(NamedTempFile, PathBuf)>,
}

impl Staged {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, path: &Path, contents: &[u8]) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp =
            NamedTempFile::new_in(dir).with_context(|| format!("cannot create a file in {}", dir.display()))?;
        tmp.write_all(contents)
            .and_then(|_| tmp.as_file().sync_all())
            .with_context(|| format!("writing {}", path.display()))?;
        self.files.push((tmp, path.to_path_buf()));
        Ok(())
    }

    /// Renames every staged file into place. If a rename fails, files
    /// already moved are removed again.
    pub fn commit(self) -> Result<Vec<PathBuf>> {
        let mut done: Vec<PathBuf> = Vec::with_capacity(self.files.len());
        let mut pending = self.files.into_iter();
        for (tmp, path) in pending.by_ref() {
            if let Err(e) = tmp.persist(&path) {
                for p in &done {
                    let _ = std::fs::remove_file(p);
                }
                return Err(anyhow::Error::new(e.error).context(format!("writing {}", path.display())));
            }
            done.push(path);
        }
        Ok(done)
    }
}
