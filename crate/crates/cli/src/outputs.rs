//! Tracks files a command writes so a failed run leaves none behind.

use std::path::{Path, PathBuf};

#[derive(Default)]
pub struct Outputs {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    /// Registers `path` before it is written.
    pub fn add(&mut self, path: &Path) -> PathBuf {
        self.paths.push(path.to_path_buf());
        path.to_path_buf()
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in &self.paths {
            if p.is_file() {
                log::warn!("removing partial output {}", p.display());
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_are_removed() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        {
            let mut o = Outputs::default();
            std::fs::write(o.add(&a), "x").unwrap();
        }
        assert!(!a.exists());
        let mut o = Outputs::default();
        std::fs::write(o.add(&b), "x").unwrap();
        o.commit();
        assert!(b.exists());
    }
}
