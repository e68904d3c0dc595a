//! Tab-separated dataset listings: `relative/path<TAB>label` per line.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path as written in the manifest.
    pub rel: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            let (rel, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("manifest line {}: expected `path<TAB>label`", i + 1)))?;
            if label.is_empty() || label.contains('\t') {
                return Err(Error::Format(format!(
                    "manifest line {}: label must be non-empty and tab-free",
                    i + 1
                )));
            }
            entries.push(ManifestEntry {
                rel: rel.to_string(),
                label: label.to_string(),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, root)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| format!("{}\t{}\n", e.rel, e.label)).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let m = Manifest::parse("a/x.pgm\thello\n\nb.pgm\twor ld\n", Path::new("/data")).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.resolve(&m.entries[0]), PathBuf::from("/data/a/x.pgm"));
        assert_eq!(m.to_text(), "a/x.pgm\thello\nb.pgm\twor ld\n");
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(Manifest::parse("nolabel\n", Path::new(".")).is_err());
        assert!(Manifest::parse("x.pgm\t\n", Path::new(".")).is_err());
        assert!(Manifest::parse("x.pgm\ta\tb\n", Path::new(".")).is_err());
    }
}
