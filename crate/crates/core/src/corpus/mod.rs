//! Source-aware cleaning, readability scoring and curriculum buckets.

pub mod clean;
pub mod curriculum;
pub mod readability;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use clean::{clean_document, cleaners, rules_for, Cleaner};
pub use curriculum::{build_curriculum, curriculum_active_sources, CurriculumPlan, DEFAULT_EPOCHS_PER_STAGE};
pub use readability::{compute_readability, count_syllables, ReadabilityReport};

/// Where a training file came from, derived from its basename prefix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum SourceKind {
    Aochildes,
    OpenSubtitles,
    Switchboard,
    Cbt,
    Qed,
    ChildrenStories,
    BncSpoken,
    SimpleWikipedia,
    Gutenberg,
    Wikipedia,
    /// Any unrecognized prefix; only universal cleaning rules apply.
    Other(String),
}

impl SourceKind {
    pub const KNOWN: [SourceKind; 10] = [
        SourceKind::Aochildes,
        SourceKind::OpenSubtitles,
        SourceKind::Switchboard,
        SourceKind::Cbt,
        SourceKind::Qed,
        SourceKind::ChildrenStories,
        SourceKind::BncSpoken,
        SourceKind::SimpleWikipedia,
        SourceKind::Gutenberg,
        SourceKind::Wikipedia,
    ];

    pub fn name(&self) -> &str {
        match self {
            SourceKind::Aochildes => "aochildes",
            SourceKind::OpenSubtitles => "open_subtitles",
            SourceKind::Switchboard => "switchboard",
            SourceKind::Cbt => "cbt",
            SourceKind::Qed => "qed",
            SourceKind::ChildrenStories => "children_stories",
            SourceKind::BncSpoken => "bnc_spoken",
            SourceKind::SimpleWikipedia => "simple_wikipedia",
            SourceKind::Gutenberg => "gutenberg",
            SourceKind::Wikipedia => "wikipedia",
            SourceKind::Other(name) => name,
        }
    }

    pub fn parse(name: &str) -> Self {
        Self::KNOWN
            .iter()
            .find(|k| k.name() == name)
            .cloned()
            .unwrap_or_else(|| SourceKind::Other(name.to_string()))
    }

    /// Maps `dir/simple_wikipedia.train` to `SimpleWikipedia`; the prefix
    /// is everything before the first `.` of the basename.
    pub fn from_path(path: &Path) -> Self {
        let base = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let stem = base.split('.').next().unwrap_or_default();
        Self::parse(stem)
    }

    pub fn is_known(&self) -> bool {
        !matches!(self, SourceKind::Other(_))
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<String> for SourceKind {
    fn from(s: String) -> Self {
        Self::parse(&s)
    }
}

impl From<SourceKind> for String {
    fn from(k: SourceKind) -> Self {
        k.name().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub source: SourceKind,
    pub text: String,
    pub origin_path: PathBuf,
}

impl RawDocument {
    /// Decodes `bytes` as UTF-8; the error names `origin_path`.
    pub fn from_bytes(source: SourceKind, bytes: Vec<u8>, origin_path: impl Into<PathBuf>) -> Result<Self> {
        let origin_path = origin_path.into();
        if origin_path.as_os_str().is_empty() {
            return Err(Error::config("document origin path must be non-empty"));
        }
        let text = String::from_utf8(bytes).map_err(|source| Error::Utf8 {
            path: origin_path.display().to_string(),
            source,
        })?;
        Ok(Self {
            source,
            text,
            origin_path,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(SourceKind::from_path(path), bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_names_round_trip() {
        for k in SourceKind::KNOWN {
            assert_eq!(SourceKind::parse(k.name()), k);
        }
        assert_eq!(SourceKind::from_path(Path::new("x/simple_wikipedia.train")), SourceKind::SimpleWikipedia);
        assert_eq!(SourceKind::from_path(Path::new("wikipedia.dev")), SourceKind::Wikipedia);
        assert_eq!(SourceKind::from_path(Path::new("forum.train")), SourceKind::Other("forum".into()));
        let json = serde_json::to_string(&SourceKind::BncSpoken).unwrap();
        assert_eq!(json, "\"bnc_spoken\"");
        assert_eq!(serde_json::from_str::<SourceKind>(&json).unwrap(), SourceKind::BncSpoken);
    }

    #[test]
    fn invalid_utf8_names_the_path() {
        let err = RawDocument::from_bytes(SourceKind::Qed, vec![0xff, 0xfe], "data/qed.train").unwrap_err();
        assert!(err.to_string().contains("data/qed.train"), "{err}");
    }
}
