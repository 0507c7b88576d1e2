//! Dataset manifest: a JSON index of feature files, queries, graded
//! relevance, and annotated distractor segments.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VvsError};

/// Relevance grade of a database video for a query. Grades nest: a
/// duplicate-scene match also counts as complementary and incident.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "DSVR")]
    Dsvr,
    #[serde(rename = "CSVR")]
    Csvr,
    #[serde(rename = "ISVR")]
    Isvr,
    #[serde(rename = "unrelated")]
    Unrelated,
}

impl Tier {
    /// Whether a video with this grade counts as relevant when evaluating
    /// at `task` strictness.
    pub fn relevant_for(self, task: Tier) -> bool {
        self != Tier::Unrelated && self <= task
    }

    pub fn parse(s: &str) -> Result<Tier> {
        match s {
            "DSVR" | "dsvr" => Ok(Tier::Dsvr),
            "CSVR" | "csvr" => Ok(Tier::Csvr),
            "ISVR" | "isvr" => Ok(Tier::Isvr),
            "unrelated" => Ok(Tier::Unrelated),
            other => Err(VvsError::Config(format!(
                "unknown task '{other}', expected DSVR, CSVR or ISVR"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Dsvr => "DSVR",
            Tier::Csvr => "CSVR",
            Tier::Isvr => "ISVR",
            Tier::Unrelated => "unrelated",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub feature_path: String,
    pub duration_frames: u32,
    /// Topic cluster the video belongs to; `None` marks background footage
    /// usable as an easy-distractor source.
    #[serde(default)]
    pub topic_id: Option<u32>,
}

/// `[start, end)` frame range annotated as distractor content.
pub type Segment = [u32; 2];

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub videos: Vec<VideoEntry>,
    pub queries: Vec<String>,
    /// query id -> (video id -> grade). Pairs absent from the inner map are
    /// unrelated.
    #[serde(default)]
    pub relevance: BTreeMap<String, BTreeMap<String, Tier>>,
    /// video id -> annotated distractor frame ranges, `[start, end)`.
    #[serde(default)]
    pub distractor_segments: BTreeMap<String, Vec<Segment>>,
}

impl DatasetManifest {
    /// Parse and validate a manifest file. Returns the manifest together
    /// with its directory, against which feature paths resolve.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let (manifest, base) = Self::load_labels(path)?;
        manifest.validate(&base)?;
        Ok((manifest, base))
    }

    /// Like [`load`](Self::load), but does not require the feature files to
    /// exist on disk; enough for consumers that only need ids, durations,
    /// and relevance labels.
    pub fn load_labels(path: &Path) -> Result<(Self, PathBuf)> {
        let text =
            fs::read_to_string(path).map_err(|e| VvsError::io(path.display().to_string(), e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| VvsError::Manifest(format!("{}: {e}", path.display())))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        manifest.validate_labels()?;
        Ok((manifest, base))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| VvsError::io(path.display().to_string(), e))
    }

    pub fn video(&self, id: &str) -> Result<&VideoEntry> {
        self.videos
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| VvsError::Manifest(format!("unknown video id '{id}'")))
    }

    /// Absolute path of a video's feature file.
    pub fn feature_path(&self, base: &Path, id: &str) -> Result<PathBuf> {
        Ok(base.join(&self.video(id)?.feature_path))
    }

    /// Grade of `video` for `query`; absent pairs are unrelated.
    pub fn grade(&self, query: &str, video: &str) -> Tier {
        self.relevance
            .get(query)
            .and_then(|m| m.get(video))
            .copied()
            .unwrap_or(Tier::Unrelated)
    }

    /// Ids of background videos (no topic), the easy-distractor source pool.
    pub fn background_ids(&self) -> Vec<&str> {
        self.videos
            .iter()
            .filter(|v| v.topic_id.is_none())
            .map(|v| v.id.as_str())
            .collect()
    }

    /// Ids of topical videos, the training pool.
    pub fn core_ids(&self) -> Vec<&str> {
        self.videos
            .iter()
            .filter(|v| v.topic_id.is_some())
            .map(|v| v.id.as_str())
            .collect()
    }

    /// Label validation plus a check that every feature file exists under
    /// `base`.
    pub fn validate(&self, base: &Path) -> Result<()> {
        self.validate_labels()?;
        for v in &self.videos {
            let p = base.join(&v.feature_path);
            if !p.is_file() {
                return Err(VvsError::Manifest(format!(
                    "video '{}': feature file {} does not exist",
                    v.id,
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// Structural validation: unique non-empty ids, positive durations,
    /// queries and relevance targets all listed, segments in range.
    pub fn validate_labels(&self) -> Result<()> {
        if self.videos.is_empty() {
            return Err(VvsError::Manifest("manifest lists no videos".into()));
        }
        let mut ids = BTreeSet::new();
        for v in &self.videos {
            if v.id.is_empty() {
                return Err(VvsError::Manifest("empty video id".into()));
            }
            if !ids.insert(v.id.as_str()) {
                return Err(VvsError::Manifest(format!("duplicate video id '{}'", v.id)));
            }
            if v.duration_frames == 0 {
                return Err(VvsError::Manifest(format!(
                    "video '{}' has zero duration",
                    v.id
                )));
            }
        }
        let mut seen_queries = BTreeSet::new();
        for q in &self.queries {
            if !ids.contains(q.as_str()) {
                return Err(VvsError::Manifest(format!(
                    "query '{q}' is not a listed video"
                )));
            }
            if !seen_queries.insert(q.as_str()) {
                return Err(VvsError::Manifest(format!("duplicate query '{q}'")));
            }
        }
        for (q, targets) in &self.relevance {
            if !seen_queries.contains(q.as_str()) {
                return Err(VvsError::Manifest(format!(
                    "relevance entry for '{q}', which is not a query"
                )));
            }
            for v in targets.keys() {
                if !ids.contains(v.as_str()) {
                    return Err(VvsError::Manifest(format!(
                        "relevance of query '{q}' names unknown video '{v}'"
                    )));
                }
            }
        }
        for (vid, segments) in &self.distractor_segments {
            let video = self.video(vid)?;
            for seg in segments {
                if seg[0] >= seg[1] || seg[1] > video.duration_frames {
                    return Err(VvsError::Manifest(format!(
                        "video '{vid}': segment [{}, {}) out of range (duration {})",
                        seg[0], seg[1], video.duration_frames
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn touch(dir: &Path, name: &str) {
        fs::write(dir.join(name), b"x").unwrap();
    }

    fn sample(dir: &Path) -> DatasetManifest {
        touch(dir, "a.vvsf");
        touch(dir, "b.vvsf");
        let mut m = DatasetManifest {
            videos: vec![
                VideoEntry {
                    id: "a".into(),
                    feature_path: "a.vvsf".into(),
                    duration_frames: 10,
                    topic_id: Some(0),
                },
                VideoEntry {
                    id: "b".into(),
                    feature_path: "b.vvsf".into(),
                    duration_frames: 20,
                    topic_id: None,
                },
            ],
            queries: vec!["a".into()],
            relevance: BTreeMap::new(),
            distractor_segments: BTreeMap::new(),
        };
        m.relevance
            .entry("a".into())
            .or_default()
            .insert("b".into(), Tier::Isvr);
        m.distractor_segments
            .insert("b".into(), vec![[0, 5], [10, 20]]);
        m
    }

    #[test]
    fn tier_nesting() {
        assert!(Tier::Dsvr.relevant_for(Tier::Dsvr));
        assert!(Tier::Dsvr.relevant_for(Tier::Isvr));
        assert!(!Tier::Isvr.relevant_for(Tier::Dsvr));
        assert!(Tier::Csvr.relevant_for(Tier::Csvr));
        assert!(!Tier::Unrelated.relevant_for(Tier::Isvr));
    }

    #[test]
    fn round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let m = sample(dir.path());
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let (loaded, base) = DatasetManifest::load(&path).unwrap();
        assert_eq!(base, dir.path());
        assert_eq!(loaded.videos.len(), 2);
        assert_eq!(loaded.grade("a", "b"), Tier::Isvr);
        assert_eq!(loaded.grade("a", "a"), Tier::Unrelated);
        assert_eq!(loaded.background_ids(), vec!["b"]);
        assert_eq!(loaded.core_ids(), vec!["a"]);
    }

    #[test]
    fn missing_feature_file_rejected() {
        let dir = tempdir().unwrap();
        let mut m = sample(dir.path());
        m.videos[1].feature_path = "missing.vvsf".into();
        let err = m.validate(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing.vvsf"), "{err}");
    }

    #[test]
    fn load_labels_tolerates_missing_feature_files() {
        let dir = tempdir().unwrap();
        let mut m = sample(dir.path());
        m.videos[1].feature_path = "missing.vvsf".into();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        assert!(DatasetManifest::load(&path).is_err());
        let (loaded, base) = DatasetManifest::load_labels(&path).unwrap();
        assert_eq!(loaded.videos.len(), m.videos.len());
        assert_eq!(base, dir.path());

        m.videos[0].id.clear();
        m.save(&path).unwrap();
        assert!(DatasetManifest::load_labels(&path).is_err());
    }

    #[test]
    fn out_of_range_segment_rejected() {
        let dir = tempdir().unwrap();
        let mut m = sample(dir.path());
        m.distractor_segments.get_mut("b").unwrap().push([15, 25]);
        let err = m.validate(dir.path()).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn unknown_query_and_duplicate_id_rejected() {
        let dir = tempdir().unwrap();
        let mut m = sample(dir.path());
        m.queries.push("ghost".into());
        assert!(m.validate(dir.path()).is_err());

        let mut m = sample(dir.path());
        let dup = m.videos[0].clone();
        m.videos.push(dup);
        let err = m.validate(dir.path()).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn absent_relevance_defaults_to_unrelated() {
        let dir = tempdir().unwrap();
        touch(dir.path(), "a.vvsf");
        let json = r#"{
            "videos": [{"id": "a", "feature_path": "a.vvsf", "duration_frames": 5}],
            "queries": []
        }"#;
        let path = dir.path().join("m.json");
        fs::write(&path, json).unwrap();
        let (m, _) = DatasetManifest::load(&path).unwrap();
        assert_eq!(m.videos[0].topic_id, None);
        assert_eq!(m.grade("a", "a"), Tier::Unrelated);
    }

    #[test]
    fn task_parsing() {
        assert_eq!(Tier::parse("DSVR").unwrap(), Tier::Dsvr);
        assert_eq!(Tier::parse("csvr").unwrap(), Tier::Csvr);
        assert!(Tier::parse("bogus").is_err());
    }
}
