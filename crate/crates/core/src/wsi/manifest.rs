use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Grade, Split, Subtype, WsiError};

/// One line of the JSON-lines slide manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideManifestEntry {
    pub slide_id: String,
    pub patient_id: String,
    /// Slide container directory; relative paths resolve against the
    /// manifest's own directory.
    pub path: PathBuf,
    pub subtype: Subtype,
    pub grade: Grade,
    #[serde(default)]
    pub split: Option<Split>,
    /// Microns per pixel at level 0.
    pub mpp: f64,
}

impl SlideManifestEntry {
    pub fn new(slide_id: &str, patient_id: &str, path: impl Into<PathBuf>, subtype: Subtype, mpp: f64) -> Self {
        SlideManifestEntry {
            slide_id: slide_id.to_string(),
            patient_id: patient_id.to_string(),
            path: path.into(),
            subtype,
            grade: subtype.grade(),
            split: None,
            mpp,
        }
    }

    pub fn validate(&self) -> Result<(), WsiError> {
        if !(self.mpp > 0.0) {
            return Err(WsiError::InvalidMpp(self.mpp));
        }
        let expected = self.subtype.grade();
        if self.grade != expected {
            return Err(WsiError::GradeMismatch {
                slide_id: self.slide_id.clone(),
                subtype: self.subtype,
                grade: self.grade,
                expected,
            });
        }
        Ok(())
    }

    pub fn resolve_path(&self, manifest_dir: &Path) -> PathBuf {
        if self.path.is_absolute() {
            self.path.clone()
        } else {
            manifest_dir.join(&self.path)
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<SlideManifestEntry>, WsiError> {
    let text = fs::read_to_string(path).map_err(|e| WsiError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| WsiError::Malformed { path: path.to_path_buf(), line: i + 1, message };
        let entry: SlideManifestEntry = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        entry.validate().map_err(|e| malformed(e.to_string()))?;
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[SlideManifestEntry]) -> Result<(), WsiError> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| WsiError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let good = SlideManifestEntry::new("a", "p1", "a", Subtype::Serous, 1.0);
        let mut text = serde_json::to_string(&good).unwrap();
        text.push_str("\n{\"slide_id\": 3}\n");
        fs::write(&p, text).unwrap();
        match read_manifest(&p) {
            Err(WsiError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grade_must_follow_subtype() {
        let mut e = SlideManifestEntry::new("a", "p1", "a", Subtype::EndometrioidG3, 0.5);
        assert_eq!(e.grade, Grade::High);
        e.grade = Grade::Low;
        assert!(matches!(e.validate(), Err(WsiError::GradeMismatch { .. })));
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut e = SlideManifestEntry::new("a", "p1", "slides/a", Subtype::EndometrioidG1, 0.25);
        e.split = Some(Split::Test);
        write_manifest(&p, &[e.clone()]).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), vec![e]);
    }
}
