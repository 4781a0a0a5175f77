//! Slide containers, magnification handling, tissue masking, region and
//! patch geometry, annotation harvesting, synthetic slides and
//! patient-grouped dataset splits.
//!
//! Slides are stored as a directory holding `slide.json` plus one 8-bit
//! RGB PNG per pyramid level:
//!
//! ```json
//! {"slide_id": "s001", "mpp": 0.25, "width": 4096, "height": 4096,
//!  "levels": [{"mpp": 0.25, "file": "level0.png"}, {"mpp": 1.0, "file": "level1.png"}]}
//! ```

mod annotation;
mod manifest;
mod plane;
mod region;
mod slide;
mod split;
mod synth;
mod tissue;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use annotation::{
    annotation_patches_from_plane, extract_annotation_patches, read_annotations, write_annotations, AnnotationBox,
    AnnotationPatches, LabeledPatch,
};
pub use manifest::{read_manifest, write_manifest, SlideManifestEntry};
pub use plane::RgbPlane;
pub use region::{
    extract_patches, region_candidates, sample_from_candidates, sample_regions, PatchSlot, RegionCandidate,
    RegionPatches, RegionSample, RegionSpec, PATCH_PX, REGION_GRID, REGION_SIDE_UM,
};
pub use slide::{downsample_plane, downsample_to_target, load_slide, save_slide, Level, Slide};
pub use split::{split_dataset, SplitFractions, SplitOutcome};
pub use synth::{generate_synthetic_slide, synthetic_cohort, SyntheticSlide, SyntheticSlideSpec, TextureParams};
pub use tissue::{compute_tissue_mask, TissueMask, TissueParams};

/// Histologic subtype, as annotated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subtype {
    EndometrioidG1,
    EndometrioidG2,
    EndometrioidG3,
    Serous,
    Carcinosarcoma,
}

impl Subtype {
    pub const ALL: [Subtype; 5] = [
        Subtype::EndometrioidG1,
        Subtype::EndometrioidG2,
        Subtype::EndometrioidG3,
        Subtype::Serous,
        Subtype::Carcinosarcoma,
    ];

    /// Grades 1-2 endometrioid are low grade; grade 3, serous and
    /// carcinosarcoma are high grade.
    pub fn grade(self) -> Grade {
        match self {
            Subtype::EndometrioidG1 | Subtype::EndometrioidG2 => Grade::Low,
            Subtype::EndometrioidG3 | Subtype::Serous | Subtype::Carcinosarcoma => Grade::High,
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            Subtype::EndometrioidG1 => "EndometrioidG1",
            Subtype::EndometrioidG2 => "EndometrioidG2",
            Subtype::EndometrioidG3 => "EndometrioidG3",
            Subtype::Serous => "Serous",
            Subtype::Carcinosarcoma => "Carcinosarcoma",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Grade {
    Low,
    High,
}

impl Grade {
    /// Class index used by classifier heads: Low = 0, High = 1.
    pub fn index(self) -> usize {
        match self {
            Grade::Low => 0,
            Grade::High => 1,
        }
    }

    pub fn from_index(i: usize) -> Grade {
        if i == 0 {
            Grade::Low
        } else {
            Grade::High
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    External,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "external" => Ok(Split::External),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Error)]
pub enum WsiError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("png: {0}")]
    Png(String),
    #[error("{path}:{line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("invalid mpp {0}: must be > 0")]
    InvalidMpp(f64),
    #[error("missing level file {0}")]
    MissingLevel(PathBuf),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("target resolution {target} um/px is finer than the best level ({available} um/px)")]
    TargetTooFine { target: f64, available: f64 },
    #[error("empty image plane")]
    EmptyPlane,
    #[error("no region reaches the minimum tissue fraction {min_tissue}")]
    NoTissue { min_tissue: f64 },
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("region at ({x}, {y}) lies entirely outside the {width}x{height} plane")]
    RegionOutside { x: u32, y: u32, width: usize, height: usize },
    #[error("synthetic slide side {0} um is below the 4480 um region size")]
    SideTooSmall(u32),
    #[error("patient `{0}` carries conflicting split tags")]
    ConflictingSplit(String),
    #[error("slide `{slide_id}` has grade {grade:?} but subtype {subtype:?} implies {expected:?}")]
    GradeMismatch { slide_id: String, subtype: Subtype, grade: Grade, expected: Grade },
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
}

impl WsiError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        WsiError::Io { path: path.to_path_buf(), source }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grade_map_total_and_surjective() {
        let grades: Vec<Grade> = Subtype::ALL.iter().map(|s| s.grade()).collect();
        assert_eq!(grades, vec![Grade::Low, Grade::Low, Grade::High, Grade::High, Grade::High]);
        assert!(grades.contains(&Grade::Low) && grades.contains(&Grade::High));
    }

    #[test]
    fn subtype_serializes_by_name() {
        for s in Subtype::ALL {
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert_eq!(serde_json::to_string(&Split::Val).unwrap(), "\"val\"");
    }
}
