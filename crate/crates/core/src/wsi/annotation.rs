use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{downsample_to_target, Grade, RgbPlane, Slide, Subtype, WsiError, PATCH_PX};

/// Tumor bounding box in level-0 pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationBox {
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub label: Subtype,
}

#[derive(Clone, Debug)]
pub struct LabeledPatch {
    pub slide_id: String,
    /// Top-left corner on the 1 um/px plane.
    pub x: usize,
    pub y: usize,
    pub subtype: Subtype,
    pub grade: Grade,
    pub patch: RgbPlane,
}

#[derive(Clone, Debug, Default)]
pub struct AnnotationPatches {
    pub patches: Vec<LabeledPatch>,
    pub skipped: Vec<String>,
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationBox>, WsiError> {
    let text = fs::read_to_string(path).map_err(|e| WsiError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| WsiError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, boxes: &[AnnotationBox]) -> Result<(), WsiError> {
    let mut text = String::new();
    for b in boxes {
        text.push_str(&serde_json::to_string(b).expect("annotation serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| WsiError::io(path, e))
}

/// Tile each box of `slide` into non-overlapping 224 px patches at 1 um/px.
/// Partial patches at the box edges are discarded; boxes that do not lie
/// within the slide, or belong to another slide, are skipped with a warning.
pub fn extract_annotation_patches(slide: &Slide, boxes: &[AnnotationBox]) -> Result<AnnotationPatches, WsiError> {
    let plane = downsample_to_target(slide, 1.0)?;
    let mut out = AnnotationPatches::default();
    let mut mine = Vec::new();
    for b in boxes {
        if b.slide_id != slide.slide_id {
            let msg = format!("box on `{}` ignored for slide `{}`", b.slide_id, slide.slide_id);
            log::warn!("{msg}");
            out.skipped.push(msg);
        } else if b.w == 0 || b.h == 0 || b.x as usize + b.w as usize > slide.width() || b.y as usize + b.h as usize > slide.height() {
            let msg = format!(
                "box ({}, {}, {}x{}) lies outside slide `{}` ({}x{})",
                b.x,
                b.y,
                b.w,
                b.h,
                slide.slide_id,
                slide.width(),
                slide.height()
            );
            log::warn!("{msg}");
            out.skipped.push(msg);
        } else {
            mine.push(b.clone());
        }
    }
    let mut rest = annotation_patches_from_plane(&plane, slide.mpp(), &mine);
    out.patches.append(&mut rest.patches);
    out.skipped.append(&mut rest.skipped);
    Ok(out)
}

/// Same as [`extract_annotation_patches`] with the 1 um/px plane already
/// computed. `mpp0` converts box coordinates to microns.
pub fn annotation_patches_from_plane(plane: &RgbPlane, mpp0: f64, boxes: &[AnnotationBox]) -> AnnotationPatches {
    let p = PATCH_PX;
    let mut out = AnnotationPatches::default();
    for b in boxes {
        let x0 = (b.x as f64 * mpp0).round() as usize;
        let y0 = (b.y as f64 * mpp0).round() as usize;
        let x1 = (((b.x + b.w) as f64 * mpp0).round() as usize).min(plane.width());
        let y1 = (((b.y + b.h) as f64 * mpp0).round() as usize).min(plane.height());
        if x0 >= x1 || y0 >= y1 {
            let msg = format!("box ({}, {}) on `{}` is empty at 1 um/px", b.x, b.y, b.slide_id);
            log::warn!("{msg}");
            out.skipped.push(msg);
            continue;
        }
        let (nx, ny) = ((x1 - x0) / p, (y1 - y0) / p);
        for j in 0..ny {
            for i in 0..nx {
                let (x, y) = (x0 + i * p, y0 + j * p);
                out.patches.push(LabeledPatch {
                    slide_id: b.slide_id.clone(),
                    x,
                    y,
                    subtype: b.label,
                    grade: b.label.grade(),
                    patch: plane.crop(x, y, p, p),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: u32, y: u32, w: u32, h: u32, label: Subtype) -> AnnotationBox {
        AnnotationBox { slide_id: "s".into(), x, y, w, h, label }
    }

    #[test]
    fn box_at_quarter_micron_yields_four_patches() {
        let slide = Slide::single_level("s", 0.25, RgbPlane::filled(2048, 2048, [200, 120, 160])).unwrap();
        let got = extract_annotation_patches(&slide, &[bx(0, 0, 1792, 1792, Subtype::EndometrioidG1)]).unwrap();
        assert_eq!(got.patches.len(), 4);
        assert!(got.patches.iter().all(|p| p.grade == Grade::Low && p.patch.width() == 224));
    }

    #[test]
    fn partial_patches_discarded() {
        let plane = RgbPlane::filled(600, 600, [200, 120, 160]);
        let got = annotation_patches_from_plane(&plane, 1.0, &[bx(10, 10, 300, 300, Subtype::EndometrioidG3)]);
        assert_eq!(got.patches.len(), 1);
        assert_eq!(got.patches[0].grade, Grade::High);
    }

    #[test]
    fn outside_box_skipped() {
        let slide = Slide::single_level("s", 1.0, RgbPlane::filled(500, 500, [200, 120, 160])).unwrap();
        let got = extract_annotation_patches(&slide, &[bx(400, 0, 224, 224, Subtype::Serous)]).unwrap();
        assert!(got.patches.is_empty());
        assert_eq!(got.skipped.len(), 1);
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        let boxes = vec![bx(1, 2, 3, 4, Subtype::Carcinosarcoma), bx(5, 6, 7, 8, Subtype::EndometrioidG2)];
        write_annotations(&p, &boxes).unwrap();
        assert_eq!(read_annotations(&p).unwrap(), boxes);
    }
}
