use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RgbPlane, WsiError};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SlideJson {
    slide_id: String,
    mpp: f64,
    width: usize,
    height: usize,
    levels: Vec<LevelJson>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LevelJson {
    mpp: f64,
    file: String,
}

/// One pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub mpp: f64,
    pub plane: RgbPlane,
}

/// In-memory pyramid slide. Level 0 is the finest.
#[derive(Clone, Debug, PartialEq)]
pub struct Slide {
    pub slide_id: String,
    pub levels: Vec<Level>,
}

const MPP_EPS: f64 = 1e-9;

impl Slide {
    pub fn new(slide_id: impl Into<String>, levels: Vec<Level>) -> Result<Self, WsiError> {
        let slide = Slide { slide_id: slide_id.into(), levels };
        slide.validate()?;
        Ok(slide)
    }

    pub fn single_level(slide_id: impl Into<String>, mpp: f64, plane: RgbPlane) -> Result<Self, WsiError> {
        Self::new(slide_id, vec![Level { mpp, plane }])
    }

    pub fn mpp(&self) -> f64 {
        self.levels[0].mpp
    }

    pub fn width(&self) -> usize {
        self.levels[0].plane.width()
    }

    pub fn height(&self) -> usize {
        self.levels[0].plane.height()
    }

    fn validate(&self) -> Result<(), WsiError> {
        let first = self.levels.first().ok_or_else(|| WsiError::DimMismatch("slide has no levels".into()))?;
        let (w0, h0) = (first.plane.width() as f64, first.plane.height() as f64);
        let mut prev = 0.0;
        for (k, level) in self.levels.iter().enumerate() {
            if !(level.mpp > 0.0) {
                return Err(WsiError::InvalidMpp(level.mpp));
            }
            if level.mpp + MPP_EPS < prev {
                return Err(WsiError::DimMismatch(format!(
                    "level {k} mpp {} is finer than level {} mpp {prev}",
                    level.mpp,
                    k - 1
                )));
            }
            prev = level.mpp;
            let ratio = first.mpp / level.mpp;
            let (ew, eh) = (w0 * ratio, h0 * ratio);
            let (aw, ah) = (level.plane.width() as f64, level.plane.height() as f64);
            if (aw - ew).abs() > 1.0 || (ah - eh).abs() > 1.0 {
                return Err(WsiError::DimMismatch(format!(
                    "level {k} is {aw}x{ah}, expected about {ew:.1}x{eh:.1} from the mpp ratio"
                )));
            }
        }
        Ok(())
    }
}

/// Read a slide container directory (`slide.json` + one PNG per level).
pub fn load_slide(dir: &Path) -> Result<Slide, WsiError> {
    let meta_path = dir.join("slide.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| WsiError::io(&meta_path, e))?;
    let meta: SlideJson = serde_json::from_str(&text).map_err(|e| WsiError::Malformed {
        path: meta_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if !(meta.mpp > 0.0) {
        return Err(WsiError::InvalidMpp(meta.mpp));
    }
    if meta.levels.is_empty() {
        return Err(WsiError::DimMismatch("slide.json lists no levels".into()));
    }
    if (meta.levels[0].mpp - meta.mpp).abs() > MPP_EPS {
        return Err(WsiError::DimMismatch(format!(
            "level 0 mpp {} differs from slide mpp {}",
            meta.levels[0].mpp, meta.mpp
        )));
    }
    let mut levels = Vec::with_capacity(meta.levels.len());
    for lj in &meta.levels {
        if !(lj.mpp > 0.0) {
            return Err(WsiError::InvalidMpp(lj.mpp));
        }
        let file: PathBuf = dir.join(&lj.file);
        if !file.is_file() {
            return Err(WsiError::MissingLevel(file));
        }
        levels.push(Level { mpp: lj.mpp, plane: RgbPlane::read_png(&file)? });
    }
    if levels[0].plane.width() != meta.width || levels[0].plane.height() != meta.height {
        return Err(WsiError::DimMismatch(format!(
            "slide.json says {}x{}, level 0 is {}x{}",
            meta.width,
            meta.height,
            levels[0].plane.width(),
            levels[0].plane.height()
        )));
    }
    Slide::new(meta.slide_id, levels)
}

/// Write a slide container; level files are named `level{k}.png`.
pub fn save_slide(dir: &Path, slide: &Slide) -> Result<(), WsiError> {
    fs::create_dir_all(dir).map_err(|e| WsiError::io(dir, e))?;
    let mut levels = Vec::new();
    for (k, level) in slide.levels.iter().enumerate() {
        let file = format!("level{k}.png");
        level.plane.write_png(&dir.join(&file))?;
        levels.push(LevelJson { mpp: level.mpp, file });
    }
    let meta = SlideJson {
        slide_id: slide.slide_id.clone(),
        mpp: slide.mpp(),
        width: slide.width(),
        height: slide.height(),
        levels,
    };
    let path = dir.join("slide.json");
    let text = serde_json::to_string_pretty(&meta).expect("slide meta serializes");
    fs::write(&path, text).map_err(|e| WsiError::io(&path, e))
}

/// Resample the slide to `target_mpp` microns per pixel, starting from the
/// coarsest level that is still at least as fine as the target.
///
/// Integer factors use a box-filter mean; other factors use bilinear
/// interpolation. Output dims are `round(level dims * level mpp / target)`.
pub fn downsample_to_target(slide: &Slide, target_mpp: f64) -> Result<RgbPlane, WsiError> {
    if !(target_mpp > 0.0) {
        return Err(WsiError::InvalidMpp(target_mpp));
    }
    let finest = slide.mpp();
    if target_mpp + MPP_EPS < finest {
        return Err(WsiError::TargetTooFine { target: target_mpp, available: finest });
    }
    let level = slide
        .levels
        .iter().rfind(|l| l.mpp <= target_mpp + MPP_EPS)
        .expect("level 0 qualifies");
    Ok(downsample_plane(&level.plane, target_mpp / level.mpp))
}

/// Shrink `plane` by `factor` (>= 1).
pub fn downsample_plane(plane: &RgbPlane, factor: f64) -> RgbPlane {
    let rounded = factor.round();
    if (factor - 1.0).abs() < 1e-9 {
        return plane.clone();
    }
    let ow = ((plane.width() as f64 / factor).round() as usize).max(1);
    let oh = ((plane.height() as f64 / factor).round() as usize).max(1);
    if (factor - rounded).abs() < 1e-6 {
        box_filter(plane, rounded as usize, ow, oh)
    } else {
        bilinear(plane, ow, oh)
    }
}

fn box_filter(plane: &RgbPlane, k: usize, ow: usize, oh: usize) -> RgbPlane {
    let (w, h) = (plane.width(), plane.height());
    let src = plane.data();
    let mut out = vec![0u8; ow * oh * 3];
    let mut acc = vec![0u64; ow * 3];
    let mut counts = vec![0u64; ow];
    for oy in 0..oh {
        acc.fill(0);
        counts.fill(0);
        let (y0, y1) = (oy * k, ((oy + 1) * k).min(h));
        for y in y0..y1 {
            let row = &src[y * w * 3..(y + 1) * w * 3];
            for ox in 0..ow {
                let (x0, x1) = (ox * k, ((ox + 1) * k).min(w));
                for x in x0..x1 {
                    for c in 0..3 {
                        acc[ox * 3 + c] += row[x * 3 + c] as u64;
                    }
                }
                counts[ox] += x1.saturating_sub(x0) as u64;
            }
        }
        for ox in 0..ow {
            let n = counts[ox].max(1);
            for c in 0..3 {
                out[(oy * ow + ox) * 3 + c] = ((acc[ox * 3 + c] + n / 2) / n) as u8;
            }
        }
    }
    RgbPlane::new(ow, oh, out).expect("sized")
}

fn bilinear(plane: &RgbPlane, ow: usize, oh: usize) -> RgbPlane {
    let (w, h) = (plane.width(), plane.height());
    let (sx, sy) = (w as f64 / ow as f64, h as f64 / oh as f64);
    let mut out = vec![0u8; ow * oh * 3];
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let (p00, p10, p01, p11) = (plane.pixel(x0, y0), plane.pixel(x1, y0), plane.pixel(x0, y1), plane.pixel(x1, y1));
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - tx) + p10[c] as f64 * tx;
                let bot = p01[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
                out[(oy * ow + ox) * 3 + c] = (top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    RgbPlane::new(ow, oh, out).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(w: usize, h: usize, v: u8) -> RgbPlane {
        RgbPlane::filled(w, h, [v, v, v])
    }

    #[test]
    fn box_mean_of_two_by_two() {
        let p = RgbPlane::new(2, 2, [0, 0, 100, 100].iter().flat_map(|&v| [v, v, v]).collect()).unwrap();
        let out = downsample_plane(&p, 2.0);
        assert_eq!((out.width(), out.height()), (1, 1));
        assert_eq!(out.pixel(0, 0), [50, 50, 50]);
    }

    #[test]
    fn forty_x_and_twenty_x_factors() {
        let s40 = Slide::single_level("a", 0.25, gray(64, 32, 10)).unwrap();
        let p = downsample_to_target(&s40, 1.0).unwrap();
        assert_eq!((p.width(), p.height()), (16, 8));
        let s20 = Slide::single_level("b", 0.5, gray(64, 32, 10)).unwrap();
        let p = downsample_to_target(&s20, 1.0).unwrap();
        assert_eq!((p.width(), p.height()), (32, 16));
    }

    #[test]
    fn finer_target_is_rejected() {
        let s = Slide::single_level("a", 1.0, gray(8, 8, 0)).unwrap();
        assert!(matches!(downsample_to_target(&s, 0.5), Err(WsiError::TargetTooFine { .. })));
    }

    #[test]
    fn constant_plane_stays_constant_for_any_factor() {
        let p = gray(97, 53, 173);
        for f in [1.0, 2.0, 3.0, 4.0, 1.5, 2.7] {
            let out = downsample_plane(&p, f);
            assert!(out.data().iter().all(|&v| v == 173), "factor {f}");
        }
    }

    #[test]
    fn pyramid_uses_coarsest_suitable_level() {
        let s = Slide::new(
            "p",
            vec![Level { mpp: 0.25, plane: gray(64, 64, 0) }, Level { mpp: 0.5, plane: gray(32, 32, 200) }],
        )
        .unwrap();
        // level 1 (200s) is chosen for a 1.0 target
        assert_eq!(downsample_to_target(&s, 1.0).unwrap().pixel(0, 0), [200, 200, 200]);
    }

    #[test]
    fn container_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let s = Slide::new(
            "two",
            vec![Level { mpp: 0.25, plane: gray(4096, 4096, 7) }, Level { mpp: 1.0, plane: gray(1024, 1024, 7) }],
        )
        .unwrap();
        save_slide(dir.path(), &s).unwrap();
        let back = load_slide(dir.path()).unwrap();
        assert_eq!(back.levels.len(), 2);

        let one = tempfile::tempdir().unwrap();
        save_slide(one.path(), &Slide::single_level("one", 1.0, gray(1024, 1024, 3)).unwrap()).unwrap();
        assert_eq!(load_slide(one.path()).unwrap().levels.len(), 1);

        // mpp 0
        let meta = one.path().join("slide.json");
        let text = fs::read_to_string(&meta).unwrap().replace("\"mpp\": 1.0", "\"mpp\": 0.0");
        fs::write(&meta, text).unwrap();
        assert!(matches!(load_slide(one.path()), Err(WsiError::InvalidMpp(_))));

        // missing level file
        fs::remove_file(dir.path().join("level1.png")).unwrap();
        assert!(matches!(load_slide(dir.path()), Err(WsiError::MissingLevel(_))));
    }

    #[test]
    fn inconsistent_level_dims_rejected() {
        let res = Slide::new(
            "bad",
            vec![Level { mpp: 0.25, plane: gray(64, 64, 0) }, Level { mpp: 1.0, plane: gray(30, 16, 0) }],
        );
        assert!(matches!(res, Err(WsiError::DimMismatch(_))));
    }
}
