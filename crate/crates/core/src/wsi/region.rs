use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RgbPlane, TissueMask, WsiError};

/// Region side in microns.
pub const REGION_SIDE_UM: u32 = 4480;
/// Patch slots per region axis.
pub const REGION_GRID: usize = 20;
/// Patch edge in pixels at 1 um/px.
pub const PATCH_PX: usize = 224;

/// Square region on a 1 um/px plane, resolved to a grid of patch slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegionSpec {
    /// Top-left corner in microns (= pixels at 1 um/px).
    pub origin_x: u32,
    pub origin_y: u32,
    pub side_um: u32,
    pub grid_rows: u16,
    pub grid_cols: u16,
    pub patch_px: u32,
}

impl RegionSpec {
    /// 4480 um region with a 20 x 20 grid of 224 px patches.
    pub fn new(origin_x: u32, origin_y: u32) -> Self {
        RegionSpec {
            origin_x,
            origin_y,
            side_um: REGION_SIDE_UM,
            grid_rows: REGION_GRID as u16,
            grid_cols: REGION_GRID as u16,
            patch_px: PATCH_PX as u32,
        }
    }

    pub fn with_geometry(origin_x: u32, origin_y: u32, side_um: u32, grid: u16, patch_px: u32) -> Result<Self, WsiError> {
        let r = RegionSpec { origin_x, origin_y, side_um, grid_rows: grid, grid_cols: grid, patch_px };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), WsiError> {
        if self.grid_rows == 0 || self.grid_cols == 0 || self.patch_px == 0 {
            return Err(WsiError::InvalidRegion("empty grid".into()));
        }
        if self.grid_rows != self.grid_cols || self.side_um != self.grid_rows as u32 * self.patch_um() {
            return Err(WsiError::InvalidRegion(format!(
                "side {} um != {} x {} um patches",
                self.side_um,
                self.grid_rows,
                self.patch_um()
            )));
        }
        Ok(())
    }

    /// Patch edge in microns; equal to `patch_px` at 1 um/px.
    pub fn patch_um(&self) -> u32 {
        self.patch_px
    }

    pub fn slots(&self) -> usize {
        self.grid_rows as usize * self.grid_cols as usize
    }

    /// Stable identifier used in feature stores and attention files.
    pub fn id(&self) -> String {
        format!("x{}_y{}", self.origin_x, self.origin_y)
    }

    pub fn parse_id(id: &str) -> Option<(u32, u32)> {
        let rest = id.strip_prefix('x')?;
        let (x, y) = rest.split_once("_y")?;
        Some((x.parse().ok()?, y.parse().ok()?))
    }

    /// Pixel origin of slot `(row, col)`.
    pub fn slot_origin(&self, row: usize, col: usize) -> (usize, usize) {
        (
            self.origin_x as usize + col * self.patch_px as usize,
            self.origin_y as usize + row * self.patch_px as usize,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionCandidate {
    pub region: RegionSpec,
    pub tissue_fraction: f64,
}

/// Grid-aligned, non-overlapping regions tiling the plane from its origin
/// (edge regions may extend past the plane), keeping those whose tissue
/// fraction, measured over the full region area, is at least `min_tissue`.
pub fn region_candidates(width: usize, height: usize, mask: &TissueMask, min_tissue: f64) -> Vec<RegionCandidate> {
    let side = REGION_SIDE_UM as usize;
    let mut out = Vec::new();
    for oy in (0..height).step_by(side) {
        for ox in (0..width).step_by(side) {
            let f = mask.window_fraction(ox, oy, side, side);
            if f >= min_tissue {
                out.push(RegionCandidate { region: RegionSpec::new(ox as u32, oy as u32), tissue_fraction: f });
            }
        }
    }
    out
}

/// Choose `k` of `n` candidates: without replacement when `n >= k`,
/// otherwise uniformly with replacement. Returns indices and whether
/// replacement was needed.
pub fn sample_from_candidates<R: Rng>(n: usize, k: usize, rng: &mut R) -> Result<(Vec<usize>, bool), WsiError> {
    if n == 0 {
        return Err(WsiError::NoTissue { min_tissue: f64::NAN });
    }
    if n >= k {
        Ok((rand::seq::index::sample(rng, n, k).into_vec(), false))
    } else {
        Ok(((0..k).map(|_| rng.random_range(0..n)).collect(), true))
    }
}

#[derive(Clone, Debug)]
pub struct RegionSample {
    pub regions: Vec<RegionSpec>,
    pub candidates: usize,
    pub with_replacement: bool,
    pub warnings: Vec<String>,
}

/// Draw `k` regions from the tissue-bearing candidates of a 1 um/px plane.
pub fn sample_regions(plane: &RgbPlane, mask: &TissueMask, k: usize, min_tissue: f64, seed: u64) -> Result<RegionSample, WsiError> {
    let cands = region_candidates(plane.width(), plane.height(), mask, min_tissue);
    if cands.is_empty() {
        return Err(WsiError::NoTissue { min_tissue });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (idx, with_replacement) = sample_from_candidates(cands.len(), k, &mut rng)?;
    let mut warnings = Vec::new();
    if with_replacement {
        let msg = format!("only {} candidate regions for k = {k}; sampling with replacement", cands.len());
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(RegionSample {
        regions: idx.into_iter().map(|i| cands[i].region).collect(),
        candidates: cands.len(),
        with_replacement,
        warnings,
    })
}

/// One grid slot; `patch` is `None` for padding slots.
#[derive(Clone, Debug)]
pub struct PatchSlot {
    pub row: u16,
    pub col: u16,
    pub patch: Option<RgbPlane>,
}

impl PatchSlot {
    pub fn is_padding(&self) -> bool {
        self.patch.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct RegionPatches {
    pub region: RegionSpec,
    /// Row-major, exactly `grid_rows * grid_cols` entries.
    pub slots: Vec<PatchSlot>,
}

impl RegionPatches {
    pub fn real_count(&self) -> usize {
        self.slots.iter().filter(|s| !s.is_padding()).count()
    }

    pub fn padding_count(&self) -> usize {
        self.slots.len() - self.real_count()
    }
}

/// Cut a region into patch slots. Slots not fully inside the plane become
/// padding.
pub fn extract_patches(plane: &RgbPlane, region: &RegionSpec) -> Result<RegionPatches, WsiError> {
    region.validate()?;
    let (x0, y0) = (region.origin_x as usize, region.origin_y as usize);
    if x0 >= plane.width() || y0 >= plane.height() {
        return Err(WsiError::RegionOutside {
            x: region.origin_x,
            y: region.origin_y,
            width: plane.width(),
            height: plane.height(),
        });
    }
    let p = region.patch_px as usize;
    let mut slots = Vec::with_capacity(region.slots());
    for row in 0..region.grid_rows as usize {
        for col in 0..region.grid_cols as usize {
            let (x, y) = region.slot_origin(row, col);
            let patch = (x + p <= plane.width() && y + p <= plane.height()).then(|| plane.crop(x, y, p, p));
            slots.push(PatchSlot { row: row as u16, col: col as u16, patch });
        }
    }
    Ok(RegionPatches { region: *region, slots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wsi::{compute_tissue_mask, TissueParams};

    const PINK: [u8; 3] = [225, 150, 185];

    #[test]
    fn region_geometry() {
        let r = RegionSpec::new(0, 0);
        assert_eq!(r.side_um / r.patch_um(), 20);
        assert_eq!(r.slots(), 400);
        assert!(RegionSpec::with_geometry(0, 0, 4480, 19, 224).is_err());
        assert_eq!(RegionSpec::parse_id(&RegionSpec::new(4480, 0).id()), Some((4480, 0)));
    }

    #[test]
    fn interior_region_has_400_patches() {
        let plane = RgbPlane::filled(4480, 4480, PINK);
        let rp = extract_patches(&plane, &RegionSpec::new(0, 0)).unwrap();
        assert_eq!(rp.slots.len(), 400);
        assert_eq!(rp.padding_count(), 0);
        assert_eq!((rp.slots[0].row, rp.slots[0].col), (0, 0));
        assert_eq!(RegionSpec::new(0, 0).slot_origin(0, 0), (0, 0));
        assert_eq!(rp.slots[21].row, 1);
        assert_eq!(rp.slots[21].col, 1);
    }

    #[test]
    fn clipped_last_row_becomes_padding() {
        let plane = RgbPlane::filled(4480, 4480 - 224, PINK);
        let rp = extract_patches(&plane, &RegionSpec::new(0, 0)).unwrap();
        assert_eq!(rp.real_count(), 380);
        assert_eq!(rp.padding_count(), 20);
        assert!(rp.slots[380..].iter().all(PatchSlot::is_padding));
    }

    #[test]
    fn region_outside_errors() {
        let plane = RgbPlane::filled(500, 500, PINK);
        assert!(matches!(extract_patches(&plane, &RegionSpec::new(4480, 0)), Err(WsiError::RegionOutside { .. })));
    }

    #[test]
    fn four_candidates_on_8960_plane() {
        let plane = RgbPlane::filled(8960, 8960, PINK);
        let mask = compute_tissue_mask(&plane, &TissueParams::default()).unwrap();
        let s = sample_regions(&plane, &mask, 4, 0.25, 1).unwrap();
        assert_eq!(s.candidates, 4);
        assert!(!s.with_replacement);
        let mut got: Vec<_> = s.regions.iter().map(|r| (r.origin_x, r.origin_y)).collect();
        got.sort();
        assert_eq!(got, vec![(0, 0), (0, 4480), (4480, 0), (4480, 4480)]);
        let many = sample_regions(&plane, &mask, 25, 0.25, 1).unwrap();
        assert_eq!(many.regions.len(), 25);
        assert!(many.with_replacement && !many.warnings.is_empty());
    }

    #[test]
    fn white_slide_has_no_tissue() {
        let plane = RgbPlane::filled(4480, 4480, [250, 250, 250]);
        let mask = compute_tissue_mask(&plane, &TissueParams::default()).unwrap();
        assert!(matches!(sample_regions(&plane, &mask, 1, 0.25, 0), Err(WsiError::NoTissue { .. })));
    }
}
