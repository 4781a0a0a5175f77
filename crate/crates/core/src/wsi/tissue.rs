use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{RgbPlane, WsiError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueParams {
    pub saturation_threshold: f64,
    pub brightness_ceiling: f64,
    pub stride: usize,
}

impl Default for TissueParams {
    fn default() -> Self {
        TissueParams { saturation_threshold: 0.08, brightness_ceiling: 0.92, stride: 32 }
    }
}

/// Boolean tissue grid with one cell per `stride x stride` block.
#[derive(Clone, Debug, PartialEq)]
pub struct TissueMask {
    pub stride: usize,
    pub cols: usize,
    pub rows: usize,
    cells: Vec<bool>,
}

impl TissueMask {
    pub fn is_tissue(&self, col: usize, row: usize) -> bool {
        col < self.cols && row < self.rows && self.cells[row * self.cols + col]
    }

    /// Tissue flag of the cell containing plane pixel `(x, y)`.
    pub fn at_pixel(&self, x: usize, y: usize) -> bool {
        self.is_tissue(x / self.stride, y / self.stride)
    }

    pub fn tissue_fraction(&self) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        self.cells.iter().filter(|&&c| c).count() as f64 / self.cells.len() as f64
    }

    /// Fraction of tissue cells in the `w x h` pixel window at `(x, y)`.
    /// Cells beyond the plane count as background.
    pub fn window_fraction(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        let s = self.stride;
        let (c0, r0) = (x.div_ceil(s), y.div_ceil(s));
        let (c1, r1) = ((x + w).div_ceil(s), (y + h).div_ceil(s));
        let total = (c1 - c0) * (r1 - r0);
        if total == 0 {
            return 0.0;
        }
        let mut hits = 0;
        for r in r0..r1.min(self.rows) {
            for c in c0..c1.min(self.cols) {
                if self.cells[r * self.cols + c] {
                    hits += 1;
                }
            }
        }
        hits as f64 / total as f64
    }
}

/// A cell is tissue iff its mean HSV saturation exceeds the threshold and
/// its mean brightness `(r + g + b) / 765` is below the ceiling.
pub fn compute_tissue_mask(plane: &RgbPlane, params: &TissueParams) -> Result<TissueMask, WsiError> {
    if plane.is_empty() {
        return Err(WsiError::EmptyPlane);
    }
    if params.stride == 0 {
        return Err(WsiError::DimMismatch("tissue stride must be >= 1".into()));
    }
    let s = params.stride;
    let (w, h) = (plane.width(), plane.height());
    let (cols, rows) = (w.div_ceil(s), h.div_ceil(s));
    let data = plane.data();
    let cells: Vec<bool> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|r| {
            let mut sat = vec![0.0f64; cols];
            let mut bright = vec![0.0f64; cols];
            let y1 = ((r + 1) * s).min(h);
            for y in r * s..y1 {
                let row = &data[y * w * 3..(y + 1) * w * 3];
                for (x, px) in row.chunks_exact(3).enumerate() {
                    let mx = px[0].max(px[1]).max(px[2]) as f64;
                    let mn = px[0].min(px[1]).min(px[2]) as f64;
                    if mx > 0.0 {
                        sat[x / s] += (mx - mn) / mx;
                    }
                    bright[x / s] += (px[0] as f64 + px[1] as f64 + px[2] as f64) / 765.0;
                }
            }
            (0..cols).map(move |c| {
                let n = ((((c + 1) * s).min(w) - c * s) * (y1 - r * s)) as f64;
                sat[c] / n > params.saturation_threshold && bright[c] / n < params.brightness_ceiling
            })
        })
        .collect();
    Ok(TissueMask { stride: s, cols, rows, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    const PINK: [u8; 3] = [225, 150, 185];
    const WHITE: [u8; 3] = [245, 245, 245];

    #[test]
    fn white_is_background_and_pink_is_tissue() {
        let p = TissueParams::default();
        assert_eq!(compute_tissue_mask(&RgbPlane::filled(100, 70, WHITE), &p).unwrap().tissue_fraction(), 0.0);
        assert_eq!(compute_tissue_mask(&RgbPlane::filled(100, 70, PINK), &p).unwrap().tissue_fraction(), 1.0);
    }

    #[test]
    fn half_and_half() {
        let mut plane = RgbPlane::filled(320, 200, WHITE);
        for y in 0..200 {
            for x in 0..150 {
                plane.set_pixel(x, y, PINK);
            }
        }
        let m = compute_tissue_mask(&plane, &TissueParams::default()).unwrap();
        assert_eq!((m.cols, m.rows), (10, 7));
        let cell = 1.0 / m.cols as f64;
        assert!((m.tissue_fraction() - 0.5).abs() <= cell, "{}", m.tissue_fraction());
    }

    #[test]
    fn empty_plane_errors() {
        let p = RgbPlane::new(0, 0, vec![]).unwrap();
        assert!(matches!(compute_tissue_mask(&p, &TissueParams::default()), Err(WsiError::EmptyPlane)));
    }

    #[test]
    fn window_counts_off_plane_as_background() {
        let m = compute_tissue_mask(&RgbPlane::filled(64, 64, PINK), &TissueParams::default()).unwrap();
        assert_eq!(m.window_fraction(0, 0, 64, 64), 1.0);
        assert_eq!(m.window_fraction(0, 0, 128, 64), 0.5);
    }
}
