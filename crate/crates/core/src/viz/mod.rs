//! Attention heatmaps: per-patch scores from the class token's attention,
//! stitched onto the slide canvas, min-max normalized over the whole slide
//! and blended onto the H&E plane (red = high, blue = low).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{Prediction, SlideFeatures};
use crate::transformer::AttentionTrace;
use crate::wsi::{RegionSpec, RgbPlane, TissueMask, WsiError};

#[derive(Debug, Error)]
pub enum VizError {
    #[error("no attention trace captured")]
    MissingTrace,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("region `{0}` is not aligned to the patch grid")]
    Unaligned(String),
    #[error("no region carries an attention score")]
    Empty,
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error(transparent)]
    Wsi(#[from] WsiError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Final layer, class-token row, mean over heads.
    #[default]
    LastLayerHeadMean,
    /// Attention rollout: head-mean attention plus identity, row-normalized,
    /// multiplied through all layers.
    Rollout,
}

impl Aggregation {
    pub fn layer_label(self) -> &'static str {
        match self {
            Aggregation::LastLayerHeadMean => "final",
            Aggregation::Rollout => "all",
        }
    }
}

fn head_mean_row(trace: &AttentionTrace, layer: usize, i: usize) -> Vec<f64> {
    let mut row = vec![0.0f64; trace.seq_len];
    for h in 0..trace.heads {
        for (acc, &a) in row.iter_mut().zip(trace.row(layer, h, i)) {
            *acc += a as f64;
        }
    }
    row.iter_mut().for_each(|v| *v /= trace.heads as f64);
    row
}

/// Per-slot attention scores of the class token; `None` at padding slots.
/// `padding[i]` refers to patch slot `i` (sequence position `i + 1`).
pub fn class_token_attention(trace: &AttentionTrace, padding: &[bool], agg: Aggregation) -> Result<Vec<Option<f64>>, VizError> {
    if trace.layers.is_empty() || trace.heads == 0 {
        return Err(VizError::MissingTrace);
    }
    let s = trace.seq_len;
    if padding.len() + 1 != s || trace.layers.iter().any(|l| l.len() != trace.heads || l.iter().any(|m| m.len() != s * s)) {
        return Err(VizError::DimMismatch(format!("trace of length {s} for {} slots", padding.len())));
    }
    let last = trace.layers.len() - 1;
    let row = match agg {
        Aggregation::LastLayerHeadMean => head_mean_row(trace, last, 0),
        Aggregation::Rollout => {
            // Class row of A_L ... A_1, computed as a row vector.
            let mut r = vec![0.0f64; s];
            r[0] = 1.0;
            for l in (0..=last).rev() {
                let mut next = vec![0.0f64; s];
                for (i, &ri) in r.iter().enumerate() {
                    if ri == 0.0 {
                        continue;
                    }
                    let mut a = head_mean_row(trace, l, i);
                    a[i] += 1.0;
                    let z: f64 = a.iter().sum();
                    for (n, v) in next.iter_mut().zip(&a) {
                        *n += ri * v / z;
                    }
                }
                r = next;
            }
            r
        }
    };
    Ok(padding.iter().zip(&row[1..]).map(|(&p, &v)| (!p).then_some(v)).collect())
}

/// Scores of one region, row-major over its grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionAttention {
    pub region: RegionSpec,
    pub scores: Vec<Option<f64>>,
}

/// Patch-resolution canvas covering a slide plane.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCanvas {
    /// Plane size in pixels.
    pub width: usize,
    pub height: usize,
    pub patch_px: usize,
    pub cols: usize,
    pub rows: usize,
    /// Normalized scores in [0, 1]; `None` where no region scored the cell.
    pub scores: Vec<Option<f64>>,
    /// Raw (min, max) before normalization.
    pub bounds: (f64, f64),
}

impl AttentionCanvas {
    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        self.scores[row * self.cols + col]
    }
}

/// Stitch region maps onto a `width x height` slide, average cells covered
/// by several regions, then min-max normalize over the slide. If every
/// score is equal, all cells map to 0.5.
///
/// With `tissue`, cells without a single tissue pixel are dropped before
/// normalization: they would not be drawn, so they must not set the range.
pub fn normalize_and_stitch(
    maps: &[RegionAttention],
    width: usize,
    height: usize,
    tissue: Option<&TissueMask>,
) -> Result<AttentionCanvas, VizError> {
    let Some(first) = maps.first() else { return Err(VizError::Empty) };
    let p = first.region.patch_px as usize;
    let (cols, rows) = (width.div_ceil(p), height.div_ceil(p));
    let mut sum = vec![0.0f64; cols * rows];
    let mut count = vec![0u32; cols * rows];
    for m in maps {
        let r = &m.region;
        if r.patch_px as usize != p || !(r.origin_x as usize).is_multiple_of(p) || !(r.origin_y as usize).is_multiple_of(p) {
            return Err(VizError::Unaligned(r.id()));
        }
        if m.scores.len() != r.slots() {
            return Err(VizError::DimMismatch(format!("{} scores for {} slots", m.scores.len(), r.slots())));
        }
        let (c0, r0) = (r.origin_x as usize / p, r.origin_y as usize / p);
        for (k, s) in m.scores.iter().enumerate() {
            let (c, rr) = (c0 + k % r.grid_cols as usize, r0 + k / r.grid_cols as usize);
            if let (Some(v), true) = (s, c < cols && rr < rows) {
                sum[rr * cols + c] += v;
                count[rr * cols + c] += 1;
            }
        }
    }
    let raw: Vec<Option<f64>> = sum
        .iter()
        .zip(&count)
        .enumerate()
        .map(|(i, (&s, &n))| {
            let (c, r) = (i % cols, i / cols);
            let drawn = tissue.is_none_or(|m| m.window_fraction(c * p, r * p, p, p) > 0.0);
            (n > 0 && drawn).then(|| s / n as f64)
        })
        .collect();
    let (lo, hi) = raw.iter().flatten().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo > hi {
        return Err(VizError::Empty);
    }
    let scores = raw.iter().map(|v| v.map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 })).collect();
    Ok(AttentionCanvas { width, height, patch_px: p, cols, rows, scores, bounds: (lo, hi) })
}

/// Blue (0) through purple (0.5) to red (1), blended with `alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Colormap {
    pub alpha: f64,
}

impl Default for Colormap {
    fn default() -> Self {
        Colormap { alpha: 0.45 }
    }
}

const STOPS: [[f64; 3]; 3] = [[0.0, 0.0, 255.0], [128.0, 0.0, 128.0], [255.0, 0.0, 0.0]];

impl Colormap {
    pub fn color(&self, t: f64) -> [u8; 3] {
        let t = t.clamp(0.0, 1.0);
        let (a, b, f) = if t <= 0.5 { (STOPS[0], STOPS[1], t * 2.0) } else { (STOPS[1], STOPS[2], t * 2.0 - 1.0) };
        std::array::from_fn(|c| (a[c] + (b[c] - a[c]) * f).round() as u8)
    }

    fn blend(&self, px: u8, c: u8) -> u8 {
        ((1.0 - self.alpha) * px as f64 + self.alpha * c as f64).round() as u8
    }
}

/// Blend each scored patch cell with its colour. Unscored cells, and pixels
/// outside `tissue` when a mask is given, are left untouched.
pub fn render_heatmap(
    plane: &RgbPlane,
    canvas: &AttentionCanvas,
    cmap: &Colormap,
    tissue: Option<&TissueMask>,
) -> Result<RgbPlane, VizError> {
    if plane.width() != canvas.width || plane.height() != canvas.height {
        return Err(VizError::DimMismatch(format!(
            "plane {}x{}, canvas {}x{}",
            plane.width(),
            plane.height(),
            canvas.width,
            canvas.height
        )));
    }
    let mut out = plane.clone();
    if cmap.alpha == 0.0 {
        return Ok(out);
    }
    let w = plane.width();
    let p = canvas.patch_px;
    let data = out.data_mut();
    for (y, line) in data.chunks_exact_mut(w * 3).enumerate() {
        for (x, px) in line.chunks_exact_mut(3).enumerate() {
            if tissue.is_some_and(|m| !m.at_pixel(x, y)) {
                continue;
            }
            if let Some(t) = canvas.get(x / p, y / p) {
                let c = cmap.color(t);
                for k in 0..3 {
                    px[k] = cmap.blend(px[k], c[k]);
                }
            }
        }
    }
    Ok(out)
}

/// Region maps for the traces retained by [`crate::pipeline::predict`].
/// Region geometry comes from `template` with the origin parsed from the
/// region id.
pub fn region_maps(
    pred: &Prediction,
    slide: &SlideFeatures,
    template: &RegionSpec,
    agg: Aggregation,
) -> Result<Vec<RegionAttention>, VizError> {
    if pred.traces.is_empty() {
        return Err(VizError::MissingTrace);
    }
    pred.traces
        .iter()
        .map(|(r, trace)| {
            let bundle = slide.regions.get(*r).ok_or_else(|| VizError::DimMismatch(format!("no region {r}")))?;
            let (x, y) = RegionSpec::parse_id(&bundle.region_id).ok_or_else(|| VizError::Unaligned(bundle.region_id.clone()))?;
            let region = RegionSpec { origin_x: x, origin_y: y, ..*template };
            let scores = class_token_attention(trace, &bundle.padding, agg)?;
            Ok(RegionAttention { region, scores })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub slide_id: String,
    pub normalization: Bounds,
    pub layer: String,
    pub aggregation: Aggregation,
    pub alpha: f64,
    pub regions: Vec<String>,
}

impl HeatmapSidecar {
    pub fn new(slide_id: &str, canvas: &AttentionCanvas, maps: &[RegionAttention], agg: Aggregation, cmap: &Colormap) -> Self {
        HeatmapSidecar {
            slide_id: slide_id.to_string(),
            normalization: Bounds { min: canvas.bounds.0, max: canvas.bounds.1 },
            layer: agg.layer_label().to_string(),
            aggregation: agg,
            alpha: cmap.alpha,
            regions: maps.iter().map(|m| m.region.id()).collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), VizError> {
        let json = serde_json::to_string_pretty(self).expect("sidecar serializes");
        fs::write(path, json).map_err(|e| VizError::Io { path: path.to_path_buf(), source: e })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wsi::{compute_tissue_mask, TissueParams};

    fn trace(rows: Vec<Vec<Vec<f32>>>, s: usize) -> AttentionTrace {
        let heads = rows[0].len();
        AttentionTrace { seq_len: s, heads, layers: rows }
    }

    fn uniform(s: usize, real: usize) -> Vec<f32> {
        (0..s * s).map(|k| if k % s <= real { 1.0 / (real + 1) as f32 } else { 0.0 }).collect()
    }

    #[test]
    fn head_mean_and_padding() {
        let s = 4;
        let mut a = vec![0.0f32; 16];
        a[..4].copy_from_slice(&[0.1, 0.2, 0.7, 0.0]);
        let mut b = vec![0.0f32; 16];
        b[..4].copy_from_slice(&[0.3, 0.4, 0.3, 0.0]);
        let t = trace(vec![vec![uniform(s, 2), uniform(s, 2)], vec![a, b]], s);
        let out = class_token_attention(&t, &[false, false, true], Aggregation::LastLayerHeadMean).unwrap();
        assert!((out[0].unwrap() - 0.3).abs() < 1e-7);
        assert!((out[1].unwrap() - 0.5).abs() < 1e-7);
        assert_eq!(out[2], None);
        let empty = AttentionTrace { seq_len: s, heads: 2, layers: vec![] };
        assert!(matches!(class_token_attention(&empty, &[false; 3], Aggregation::Rollout), Err(VizError::MissingTrace)));
    }

    #[test]
    fn uniform_attention_gives_equal_scores() {
        let s = 401;
        let t = trace(vec![vec![uniform(s, 400)]], s);
        let out = class_token_attention(&t, &[false; 400], Aggregation::LastLayerHeadMean).unwrap();
        assert!(out.iter().all(|v| (v.unwrap() - 1.0 / 401.0).abs() < 1e-9));
        let rolled = class_token_attention(&t, &[false; 400], Aggregation::Rollout).unwrap();
        let total: f64 = rolled.iter().flatten().sum();
        assert!(total < 1.0 && rolled.iter().all(|v| (v.unwrap() - rolled[0].unwrap()).abs() < 1e-12));
    }

    #[test]
    fn rollout_matches_matrix_product() {
        let s = 3;
        let l1 = vec![0.5, 0.25, 0.25, 0.2, 0.6, 0.2, 0.1, 0.1, 0.8];
        let l2 = vec![0.2, 0.4, 0.4, 0.3, 0.3, 0.4, 0.6, 0.2, 0.2];
        let t = trace(vec![vec![l1.clone()], vec![l2.clone()]], s);
        let hat = |m: &[f32]| -> Vec<f64> {
            (0..9).map(|k| (m[k] as f64 + if k / 3 == k % 3 { 1.0 } else { 0.0 }) / 2.0).collect()
        };
        let (a1, a2) = (hat(&l1), hat(&l2));
        let prod = |j: usize| (0..3).map(|k| a2[k] * a1[k * 3 + j]).sum::<f64>();
        let out = class_token_attention(&t, &[false, false], Aggregation::Rollout).unwrap();
        assert!((out[0].unwrap() - prod(1)).abs() < 1e-7);
        assert!((out[1].unwrap() - prod(2)).abs() < 1e-7);
    }

    fn region(x: u32, y: u32) -> RegionSpec {
        RegionSpec::with_geometry(x, y, 20, 2, 10).unwrap()
    }

    #[test]
    fn stitching_rules() {
        let one = RegionAttention { region: region(0, 0), scores: vec![Some(0.1), Some(0.3), None, Some(0.3)] };
        let c = normalize_and_stitch(&[one], 30, 20, None).unwrap();
        assert_eq!((c.cols, c.rows), (3, 2));
        assert_eq!(c.scores, vec![Some(0.0), Some(1.0), None, None, Some(1.0), None]);
        assert_eq!(c.bounds, (0.1, 0.3));

        let flat = RegionAttention { region: region(0, 0), scores: vec![Some(0.2); 4] };
        assert!(normalize_and_stitch(&[flat], 20, 20, None).unwrap().scores.iter().all(|v| *v == Some(0.5)));

        let a = RegionAttention { region: region(0, 0), scores: vec![Some(0.0), Some(0.0), Some(0.0), Some(0.0)] };
        let b = RegionAttention { region: region(10, 0), scores: vec![Some(1.0), Some(2.0), Some(1.0), Some(2.0)] };
        let c = normalize_and_stitch(&[a, b], 30, 20, None).unwrap();
        assert_eq!(c.bounds, (0.0, 2.0));
        assert_eq!(c.get(1, 0), Some(0.25));

        let bad = RegionAttention { region: region(5, 0), scores: vec![None; 4] };
        assert!(matches!(normalize_and_stitch(&[bad], 30, 20, None), Err(VizError::Unaligned(_))));
    }

    #[test]
    fn colormap_stops() {
        let c = Colormap::default();
        assert_eq!(c.color(0.0), [0, 0, 255]);
        assert_eq!(c.color(0.5), [128, 0, 128]);
        assert_eq!(c.color(1.0), [255, 0, 0]);
    }

    #[test]
    fn render_blends_only_scored_cells() {
        let plane = RgbPlane::filled(30, 20, [200, 180, 190]);
        let m = RegionAttention { region: region(0, 0), scores: vec![Some(0.0), Some(1.0), None, Some(0.5)] };
        let canvas = normalize_and_stitch(&[m], 30, 20, None).unwrap();
        let out = render_heatmap(&plane, &canvas, &Colormap::default(), None).unwrap();
        assert_eq!((out.width(), out.height()), (30, 20));
        let px = out.pixel(15, 5);
        assert!(px[0] > 200 && px[2] < 190);
        let px = out.pixel(5, 5);
        assert!(px[0] < 200 && px[2] > 190);
        assert_eq!(out.pixel(5, 15), [200, 180, 190]);
        assert_eq!(out.pixel(25, 5), [200, 180, 190]);
        let same = render_heatmap(&plane, &canvas, &Colormap { alpha: 0.0 }, None).unwrap();
        assert_eq!(same.data(), plane.data());
        assert!(render_heatmap(&RgbPlane::filled(31, 20, [0; 3]), &canvas, &Colormap::default(), None).is_err());
    }

    #[test]
    fn background_pixels_untouched() {
        let mut plane = RgbPlane::filled(64, 32, [250, 250, 250]);
        for y in 0..32 {
            for x in 0..32 {
                plane.set_pixel(x, y, [150, 60, 140]);
            }
        }
        let mask = compute_tissue_mask(&plane, &TissueParams { stride: 32, ..Default::default() }).unwrap();
        let r = RegionSpec::with_geometry(0, 0, 64, 1, 64).unwrap();
        let canvas = normalize_and_stitch(&[RegionAttention { region: r, scores: vec![Some(1.0)] }], 64, 32, None).unwrap();
        let out = render_heatmap(&plane, &canvas, &Colormap::default(), Some(&mask)).unwrap();
        assert_ne!(out.pixel(5, 5), [150, 60, 140]);
        assert_eq!(out.pixel(40, 5), [250, 250, 250]);
    }

    #[test]
    fn background_cells_do_not_set_the_range() {
        let mut plane = RgbPlane::filled(64, 32, [250, 250, 250]);
        for y in 0..32 {
            for x in 0..32 {
                plane.set_pixel(x, y, [150, 60, 140]);
            }
        }
        let mask = compute_tissue_mask(&plane, &TissueParams { stride: 32, ..Default::default() }).unwrap();
        let r = RegionSpec::with_geometry(0, 0, 64, 2, 32).unwrap();
        let scores = vec![Some(1.0), Some(9.0), Some(3.0), Some(-4.0)];
        let canvas = normalize_and_stitch(&[RegionAttention { region: r, scores }], 64, 32, Some(&mask)).unwrap();
        assert_eq!(canvas.scores, vec![Some(0.5), None]);
        let canvas = normalize_and_stitch(&[RegionAttention { region: r, scores: vec![Some(1.0), Some(9.0), None, None] }], 64, 32, None).unwrap();
        assert_eq!(canvas.scores, vec![Some(0.0), Some(1.0)]);
    }
}
