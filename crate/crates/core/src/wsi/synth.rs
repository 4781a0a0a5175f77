use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    downsample_plane, AnnotationBox, Grade, Level, RgbPlane, Slide, SlideManifestEntry, Subtype, WsiError, REGION_SIDE_UM,
};

const BACKGROUND: [f32; 3] = [245.0, 245.0, 245.0];
const EOSIN: [f32; 3] = [228.0, 158.0, 190.0];
const EOSIN_DARK: [f32; 3] = [205.0, 122.0, 172.0];
const LUMEN: [f32; 3] = [246.0, 224.0, 234.0];
const EPITHELIUM: [f32; 3] = [128.0, 74.0, 152.0];
const NUCLEUS: [f32; 3] = [62.0, 30.0, 112.0];

/// Lattice spacing of candidate nuclei in microns.
const NUCLEUS_PERIOD_UM: f64 = 14.0;

/// Texture knobs. `gland_period_um` drives the low-grade gland lattice;
/// `nuclear_density` is the fraction of nucleus lattice sites occupied;
/// `noise_amplitude` is per-pixel noise as a fraction of full scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub gland_period_um: f64,
    pub nuclear_density: f64,
    pub noise_amplitude: f64,
}

impl TextureParams {
    pub fn for_grade(grade: Grade) -> Self {
        match grade {
            Grade::Low => TextureParams { gland_period_um: 160.0, nuclear_density: 0.08, noise_amplitude: 0.03 },
            Grade::High => TextureParams { gland_period_um: 160.0, nuclear_density: 0.7, noise_amplitude: 0.12 },
        }
    }

    /// Grade defaults jittered per slide, so no two slides share a texture.
    pub fn sample<R: Rng>(grade: Grade, rng: &mut R) -> Self {
        let base = Self::for_grade(grade);
        TextureParams {
            gland_period_um: base.gland_period_um * rng.random_range(0.8..1.25),
            nuclear_density: (base.nuclear_density * rng.random_range(0.8..1.2)).min(1.0),
            noise_amplitude: base.noise_amplitude * rng.random_range(0.8..1.2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSlideSpec {
    pub slide_id: String,
    pub patient_id: String,
    pub side_um: u32,
    pub mpp: f64,
    pub grade: Grade,
    /// Drawn from the subtypes of `grade` when absent.
    pub subtype: Option<Subtype>,
    pub texture: TextureParams,
    pub annotation_boxes: usize,
    pub box_side_um: u32,
    pub seed: u64,
}

impl SyntheticSlideSpec {
    pub fn new(slide_id: &str, grade: Grade, side_um: u32, seed: u64) -> Self {
        SyntheticSlideSpec {
            slide_id: slide_id.to_string(),
            patient_id: slide_id.to_string(),
            side_um,
            mpp: 1.0,
            grade,
            subtype: None,
            texture: TextureParams::for_grade(grade),
            annotation_boxes: 2,
            box_side_um: 448,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSlide {
    pub slide: Slide,
    pub entry: SlideManifestEntry,
    pub boxes: Vec<AnnotationBox>,
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    inv_a: f64,
    inv_b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random<R: Rng>(rng: &mut R, cx: f64, cy: f64, a: f64, aspect: (f64, f64)) -> Self {
        let b = a * rng.random_range(aspect.0..aspect.1);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        Ellipse { cx, cy, inv_a: 1.0 / a, inv_b: 1.0 / b, cos: theta.cos(), sin: theta.sin() }
    }

    /// Normalized radius: < 1 inside.
    fn rho2(&self, u: f64, v: f64) -> f64 {
        let (dx, dy) = (u - self.cx, v - self.cy);
        let (p, q) = (dx * self.cos + dy * self.sin, -dx * self.sin + dy * self.cos);
        (p * self.inv_a).powi(2) + (q * self.inv_b).powi(2)
    }
}

/// Jittered lattice of ellipses; empty sites hold an ellipse at infinity
/// so lookups stay branch-free.
struct Lattice {
    period: f64,
    cols: usize,
    rows: usize,
    cells: Vec<Ellipse>,
}

impl Lattice {
    fn build<R: Rng>(rng: &mut R, side: f64, period: f64, occupancy: f64, radius: (f64, f64), aspect: (f64, f64)) -> Self {
        let n = (side / period).ceil() as usize + 1;
        let mut cells = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let occupied = rng.random_bool(occupancy.clamp(0.0, 1.0));
                let jx = rng.random_range(-0.2..0.2);
                let jy = rng.random_range(-0.2..0.2);
                let a = period * rng.random_range(radius.0..radius.1);
                let e = Ellipse::random(rng, (c as f64 + 0.5 + jx) * period, (r as f64 + 0.5 + jy) * period, a, aspect);
                cells.push(if occupied { e } else { Ellipse { cx: 1e12, ..e } });
            }
        }
        Lattice { period, cols: n, rows: n, cells }
    }

    /// Ellipses reach at most 0.56 periods from their cell centre, so only
    /// the 2 x 2 block of cells nearest to `(u, v)` can cover it.
    fn min_rho2(&self, u: f64, v: f64) -> f64 {
        // Coordinates are >= 0, so `x + 0.5` truncates like `floor(x - 0.5) + 1`.
        let ci = (u / self.period + 0.5) as isize - 1;
        let ri = (v / self.period + 0.5) as isize - 1;
        let mut best = f64::INFINITY;
        for r in ri..=ri + 1 {
            for c in ci..=ci + 1 {
                if r < 0 || c < 0 || r as usize >= self.rows || c as usize >= self.cols {
                    continue;
                }
                best = best.min(self.cells[r as usize * self.cols + c as usize].rho2(u, v));
            }
        }
        best
    }
}

fn in_tissue(u: f64, v: f64, side: f64) -> bool {
    let r = 0.47 * side;
    let (x, y) = ((u - side / 2.0) / r, (v - side / 2.0) / r);
    x.powi(4) + y.powi(4) <= 1.0
}

/// Render a synthetic H&E-like slide. Low grade shows a lattice of gland
/// rings on eosin stroma; high grade shows crowded dark nuclei with strong
/// pixel noise. Output is bit-exact for a fixed spec.
pub fn generate_synthetic_slide(spec: &SyntheticSlideSpec) -> Result<SyntheticSlide, WsiError> {
    if spec.side_um < REGION_SIDE_UM {
        return Err(WsiError::SideTooSmall(spec.side_um));
    }
    if !(spec.mpp > 0.0) {
        return Err(WsiError::InvalidMpp(spec.mpp));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let subtype = match spec.subtype {
        Some(s) if s.grade() != spec.grade => {
            return Err(WsiError::GradeMismatch {
                slide_id: spec.slide_id.clone(),
                subtype: s,
                grade: spec.grade,
                expected: s.grade(),
            })
        }
        Some(s) => s,
        None => {
            let pool: Vec<Subtype> = Subtype::ALL.into_iter().filter(|s| s.grade() == spec.grade).collect();
            pool[rng.random_range(0..pool.len())]
        }
    };
    let side = spec.side_um as f64;
    let t = spec.texture;
    let glands = match spec.grade {
        Grade::Low => Some(Lattice::build(&mut rng, side, t.gland_period_um, 0.9, (0.28, 0.36), (0.6, 1.0))),
        Grade::High => None,
    };
    let nuclei = Lattice::build(&mut rng, side, NUCLEUS_PERIOD_UM, t.nuclear_density, (0.22, 0.4), (0.55, 1.0));

    let px = (side / spec.mpp).round() as usize;
    let mut data = vec![0u8; px * px * 3];
    let noise_seed = rng.random::<u64>();
    let amp = (t.noise_amplitude * 255.0) as f32;
    data.par_chunks_mut(px * 3).enumerate().for_each(|(y, row)| {
        let mut nrng = ChaCha8Rng::seed_from_u64(noise_seed);
        nrng.set_stream(y as u64);
        let v = (y as f64 + 0.5) * spec.mpp;
        for (x, out) in row.chunks_exact_mut(3).enumerate() {
            let u = (x as f64 + 0.5) * spec.mpp;
            let noise: f32 = nrng.random_range(-1.0..1.0);
            let (base, a) = if !in_tissue(u, v, side) {
                (BACKGROUND, 3.0)
            } else {
                let nucleus = || nuclei.min_rho2(u, v) < 1.0;
                let color = match &glands {
                    Some(g) => {
                        let rho2 = g.min_rho2(u, v);
                        if rho2 < 0.52 {
                            LUMEN
                        } else if rho2 < 1.0 {
                            EPITHELIUM
                        } else if nucleus() {
                            NUCLEUS
                        } else {
                            EOSIN
                        }
                    }
                    None if nucleus() => NUCLEUS,
                    None => EOSIN_DARK,
                };
                (color, amp)
            };
            for c in 0..3 {
                out[c] = (base[c] + a * noise + 0.5).clamp(0.0, 255.0) as u8;
            }
        }
    });
    let plane = RgbPlane::new(px, px, data)?;
    let mut levels = vec![Level { mpp: spec.mpp, plane }];
    if spec.mpp < 1.0 {
        let coarse = downsample_plane(&levels[0].plane, 1.0 / spec.mpp);
        levels.push(Level { mpp: 1.0, plane: coarse });
    }
    let slide = Slide::new(spec.slide_id.clone(), levels)?;

    let mut boxes = Vec::with_capacity(spec.annotation_boxes);
    let half = spec.box_side_um as f64 / 2.0;
    for _ in 0..spec.annotation_boxes {
        let cx = side / 2.0 + rng.random_range(-0.25..0.25) * side;
        let cy = side / 2.0 + rng.random_range(-0.25..0.25) * side;
        let to_px = |um: f64| (um / spec.mpp).round().max(0.0) as u32;
        boxes.push(AnnotationBox {
            slide_id: spec.slide_id.clone(),
            x: to_px(cx - half),
            y: to_px(cy - half),
            w: to_px(spec.box_side_um as f64),
            h: to_px(spec.box_side_um as f64),
            label: subtype,
        });
    }
    let entry = SlideManifestEntry::new(&spec.slide_id, &spec.patient_id, &spec.slide_id, subtype, spec.mpp);
    Ok(SyntheticSlide { slide, entry, boxes })
}

/// Specs for a cohort of `n` slides, one per patient, with exactly
/// `round(n * high_fraction)` High slides at positions chosen by `seed`.
/// Subtypes, textures and per-slide seeds are drawn up front so manifest
/// entries are known before any slide is rendered.
pub fn synthetic_cohort(n: usize, high_fraction: f64, side_um: u32, seed: u64) -> Result<Vec<SyntheticSlideSpec>, WsiError> {
    if !(0.0..=1.0).contains(&high_fraction) {
        return Err(WsiError::DimMismatch(format!("high fraction {high_fraction} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_high = (n as f64 * high_fraction).round() as usize;
    let mut grades: Vec<Grade> = (0..n).map(|i| if i < n_high { Grade::High } else { Grade::Low }).collect();
    grades.shuffle(&mut rng);
    Ok(grades
        .into_iter()
        .enumerate()
        .map(|(i, grade)| {
            let pool: Vec<Subtype> = Subtype::ALL.into_iter().filter(|s| s.grade() == grade).collect();
            let mut spec = SyntheticSlideSpec::new(&format!("slide_{i:03}"), grade, side_um, rng.random());
            spec.patient_id = format!("patient_{i:03}");
            spec.subtype = Some(pool[rng.random_range(0..pool.len())]);
            spec.texture = TextureParams::sample(grade, &mut rng);
            spec
        })
        .collect())
}

impl SyntheticSlideSpec {
    /// Manifest entry of the slide this spec renders; the container path is
    /// the slide id. Requires `subtype` to be set.
    pub fn entry(&self) -> Option<SlideManifestEntry> {
        self.subtype.map(|s| SlideManifestEntry::new(&self.slide_id, &self.patient_id, &self.slide_id, s, self.mpp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wsi::{compute_tissue_mask, TissueParams};

    #[test]
    fn label_by_construction() {
        let s = generate_synthetic_slide(&SyntheticSlideSpec::new("a", Grade::Low, 4480, 7)).unwrap();
        assert_eq!(s.entry.grade, Grade::Low);
        assert_eq!(s.entry.subtype.grade(), Grade::Low);
        assert!(s.boxes.iter().all(|b| b.label == s.entry.subtype));
    }

    #[test]
    fn too_small_rejected() {
        let spec = SyntheticSlideSpec::new("a", Grade::Low, 4479, 7);
        assert!(matches!(generate_synthetic_slide(&spec), Err(WsiError::SideTooSmall(4479))));
    }

    #[test]
    fn deterministic_for_seed() {
        let spec = SyntheticSlideSpec::new("a", Grade::High, 4480, 3);
        let a = generate_synthetic_slide(&spec).unwrap();
        let b = generate_synthetic_slide(&spec).unwrap();
        assert_eq!(a.slide, b.slide);
        let c = generate_synthetic_slide(&SyntheticSlideSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(a.slide, c.slide);
    }

    #[test]
    fn tissue_coverage_both_grades() {
        for grade in [Grade::Low, Grade::High] {
            let s = generate_synthetic_slide(&SyntheticSlideSpec::new("a", grade, 4480, 1)).unwrap();
            let m = compute_tissue_mask(&s.slide.levels[0].plane, &TissueParams::default()).unwrap();
            assert!(m.tissue_fraction() >= 0.7, "{grade:?}: {}", m.tissue_fraction());
        }
    }

    #[test]
    fn subtype_must_match_grade() {
        let mut spec = SyntheticSlideSpec::new("a", Grade::Low, 4480, 1);
        spec.subtype = Some(Subtype::Serous);
        assert!(matches!(generate_synthetic_slide(&spec), Err(WsiError::GradeMismatch { .. })));
    }

    #[test]
    fn cohort_composition() {
        let specs = synthetic_cohort(100, 0.3, 4480, 7).unwrap();
        assert_eq!(specs.iter().filter(|s| s.grade == Grade::High).count(), 30);
        assert_eq!(specs, synthetic_cohort(100, 0.3, 4480, 7).unwrap());
        let e = specs[0].entry().unwrap();
        assert_eq!(e.grade, specs[0].grade);
        assert!(synthetic_cohort(4, 1.5, 4480, 7).is_err());
    }
}
